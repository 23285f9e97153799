"""Exact Gaussian-process regression on encoded sequences.

Three kernel families are supported:

* ``tanimoto``  ``s * <x,y> / (|x|^2 + |y|^2 - <x,y>)``
* ``rbf``       ``s * exp(-r^2 / (2 l^2))``
* ``matern32``  ``s * (1 + sqrt(3) r / l) * exp(-sqrt(3) r / l)``

The mean is a learned constant. Hyperparameters are fitted by multi-start
L-BFGS-B on the exact log marginal likelihood with analytic gradients, in
log space for every positive parameter.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize

from . import _backend
from .encoders import CodedBatch, EncodedSequence, pad_columns
from .seqcore import RngStream

log = logging.getLogger(__name__)

KERNEL_FAMILIES = ("tanimoto", "rbf", "matern32")
_SQRT3 = math.sqrt(3.0)
_LOG2PI = math.log(2.0 * math.pi)

# restart priors (log-uniform) and optimisation bounds
LENGTHSCALE_PRIOR = (1e-1, 1e2)
OUTPUTSCALE_PRIOR = (1e-2, 1e2)
LENGTHSCALE_BOUNDS = (1e-3, 1e4)
OUTPUTSCALE_BOUNDS = (1e-6, 1e4)


class GPError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    family: str = "tanimoto"
    lengthscale: float | None = None
    outputscale: float = 1.0

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.family == "tanimoto":
            if self.lengthscale is not None:
                raise ValueError("tanimoto kernel has no lengthscale")
        elif self.lengthscale is None:
            object.__setattr__(self, "lengthscale", 1.0)
        if self.outputscale <= 0 or (self.lengthscale is not None and self.lengthscale <= 0):
            raise ValueError("kernel scales must be positive")

    @property
    def stationary(self) -> bool:
        return self.family != "tanimoto"


@dataclass(frozen=True)
class GpConfig:
    noise_variance: float = 1e-4
    noise_mode: str = "fixed"
    jitter: float = 1e-8
    max_jitter: float = 1e-3
    noise_bounds: tuple[float, float] = (1e-6, 10.0)
    restarts: int = 5
    # allow dense inputs of growing width (n-gram vocabularies); missing
    # trailing coordinates are treated as zero
    grow_features: bool = False

    def __post_init__(self):
        if self.noise_mode not in ("fixed", "learned"):
            raise ValueError(f"noise_mode must be 'fixed' or 'learned', got {self.noise_mode!r}")
        if self.noise_variance < 0:
            raise ValueError("noise variance must be non-negative")
        if self.jitter <= 0:
            raise ValueError("jitter must be positive")


# ---------------------------------------------------------------------------
# feature handling


def as_features(inputs):
    """Normalise inputs to a dense 2-d array or a :class:`CodedBatch`."""
    if isinstance(inputs, CodedBatch):
        return inputs
    if isinstance(inputs, EncodedSequence):
        return inputs.values[None, :]
    if isinstance(inputs, (list, tuple)):
        if not inputs:
            raise ValueError("empty input list")
        return np.stack([x.values if isinstance(x, EncodedSequence) else np.asarray(x, float)
                         for x in inputs])
    X = np.asarray(inputs, dtype=np.float64)
    return X[None, :] if X.ndim == 1 else X


def n_rows(X) -> int:
    return len(X) if isinstance(X, CodedBatch) else X.shape[0]


def _dense(X) -> np.ndarray:
    return X.dense() if isinstance(X, CodedBatch) else X


def _align(A, B, grow: bool):
    """Return dense views of A and B with matching widths."""
    A, B = _dense(A), _dense(B)
    if A.shape[1] != B.shape[1]:
        if not grow:
            raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
        width = max(A.shape[1], B.shape[1])
        A, B = pad_columns(A, width), pad_columns(B, width)
    return np.ascontiguousarray(A), np.ascontiguousarray(B)


def dot_products(A, B, grow: bool = False) -> np.ndarray:
    if isinstance(A, CodedBatch) and A.compatible(B):
        return _backend.coded_dot(A.codes, B.codes, A.symbol_gram)
    A, B = _align(A, B, grow)
    return A @ B.T


def squared_norms(A) -> np.ndarray:
    if isinstance(A, CodedBatch):
        return _backend.coded_sqnorm(A.codes, A.symbol_gram)
    return np.einsum("ij,ij->i", A, A)


def tanimoto_base(A, B, grow: bool = False) -> np.ndarray:
    dots = dot_products(A, B, grow)
    denom = squared_norms(A)[:, None] + squared_norms(B)[None, :] - dots
    out = np.ones_like(dots)
    nz = denom > 0
    out[nz] = dots[nz] / denom[nz]
    return out


def squared_distances(A, B, grow: bool = False) -> np.ndarray:
    A, B = _align(A, B, grow)
    return np.maximum(_backend.sqdist(A, B), 0.0)


def base_matrix(family: str, A, B, grow: bool = False) -> np.ndarray:
    """Hyperparameter-free part: Tanimoto similarity or squared distance."""
    if family == "tanimoto":
        return tanimoto_base(A, B, grow)
    return squared_distances(A, B, grow)


def _from_base(family: str, base: np.ndarray, lengthscale, outputscale: float) -> np.ndarray:
    if family == "tanimoto":
        return outputscale * base
    if family == "rbf":
        return outputscale * np.exp(-0.5 * base / lengthscale**2)
    a = _SQRT3 * np.sqrt(base) / lengthscale
    return outputscale * (1.0 + a) * np.exp(-a)


def kernel_matrix(spec: KernelSpec, A, B, grow: bool = False) -> np.ndarray:
    return _from_base(spec.family, base_matrix(spec.family, as_features(A), as_features(B), grow),
                      spec.lengthscale, spec.outputscale)


def kernel_eval(spec: KernelSpec, x, y) -> float:
    """Kernel value between two encoded vectors."""
    xv = x.values if isinstance(x, EncodedSequence) else np.asarray(x, float)
    yv = y.values if isinstance(y, EncodedSequence) else np.asarray(y, float)
    if xv.shape != yv.shape:
        raise ValueError(f"dimension mismatch: {xv.shape[0]} vs {yv.shape[0]}")
    return float(kernel_matrix(spec, xv[None, :], yv[None, :])[0, 0])


# ---------------------------------------------------------------------------
# marginal likelihood


def _cholesky(K: np.ndarray, jitter: float, max_jitter: float):
    """Cholesky with adaptive jitter; returns (L, jitter used)."""
    n = K.shape[0]
    eye = np.eye(n)
    while True:
        try:
            return linalg.cholesky(K + jitter * eye, lower=True), jitter
        except linalg.LinAlgError:
            if jitter * 10 > max_jitter * (1 + 1e-12):
                try:
                    cond = np.linalg.cond(K)
                except np.linalg.LinAlgError:
                    cond = float("inf")
                raise GPError(
                    f"Cholesky failed with jitter up to {jitter:.0e}; condition number {cond:.3e}"
                ) from None
            jitter *= 10


class _Objective:
    """Log marginal likelihood over packed parameters.

    Packing: ``[mean, log s, (log l), (log noise)]``.
    """

    def __init__(self, base, y, family, cfg: GpConfig):
        self.base = base
        self.y = y
        self.family = family
        self.cfg = cfg
        self.has_ls = family != "tanimoto"
        self.learn_noise = cfg.noise_mode == "learned"
        if family == "matern32":
            self.r = np.sqrt(base)

    def unpack(self, theta):
        i = 2
        ls = None
        if self.has_ls:
            ls = math.exp(theta[i])
            i += 1
        noise = math.exp(theta[i]) if self.learn_noise else self.cfg.noise_variance
        return float(theta[0]), math.exp(theta[1]), ls, noise

    def pack(self, mean, outputscale, lengthscale, noise) -> np.ndarray:
        theta = [mean, math.log(outputscale)]
        if self.has_ls:
            theta.append(math.log(lengthscale))
        if self.learn_noise:
            theta.append(math.log(noise))
        return np.array(theta)

    def bounds(self):
        b = [(None, None), tuple(math.log(v) for v in OUTPUTSCALE_BOUNDS)]
        if self.has_ls:
            b.append(tuple(math.log(v) for v in LENGTHSCALE_BOUNDS))
        if self.learn_noise:
            b.append(tuple(math.log(v) for v in self.cfg.noise_bounds))
        return b

    def correlation(self, ls):
        if self.family == "tanimoto":
            return self.base
        if self.family == "rbf":
            return np.exp(-0.5 * self.base / ls**2)
        a = _SQRT3 * self.r / ls
        return (1.0 + a) * np.exp(-a)

    def value_and_grad(self, theta, jitter=None):
        mean, s, ls, noise = self.unpack(theta)
        n = self.y.shape[0]
        C = self.correlation(ls)
        K = s * C
        K[np.diag_indices(n)] += noise
        L, used = _cholesky(K, self.cfg.jitter if jitter is None else jitter, self.cfg.max_jitter)
        r = self.y - mean
        alpha = linalg.cho_solve((L, True), r)
        value = -0.5 * r @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * _LOG2PI
        Kinv = linalg.cho_solve((L, True), np.eye(n))
        W = np.outer(alpha, alpha) - Kinv
        grad = [alpha.sum(), 0.5 * np.sum(W * (s * C))]
        if self.has_ls:
            if self.family == "rbf":
                dK = s * C * (self.base / ls**2)
            else:
                a = _SQRT3 * self.r / ls
                dK = s * a**2 * np.exp(-a)
            grad.append(0.5 * np.sum(W * dK))
        if self.learn_noise:
            grad.append(0.5 * noise * np.trace(W))
        return float(value), np.array(grad), (L, alpha, used)


@dataclass(frozen=True)
class FittedGp:
    """Immutable fitted GP: training data, hyperparameters, Cholesky cache."""

    X: object
    y: np.ndarray
    spec: KernelSpec
    mean: float
    noise_variance: float
    jitter: float
    chol: np.ndarray
    alpha: np.ndarray
    cfg: GpConfig = field(default_factory=GpConfig)

    @property
    def n(self) -> int:
        return self.y.shape[0]


def _assemble(X, y, spec: KernelSpec, mean: float, noise: float, cfg: GpConfig) -> FittedGp:
    n = y.shape[0]
    if n == 0:
        return FittedGp(X, y, spec, mean, noise, cfg.jitter, np.zeros((0, 0)), np.zeros(0), cfg)
    K = kernel_matrix(spec, X, X, cfg.grow_features)
    K[np.diag_indices(n)] += noise
    L, used = _cholesky(K, cfg.jitter, cfg.max_jitter)
    alpha = linalg.cho_solve((L, True), y - mean)
    return FittedGp(X, y, spec, float(mean), float(noise), used, L, alpha, cfg)


def condition(X, y, spec: KernelSpec, mean: float, cfg: GpConfig | None = None,
              noise_variance: float | None = None) -> FittedGp:
    """Condition a GP on data at given hyperparameters (no fitting)."""
    cfg = cfg or GpConfig()
    noise = cfg.noise_variance if noise_variance is None else noise_variance
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] == 0:
        return prior_gp(spec, mean, cfg)
    return _assemble(as_features(X), y, spec, mean, noise, cfg)


def prior_gp(spec: KernelSpec, mean: float = 0.0, cfg: GpConfig | None = None) -> FittedGp:
    cfg = cfg or GpConfig()
    return FittedGp(np.zeros((0, 0)), np.zeros(0), spec, mean, cfg.noise_variance, cfg.jitter,
                    np.zeros((0, 0)), np.zeros(0), cfg)


def _log_uniform(rng, lo, hi) -> float:
    return math.exp(rng.uniform(math.log(lo), math.log(hi)))


def fit(inputs, targets, spec: KernelSpec, cfg: GpConfig | None = None,
        rng: RngStream | None = None) -> FittedGp:
    """Fit mean, output scale, lengthscale and (optionally) noise.

    The returned hyperparameters are the best of ``cfg.restarts`` L-BFGS-B
    runs started from log-uniform prior draws.
    """
    cfg = cfg or GpConfig()
    rng = rng if rng is not None else RngStream(0, "gp-fit")
    X = as_features(inputs)
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] < 1:
        raise ValueError("need at least one observation")
    if n_rows(X) != y.shape[0]:
        raise ValueError(f"{n_rows(X)} inputs but {y.shape[0]} targets")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")

    obj = _Objective(base_matrix(spec.family, X, X, cfg.grow_features), y, spec.family, cfg)
    lo, hi = cfg.noise_bounds

    def neg(theta):
        try:
            v, g, _ = obj.value_and_grad(theta)
        except GPError:
            return 1e25, np.zeros_like(theta)
        return -v, -g

    best = None
    for k in range(max(cfg.restarts, 1)):
        s0 = _log_uniform(rng, *OUTPUTSCALE_PRIOR)
        l0 = _log_uniform(rng, *LENGTHSCALE_PRIOR) if obj.has_ls else None
        n0 = _log_uniform(rng, lo, hi) if obj.learn_noise else cfg.noise_variance
        theta0 = obj.pack(float(np.mean(y)), s0, l0, n0)
        res = optimize.minimize(neg, theta0, jac=True, method="L-BFGS-B", bounds=obj.bounds())
        if not np.isfinite(res.fun) or res.fun >= 1e25:
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise GPError("hyperparameter optimisation failed from every restart")

    mean, s, ls, noise = obj.unpack(best.x)
    fitted_spec = replace(spec, outputscale=s, lengthscale=ls)
    return _assemble(X, y, fitted_spec, mean, noise, cfg)


def predict(gp: FittedGp, Xstar) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and latent variance (clamped at zero) at ``Xstar``."""
    Xs = as_features(Xstar)
    m = n_rows(Xs)
    prior_var = np.full(m, gp.spec.outputscale)
    if gp.n == 0:
        return np.full(m, gp.mean), prior_var
    Ks = kernel_matrix(gp.spec, Xs, gp.X, gp.cfg.grow_features)
    mean = gp.mean + Ks @ gp.alpha
    V = linalg.solve_triangular(gp.chol, Ks.T, lower=True)
    # k(x, x) = s for every family (Tanimoto of a vector with itself is 1)
    var = prior_var - np.einsum("ij,ij->j", V, V)
    return mean, np.maximum(var, 0.0)


def predict_one(gp: FittedGp, x: EncodedSequence) -> tuple[float, float]:
    mu, var = predict(gp, x.values[None, :])
    return float(mu[0]), float(var[0])


def posterior_covariance(gp: FittedGp, A, B) -> np.ndarray:
    """Posterior covariance of the latent function between two batches."""
    A, B = as_features(A), as_features(B)
    grow = gp.cfg.grow_features
    prior = kernel_matrix(gp.spec, A, B, grow)
    if gp.n == 0:
        return prior
    VA = linalg.solve_triangular(gp.chol, kernel_matrix(gp.spec, gp.X, A, grow), lower=True)
    VB = linalg.solve_triangular(gp.chol, kernel_matrix(gp.spec, gp.X, B, grow), lower=True)
    return prior - VA.T @ VB


def log_marginal_likelihood(gp: FittedGp) -> float:
    if gp.n == 0:
        return 0.0
    r = gp.y - gp.mean
    return float(-0.5 * r @ gp.alpha - np.log(np.diag(gp.chol)).sum() - 0.5 * gp.n * _LOG2PI)


def lml_and_grad(theta, X, y, family: str, cfg: GpConfig | None = None):
    """LML and its gradient at packed parameters ``[mean, log s, (log l), (log noise)]``."""
    cfg = cfg or GpConfig()
    X = as_features(X)
    obj = _Objective(base_matrix(family, X, X, cfg.grow_features), np.asarray(y, float), family, cfg)
    v, g, _ = obj.value_and_grad(np.asarray(theta, dtype=np.float64))
    return v, g
