"""Acquisition functions for minimisation: analytic EI, quasi-Monte-Carlo
noisy EI, and the uniform random baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import ndtr, ndtri
from scipy.stats import qmc

from .seqcore import RngStream
from .surrogate import FittedGp, as_features, kernel_matrix, n_rows, predict

ACQUISITIONS = ("ei", "noisy_ei", "random")
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class AcquisitionSpec:
    kind: str = "ei"
    mc_samples: int = 128

    def __post_init__(self):
        if self.kind not in ACQUISITIONS:
            raise ValueError(f"unknown acquisition {self.kind!r}; choose from {ACQUISITIONS}")
        if self.kind == "noisy_ei" and self.mc_samples < 16:
            raise ValueError("noisy_ei needs at least 16 Monte-Carlo samples")


def expected_improvement(mean, variance, incumbent):
    """Expected improvement below ``incumbent`` under a normal posterior.

    Works elementwise on arrays. Variances in ``[-1e-12, 0)`` are treated as
    zero; anything more negative raises ``ValueError``.
    """
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(variance < -1e-12):
        raise ValueError("negative posterior variance")
    sigma = np.sqrt(np.maximum(variance, 0.0))
    gap = incumbent - mean
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.where(sigma > 0, gap / np.where(sigma > 0, sigma, 1.0), 0.0)
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        ei = np.where(sigma > 0, sigma * (pdf + z * ndtr(z)), np.maximum(gap, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def _normal_base_samples(n_samples: int, dim: int, rng: RngStream) -> np.ndarray:
    """Scrambled Sobol points pushed through the inverse normal CDF."""
    sobol = qmc.Sobol(d=dim, scramble=True, seed=rng.gen)
    u = sobol.random(n_samples)
    u = np.clip(u, 1e-12, 1 - 1e-12)
    return ndtri(u)


class NoisyEI:
    """Noisy expected improvement for single candidates.

    For each candidate ``x`` the latent values at the training inputs and at
    ``x`` are sampled jointly from the posterior. The improvement of a sample
    is ``max(0, min_train f - f(x))``; the score is the sample average. One
    set of quasi-random base samples is drawn at construction and shared by
    every candidate, so scores are deterministic and comparable across
    calls (the genetic algorithm relies on this).
    """

    def __init__(self, gp: FittedGp, n_samples: int, rng: RngStream):
        if gp.n == 0:
            raise ValueError("noisy EI needs at least one training point")
        self.gp = gp
        n = gp.n
        z = _normal_base_samples(n_samples, n + 1, rng)
        self.z_train, self.z_cand = z[:, :n], z[:, n]
        grow = gp.cfg.grow_features
        # posterior at the training inputs
        Ktt = kernel_matrix(gp.spec, gp.X, gp.X, grow)
        Vtt = linalg.solve_triangular(gp.chol, Ktt, lower=True)
        self.mean_train = gp.mean + Ktt @ gp.alpha
        cov_tt = Ktt - Vtt.T @ Vtt
        cov_tt = 0.5 * (cov_tt + cov_tt.T)
        self.L_train = _psd_factor(cov_tt)
        self._Vtt = Vtt
        self.f_train = self.mean_train[None, :] + self.z_train @ self.L_train.T
        self.best_train = self.f_train.min(axis=1)

    def improvements(self, candidates) -> np.ndarray:
        """Sampled improvements, shape ``(n_samples, n_candidates)``."""
        gp = self.gp
        Xc = as_features(candidates)
        Kct = kernel_matrix(gp.spec, Xc, gp.X, gp.cfg.grow_features)
        Vc = linalg.solve_triangular(gp.chol, Kct.T, lower=True)
        mean_c = gp.mean + Kct @ gp.alpha
        var_c = np.maximum(gp.spec.outputscale - np.einsum("ij,ij->j", Vc, Vc), 0.0)
        cross = Kct - Vc.T @ self._Vtt  # posterior cov(candidate, train)
        # conditional factorisation of the joint (train, candidate) covariance
        W = linalg.solve_triangular(self.L_train, cross.T, lower=True, check_finite=False)
        resid = np.sqrt(np.maximum(var_c - np.einsum("ij,ij->j", W, W), 0.0))
        f_c = mean_c[None, :] + self.z_train @ W + self.z_cand[:, None] * resid[None, :]
        return np.maximum(self.best_train[:, None] - f_c, 0.0)

    def __call__(self, candidates) -> np.ndarray:
        return self.improvements(candidates).mean(axis=0)

    def standard_errors(self, candidates) -> np.ndarray:
        """Sample standard error of each score (treating draws as i.i.d.)."""
        imp = self.improvements(candidates)
        return imp.std(axis=0, ddof=1) / np.sqrt(imp.shape[0])


def _psd_factor(C: np.ndarray) -> np.ndarray:
    """Lower-triangular factor of a PSD matrix, adding jitter as needed."""
    n = C.shape[0]
    scale = max(float(np.max(np.abs(np.diag(C)))), 1e-300)
    jitter = 1e-12 * scale
    while True:
        try:
            return linalg.cholesky(C + jitter * np.eye(n), lower=True)
        except linalg.LinAlgError:
            jitter *= 10


def noisy_expected_improvement(gp: FittedGp, candidates, spec: AcquisitionSpec,
                               rng: RngStream) -> np.ndarray:
    return NoisyEI(gp, spec.mc_samples, rng)(candidates)


def random_score(count: int, rng: RngStream) -> np.ndarray:
    if count < 1:
        raise ValueError("need at least one candidate")
    return rng.uniform(0.0, 1.0, size=count)


def make_scorer(gp: FittedGp | None, spec: AcquisitionSpec, incumbent: float | None,
                rng: RngStream):
    """Return ``scores(candidates) -> array`` for the chosen acquisition."""
    if spec.kind == "random":
        return lambda X: random_score(n_rows(as_features(X)), rng)
    if spec.kind == "noisy_ei":
        return NoisyEI(gp, spec.mc_samples, rng)

    def ei(X):
        mu, var = predict(gp, X)
        return expected_improvement(mu, var, incumbent)

    return ei


def argmax_lowest(scores) -> int:
    """Index of the maximum score; ties go to the lowest index."""
    scores = np.asarray(scores)
    return int(np.argmax(scores))
