"""Sources of ddG values: pooled datasets, a synthetic oracle, and an
external simulator client."""

from __future__ import annotations

import csv
import logging
import math
import os
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import SubstitutionMatrix, load_blosum62
from .seqcore import (
    DEFAULT_ALPHABET,
    Alphabet,
    AntibodySequence,
    CdrMask,
    RngStream,
    SequenceError,
    parse_sequence,
)

log = logging.getLogger(__name__)

POOL_HEADER = ("heavy_chain", "light_chain", "ddg")


class PoolFormatError(ValueError):
    pass


class SimulatorError(RuntimeError):
    def __init__(self, message: str, raw_output: str = ""):
        super().__init__(message)
        self.raw_output = raw_output


# ---------------------------------------------------------------------------
# pooled datasets


@dataclass(frozen=True)
class PoolDataset:
    """Pre-computed (sequence, ddG in kcal/mol) pairs."""

    sequences: tuple[AntibodySequence, ...]
    values: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if len(self.sequences) != values.shape[0]:
            raise PoolFormatError("sequence and value counts differ")
        if not np.all(np.isfinite(values)):
            raise PoolFormatError("pool values must be finite")
        if len(set(self.sequences)) != len(self.sequences):
            raise PoolFormatError("pool contains duplicate sequences")
        if len({len(s) for s in self.sequences}) > 1:
            raise PoolFormatError("pool sequences have inconsistent lengths")
        object.__setattr__(self, "sequences", tuple(self.sequences))
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.sequences)

    def take(self, idx) -> "PoolDataset":
        idx = list(idx)
        return PoolDataset(tuple(self.sequences[i] for i in idx), self.values[idx], self.provenance)


def load_pool(path: str | Path, alphabet: Alphabet = DEFAULT_ALPHABET) -> PoolDataset:
    """Read a pool CSV with header ``heavy_chain,light_chain,ddg``."""
    path = Path(path)
    seqs: list[AntibodySequence] = []
    values: list[float] = []
    first_line: dict[AntibodySequence, int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != POOL_HEADER:
            raise PoolFormatError(f"{path}:1: expected header {','.join(POOL_HEADER)}")
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise PoolFormatError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            heavy, light, ddg = (c.strip() for c in row)
            try:
                value = float(ddg)
            except ValueError:
                raise PoolFormatError(f"{path}:{lineno}: non-numeric ddg {ddg!r}") from None
            if not math.isfinite(value):
                raise PoolFormatError(f"{path}:{lineno}: non-finite ddg {ddg!r}")
            try:
                seq = parse_sequence(heavy, light, alphabet)
            except SequenceError as exc:
                raise PoolFormatError(f"{path}:{lineno}: {exc}") from None
            if seqs and len(seq) != len(seqs[0]):
                raise PoolFormatError(
                    f"{path}:{lineno}: sequence length {len(seq)} differs from {len(seqs[0])}"
                )
            if seq in first_line:
                raise PoolFormatError(
                    f"{path}:{lineno}: duplicate sequence (first seen on line {first_line[seq]})"
                )
            first_line[seq] = lineno
            seqs.append(seq)
            values.append(value)
    if not seqs:
        raise PoolFormatError(f"{path}: pool is empty")
    return PoolDataset(tuple(seqs), np.array(values), provenance=str(path))


def write_pool(path: str | Path, seqs: Sequence[AntibodySequence], values: Iterable[float]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(POOL_HEADER)
        for s, v in zip(seqs, values):
            writer.writerow([s.heavy, s.light, repr(float(v))])


# ---------------------------------------------------------------------------
# synthetic oracle


@dataclass(frozen=True)
class SyntheticOracleSpec:
    """Hidden-target landscape with pairwise epistatic bonuses."""

    wild_type: AntibodySequence
    target: AntibodySequence
    mask: CdrMask
    coupling: float = 0.25
    pairs: tuple[tuple[int, int], ...] = ()
    noise_sd: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.target) != len(self.wild_type):
            raise SequenceError("target and wild type lengths differ")
        self.mask.validate_for(self.wild_type)
        mask = set(self.mask.positions)
        for i, (t, w) in enumerate(zip(self.target.joined, self.wild_type.joined)):
            if t != w and i not in mask:
                raise SequenceError(f"target differs from wild type outside the mask at {i}")
        for i, j in self.pairs:
            if i not in mask or j not in mask or i == j:
                raise SequenceError(f"coupled pair {(i, j)} must be two distinct mask positions")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        object.__setattr__(self, "pairs", tuple((int(i), int(j)) for i, j in self.pairs))


def random_synthetic_spec(
    wild_type: AntibodySequence,
    mask: CdrMask,
    rng: RngStream,
    coupling: float = 0.25,
    n_pairs: int = 0,
    noise_sd: float = 0.0,
    n_hotspots: int | None = None,
    hotspot_residue: str = "random",
    alphabet: Alphabet = DEFAULT_ALPHABET,
) -> SyntheticOracleSpec:
    """Draw a random hidden target for the synthetic oracle.

    The target differs from the wild type at ``n_hotspots`` randomly chosen
    mask positions (every mask position when ``None``); elsewhere the wild
    type is already optimal, so any mutation there is deleterious. Coupled
    pairs are drawn among the hotspots.

    ``hotspot_residue`` picks the target residue at each hotspot: ``"random"``
    draws any residue other than the wild type, ``"mismatch"`` draws among
    the residues scoring lowest against the wild type, so that most
    substitutions at a hotspot are improvements.
    """
    if hotspot_residue not in ("random", "mismatch"):
        raise ValueError(f"unknown hotspot_residue rule {hotspot_residue!r}")
    mask.validate_for(wild_type)
    matrix = load_blosum62()
    hot = list(mask.positions)
    if n_hotspots is not None:
        if not 1 <= n_hotspots <= len(hot):
            raise ValueError(f"n_hotspots must lie in 1..{len(hot)}")
        hot = sorted(int(hot[k]) for k in rng.choice(len(hot), size=n_hotspots, replace=False))
    changes = {}
    for p in hot:
        w = wild_type.joined[p]
        options = [r for r in alphabet.residues if r != w]
        if hotspot_residue == "mismatch":
            worst = min(matrix.score(w, r) for r in options)
            options = [r for r in options if matrix.score(w, r) == worst]
        changes[p] = options[int(rng.integers(len(options)))]
    pairs: list[tuple[int, int]] = []
    all_pairs = [(a, b) for k, a in enumerate(hot) for b in hot[k + 1 :]]
    if n_pairs > len(all_pairs):
        raise ValueError(f"cannot draw {n_pairs} pairs from {len(hot)} hotspots")
    if n_pairs:
        for k in rng.choice(len(all_pairs), size=n_pairs, replace=False):
            pairs.append(all_pairs[int(k)])
    return SyntheticOracleSpec(
        wild_type, wild_type.with_residues(changes), mask, coupling, tuple(pairs), noise_sd,
        seed=int(rng.integers(2**63)),
    )


class SyntheticOracle:
    """Callable synthetic ddG oracle.

    ``ddg(s) = -sum_i [B(s_i, t_i) - B(w_i, t_i)] / s_B
              - coupling * #{(i, j) coupled : s_i = t_i and s_j = t_j} + noise``

    with ``B`` the BLOSUM62 score, ``t`` the hidden target, ``w`` the wild
    type and ``s_B`` the largest diagonal BLOSUM62 entry. Observation noise is
    a deterministic function of ``(seed, sequence)``.
    """

    def __init__(self, spec: SyntheticOracleSpec, matrix: SubstitutionMatrix | None = None):
        self.spec = spec
        self.matrix = matrix if matrix is not None else load_blosum62()
        self.scale = float(np.max(np.diag(self.matrix.scores)))
        wt, tgt = spec.wild_type.joined, spec.target.joined
        self._baseline = {p: self.matrix.score(wt[p], tgt[p]) for p in spec.mask.positions}
        self.n_queries = 0

    def __call__(self, seq: AntibodySequence) -> float:
        spec = self.spec
        if len(seq) != len(spec.wild_type):
            raise SequenceError(f"length mismatch: {len(seq)} vs {len(spec.wild_type)}")
        s, t = seq.joined, spec.target.joined
        score = self.matrix.score
        gain = sum(score(s[p], t[p]) - base for p, base in self._baseline.items())
        value = -gain / self.scale
        if spec.coupling:
            value -= spec.coupling * sum(1 for i, j in spec.pairs if s[i] == t[i] and s[j] == t[j])
        if spec.noise_sd > 0:
            value += spec.noise_sd * RngStream(spec.seed, "noise/" + s).standard_normal()
        self.n_queries += 1
        return float(value)

    def batch(self, seqs: Sequence[AntibodySequence]) -> np.ndarray:
        return np.array([self(s) for s in seqs])


def synthetic_ddg(seq: AntibodySequence, spec: SyntheticOracleSpec) -> float:
    return SyntheticOracle(spec)(seq)


# ---------------------------------------------------------------------------
# external simulator


@dataclass(frozen=True)
class SimulatorClientSpec:
    """External command run once per query.

    ``command`` is split shell-style; ``{heavy}``, ``{light}`` and
    ``{joined}`` placeholders in its arguments are substituted.
    """

    command: str
    timeout: float = 3600.0
    retries: int = 0
    env: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.retries < 0:
            raise ValueError("retries must be non-negative")
        if not shlex.split(self.command):
            raise ValueError("command is empty")


def _attempt(seq: AntibodySequence, spec: SimulatorClientSpec) -> float:
    fields = {"heavy": seq.heavy, "light": seq.light, "joined": seq.joined}
    args = [a.format(**fields) for a in shlex.split(spec.command)]
    env = None
    if spec.env:
        env = {**os.environ, **spec.env}
    try:
        proc = subprocess.run(
            args,
            input=f"{seq.heavy}\t{seq.light}\n",
            capture_output=True,
            text=True,
            timeout=spec.timeout,
            env=env,
        )
    except subprocess.TimeoutExpired as exc:
        out = exc.stdout.decode() if isinstance(exc.stdout, bytes) else (exc.stdout or "")
        raise SimulatorError(f"simulator timed out after {spec.timeout}s", out) from None
    except OSError as exc:
        raise SimulatorError(f"could not start simulator: {exc}") from None
    if proc.returncode != 0:
        raise SimulatorError(
            f"simulator exited with status {proc.returncode}: {proc.stderr.strip()}", proc.stdout
        )
    text = proc.stdout.strip()
    try:
        value = float(text)
    except ValueError:
        raise SimulatorError(f"could not parse simulator output {text!r}", proc.stdout) from None
    if not math.isfinite(value):
        raise SimulatorError(f"simulator returned non-finite value {text!r}", proc.stdout)
    return value


def query_external(seq: AntibodySequence, spec: SimulatorClientSpec) -> float:
    """Run the simulator command and parse one ddG value from its stdout.

    The command receives ``heavy<TAB>light<NEWLINE>`` on stdin. Failures
    (non-zero exit, timeout, unparsable output) are retried ``spec.retries``
    times before a :class:`SimulatorError` carrying the raw output is raised.
    """
    last: SimulatorError | None = None
    for attempt in range(spec.retries + 1):
        try:
            return _attempt(seq, spec)
        except SimulatorError as exc:
            last = exc
            log.warning("simulator attempt %d/%d failed: %s", attempt + 1, spec.retries + 1, exc)
    assert last is not None
    raise last


class ExternalOracle:
    def __init__(self, spec: SimulatorClientSpec):
        self.spec = spec

    def __call__(self, seq: AntibodySequence) -> float:
        return query_external(seq, self.spec)
