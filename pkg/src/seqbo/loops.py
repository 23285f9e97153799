"""Experiment orchestration: pool-replay validation and oracle-in-the-loop runs.

Each trial derives its own labelled random streams from the master seed, so
trials are independent and a whole experiment replays byte-for-byte.
Records are appended to ``records.jsonl`` after every query; wall-clock
timings go to a separate ``timings.jsonl`` so the record file stays
reproducible.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .acquisition import AcquisitionSpec, argmax_lowest, make_scorer
from .encoders import (
    CodedBatch,
    ExternalEmbeddings,
    load_external_embeddings,
    make_encoder,
)
from .evolve import GaConfig, ga_maximize
from .oracles import PoolDataset
from .seqcore import (
    DEFAULT_ALPHABET,
    AntibodySequence,
    CdrMask,
    RngStream,
    parse_sequence,
)
from .surrogate import FittedGp, GpConfig, KernelSpec, fit

log = logging.getLogger(__name__)

MODE_DEFAULTS = {
    "validation": {"iterations": 200, "trials": 10},
    "full": {"iterations": 50, "trials": 3},
}
GA_KEYS = {f.name for f in dataclasses.fields(GaConfig)} - {"mask"}


class ConfigError(ValueError):
    pass


@dataclass
class LoopConfig:
    mode: str = "validation"
    iterations: int | None = None
    trials: int | None = None
    init_fraction: float = 0.01
    init_per_residue: int = 3
    encoder: str = "onehot"
    kernel: str = "tanimoto"
    projection_dim: int | None = None
    acquisition: str = "ei"
    noise_mode: str = "fixed"
    noise_variance: float = 1e-4
    mc_samples: int = 128
    master_seed: int = 0
    gp_restarts: int = 5
    ngram_n: int = 5
    embedding_file: str | None = None
    wild_type_heavy: str | None = None
    wild_type_light: str | None = None
    mask: list | str | None = None
    ga: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODE_DEFAULTS:
            raise ConfigError(f"mode must be one of {sorted(MODE_DEFAULTS)}, got {self.mode!r}")
        for key, default in MODE_DEFAULTS[self.mode].items():
            if getattr(self, key) is None:
                setattr(self, key, default)
        if self.iterations < 1 or self.trials < 1:
            raise ConfigError("iterations and trials must be at least 1")
        if not 0 < self.init_fraction <= 1:
            raise ConfigError("init_fraction must lie in (0, 1]")
        if not 1 <= self.init_per_residue <= 19:
            raise ConfigError("init_per_residue must lie in 1..19")
        if self.projection_dim is not None and self.projection_dim < 1:
            raise ConfigError("projection_dim must be positive")
        unknown = set(self.ga) - GA_KEYS
        if unknown:
            raise ConfigError(f"unknown GA keys: {sorted(unknown)}")
        # validate enumerations early
        try:
            KernelSpec(self.kernel)
            AcquisitionSpec(self.acquisition, self.mc_samples)
            GpConfig(noise_variance=self.noise_variance, noise_mode=self.noise_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_mapping(cls, data: dict) -> "LoopConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_mapping(self) -> dict:
        return dataclasses.asdict(self)

    def gp_config(self) -> GpConfig:
        return GpConfig(
            noise_variance=self.noise_variance,
            noise_mode=self.noise_mode,
            restarts=self.gp_restarts,
            grow_features=self.encoder == "ngram" and self.mode == "full",
        )

    def acquisition_spec(self) -> AcquisitionSpec:
        return AcquisitionSpec(self.acquisition, self.mc_samples)

    def wild_type(self) -> AntibodySequence:
        if not self.wild_type_heavy or not self.wild_type_light:
            raise ConfigError("full mode needs wild_type_heavy and wild_type_light")
        return parse_sequence(self.wild_type_heavy, self.wild_type_light)

    def cdr_mask(self) -> CdrMask:
        if self.mask is None:
            raise ConfigError("full mode needs a mask")
        return CdrMask.parse(self.mask)


@dataclass(frozen=True)
class Observation:
    sequence: AntibodySequence
    value: float


@dataclass
class RunRecord:
    trial: int
    iteration: int | None
    phase: str
    sequence: str
    value: float
    best_so_far: float
    acquisition: float | None = None
    n_train: int | None = None
    wall_time: float = 0.0

    def to_json(self) -> str:
        data = {
            "trial": self.trial,
            "phase": self.phase,
            "iteration": self.iteration,
            "sequence": self.sequence,
            "value": self.value,
            "best_so_far": self.best_so_far,
            "acquisition": self.acquisition,
            "n_train": self.n_train,
        }
        return json.dumps(data)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        data = json.loads(line)
        return cls(**data)


class RecordSink:
    """Append-only record and timing files inside an output directory."""

    def __init__(self, out_dir: str | Path | None):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._rec = self._tim = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._rec = (self.out_dir / "records.jsonl").open("w", encoding="utf-8")
            self._tim = (self.out_dir / "timings.jsonl").open("w", encoding="utf-8")

    def write(self, rec: RunRecord) -> None:
        if self._rec is None:
            return
        self._rec.write(rec.to_json() + "\n")
        self._rec.flush()
        self._tim.write(json.dumps({"trial": rec.trial, "phase": rec.phase,
                                    "iteration": rec.iteration, "wall_time": rec.wall_time}) + "\n")
        self._tim.flush()

    def close(self) -> None:
        for fh in (self._rec, self._tim):
            if fh is not None:
                fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# validation mode


def init_size(n_pool: int, fraction: float) -> int:
    return math.ceil(fraction * n_pool - 1e-9)


def split_indices(n_pool: int, fraction: float, rng: RngStream) -> tuple[list[int], list[int]]:
    k = init_size(n_pool, fraction)
    if k < 1 or k >= n_pool + 1:
        raise ValueError(f"initial fraction {fraction} of {n_pool} gives {k} points")
    chosen = rng.choice(n_pool, size=k, replace=False)
    train = [int(i) for i in chosen]
    taken = set(train)
    return train, [i for i in range(n_pool) if i not in taken]


def init_validation(pool: PoolDataset, fraction: float,
                    rng: RngStream) -> tuple[list[Observation], PoolDataset]:
    """Sample ``ceil(fraction * |pool|)`` training points; the rest is held out."""
    train, held = split_indices(len(pool), fraction, rng)
    obs = [Observation(pool.sequences[i], float(pool.values[i])) for i in train]
    if not held:
        return obs, PoolDataset((), np.zeros(0), pool.provenance)
    return obs, pool.take(held)


def validation_step(scores: np.ndarray) -> int:
    """Position (within the held-out pool) of the acquisition maximiser."""
    if len(scores) == 0:
        raise IndexError("held-out pool is empty")
    return argmax_lowest(scores)


def _take(features, idx):
    if isinstance(features, CodedBatch):
        return features.take(idx)
    return features[idx]


def _run_validation_trial(cfg: LoopConfig, trial: int, pool: PoolDataset,
                          embeddings: ExternalEmbeddings | None, emit) -> None:
    root = RngStream(cfg.master_seed, f"trial{trial}")
    t0 = time.perf_counter()
    encoder = make_encoder(
        cfg.encoder, sequences=pool.sequences, embeddings=embeddings,
        projection_dim=cfg.projection_dim, rng=root.child("projection"), ngram_n=cfg.ngram_n,
    )
    features = encoder.batch(list(pool.sequences))
    train, held = split_indices(len(pool), cfg.init_fraction, root.child("init"))
    best = math.inf
    for i in train:
        v = float(pool.values[i])
        best = min(best, v)
        emit(RunRecord(trial, None, "init", pool.sequences[i].joined, v, best,
                       wall_time=time.perf_counter() - t0))

    acq = cfg.acquisition_spec()
    gp_cfg = cfg.gp_config()
    kernel = KernelSpec(cfg.kernel)
    for t in range(cfg.iterations):
        if not held:
            log.info("trial %d: held-out pool exhausted after %d iterations", trial, t)
            break
        t_start = time.perf_counter()
        y = pool.values[train]
        gp = None
        if acq.kind != "random":
            gp = fit(_take(features, train), y, kernel, gp_cfg, root.child(f"gp{t}"))
        scorer = make_scorer(gp, acq, float(np.min(y)), root.child(f"acq{t}"))
        scores = scorer(_take(features, held))
        k = validation_step(scores)
        idx = held.pop(k)
        value = float(pool.values[idx])
        best = min(best, value)
        emit(RunRecord(trial, t, "loop", pool.sequences[idx].joined, value, best,
                       acquisition=float(scores[k]), n_train=len(train),
                       wall_time=time.perf_counter() - t_start))
        train.append(idx)


# ---------------------------------------------------------------------------
# full mode


def init_full(wt: AntibodySequence, mask: CdrMask, oracle: Callable[[AntibodySequence], float],
              rng: RngStream, per_residue: int = 3) -> list[Observation]:
    """Query ``per_residue`` distinct random single mutants at every mask position."""
    mask.validate_for(wt)
    obs = []
    for p in mask.positions:
        options = [r for r in DEFAULT_ALPHABET.residues if r != wt.joined[p]]
        picks = rng.choice(len(options), size=per_residue, replace=False)
        for k in picks:
            seq = wt.with_residues({p: options[int(k)]})
            try:
                value = float(oracle(seq))
            except Exception as exc:
                raise RuntimeError(f"oracle failed for mutant at position {p}: {exc}") from exc
            obs.append(Observation(seq, value))
    return obs


def full_step(gp: FittedGp, wt: AntibodySequence, observed: Sequence[Observation],
              seen: set, gacfg: GaConfig, acq: AcquisitionSpec, encoder,
              oracle: Callable[[AntibodySequence], float], rng: RngStream):
    """Propose one unseen sequence with the GA, query it, and update ``seen``.

    Returns ``(observation, acquisition value)``.
    """
    incumbent = min(o.value for o in observed)
    scorer = make_scorer(gp, acq, incumbent, rng.child("acq"))

    def fitness(seqs):
        return scorer(encoder.batch(seqs))

    seeds = [o.sequence for o in sorted(observed, key=lambda o: o.value)]
    best = ga_maximize(fitness, seeds, gacfg, forbidden=seen, rng=rng.child("ga"), wild_type=wt)
    value = float(oracle(best.sequence))
    seen.add(best.sequence)
    return Observation(best.sequence, value), best.fitness


def _full_encoder(cfg: LoopConfig, wt: AntibodySequence, root: RngStream):
    if cfg.encoder == "external":
        raise ConfigError("full mode cannot use precomputed external embeddings: "
                          "GA proposals have no stored vectors")
    return make_encoder(cfg.encoder, sequences=[wt], extend=True,
                        projection_dim=cfg.projection_dim, rng=root.child("projection"),
                        ngram_n=cfg.ngram_n)


def _run_full_trial(cfg: LoopConfig, trial: int, oracle, emit) -> None:
    root = RngStream(cfg.master_seed, f"trial{trial}")
    wt = cfg.wild_type()
    mask = cfg.cdr_mask().validate_for(wt)
    encoder = _full_encoder(cfg, wt, root)
    gacfg = GaConfig(mask=mask, **cfg.ga)
    acq = cfg.acquisition_spec()
    gp_cfg = cfg.gp_config()
    kernel = KernelSpec(cfg.kernel)

    t0 = time.perf_counter()
    observed = init_full(wt, mask, oracle, root.child("init"), cfg.init_per_residue)
    best = math.inf
    for o in observed:
        best = min(best, o.value)
        emit(RunRecord(trial, None, "init", o.sequence.joined, o.value, best,
                       wall_time=time.perf_counter() - t0))
    seen = {o.sequence for o in observed} | {wt}

    for t in range(cfg.iterations):
        t_start = time.perf_counter()
        y = np.array([o.value for o in observed])
        gp = None
        if acq.kind != "random":
            X = encoder.batch([o.sequence for o in observed])
            gp = fit(X, y, kernel, gp_cfg, root.child(f"gp{t}"))
        obs, acq_value = full_step(gp, wt, observed, seen, gacfg, acq, encoder, oracle,
                                   root.child(f"step{t}"))
        best = min(best, obs.value)
        emit(RunRecord(trial, t, "loop", obs.sequence.joined, obs.value, best,
                       acquisition=float(acq_value), n_train=len(observed),
                       wall_time=time.perf_counter() - t_start))
        observed.append(obs)


# ---------------------------------------------------------------------------
# experiments


@dataclass
class TrialSummary:
    trial: int
    status: str
    n_init: int
    n_iterations: int
    final_best: float | None
    first_iteration_at_best: int | None
    error: str = ""


def summarize_trial(trial: int, records: Sequence[RunRecord], status: str = "ok",
                    error: str = "") -> TrialSummary:
    init = [r for r in records if r.phase == "init"]
    loop = [r for r in records if r.phase == "loop"]
    if not records:
        return TrialSummary(trial, status, 0, 0, None, None, error)
    final = records[-1].best_so_far
    # loop queries needed to first reach the final best (0 if already in init)
    first = 0 if any(r.value == final for r in init) else None
    if first is None:
        for r in loop:
            if r.value == final:
                first = r.iteration + 1
                break
    return TrialSummary(trial, status, len(init), len(loop), final, first, error)


@dataclass
class ExperimentResult:
    records: list[RunRecord]
    summaries: list[TrialSummary]

    @property
    def failed(self) -> list[TrialSummary]:
        return [s for s in self.summaries if s.status != "ok"]


def run_experiment(cfg: LoopConfig, *, pool: PoolDataset | None = None,
                   oracle: Callable[[AntibodySequence], float] | None = None,
                   out_dir: str | Path | None = None) -> ExperimentResult:
    """Run every trial of an experiment, persisting records as they arrive.

    A failing trial is logged and summarised with status ``failed``; the
    remaining trials still run.
    """
    if cfg.mode == "validation" and pool is None:
        raise ConfigError("validation mode needs a pool dataset")
    if cfg.mode == "full" and oracle is None:
        raise ConfigError("full mode needs an oracle")
    embeddings = None
    if cfg.encoder == "external" and cfg.mode == "validation":
        if not cfg.embedding_file:
            raise ConfigError("encoder 'external' needs embedding_file")
        embeddings = load_external_embeddings(cfg.embedding_file)

    all_records: list[RunRecord] = []
    summaries: list[TrialSummary] = []
    with RecordSink(out_dir) as sink:
        for trial in range(cfg.trials):
            trial_records: list[RunRecord] = []

            def emit(rec, _buf=trial_records):
                _buf.append(rec)
                sink.write(rec)

            status, error = "ok", ""
            try:
                if cfg.mode == "validation":
                    _run_validation_trial(cfg, trial, pool, embeddings, emit)
                else:
                    _run_full_trial(cfg, trial, oracle, emit)
            except Exception as exc:  # isolate trial failures
                log.exception("trial %d failed", trial)
                status, error = "failed", f"{type(exc).__name__}: {exc}"
            all_records.extend(trial_records)
            summaries.append(summarize_trial(trial, trial_records, status, error))
    result = ExperimentResult(all_records, summaries)
    if out_dir is not None:
        write_summary(Path(out_dir) / "summary.csv", summaries)
        write_curves(Path(out_dir) / "curves.csv", curve_table(all_records))
    return result


# ---------------------------------------------------------------------------
# files


def read_records(path: str | Path) -> list[RunRecord]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return [RunRecord.from_json(line) for line in fh if line.strip()]


def write_summary(path: Path, summaries: Iterable[TrialSummary]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trial", "status", "n_init", "n_iterations", "final_best",
                         "first_iteration_at_best", "error"])
        for s in summaries:
            writer.writerow([s.trial, s.status, s.n_init, s.n_iterations,
                             "" if s.final_best is None else repr(s.final_best),
                             "" if s.first_iteration_at_best is None else s.first_iteration_at_best,
                             s.error])


class CurveError(ValueError):
    pass


def best_so_far_by_trial(records: Iterable[RunRecord]) -> dict:
    """Map trial key to the list of loop best-so-far values by iteration."""
    out: dict = {}
    for r in records:
        if r.phase != "loop":
            continue
        out.setdefault(r.trial, []).append((r.iteration, r.best_so_far))
    return {k: [b for _, b in sorted(v)] for k, v in out.items()}


def curve_table(records: Iterable[RunRecord]) -> list[tuple[int, float, float, float, int]]:
    """Per-iteration (iteration, mean, min, max, n_trials) of best-so-far."""
    curves = best_so_far_by_trial(records)
    if not curves:
        return []
    lengths = {len(v) for v in curves.values()}
    if len(lengths) != 1:
        raise CurveError(f"trials have different iteration counts: {sorted(lengths)}")
    arr = np.array(list(curves.values()))
    return [(t, float(arr[:, t].mean()), float(arr[:, t].min()), float(arr[:, t].max()), arr.shape[0])
            for t in range(arr.shape[1])]


def write_curves(path: Path, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "mean_best", "min_best", "max_best", "n_trials"])
        for t, mean, lo, hi, n in rows:
            writer.writerow([t, repr(mean), repr(lo), repr(hi), n])


def check_records(records: Sequence[RunRecord]) -> list[str]:
    """Bookkeeping checks over a record stream; returns a list of violations.

    Per trial: no sequence appears twice, best-so-far equals the running
    minimum of revealed values (so it never increases), and the GP training
    size of loop iteration ``t`` is ``n_init + t``.
    """
    problems = []
    by_trial: dict[int, list[RunRecord]] = {}
    for r in records:
        by_trial.setdefault(r.trial, []).append(r)
    for trial, recs in by_trial.items():
        seen = set()
        running = math.inf
        n_init = sum(1 for r in recs if r.phase == "init")
        prev_best = math.inf
        for r in recs:
            if r.sequence in seen:
                problems.append(f"trial {trial}: sequence queried twice: {r.sequence}")
            seen.add(r.sequence)
            running = min(running, r.value)
            if r.best_so_far != running:
                problems.append(f"trial {trial}: best_so_far {r.best_so_far} != running min {running}")
            if r.best_so_far > prev_best:
                problems.append(f"trial {trial}: best_so_far increased at iteration {r.iteration}")
            prev_best = r.best_so_far
            if r.phase == "loop" and r.n_train != n_init + r.iteration:
                problems.append(
                    f"trial {trial}: iteration {r.iteration} trained on {r.n_train}, "
                    f"expected {n_init + r.iteration}"
                )
    return problems
