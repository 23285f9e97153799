import math
from math import comb

import numpy as np
import pytest

from seqbo.acquisition import AcquisitionSpec
from seqbo.encoders import OneHotEncoder
from seqbo.evolve import GaConfig
from seqbo.loops import (
    ConfigError,
    CurveError,
    LoopConfig,
    RunRecord,
    check_records,
    curve_table,
    full_step,
    init_full,
    init_size,
    init_validation,
    read_records,
    run_experiment,
    summarize_trial,
    validation_step,
)
from seqbo.oracles import PoolDataset, SyntheticOracle, random_synthetic_spec
from seqbo.seqcore import CANONICAL_RESIDUES, CdrMask, RngStream, hamming_distance, parse_sequence
from seqbo.surrogate import KernelSpec, fit

SMALL_GA = {"population_size": 32, "generations": 10, "offspring": 32}


def make_pool(n, seed=0, length=12):
    rng = np.random.default_rng(seed)
    wt = parse_sequence("".join(rng.choice(list(CANONICAL_RESIDUES), length)), "ACDEF")
    seqs = [wt.with_residues({p: r}) for p in range(length) for r in CANONICAL_RESIDUES if r != wt[p]]
    idx = rng.choice(len(seqs), n, replace=False)
    return PoolDataset(tuple(seqs[i] for i in idx), rng.uniform(-2, 2, n))


def full_cfg(wt, mask, **kw):
    base = dict(mode="full", iterations=5, trials=1, wild_type_heavy=wt.heavy,
                wild_type_light=wt.light, mask=list(mask.positions), ga=SMALL_GA)
    base.update(kw)
    return LoopConfig(**base)


# --- validation-mode pieces ------------------------------------------------


def test_init_size_arithmetic():
    assert init_size(532, 0.01) == 6
    assert init_size(100, 0.01) == 1
    assert init_size(2000, 0.001) == 2


def test_init_validation_split():
    pool = make_pool(100)
    train, held = init_validation(pool, 0.05, RngStream(0, "i"))
    assert len(train) == 5 and len(held) == 95
    assert not {o.sequence for o in train} & set(held.sequences)
    again, _ = init_validation(pool, 0.05, RngStream(0, "i"))
    assert train == again


def test_validation_step_examples():
    assert validation_step(np.array([0.1, 0.9, 0.3])) == 1
    assert validation_step(np.array([0.4])) == 0
    assert validation_step(np.array([0.2, 0.5, 0.5])) == 1
    with pytest.raises(IndexError):
        validation_step(np.array([]))


def test_validation_removes_chosen_and_grows_training():
    pool = make_pool(60)
    cfg = LoopConfig(iterations=10, trials=1, init_fraction=0.05, master_seed=1)
    res = run_experiment(cfg, pool=pool)
    loop = [r for r in res.records if r.phase == "loop"]
    assert [r.n_train for r in loop] == list(range(3, 13))
    assert len({r.sequence for r in res.records}) == len(res.records)


def test_pool_exhaustion_stops_early():
    pool = make_pool(10)
    cfg = LoopConfig(iterations=50, trials=1, init_fraction=0.1, acquisition="random")
    res = run_experiment(cfg, pool=pool)
    assert len(res.records) == 10


def test_validation_record_counts():
    pool = make_pool(228)
    cfg = LoopConfig(iterations=200, trials=10, init_fraction=0.01, acquisition="random")
    res = run_experiment(cfg, pool=pool)
    loop = [r for r in res.records if r.phase == "loop"]
    assert len(loop) <= 2000
    assert len(loop) == 2000 and len(res.records) == 2000 + 10 * 3
    assert check_records(res.records) == []


def expected_min_without_replacement(values, k):
    v = np.sort(values)
    n = len(v)
    return sum(v[i] * comb(n - 1 - i, k - 1) for i in range(n)) / comb(n, k)


def test_expected_min_formula_by_enumeration():
    import itertools

    vals = np.array([3.0, -1.0, 2.0, 0.5, 4.0])
    for k in range(1, 6):
        brute = np.mean([min(c) for c in itertools.combinations(vals, k)])
        assert expected_min_without_replacement(vals, k) == pytest.approx(brute)


def test_random_baseline_matches_order_statistics():
    pool = make_pool(40, seed=5)
    cfg = LoopConfig(iterations=20, trials=200, init_fraction=0.1, acquisition="random",
                     master_seed=11)
    res = run_experiment(cfg, pool=pool)
    rows = curve_table(res.records)
    n_init = init_size(40, 0.1)
    span = pool.values.max() - pool.values.min()
    for t, mean, *_ in rows:
        exact = expected_min_without_replacement(pool.values, n_init + t + 1)
        assert abs(mean - exact) <= 0.02 * span


# --- full-mode pieces ------------------------------------------------------


def test_init_full_three_per_position(wt):
    mask = CdrMask([0, 1, 2, 3, 4, 5, 6, 7, 8, 9])
    oracle = SyntheticOracle(random_synthetic_spec(wt, mask, RngStream(0, "o")))
    obs = init_full(wt, mask, oracle, RngStream(0, "init"))
    assert len(obs) == 30
    assert all(hamming_distance(o.sequence, wt) == 1 for o in obs)
    for p in mask:
        residues = [o.sequence[p] for o in obs if o.sequence[p] != wt[p]]
        assert len(residues) == 3 == len(set(residues))


def test_init_full_reports_oracle_failure(wt, small_mask):
    def broken(seq):
        raise ValueError("boom")

    with pytest.raises(RuntimeError, match="boom"):
        init_full(wt, small_mask, broken, RngStream(0, "i"))


def test_full_step_never_repeats(wt, small_mask):
    oracle = SyntheticOracle(random_synthetic_spec(wt, small_mask, RngStream(1, "o")))
    observed = init_full(wt, small_mask, oracle, RngStream(1, "i"))
    seen = {o.sequence for o in observed} | {wt}
    enc = OneHotEncoder()
    gacfg = GaConfig(small_mask, **SMALL_GA)
    best = min(o.value for o in observed)
    for t in range(5):
        gp = fit(enc.batch([o.sequence for o in observed]), [o.value for o in observed],
                 KernelSpec("tanimoto"), rng=RngStream(t, "fit"))
        before = set(seen)
        obs, acq = full_step(gp, wt, observed, seen, gacfg, AcquisitionSpec("ei"), enc, oracle,
                             RngStream(t, "step"))
        assert obs.sequence not in before
        assert obs.sequence in seen
        assert acq >= 0
        best = min(best, obs.value)
        observed.append(obs)
    assert best == min(o.value for o in observed)


def test_full_loop_reaches_enumerated_optimum(wt, small_mask):
    hits = 0
    for seed in range(10):
        spec = random_synthetic_spec(wt, small_mask, RngStream(seed, "landscape"), coupling=0.0)
        # the target is the optimum of the 20^4 masked space (diagonal dominance of the table)
        optimum = SyntheticOracle(spec)(spec.target)
        cfg = full_cfg(wt, small_mask, iterations=50, master_seed=seed)
        res = run_experiment(cfg, oracle=SyntheticOracle(spec))
        assert check_records(res.records) == []
        hits += math.isclose(res.summaries[0].final_best, optimum)
    assert hits >= 8


def test_full_record_counts(wt, small_mask):
    oracle = SyntheticOracle(random_synthetic_spec(wt, small_mask, RngStream(2, "o")))
    res = run_experiment(full_cfg(wt, small_mask, iterations=50, trials=3, acquisition="random"),
                         oracle=oracle)
    assert sum(r.phase == "loop" for r in res.records) == 150
    assert sum(r.phase == "init" for r in res.records) == 3 * 12
    assert check_records(res.records) == []


def test_full_mode_rejects_external_encoder(wt, small_mask):
    oracle = SyntheticOracle(random_synthetic_spec(wt, small_mask, RngStream(2, "o")))
    res = run_experiment(full_cfg(wt, small_mask, encoder="external"), oracle=oracle)
    assert res.summaries[0].status == "failed"
    assert "external" in res.summaries[0].error


@pytest.mark.parametrize("encoder,kernel,extra", [
    ("blosum", "rbf", {}),
    ("ngram", "tanimoto", {}),
    ("onehot", "matern32", {"projection_dim": 5}),
    ("onehot", "tanimoto", {"acquisition": "noisy_ei", "noise_mode": "learned", "mc_samples": 32}),
])
def test_full_mode_variants_run(wt, small_mask, encoder, kernel, extra):
    oracle = SyntheticOracle(random_synthetic_spec(wt, small_mask, RngStream(3, "o")))
    cfg = full_cfg(wt, small_mask, iterations=3, encoder=encoder, kernel=kernel, **extra)
    res = run_experiment(cfg, oracle=oracle)
    assert res.failed == []
    assert check_records(res.records) == []


# --- experiments and records -----------------------------------------------


def test_trial_failures_are_isolated(wt, small_mask):
    calls = {"n": 0}
    good = SyntheticOracle(random_synthetic_spec(wt, small_mask, RngStream(4, "o")))

    def flaky(seq):
        calls["n"] += 1
        if calls["n"] == 13:  # first loop query of trial 0
            raise RuntimeError("simulator crashed")
        return good(seq)

    res = run_experiment(full_cfg(wt, small_mask, trials=2, iterations=2), oracle=flaky)
    assert [s.status for s in res.summaries] == ["failed", "ok"]
    assert "crashed" in res.summaries[0].error


def test_records_are_reproducible(tmp_path):
    pool = make_pool(80)
    cfg = LoopConfig(iterations=5, trials=2, init_fraction=0.05, master_seed=3)
    run_experiment(cfg, pool=pool, out_dir=tmp_path / "a")
    run_experiment(cfg, pool=pool, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "records.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "records.jsonl").read_bytes()
    recs = read_records(tmp_path / "a" / "records.jsonl")
    assert len(recs) == 2 * (4 + 5)
    for name in ("summary.csv", "curves.csv", "timings.jsonl"):
        assert (tmp_path / "a" / name).exists()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="bogus"):
        LoopConfig.from_mapping({"bogus": 1})
    with pytest.raises(ConfigError, match="GA keys"):
        LoopConfig(ga={"mutation_rate": 0.1})
    with pytest.raises(ConfigError):
        LoopConfig(kernel="linear")
    assert LoopConfig(mode="full").iterations == 50
    assert LoopConfig().trials == 10 and LoopConfig().iterations == 200


def test_check_records_detects_violations():
    recs = [
        RunRecord(0, None, "init", "A|C", 1.0, 1.0),
        RunRecord(0, 0, "loop", "W|C", 0.5, 0.5, 0.1, 1),
        RunRecord(0, 1, "loop", "W|C", 0.7, 0.7, 0.1, 3),
    ]
    problems = check_records(recs)
    assert any("twice" in p for p in problems)
    assert any("increased" in p for p in problems)
    assert any("trained on 3" in p for p in problems)


def test_summary_iteration_of_discovery():
    recs = [
        RunRecord(0, None, "init", "A|C", 1.0, 1.0),
        RunRecord(0, 0, "loop", "W|C", 2.0, 1.0, 0.1, 1),
        RunRecord(0, 1, "loop", "Y|C", -1.0, -1.0, 0.1, 2),
        RunRecord(0, 2, "loop", "K|C", 0.0, -1.0, 0.1, 3),
    ]
    s = summarize_trial(0, recs)
    assert (s.final_best, s.first_iteration_at_best, s.n_init, s.n_iterations) == (-1.0, 2, 1, 3)
    assert summarize_trial(0, recs[:1]).first_iteration_at_best == 0


def test_curve_table_arithmetic():
    recs = []
    bests = {0: [3.0, 2.0, 2.0], 1: [1.0, 1.0, 0.0], 2: [5.0, 4.0, 1.0]}
    for trial, curve in bests.items():
        for t, b in enumerate(curve):
            recs.append(RunRecord(trial, t, "loop", f"{trial}{t}", b, b))
    rows = curve_table(recs)
    assert rows[0] == (0, 3.0, 1.0, 5.0, 3)
    assert rows[2][1] == pytest.approx(1.0)
    single = curve_table([r for r in recs if r.trial == 1])
    assert all(m == lo == hi for _, m, lo, hi, _ in single)
    with pytest.raises(CurveError):
        curve_table(recs[:-1])
