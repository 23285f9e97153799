"""Command-line interface.

Subcommands::

    seqbo validate    --config CFG --pool POOL.csv --out DIR [--set key=value ...]
    seqbo full        --config CFG --oracle ORACLE.yaml --out DIR [--set key=value ...]
    seqbo encode      --input SEQS --encoder NAME --out DIR
    seqbo oracle-eval --oracle ORACLE.yaml --input SEQS --out DIR
    seqbo curves      RECORDS.jsonl [...] --out CURVES.csv [--plot]

Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .encoders import EncodingError, load_external_embeddings, make_encoder
from .loops import (
    ConfigError,
    CurveError,
    LoopConfig,
    curve_table,
    read_records,
    run_experiment,
    write_curves,
)
from .oracles import (
    ExternalOracle,
    PoolFormatError,
    SimulatorClientSpec,
    SimulatorError,
    SyntheticOracle,
    SyntheticOracleSpec,
    load_pool,
    random_synthetic_spec,
)
from .seqcore import AntibodySequence, CdrMask, RngStream, SequenceError, parse_sequence

log = logging.getLogger("seqbo")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config handling


def _read_yaml(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a mapping at top level")
    return data


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` overrides; ``ga.<field>`` addresses GA settings."""
    data = dict(data)
    for item in overrides or ():
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        if key.startswith("ga."):
            data["ga"] = {**data.get("ga", {}), key[3:]: value}
        else:
            data[key] = value
    return data


def load_config(path: str | Path, overrides: list[str], mode: str) -> LoopConfig:
    data = apply_overrides(_read_yaml(path), overrides)
    data.setdefault("mode", mode)
    if data["mode"] != mode:
        raise UsageError(f"config mode {data['mode']!r} does not match subcommand {mode!r}")
    return LoopConfig.from_mapping(data)


def _read_sequences(path: str | Path) -> list[AntibodySequence]:
    """One sequence per line: ``heavy<TAB>light`` or a joined ``heavy|light``."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"file not found: {path}")
    seqs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            if "\t" in line:
                heavy, light = line.split("\t")[:2]
                seqs.append(parse_sequence(heavy, light))
            else:
                seqs.append(AntibodySequence.from_joined(line))
        except SequenceError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
    if not seqs:
        raise UsageError(f"{path}: no sequences")
    return seqs


ORACLE_KEYS = {
    "synthetic": {"type", "wild_type_heavy", "wild_type_light", "mask", "target", "coupling",
                  "pairs", "n_pairs", "hotspots", "noise_sd", "seed"},
    "external": {"type", "command", "timeout", "retries", "env"},
}


def build_oracle(spec: dict, cfg: LoopConfig | None = None):
    kind = spec.get("type")
    if kind not in ORACLE_KEYS:
        raise UsageError(f"oracle type must be one of {sorted(ORACLE_KEYS)}, got {kind!r}")
    unknown = set(spec) - ORACLE_KEYS[kind]
    if unknown:
        raise UsageError(f"unknown oracle keys: {sorted(unknown)}")
    if kind == "external":
        if "command" not in spec:
            raise UsageError("external oracle needs a command")
        return ExternalOracle(SimulatorClientSpec(
            spec["command"], float(spec.get("timeout", 3600.0)), int(spec.get("retries", 0)),
            dict(spec.get("env", {}))))

    heavy = spec.get("wild_type_heavy") or (cfg.wild_type_heavy if cfg else None)
    light = spec.get("wild_type_light") or (cfg.wild_type_light if cfg else None)
    mask_spec = spec.get("mask", cfg.mask if cfg else None)
    if not heavy or not light or mask_spec is None:
        raise UsageError("synthetic oracle needs a wild type and a mask")
    wt = parse_sequence(heavy, light)
    mask = CdrMask.parse(mask_spec).validate_for(wt)
    seed = int(spec.get("seed", 0))
    coupling = float(spec.get("coupling", 0.25))
    noise = float(spec.get("noise_sd", 0.0))
    if "target" in spec:
        target = AntibodySequence.from_joined(spec["target"])
        pairs = tuple(tuple(p) for p in spec.get("pairs", ()))
        osp = SyntheticOracleSpec(wt, target, mask, coupling, pairs, noise, seed)
    else:
        osp = random_synthetic_spec(
            wt, mask, RngStream(seed, "synthetic-oracle"), coupling=coupling,
            n_pairs=int(spec.get("n_pairs", 0)), noise_sd=noise, n_hotspots=spec.get("hotspots"),
        )
    return SyntheticOracle(osp)


def _prepare_out(path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_config(out: Path, cfg: LoopConfig) -> None:
    with (out / "config.yaml").open("w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_mapping(), fh, sort_keys=True)


def _experiment_status(result) -> int:
    for s in result.failed:
        print(f"trial {s.trial} failed: {s.error}", file=sys.stderr)
    return EXIT_RUNTIME if result.failed else EXIT_OK


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    cfg = load_config(args.config, args.set, "validation")
    pool_path = Path(args.pool)
    if not pool_path.is_file():
        raise UsageError(f"pool file not found: {pool_path}")
    pool = load_pool(pool_path)
    out = _prepare_out(args.out)
    _save_config(out, cfg)
    result = run_experiment(cfg, pool=pool, out_dir=out)
    if args.plot:
        _plot(out / "curves.csv", out / "curves.png")
    return _experiment_status(result)


def cmd_full(args) -> int:
    cfg = load_config(args.config, args.set, "full")
    cfg.wild_type()
    cfg.cdr_mask().validate_for(cfg.wild_type())
    oracle = build_oracle(_read_yaml(args.oracle), cfg)
    out = _prepare_out(args.out)
    _save_config(out, cfg)
    result = run_experiment(cfg, oracle=oracle, out_dir=out)
    if args.plot:
        _plot(out / "curves.csv", out / "curves.png")
    return _experiment_status(result)


def cmd_encode(args) -> int:
    seqs = _read_sequences(args.input)
    embeddings = load_external_embeddings(args.embedding_file) if args.embedding_file else None
    enc = make_encoder(args.encoder, sequences=seqs, embeddings=embeddings,
                       projection_dim=args.projection_dim,
                       rng=RngStream(args.seed, "projection"))
    X = enc.batch(seqs)
    X = X.dense() if hasattr(X, "dense") else X
    out = _prepare_out(args.out)
    with (out / "encodings.tsv").open("w", encoding="utf-8") as fh:
        for s, row in zip(seqs, X):
            fh.write(s.joined + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    print(f"wrote {len(seqs)} encodings of dimension {X.shape[1]} to {out / 'encodings.tsv'}")
    return EXIT_OK


def cmd_oracle_eval(args) -> int:
    oracle = build_oracle(_read_yaml(args.oracle))
    seqs = _read_sequences(args.input)
    out = _prepare_out(args.out)
    with (out / "oracle_values.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["heavy_chain", "light_chain", "ddg"])
        for s in seqs:
            writer.writerow([s.heavy, s.light, repr(float(oracle(s)) + 0.0)])
    return EXIT_OK


def cmd_curves(args) -> int:
    records = []
    per_file = {}
    for i, path in enumerate(args.records):
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"record file not found: {path}")
        recs = read_records(path)
        if not recs:
            raise UsageError(f"record file is empty: {path}")
        for r in recs:
            r.trial = (i, r.trial)
        per_file[str(path)] = {len([r for r in recs if r.phase == "loop" and r.trial == t])
                               for t in {r.trial for r in recs}}
        records.extend(recs)
    try:
        rows = curve_table(records)
    except CurveError as exc:
        detail = "; ".join(f"{p}: {sorted(n)}" for p, n in per_file.items())
        raise CurveError(f"{exc} ({detail})") from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_curves(out, rows)
    if args.plot:
        _plot(out, out.with_suffix(".png"))
    return EXIT_OK


def _plot(curves_csv: Path, image: Path) -> None:
    """Best-effort static plot of a curves CSV."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping plot")
        return
    with curves_csv.open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return
    it = [int(r["iteration"]) for r in rows]
    mean = [float(r["mean_best"]) for r in rows]
    lo = [float(r["min_best"]) for r in rows]
    hi = [float(r["max_best"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(it, mean, label="mean best")
    ax.fill_between(it, lo, hi, alpha=0.3, label="min/max")
    ax.set_xlabel("iteration")
    ax.set_ylabel("best ddG (kcal/mol)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(image, dpi=120)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seqbo", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="pool-replay validation loop")
    v.add_argument("--config", required=True)
    v.add_argument("--pool", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    v.add_argument("--plot", action="store_true")
    v.set_defaults(func=cmd_validate)

    f = sub.add_parser("full", help="oracle-in-the-loop optimisation")
    f.add_argument("--config", required=True)
    f.add_argument("--oracle", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    f.add_argument("--plot", action="store_true")
    f.set_defaults(func=cmd_full)

    e = sub.add_parser("encode", help="encode sequences to vectors")
    e.add_argument("--input", required=True)
    e.add_argument("--encoder", default="onehot", choices=["onehot", "blosum", "ngram", "external"])
    e.add_argument("--embedding-file")
    e.add_argument("--projection-dim", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    o = sub.add_parser("oracle-eval", help="evaluate an oracle on sequences")
    o.add_argument("--oracle", required=True)
    o.add_argument("--input", required=True)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_oracle_eval)

    c = sub.add_parser("curves", help="aggregate best-so-far curves")
    c.add_argument("records", nargs="+")
    c.add_argument("--out", required=True)
    c.add_argument("--plot", action="store_true")
    c.set_defaults(func=cmd_curves)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CurveError, PoolFormatError, EncodingError,
            SequenceError, yaml.YAMLError) as exc:
        print(f"seqbo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SimulatorError, RuntimeError, OSError, ValueError) as exc:
        print(f"seqbo: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
