"""Command-line front end.

Subcommands: gen-data, gen-noise, run, sweep, rank. A single TOML config
file drives everything; --override key=value patches any dotted path with
a TOML-parsed value. Exit codes: 0 ok, 2 config error, 3 partial failures,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

from . import harness
from .data import save_flat
from .errors import ConfigError, FormatError, LnmError
from .methods import MethodConfig
from .noise import outcome_to_csv
from .rng import Stream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3
EXIT_IO = 4


def load_config_dict(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        try:
            value = tomllib.loads(f"v = {text}")["v"]
        except tomllib.TOMLDecodeError:
            value = text  # bare strings may arrive unquoted
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a non-table value")
        node[parts[-1]] = value
    return raw


def build_config(args) -> harness.ExperimentConfig:
    raw = load_config_dict(args.config)
    raw.pop("sweep", None)
    raw = apply_overrides(raw, args.override or [])
    if getattr(args, "seed", None) is not None:
        raw["seeds"] = [args.seed]
    if getattr(args, "out", None):
        raw["out_dir"] = args.out
    return harness.config_from_dict(raw)


def cmd_gen_data(args) -> int:
    cfg = build_config(args)
    seed = cfg.seeds[0]
    stream = Stream(seed)
    cfg_no_tail = harness.config_from_dict(cfg.to_dict())
    cfg_no_tail.dataset.long_tail_ratio = 1.0  # tails are applied at run time
    ds = harness.build_dataset(cfg_no_tail, stream)
    out = args.out or os.path.join(cfg.out_dir, "data.lnmb")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_flat(ds, out)
    print(f"wrote {out}: n={ds.n} d={ds.d} k={ds.k} (seed {seed})")
    return EXIT_OK


def cmd_gen_noise(args) -> int:
    cfg = build_config(args)
    seed = cfg.seeds[0]
    ds = harness.build_dataset(cfg, Stream(seed))
    noisy, info = harness.inject_noise(ds, cfg.noise, Stream(seed), clean_val=cfg.clean_val)
    out = args.out or os.path.join(cfg.out_dir, "noisy.lnmb")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_flat(noisy, out)
    rates = {k: f"{v:.4f}" for k, v in info.items() if k.startswith("realized_")}
    print(f"wrote {out}: kind={cfg.noise.kind} rate={cfg.noise.rate:g} realized={rates}")
    if args.csv:
        for split, outcome in info.get("outcomes", {}).items():
            idx = noisy.split_indices(split)
            path = args.csv if len(info["outcomes"]) == 1 else \
                args.csv.replace(".csv", f"_{split}.csv")
            outcome_to_csv(outcome, noisy.clean_labels[idx], path, indices=idx)
            print(f"wrote {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = build_config(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    records, failures = [], []
    for seed in cfg.seeds:
        try:
            rec = harness.run_experiment(cfg, seed)
            records.append(rec)
            s = rec.summary
            print(f"{rec.run_id}: best={s.best:.4f} val_selected={s.val_selected:.4f} "
                  f"last_window={s.last_window:.4f}")
        except (FormatError, OSError):
            raise  # unreadable inputs abort the whole command, not just one seed
        except LnmError as exc:
            failures.append({"run_id": harness.run_id_for(cfg, seed), "seed": seed,
                             "error": f"{type(exc).__name__}: {exc}"})
            print(f"run seed={seed} failed: {exc}", file=sys.stderr)
    rows = [row for rec in records for row in rec.rows]
    harness.write_rows_csv(rows, os.path.join(cfg.out_dir, "results.csv"))
    harness.write_manifest(cfg, records, failures, os.path.join(cfg.out_dir, "manifest.json"))
    if cfg.diagnostics:
        for rec in records:
            harness.write_diagnostics(rec, cfg.out_dir)
    print(f"wrote {os.path.join(cfg.out_dir, 'results.csv')}")
    return EXIT_PARTIAL if failures else EXIT_OK


def _sweep_grid(raw: dict):
    section = raw.get("sweep")
    if not section:
        raise ConfigError("sweep needs a [sweep] section with methods and noises")
    methods = []
    for entry in section.get("methods", []):
        if isinstance(entry, str):
            methods.append(MethodConfig(kind=entry))
        else:
            methods.append(harness._method_from_dict(entry))
    noises = [harness._noise_from_dict(n) for n in section.get("noises", [])]
    return methods, noises


def cmd_sweep(args) -> int:
    raw = load_config_dict(args.config)
    raw = apply_overrides(raw, args.override or [])
    methods, noises = _sweep_grid(raw)
    raw.pop("sweep", None)
    if getattr(args, "out", None):
        raw["out_dir"] = args.out
    base = harness.config_from_dict(raw)
    result = harness.sweep(base, methods, noises)
    os.makedirs(base.out_dir, exist_ok=True)
    harness.write_rows_csv(result.rows, os.path.join(base.out_dir, "results.csv"))
    harness.write_manifest(base, result.records, result.failures,
                           os.path.join(base.out_dir, "manifest.json"))
    if base.diagnostics:
        for rec in result.records:
            harness.write_diagnostics(rec, base.out_dir)
    for failure in result.failures:
        print(f"failed: {failure['run_id']}: {failure['error']}", file=sys.stderr)
    if result.rank_table is not None:
        harness.write_rank_csv(result.rank_table, os.path.join(base.out_dir, "rank.csv"))
        print("overall mean ranks:")
        for m in sorted(result.rank_table.overall, key=lambda m: result.rank_table.overall[m]):
            print(f"  {m}: {result.rank_table.overall[m]:.2f}")
    else:
        print("rank table skipped (incomplete results)", file=sys.stderr)
    print(f"wrote {os.path.join(base.out_dir, 'results.csv')}")
    return EXIT_PARTIAL if result.failures else EXIT_OK


def cmd_rank(args) -> int:
    rows = []
    for path in args.csv:
        rows.extend(harness.read_rows_csv(path))
    if not rows:
        raise ConfigError("no rows to rank")
    scores = harness.scores_from_rows(rows, window=args.window)
    from .metrics import rank_methods
    table = rank_methods(scores)
    if args.out:
        harness.write_rank_csv(table, args.out)
        print(f"wrote {args.out}")
    print(json.dumps({"overall": table.overall,
                      "per_pattern": table.pattern_mean}, indent=2, sort_keys=True))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lnm",
                                     description="label-noise training lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="TOML config file")
        p.add_argument("--seed", type=int, help="run a single seed")
        p.add_argument("--out", help="output directory or file")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="patch a config value (dotted path)")

    p = sub.add_parser("gen-data", help="synthesize a dataset to a flat file")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gen-noise", help="inject label noise into a dataset file")
    common(p)
    p.add_argument("--csv", help="also write the per-sample outcome CSV")
    p.set_defaults(func=cmd_gen_noise)

    p = sub.add_parser("run", help="run one experiment over the configured seeds")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a methods x noises x seeds grid")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rank", help="rank methods from results CSVs")
    p.add_argument("--csv", action="append", required=True, help="results CSV path")
    p.add_argument("--out", help="write the rank table CSV here")
    p.add_argument("--window", type=int, default=5)
    p.set_defaults(func=cmd_rank)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, tomllib.TOMLDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LnmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
