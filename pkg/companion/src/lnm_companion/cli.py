"""lnm-companion: convert archives to the flat format, render figures."""

from __future__ import annotations

import argparse
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

from .convert import ConversionError, convert, manifest_from_dict
from .render import KINDS, RenderError, render


def cmd_convert(args) -> int:
    with open(args.manifest, "rb") as fh:
        raw = tomllib.load(fh)
    manifest = manifest_from_dict(raw, base_dir=os.path.dirname(os.path.abspath(args.manifest)))
    report = convert(manifest, out_path=args.out)
    print(f"wrote {report.path}: n={report.n} d={report.d} k={report.k}")
    print(f"per-class counts: {report.per_class_counts}")
    print(f"splits: {report.split_counts}")
    if report.has_clean:
        print(f"observed/clean disagreement: {report.disagreement:.4f}")
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(vars(report), fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {args.report}")
    return 0


def cmd_render(args) -> int:
    written = render(args.csv, args.kind, args.out, window=args.window)
    for path in written:
        print(f"wrote {path}")
    if not written:
        print("nothing rendered (inputs lacked the needed metrics)")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lnm-companion",
                                     description="dataset conversion and figure rendering")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert an archive bundle to a flat file")
    p.add_argument("--manifest", required=True, help="TOML conversion manifest")
    p.add_argument("--out", help="output .lnmb path (overrides the manifest)")
    p.add_argument("--report", help="write the conversion report as JSON")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("render", help="render figures from harness CSVs")
    p.add_argument("--csv", action="append", required=True,
                   help="results.csv (diagnostics are discovered next to it); repeatable")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--out", required=True, help="output directory for images")
    p.add_argument("--window", type=int, default=5, help="rank window (epochs)")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConversionError, RenderError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
