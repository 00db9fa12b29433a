"""figures <kind> --in CSV --out PATH

Exit codes follow the simulator convention: 0 success, 2 bad input or
schema mismatch, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .csvio import SchemaError, read_artifact
from .render import render_berry_scan, render_variance_scan, save_figure

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_IO = 4

_KINDS = {
    "berry-scan": render_berry_scan,
    "variance-scan": render_variance_scan,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="figures",
                                     description="Render spinecho CSV artifacts")
    parser.add_argument("kind", choices=sorted(_KINDS))
    parser.add_argument("--in", dest="inputs", action="append", required=True,
                        metavar="CSV", help="input artifact (repeatable)")
    parser.add_argument("--out", required=True, help="output .svg/.pdf path")
    parser.add_argument("--title", default=None)
    parser.add_argument("--no-labels", action="store_true",
                        help="suppress axis labels")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    renderer = _KINDS[args.kind]
    try:
        tables = [read_artifact(p) for p in args.inputs]
    except OSError as exc:
        print(f"cannot read input: {exc}", file=sys.stderr)
        return EXIT_IO
    except SchemaError as exc:
        print(f"bad artifact: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        fig = renderer(tables[0], title=args.title, labels=not args.no_labels)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_figure(fig, args.out)
    except SchemaError as exc:
        print(f"bad artifact: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"cannot write figure: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
