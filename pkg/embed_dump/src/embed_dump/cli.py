"""CLI: extract embedding stores from corpora."""

from __future__ import annotations

import argparse
import sys

from .backends import resolve_backend
from .corpus_io import read_pairs, read_tagged
from .dumper import DumpSpec, dump_pairs, dump_tagged, write_result


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="embed-dump", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("dump", help="encode a corpus into a PTE store")
    p.add_argument("--model", required=True,
                   help='backend: "debug[:dim=64,layers=1,subword=4]" or a checkpoint')
    p.add_argument("--mode", choices=["separate", "together"], default="separate")
    p.add_argument("--pool", choices=["first", "mean"], default="first")
    p.add_argument("--kind", choices=["tagged", "pairs"], required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        spec = DumpSpec(model=args.model, mode=args.mode, pool=args.pool,
                        output_path=args.out)
        backend = resolve_backend(spec.model)
        if args.kind == "tagged":
            result = dump_tagged(spec, read_tagged(args.input), backend)
        else:
            result = dump_pairs(spec, read_pairs(args.input), backend)
        write_result(result, spec, backend, args.out)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    print(
        f"wrote {len(result.records)} records to {args.out}"
        + (f" ({len(result.skipped)} skipped)" if result.skipped else "")
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
