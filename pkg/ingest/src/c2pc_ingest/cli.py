"""Command line interface: `c2pc-ingest convert` and `c2pc-ingest manifest`."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .convert import ConversionError, convert_tree
from .manifest import ManifestError, build_manifest, write_manifest

EXIT_USAGE = 1
EXIT_DATA = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="c2pc-ingest",
        description="Convert MM-Fi recordings to c2pc container/PLY files")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("convert", help="convert an MM-Fi tree (E*/S*/A*)")
    p.add_argument("--root", type=Path, required=True, help="MM-Fi dataset root")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--stride", type=int, required=True,
                   help="time slices between consecutive 10-slice windows")
    p.add_argument("--n-points", type=int, default=1200,
                   help="points per resampled LiDAR cloud")
    p.add_argument("--seed", type=int, default=0, help="LiDAR resampling seed")

    p = sub.add_parser("manifest", help="write a train/val/test split manifest")
    p.add_argument("--root", type=Path, required=True, help="converted tree root")
    p.add_argument("--protocol", choices=("subject", "room"), required=True)
    p.add_argument("--seed", type=int, default=0, help="split assignment seed")
    p.add_argument("--out", type=Path, help="manifest path (default: root/manifest.json)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        if args.command == "convert":
            count = convert_tree(args.root, args.out, stride=args.stride,
                                 n_points=args.n_points, seed=args.seed)
            print(f"wrote {count} files to {args.out}")
        else:
            manifest = build_manifest(args.root, args.protocol, seed=args.seed)
            out = args.out or args.root / "manifest.json"
            write_manifest(manifest, out)
            counts = manifest["counts"]
            print(f"{out}: {counts['train']} train / {counts['val']} val "
                  f"/ {counts['test']} test samples")
    except (ConversionError, ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
