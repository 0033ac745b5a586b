#!/usr/bin/env python3
"""Generate a synthetic multi-annotator edge dataset (PNG images + manifest)."""
import argparse

from mgedge.toydata import build_toy_dataset


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir")
    parser.add_argument("--images", type=int, default=2)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--annotators", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    manifest = build_toy_dataset(
        args.out_dir,
        n_images=args.images,
        size=args.size,
        n_annotators=args.annotators,
        seed=args.seed,
    )
    print(f"manifest: {manifest}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
