"""Extraction command line.

``cmm-extract --dataset eurosat --root DIR --model RN50 --out DIR
[--splits coop --split-file split_zhou_EuroSAT.json] [--templates eurosat]``

Exit status: 0 success, 1 flag/validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys

from .datasets import ExtractJob
from .errors import ExtractError
from .extract import run_job


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmm-extract", description=__doc__)
    parser.add_argument("--dataset", required=True, help="dataset identifier")
    parser.add_argument("--root", required=True, help="dataset root directory")
    parser.add_argument("--out", required=True, help="output cache directory")
    parser.add_argument("--model", default="RN50",
                        help="RN50 | RN101 | ViT-B/16 | ViT-B/32 | hash-<dim>")
    parser.add_argument("--splits", default="imagefolder",
                        choices=["imagefolder", "coop"])
    parser.add_argument("--split-file", default=None)
    parser.add_argument("--templates", default=None,
                        help="builtin set name or a template file path")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--val-cap", type=int, default=None,
                        help="optional per-class cap on val rows")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit:
        return 1
    templates = args.templates or args.dataset
    job = ExtractJob(
        dataset=args.dataset,
        root=args.root,
        out=args.out,
        model=args.model,
        splits=args.splits,
        split_file=args.split_file,
        templates=templates,
        device=args.device,
        batch_size=args.batch_size,
        val_cap=args.val_cap,
    )
    try:
        out = run_job(job)
    except ExtractError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
