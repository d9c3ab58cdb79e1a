"""Standalone extraction script, one flag per ExtractionConfig field.

    opcal-extract --model net.pt --input ops.npy --output ops.csv \
        [--labels labels.txt] [--batch-size 64] [--layer NAME]

Writes the dataset CSV plus its .meta.json sidecar and prints a one-line
summary. Exit status 0 on success, 1 on any configuration, model, or
contract error.
"""

from __future__ import annotations

import argparse
import sys

from .extraction import ExtractionConfig, ExtractionError, extract


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise ExtractionError(message)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="opcal-extract",
        description="Export a classifier's features and logits to the dataset CSV.",
    )
    parser.add_argument("--model", required=True,
                        help="torch.save archive of the trained classifier")
    parser.add_argument("--input", required=True,
                        help="(N, ...) batch of inputs as .npy or .pt")
    parser.add_argument("--output", required=True,
                        help="destination CSV; a .meta.json sidecar is written next to it")
    parser.add_argument("--batch-size", type=int, default=64,
                        help="rows per forward pass (default 64)")
    parser.add_argument("--layer", default=None,
                        help="module name to hook; default: the final linear layer")
    parser.add_argument("--labels", default=None,
                        help="optional labels as .npy, .pt, or one integer per line")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        result = extract(ExtractionConfig(
            model=args.model,
            inputs=args.input,
            output_path=args.output,
            batch_size=args.batch_size,
            layer=args.layer,
            labels=args.labels,
        ))
    except (ExtractionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"wrote {result.num_rows} rows to {result.output_path}: "
        f"{result.num_classes} classes, {result.feature_dim} features, "
        f"layer {result.layer!r}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
