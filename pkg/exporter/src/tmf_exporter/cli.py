"""export_tmf command line entry point."""

import argparse
import json
import sys

from .export import export
from .model_ir import ExportError


def main(argv=None) -> None:
    p = argparse.ArgumentParser(
        prog="export_tmf",
        description="Convert a Keras (.h5/.keras) or TFJS layers-model "
                    "directory checkpoint into a TMF model file")
    p.add_argument("--input", required=True, help="model.h5 / model.keras / tfjs dir")
    p.add_argument("--output", required=True, help="destination .tmf path")
    p.add_argument("--fixtures", help="optional fixtures JSON for cross-validation")
    p.add_argument("--num-fixtures", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    try:
        summary = export(args.input, args.output, args.fixtures,
                         num_fixtures=args.num_fixtures, seed=args.seed)
    except (ExportError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)
    print(json.dumps(summary, sort_keys=True))


if __name__ == "__main__":
    main()
