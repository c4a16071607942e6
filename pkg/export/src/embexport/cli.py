"""Command line for the exporter."""

from __future__ import annotations

import argparse
import sys

from .export import DEFAULT_TEMPLATES, ExportSpec, export_embeddings


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emb-export",
        description="Encode an image dataset with a frozen encoder into EMB1 files",
    )
    parser.add_argument("--dataset", required=True,
                        help="cifar100 or synthetic:<classes>x<per_class>")
    parser.add_argument("--encoder", required=True,
                        help="stub:<dim> or openclip:<model>:<pretrained>")
    parser.add_argument("--labeled-per-class", type=int, required=True)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--out", required=True)
    parser.add_argument("--test-out", default=None)
    parser.add_argument("--prototypes", action="store_true")
    parser.add_argument("--template", action="append", default=None,
                        help="prototype text template; repeatable")
    parser.add_argument("--data-root", default="data")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = ExportSpec(
        dataset=args.dataset,
        encoder=args.encoder,
        labeled_per_class=args.labeled_per_class,
        seed=args.seed,
        out=args.out,
        test_out=args.test_out,
        prototypes=args.prototypes,
        templates=tuple(args.template) if args.template else DEFAULT_TEMPLATES,
        data_root=args.data_root,
    )
    try:
        manifest = export_embeddings(spec)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {manifest['train_file']} "
          f"(C={manifest['num_classes']}, D={manifest['dim']})")
    if manifest["test_file"]:
        print(f"wrote {manifest['test_file']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
