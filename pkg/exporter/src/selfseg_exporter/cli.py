"""Command-line interface for the feature exporter."""

from __future__ import annotations

import argparse
import logging
import sys

from selfseg.synth import SyntheticSpec

from .export import ExportError, ExportSpec, export, export_synthetic


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfseg-export",
        description="Export dense ViT patch features as DPF files.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("export", help="run a pretrained backbone over images")
    exp.add_argument("images", help="directory of input images")
    exp.add_argument("--out", required=True, help="output directory")
    exp.add_argument("--model", default="facebook/dino-vits16")
    exp.add_argument("--resolution", type=int, default=768)
    exp.add_argument("--layer", choices=("last", "values"), default="last")
    exp.add_argument("--batch-size", type=int, default=4)
    exp.add_argument("--device", default="cpu")

    syn = sub.add_parser("synth", help="generate a planted synthetic corpus")
    syn.add_argument("--out-features", required=True)
    syn.add_argument("--out-gt", default=None)
    syn.add_argument("--n", type=int, default=50)
    syn.add_argument("--grid", type=int, default=48)
    syn.add_argument("--dim", type=int, default=16)
    syn.add_argument("--sigma", type=float, default=0.05)
    syn.add_argument("--distractors", type=float, default=0.0)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--cls", action="store_true")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            spec = ExportSpec(
                model_id=args.model,
                resolution=args.resolution,
                layer=args.layer,
                batch_size=args.batch_size,
                device=args.device,
            )
            exported, skipped = export(args.images, spec, args.out)
            print(f"exported {len(exported)} images, skipped {len(skipped)}")
        else:
            spec = SyntheticSpec(
                n_images=args.n,
                h_patches=args.grid,
                w_patches=args.grid,
                dim=args.dim,
                sigma=args.sigma,
                distractor_fraction=args.distractors,
                seed=args.seed,
            )
            ids = export_synthetic(
                spec, args.out_features, gt_dir=args.out_gt, write_cls=args.cls
            )
            print(f"generated {len(ids)} synthetic images")
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
