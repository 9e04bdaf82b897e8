"""Command-line surface for the segmentation pipeline.

Exit codes: 0 success, 1 partial or data failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import head as head_mod
from . import metrics as metrics_mod
from .affinity import DEFAULT_EPS_FLOOR, DEFAULT_TAU, build_affinity, normalize_features
from .errors import SelfsegError
from .formats import ProbMap, read_dpf, read_mask_pgm, write_mask_pgm
from .ipo import DEFAULT_T, ipo_run_detailed
from .spectral import init_cls, init_kmeans2, ncut_bipartition
from .synth import SyntheticSpec, generate_corpus
from .trainer import (
    TrainConfig,
    bilinear_upsample,
    generate_pseudolabels,
    infer,
    train_head,
)

USAGE_ERROR = 2
PARTIAL_ERROR = 1


def _default_cache_dir() -> str:
    return os.environ.get("SELFSEG_CACHE_DIR", "cache")


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--eps-floor", type=float, default=DEFAULT_EPS_FLOOR)
    p.add_argument("--ipo-T", type=int, default=DEFAULT_T)
    p.add_argument(
        "--ipo-input",
        choices=("component", "mask"),
        default="component",
        help="feed IPO the seed component (default) or the full NCut mask",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)


def _config_from_args(args) -> TrainConfig:
    cfg = TrainConfig(
        tau=args.tau,
        eps_floor=args.eps_floor,
        ipo_T=args.ipo_T,
        rng_seed=args.seed,
        ipo_input_full_mask=(args.ipo_input == "mask"),
    )
    for name in ("epochs", "lr", "temperature"):
        if hasattr(args, name):
            setattr(cfg, name, getattr(args, name))
    if hasattr(args, "cache_dir"):
        cfg.cache_dir = args.cache_dir
    if hasattr(args, "loss_weights"):
        cfg.loss_weights = args.loss_weights
    return cfg


def _init_mask(method, normalized, args, cls_path):
    grid = (normalized.h_patches, normalized.w_patches)
    if method == "ncut":
        bp = ncut_bipartition(
            build_affinity(normalized, tau=args.tau, eps_floor=args.eps_floor), grid
        )
        return bp.mask if args.ipo_input == "mask" else bp.component
    if method == "kmeans":
        mask, _degenerate = init_kmeans2(normalized, seed=args.seed)
        return mask
    cls = np.frombuffer(cls_path.read_bytes(), dtype="<f4").astype(np.float64)
    return init_cls(normalized, cls)


def _mask_to_probmap(mask, out_hw) -> ProbMap:
    up = bilinear_upsample(mask.grid().astype(np.float64), out_hw)
    return ProbMap(out_hw[0], out_hw[1], np.clip(up, 0.0, 1.0))


def cmd_segment(args) -> int:
    files = sorted(Path(args.features).glob("*.dpf"))
    if not files:
        print(f"error: no .dpf files in {args.features}", file=sys.stderr)
        return USAGE_ERROR
    if args.init == "cls":
        missing = [p.stem for p in files if not p.with_suffix(".cls").exists()]
        if missing:
            print(
                f"error: --init cls requires .cls sidecars; missing for: "
                f"{', '.join(missing)}",
                file=sys.stderr,
            )
            return USAGE_ERROR
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_dir = Path(args.trace_dir) if args.trace_dir else None
    if trace_dir:
        trace_dir.mkdir(parents=True, exist_ok=True)

    def run_one(path):
        try:
            field = read_dpf(path)
            normalized = normalize_features(field)
            mask = _init_mask(args.init, normalized, args, path.with_suffix(".cls"))
            if args.ipo == "on":
                mask, trace = ipo_run_detailed(normalized, mask, T=args.ipo_T)
                if trace_dir:
                    lines = ["iteration,labels_changed,orientation_flipped"]
                    lines += [
                        f"{t['iteration']},{t['labels_changed']},"
                        f"{t['orientation_flipped']}"
                        for t in trace
                    ]
                    (trace_dir / f"{field.image_id}.csv").write_text(
                        "\n".join(lines) + "\n"
                    )
            pm = _mask_to_probmap(mask, (field.source_h, field.source_w))
            write_mask_pgm(pm, out_dir / f"{field.image_id}.pgm")
            return None
        except (SelfsegError, OSError) as e:
            return f"{path}: {e}"

    failures = _run_pool(run_one, files, args.workers)
    for msg in failures:
        print(f"failed: {msg}", file=sys.stderr)
    return PARTIAL_ERROR if failures else 0


def _run_pool(fn, items, workers):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, items))
    else:
        results = [fn(i) for i in items]
    return [r for r in results if r is not None]


def cmd_pseudolabel(args) -> int:
    cfg = _config_from_args(args)
    cfg.cache_dir = args.cache_dir
    try:
        _, _, errors = generate_pseudolabels(
            args.features, cfg, workers=args.workers
        )
    except SelfsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    for path, msg in errors:
        print(f"failed: {path}: {msg}", file=sys.stderr)
    return PARTIAL_ERROR if errors else 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    cfg.cache_dir = args.cache_dir
    w_con, w_dice, w_bce = head_mod.DEFAULT_WEIGHTS
    cfg.loss_weights = (
        w_con if args.loss_con else 0.0,
        w_dice if args.loss_dice else 0.0,
        w_bce if args.loss_bce else 0.0,
    )
    try:
        params, log = train_head(args.features, args.cache_dir, cfg)
    except SelfsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return PARTIAL_ERROR
    head_mod.save_head(params, args.out_checkpoint)
    if args.log:
        log.write_tsv(args.log)
    return 0


def cmd_infer(args) -> int:
    try:
        params = head_mod.load_head(args.checkpoint)
    except (SelfsegError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    files = sorted(Path(args.features).glob("*.dpf"))
    if not files:
        print(f"error: no .dpf files in {args.features}", file=sys.stderr)
        return USAGE_ERROR
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolution = None
    if args.resolution:
        try:
            h, w = (int(t) for t in args.resolution.lower().split("x"))
            resolution = (h, w)
        except ValueError:
            print(f"error: bad --resolution {args.resolution}", file=sys.stderr)
            return USAGE_ERROR

    def run_one(path):
        try:
            field = read_dpf(path)
            out_hw = resolution or (field.source_h, field.source_w)
            pm = infer(field, params, out_hw)
            write_mask_pgm(pm, out_dir / f"{field.image_id}.pgm")
            return None
        except (SelfsegError, OSError) as e:
            return f"{path}: {e}"

    failures = _run_pool(run_one, files, args.workers)
    for msg in failures:
        print(f"failed: {msg}", file=sys.stderr)
    return PARTIAL_ERROR if failures else 0


def _paired_stems(pred_dir, gt_dir):
    preds = {p.stem: p for p in sorted(Path(pred_dir).glob("*.pgm"))}
    gts = {p.stem: p for p in sorted(Path(gt_dir).glob("*.pgm"))}
    unmatched = sorted(set(preds) ^ set(gts))
    pairs = [(s, preds[s], gts[s]) for s in sorted(set(preds) & set(gts))]
    return pairs, unmatched


def cmd_eval(args) -> int:
    pairs, unmatched = _paired_stems(args.pred, args.gt)
    if unmatched:
        for stem in unmatched:
            print(f"unmatched stem: {stem}", file=sys.stderr)
        return PARTIAL_ERROR
    if not pairs:
        print("error: no prediction/gt pairs found", file=sys.stderr)
        return USAGE_ERROR

    def run_one(item):
        stem, pred_path, gt_path = item
        pred = read_mask_pgm(pred_path).values
        gt = read_mask_pgm(gt_path).values
        return stem, metrics_mod.evaluate_pair(pred, gt)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(run_one, pairs))
    else:
        rows = [run_one(p) for p in pairs]
    rows.sort(key=lambda r: r[0])

    lines = ["image_id\t" + "\t".join(metrics_mod.METRIC_COLUMNS)]
    for stem, report in rows:
        lines.append(stem + "\t" + "\t".join(f"{v:.6f}" for v in report.as_row()))
    mean = metrics_mod.mean_report([r for _, r in rows])
    lines.append("MEAN\t" + "\t".join(f"{v:.6f}" for v in mean.as_row()))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_compare_init(args) -> int:
    files = sorted(Path(args.features).glob("*.dpf"))
    if not files:
        print(f"error: no .dpf files in {args.features}", file=sys.stderr)
        return USAGE_ERROR
    gts = {p.stem: p for p in sorted(Path(args.gt).glob("*.pgm"))}
    missing_cls = [
        p.stem for p in files if not p.with_suffix(".cls").exists()
    ]
    if missing_cls:
        print(
            f"error: compare-init needs .cls sidecars; missing for: "
            f"{', '.join(missing_cls)}",
            file=sys.stderr,
        )
        return USAGE_ERROR
    unmatched = sorted(p.stem for p in files if p.stem not in gts)
    if unmatched:
        for stem in unmatched:
            print(f"unmatched stem: {stem}", file=sys.stderr)
        return PARTIAL_ERROR

    # no IPO runs here, so the ncut row scores the full resolved mask
    # rather than the seed component used to initialize IPO
    args.ipo_input = "mask"
    methods = ("cls", "kmeans", "ncut")
    sums = {m: np.zeros(3) for m in methods}
    for path in files:
        field = read_dpf(path)
        normalized = normalize_features(field)
        gt = read_mask_pgm(gts[path.stem]).values
        gt_bin = metrics_mod.binarize_gt(gt)
        for method in methods:
            mask = _init_mask(method, normalized, args, path.with_suffix(".cls"))
            pm = _mask_to_probmap(mask, gt.shape)
            pred_bin = metrics_mod.binarize_pred(pm.values)
            sums[method] += (
                metrics_mod.f_max(pm.values, gt_bin),
                metrics_mod.iou(pred_bin, gt_bin),
                metrics_mod.accuracy(pred_bin, gt_bin),
            )
    lines = ["method\tf_max\tiou\tacc"]
    for method in methods:
        means = sums[method] / len(files)
        lines.append(
            f"{method}\t{means[0]:.6f}\t{means[1]:.6f}\t{means[2]:.6f}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_images=args.n,
        h_patches=args.grid,
        w_patches=args.grid,
        dim=args.dim,
        sigma=args.sigma,
        distractor_fraction=args.distractors,
        seed=args.seed,
    )
    generate_corpus(
        spec, args.out_features, gt_dir=args.out_gt, write_cls=args.cls
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfseg",
        description="Self-supervised foreground segmentation over patch features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="initial bipartition + optional IPO")
    p.add_argument("features", help="directory of .dpf files")
    p.add_argument("--out", required=True)
    p.add_argument("--init", choices=("ncut", "kmeans", "cls"), default="ncut")
    p.add_argument("--ipo", choices=("on", "off"), default="on")
    p.add_argument("--trace-dir", default=None)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("pseudolabel", help="cache NCut+IPO pseudo-labels")
    p.add_argument("features")
    p.add_argument("--cache-dir", default=_default_cache_dir())
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("train", help="train the patch-classification head")
    p.add_argument("features")
    p.add_argument("--cache-dir", default=_default_cache_dir())
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--temperature", type=float, default=0.1)
    for name in ("bce", "dice", "con"):
        p.add_argument(
            f"--loss-{name}",
            action=argparse.BooleanOptionalAction,
            default=True,
        )
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="pixel probability maps from a checkpoint")
    p.add_argument("features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", default=None, help="HxW, default source size")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-init", help="score cls/kmeans/ncut initializers")
    p.add_argument("features")
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_compare_init)

    p = sub.add_parser("synth", help="generate a planted synthetic corpus")
    p.add_argument("--out-features", required=True)
    p.add_argument("--out-gt", default=None)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--grid", type=int, default=48)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--distractors", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cls", action="store_true", help="write .cls sidecars")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
