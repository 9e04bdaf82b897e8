"""Training orchestration: pseudo-label generation (NCut -> IPO), 3-epoch
head training over cached features, and pixel-resolution inference.

All stages are deterministic functions of (features, config, seed); cache
files are written atomically (temp + rename) so parallel workers and reruns
produce byte-identical outputs.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import head as head_mod
from .affinity import DEFAULT_EPS_FLOOR, DEFAULT_TAU, build_affinity, normalize_features
from .errors import ConvergenceError, DegenerateInputError, SelfsegError, ValidationError
from .formats import (
    FeatureField,
    PatchMask,
    ProbMap,
    read_dpf,
    read_mask_pgm,
    write_mask_pgm,
)
from .ipo import DEFAULT_T, ipo_run
from .spectral import ncut_bipartition

MANIFEST_NAME = "manifest.tsv"
MANIFEST_COLUMNS = (
    "image_id", "h_patches", "w_patches", "fg_fraction", "ipo_iters",
    "degenerate_flag",
)


@dataclass
class TrainConfig:
    epochs: int = 3
    lr: float = 1e-3
    tau: float = DEFAULT_TAU
    eps_floor: float = DEFAULT_EPS_FLOOR
    ipo_T: int = DEFAULT_T
    loss_weights: tuple[float, float, float] = head_mod.DEFAULT_WEIGHTS
    temperature: float = head_mod.DEFAULT_TEMPERATURE
    contrastive_cap: int = head_mod.DEFAULT_CONTRASTIVE_CAP
    hidden: int = head_mod.DEFAULT_HIDDEN
    embed: int = head_mod.DEFAULT_EMBED
    rng_seed: int = 0
    cache_dir: str = "cache"
    feature_dir: str = "features"
    ipo_input_full_mask: bool = False  # False: IPO starts from the seed component

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        for name in ("lr", "tau", "eps_floor", "temperature"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.ipo_T < 0:
            raise ValidationError("ipo_T must be >= 0")


@dataclass
class EpochStats:
    epoch: int
    mean_con: float
    mean_dice: float
    mean_bce: float
    mean_total: float
    wall_s: float


@dataclass
class TrainLog:
    epochs: list[EpochStats] = dc_field(default_factory=list)

    def write_tsv(self, path) -> None:
        lines = ["epoch\tmean_con\tmean_dice\tmean_bce\tmean_total\twall_s"]
        for e in self.epochs:
            lines.append(
                f"{e.epoch}\t{e.mean_con:.8f}\t{e.mean_dice:.8f}"
                f"\t{e.mean_bce:.8f}\t{e.mean_total:.8f}\t{e.wall_s:.3f}"
            )
        _atomic_write_text(path, "\n".join(lines) + "\n")


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_write_pgm(obj, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    write_mask_pgm(obj, tmp)
    os.replace(tmp, path)


def list_dpf_files(feature_dir) -> list[Path]:
    files = sorted(Path(feature_dir).glob("*.dpf"))
    if not files:
        raise ValidationError(f"no .dpf files in {feature_dir}")
    return files


def pseudolabel_one(field: FeatureField, config: TrainConfig) -> tuple[PatchMask | None, dict]:
    """NCut -> IPO pseudo-label for one image.

    Returns (mask, stats); mask is None when the image degenerates.
    """
    grid = (field.h_patches, field.w_patches)
    stats = {
        "image_id": field.image_id,
        "h_patches": field.h_patches,
        "w_patches": field.w_patches,
        "fg_fraction": 0.0,
        "ipo_iters": 0,
        "degenerate_flag": 1,
    }
    flat = field.flat()
    if np.allclose(flat, flat[0], atol=1e-12):  # constant features
        return None, stats
    try:
        normalized = normalize_features(field)
        graph = build_affinity(normalized, tau=config.tau, eps_floor=config.eps_floor)
        bp = ncut_bipartition(graph, grid)
        init = bp.mask if config.ipo_input_full_mask else bp.component
        n_fg = int(init.labels.sum())
        if n_fg == 0 or n_fg == init.n_patches:
            return None, stats
        labels, trace = ipo_run(normalized, init, T=config.ipo_T)
    except DegenerateInputError:
        return None, stats
    stats.update(
        fg_fraction=float(labels.labels.mean()),
        ipo_iters=len(trace),
        degenerate_flag=0,
    )
    return labels, stats


def generate_pseudolabels(
    feature_dir, config: TrainConfig, workers: int = 1
) -> tuple[dict[str, PatchMask], list[dict], list[tuple[str, str]]]:
    """Write per-image pseudo-label masks and a manifest into config.cache_dir.

    Returns (masks by image_id, per-image stats, per-file errors).
    """
    config.validate()
    files = list_dpf_files(feature_dir)
    cache_dir = Path(config.cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)

    def run_one(path):
        try:
            field = read_dpf(path)
            mask, stats = pseudolabel_one(field, config)
            return (path, field.image_id, mask, stats, None)
        except (SelfsegError, ConvergenceError, OSError) as e:
            return (path, None, None, None, str(e))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, files))
    else:
        results = [run_one(p) for p in files]

    masks: dict[str, PatchMask] = {}
    all_stats: list[dict] = []
    errors: list[tuple[str, str]] = []
    for path, image_id, mask, stats, err in results:
        if err is not None:
            errors.append((str(path), err))
            continue
        all_stats.append(stats)
        if mask is not None:
            masks[image_id] = mask
            _atomic_write_pgm(mask, cache_dir / f"{image_id}.mask.pgm")

    all_stats.sort(key=lambda s: s["image_id"])
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for s in all_stats:
        lines.append(
            f"{s['image_id']}\t{s['h_patches']}\t{s['w_patches']}"
            f"\t{s['fg_fraction']:.8f}\t{s['ipo_iters']}\t{s['degenerate_flag']}"
        )
    _atomic_write_text(cache_dir / MANIFEST_NAME, "\n".join(lines) + "\n")
    return masks, all_stats, errors


def read_manifest(cache_dir) -> list[dict]:
    path = Path(cache_dir) / MANIFEST_NAME
    if not path.exists():
        raise ValidationError(f"missing manifest {path}")
    lines = path.read_text().splitlines()
    rows = []
    for line in lines[1:]:
        parts = line.split("\t")
        rows.append(
            {
                "image_id": parts[0],
                "h_patches": int(parts[1]),
                "w_patches": int(parts[2]),
                "fg_fraction": float(parts[3]),
                "ipo_iters": int(parts[4]),
                "degenerate_flag": int(parts[5]),
            }
        )
    return rows


def load_cached_mask(cache_dir, image_id: str) -> PatchMask:
    pm = read_mask_pgm(Path(cache_dir) / f"{image_id}.mask.pgm")
    labels = (pm.values.reshape(-1) > 0.5).astype(np.uint8)
    return PatchMask(pm.height, pm.width, labels)


def train_head(
    feature_dir, cache_dir, config: TrainConfig
) -> tuple[head_mod.HeadParams, TrainLog]:
    """Seeded-shuffle epochs, one Adam step per image (full patch batch)."""
    config.validate()
    rows = [r for r in read_manifest(cache_dir) if not r["degenerate_flag"]]
    if not rows:
        raise ValidationError(f"no usable pseudo-labels in {cache_dir}")
    feature_dir = Path(feature_dir)
    by_id = {p.stem: p for p in list_dpf_files(feature_dir)}

    fields, labels = {}, {}
    for r in rows:
        image_id = r["image_id"]
        if image_id not in by_id:
            raise ValidationError(f"no feature file for cached mask {image_id}")
        field = read_dpf(by_id[image_id])
        mask = load_cached_mask(cache_dir, image_id)
        if (mask.h_patches, mask.w_patches) != (field.h_patches, field.w_patches):
            raise ValidationError(f"cache/feature grid mismatch for {image_id}")
        fields[image_id] = field
        labels[image_id] = mask.labels

    ids = sorted(fields)
    dim = fields[ids[0]].dim
    params = head_mod.init_params(
        dim, hidden=config.hidden, embed=config.embed, seed=config.rng_seed
    )
    state = head_mod.adam_init(params, lr=config.lr)

    log = TrainLog()
    for epoch in range(config.epochs):
        t0 = time.monotonic()
        perm = np.random.default_rng([config.rng_seed, epoch]).permutation(len(ids))
        order = [ids[i] for i in perm]
        sums = np.zeros(4)
        for step_idx, image_id in enumerate(order):
            breakdown, grads = head_mod.loss_total_and_grads(
                params,
                fields[image_id],
                labels[image_id],
                weights=config.loss_weights,
                temperature=config.temperature,
                cap=config.contrastive_cap,
                rng_seed=int(
                    np.random.default_rng(
                        [config.rng_seed, epoch, step_idx]
                    ).integers(2**31)
                ),
            )
            state, params = head_mod.adam_step(state, params, grads)
            for arr in params.as_dict().values():
                if not np.all(np.isfinite(arr)):
                    raise ValidationError(
                        f"non-finite parameters after step on {image_id}"
                    )
            sums += (breakdown.con, breakdown.dice, breakdown.bce, breakdown.total)
        means = sums / len(order)
        log.epochs.append(
            EpochStats(
                epoch=epoch + 1,
                mean_con=float(means[0]),
                mean_dice=float(means[1]),
                mean_bce=float(means[2]),
                mean_total=float(means[3]),
                wall_s=time.monotonic() - t0,
            )
        )
    return params, log


def bilinear_upsample(grid: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Upsample an (h, w) grid to (H, W).

    Output pixel centers map to grid coordinates u = (c + 0.5) * (w - 1) / W,
    which interpolates between grid samples without extrapolating past the
    edge values.
    """
    h, w = grid.shape
    H, W = out_hw
    if H < 1 or W < 1:
        raise ValidationError("output resolution must be positive")
    u = (np.arange(W) + 0.5) * (w - 1) / W
    v = (np.arange(H) + 0.5) * (h - 1) / H
    u0 = np.clip(np.floor(u).astype(int), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(v).astype(int), 0, max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0) if w > 1 else np.zeros_like(u)
    fv = (v - v0) if h > 1 else np.zeros_like(v)
    top = grid[v0][:, u0] * (1 - fu) + grid[v0][:, u1] * fu
    bot = grid[v1][:, u0] * (1 - fu) + grid[v1][:, u1] * fu
    return top * (1 - fv[:, None]) + bot * fv[:, None]


def infer(
    field: FeatureField,
    params: head_mod.HeadParams,
    out_resolution: tuple[int, int],
) -> ProbMap:
    """Per-patch foreground probabilities, bilinearly upsampled to pixels."""
    if field.dim != params.dim:
        raise ValidationError(
            f"checkpoint dim {params.dim} != field dim {field.dim}"
        )
    _, logits = head_mod.head_forward(params, field)
    probs = expit(logits[:, 1]).reshape(field.h_patches, field.w_patches)
    up = bilinear_upsample(probs, out_resolution)
    up = np.clip(up, 0.0, 1.0)
    return ProbMap(out_resolution[0], out_resolution[1], up)
