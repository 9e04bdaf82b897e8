"""Synthetic planted-cluster corpora for desk-scale testing.

Each image is a patch grid with a rectangular foreground block whose
embeddings follow one unit direction and a background following an
orthogonal direction, plus Gaussian noise (renormalized).  The two
directions are drawn once per corpus and shared by every image,
mirroring how a frozen backbone gives the same object/background
feature statistics across photographs; box geometry, noise, and
distractors are drawn per image.  Optionally a fraction of background
patches become "distractors" that reuse the foreground direction while
staying spatially disconnected from the block, which stresses purely
feature-space methods.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import FeatureField, PatchMask, ProbMap, write_dpf, write_mask_pgm

PATCH_PX = 16


@dataclass
class SyntheticSpec:
    n_images: int = 50
    h_patches: int = 48
    w_patches: int = 48
    dim: int = 16
    sigma: float = 0.05
    distractor_fraction: float = 0.0
    distractor_mix: float = 0.4  # fg-direction weight in distractor features
    min_box: int = 10
    max_box: int = 18
    seed: int = 0


def _orthonormal_pair(rng: np.random.Generator, dim: int):
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    v = rng.standard_normal(dim)
    v -= u * (u @ v)
    v /= np.linalg.norm(v)
    return u, v


def make_planted_field(
    spec: SyntheticSpec, index: int
) -> tuple[FeatureField, PatchMask]:
    """One synthetic image; ground truth is the planted foreground block."""
    rng = np.random.default_rng([spec.seed, index])
    h, w, d = spec.h_patches, spec.w_patches, spec.dim
    n = h * w
    # the foreground direction is corpus-level (keyed off a stream no
    # image index can reach) so a head trained on some images transfers
    # to the rest, mirroring a frozen backbone's consistent object
    # features; the background direction is per-image, mirroring varied
    # scenes, and stays orthogonal to the foreground
    dir_rng = np.random.default_rng([spec.seed, 1 << 40])
    u_fg = dir_rng.standard_normal(d)
    u_fg /= np.linalg.norm(u_fg)
    u_bg = rng.standard_normal(d)
    u_bg -= u_fg * (u_fg @ u_bg)
    u_bg /= np.linalg.norm(u_bg)

    bh = int(rng.integers(spec.min_box, spec.max_box + 1))
    bw = int(rng.integers(spec.min_box, spec.max_box + 1))
    r0 = int(rng.integers(1, h - bh - 1))
    c0 = int(rng.integers(1, w - bw - 1))
    gt = np.zeros((h, w), dtype=np.uint8)
    gt[r0 : r0 + bh, c0 : c0 + bw] = 1

    directions = np.tile(u_bg, (n, 1))
    fg_idx = np.flatnonzero(gt.reshape(-1))
    directions[fg_idx] = u_fg

    if spec.distractor_fraction > 0.0:
        # distractors reuse the foreground direction but sit in the
        # background, at least 2 patches away from the block
        rr, cc = np.divmod(np.arange(n), w)
        far = (
            (rr < r0 - 2) | (rr >= r0 + bh + 2) | (cc < c0 - 2) | (cc >= c0 + bw + 2)
        )
        candidates = np.flatnonzero(far)
        k = int(round(spec.distractor_fraction * n))
        k = min(k, candidates.shape[0])
        chosen = rng.choice(candidates, size=k, replace=False)
        # each distractor leans toward the foreground direction but carries
        # its own residual, so the coherent block keeps the spectral seed
        mix = spec.distractor_mix
        resid = rng.standard_normal((k, d))
        resid -= np.outer(resid @ u_fg, u_fg)
        resid /= np.linalg.norm(resid, axis=1, keepdims=True)
        directions[chosen] = mix * u_fg + np.sqrt(1.0 - mix * mix) * resid

    feats = directions + spec.sigma * rng.standard_normal((n, d))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    field = FeatureField(
        h_patches=h,
        w_patches=w,
        dim=d,
        data=feats.astype(np.float32).reshape(h, w, d),
        image_id=f"synth_{index:04d}",
        source_h=h * PATCH_PX,
        source_w=w * PATCH_PX,
    )
    return field, PatchMask(h, w, gt.reshape(-1))


def gt_to_pixel_probmap(gt: PatchMask, patch_px: int = PATCH_PX) -> ProbMap:
    """Nearest-neighbor upsample of the patch ground truth to pixels."""
    grid = gt.grid().astype(np.float64)
    big = np.repeat(np.repeat(grid, patch_px, axis=0), patch_px, axis=1)
    return ProbMap(big.shape[0], big.shape[1], big)


def generate_corpus(
    spec: SyntheticSpec,
    feature_dir,
    gt_dir=None,
    write_cls: bool = False,
) -> list[str]:
    """Write DPF files (plus optional pixel gt PGMs and .cls sidecars).

    Returns the generated image ids.  The sidecar CLS embedding is the mean
    raw feature, mimicking a global image token.
    """
    feature_dir = Path(feature_dir)
    feature_dir.mkdir(parents=True, exist_ok=True)
    if gt_dir is not None:
        gt_dir = Path(gt_dir)
        gt_dir.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(spec.n_images):
        field, gt = make_planted_field(spec, i)
        write_dpf(field, feature_dir / f"{field.image_id}.dpf")
        if write_cls:
            cls = field.flat().astype(np.float64).mean(axis=0)
            (feature_dir / f"{field.image_id}.cls").write_bytes(
                cls.astype("<f4").tobytes()
            )
        if gt_dir is not None:
            write_mask_pgm(gt_to_pixel_probmap(gt), gt_dir / f"{field.image_id}.pgm")
        ids.append(field.image_id)
    return ids
