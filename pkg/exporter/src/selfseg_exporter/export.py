"""Dense patch-feature export from a pretrained self-supervised ViT.

Runs a frozen backbone over a directory of images and writes one DPF
feature file plus a .cls sidecar (raw little-endian float32, length D)
per image.  All ML-ecosystem dependencies live here; the segmentation
pipeline consumes only the files.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from selfseg.formats import FeatureField, write_dpf
from selfseg.synth import SyntheticSpec, generate_corpus

log = logging.getLogger("selfseg_exporter")

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".webp")
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class ExportError(RuntimeError):
    pass


@dataclass
class ExportSpec:
    model_id: str = "facebook/dino-vits16"
    resolution: int = 768
    layer: str = "last"  # "last": final hidden states; "values": last-block value features
    batch_size: int = 4
    device: str = "cpu"

    def validate(self) -> None:
        if self.resolution < 1:
            raise ExportError("resolution must be positive")
        if self.layer not in ("last", "values"):
            raise ExportError(f"unknown layer selector {self.layer!r}")
        if self.batch_size < 1:
            raise ExportError("batch_size must be positive")


def load_backbone(spec: ExportSpec):
    """Load the frozen backbone; returns (model, patch_size).

    Any load failure is fatal by contract.
    """
    import torch
    from transformers import AutoModel

    try:
        model = AutoModel.from_pretrained(spec.model_id)
    except Exception as exc:
        raise ExportError(f"cannot load backbone {spec.model_id!r}: {exc}") from exc
    patch_size = getattr(model.config, "patch_size", None)
    if patch_size is None:
        raise ExportError(f"{spec.model_id!r} does not define a patch size")
    if spec.resolution % patch_size != 0:
        raise ExportError(
            f"resolution {spec.resolution} not divisible by patch size {patch_size}"
        )
    model.eval()
    model.to(torch.device(spec.device))
    for p in model.parameters():
        p.requires_grad_(False)
    return model, int(patch_size)


def _find_value_projection(model):
    # last transformer block's value projection; module naming varies
    # across transformers versions and ViT variants
    hits = [m for name, m in model.named_modules()
            if name.endswith(("attention.value", "attn.v", ".v_proj"))]
    if not hits:
        raise ExportError(
            "layer='values' needs a ViT-style attention.value module"
        )
    return hits[-1]


def _load_image(path: Path, resolution: int):
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        source_w, source_h = im.size
        im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return arr.transpose(2, 0, 1), source_h, source_w


def _forward_tokens(model, pixel_batch, layer: str):
    """Token features for a batch: (cls [B,D], patches [B,N,D])."""
    import torch

    captured = []
    hook = None
    if layer == "values":
        def grab(_module, _inputs, output):
            captured.append(output)

        hook = _find_value_projection(model).register_forward_hook(grab)
    try:
        with torch.no_grad():
            out = model(pixel_values=pixel_batch)
    finally:
        if hook is not None:
            hook.remove()
    if layer == "values":
        tokens = captured[-1]
    else:
        tokens = out.last_hidden_state
    # first token is the global CLS token in ViT-style models
    return tokens[:, 0, :], tokens[:, 1:, :]


def export(images_dir, spec: ExportSpec, out_dir) -> tuple[list[str], list[str]]:
    """Export every decodable image; returns (exported ids, skipped names).

    Writes <image_id>.dpf and <image_id>.cls into out_dir.  Undecodable
    images are skipped with a log line; backbone load failure is fatal.
    """
    import torch

    spec.validate()
    images_dir = Path(images_dir)
    out_dir = Path(out_dir)
    paths = sorted(
        p for p in images_dir.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not paths:
        raise ExportError(f"no images found in {images_dir}")
    model, patch_size = load_backbone(spec)
    grid = spec.resolution // patch_size
    out_dir.mkdir(parents=True, exist_ok=True)

    loaded, skipped = [], []
    for path in paths:
        try:
            pixels, source_h, source_w = _load_image(path, spec.resolution)
        except Exception as exc:
            log.warning("skipping undecodable image %s: %s", path.name, exc)
            skipped.append(path.name)
            continue
        loaded.append((path.stem, pixels, source_h, source_w))

    exported = []
    device = torch.device(spec.device)
    for start in range(0, len(loaded), spec.batch_size):
        chunk = loaded[start : start + spec.batch_size]
        batch = torch.from_numpy(np.stack([c[1] for c in chunk])).to(device)
        cls_tok, patches = _forward_tokens(model, batch, spec.layer)
        patches = patches.cpu().numpy().astype(np.float32)
        cls_tok = cls_tok.cpu().numpy().astype(np.float32)
        for (image_id, _pix, source_h, source_w), pf, cf in zip(
            chunk, patches, cls_tok
        ):
            if pf.shape[0] != grid * grid:
                raise ExportError(
                    f"{image_id}: got {pf.shape[0]} patch tokens, "
                    f"expected {grid * grid}"
                )
            field = FeatureField(
                h_patches=grid,
                w_patches=grid,
                dim=pf.shape[1],
                data=pf.reshape(grid, grid, pf.shape[1]),
                image_id=image_id,
                source_h=source_h,
                source_w=source_w,
            )
            write_dpf(field, out_dir / f"{image_id}.dpf")
            tmp = out_dir / f"{image_id}.cls.tmp"
            tmp.write_bytes(cf.astype("<f4").tobytes())
            tmp.replace(out_dir / f"{image_id}.cls")
            exported.append(image_id)
    return exported, skipped


def export_synthetic(
    spec: SyntheticSpec, feature_dir, gt_dir=None, write_cls: bool = True
) -> list[str]:
    """Planted-cluster corpus, re-exposed from the segmentation package."""
    return generate_corpus(spec, feature_dir, gt_dir=gt_dir, write_cls=write_cls)
