"""On-disk formats: DPF dense patch features, PGM masks / probability maps.

DPF layout (all integers little-endian uint32):
    magic "DPF1" | h_patches | w_patches | dim | source_h | source_w
    | id_len | image_id (UTF-8, id_len bytes) | h*w*dim float32 (LE)

PGM is binary "P5", maxval 255, one whitespace after each header token.
Binary masks are stored as {0, 255}; probability maps as round(p*255)
with halves rounded away from zero, read back as byte/255.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError

DPF_MAGIC = b"DPF1"
_HEADER = struct.Struct("<4sIIIIII")


@dataclass
class FeatureField:
    """Dense per-patch embedding grid for one image.

    data has shape (h_patches, w_patches, dim), float32, row-major patches.
    """

    h_patches: int
    w_patches: int
    dim: int
    data: np.ndarray
    image_id: str
    source_h: int
    source_w: int

    @property
    def n_patches(self) -> int:
        return self.h_patches * self.w_patches

    def flat(self) -> np.ndarray:
        """(N, dim) view of the embeddings in row-major patch order."""
        return self.data.reshape(self.n_patches, self.dim)

    def validate(self) -> None:
        if self.h_patches < 1 or self.w_patches < 1 or self.dim < 1:
            raise ValidationError(
                f"feature field dims must be >= 1, got "
                f"{self.h_patches}x{self.w_patches}x{self.dim}"
            )
        if self.source_h < 1 or self.source_w < 1:
            raise ValidationError("source dimensions must be positive")
        if self.data.shape != (self.h_patches, self.w_patches, self.dim):
            raise ValidationError(
                f"data shape {self.data.shape} does not match "
                f"{self.h_patches}x{self.w_patches}x{self.dim}"
            )
        if self.data.dtype != np.float32:
            raise ValidationError(f"data must be float32, got {self.data.dtype}")
        if not np.all(np.isfinite(self.data)):
            bad = int(np.flatnonzero(~np.isfinite(self.data))[0])
            raise ValidationError(f"non-finite value at flat element {bad}")


@dataclass
class PatchMask:
    """Binary labels on the patch grid, row-major."""

    h_patches: int
    w_patches: int
    labels: np.ndarray  # (N,) uint8 in {0,1}

    @property
    def n_patches(self) -> int:
        return self.h_patches * self.w_patches

    def grid(self) -> np.ndarray:
        return self.labels.reshape(self.h_patches, self.w_patches)

    def validate(self) -> None:
        if self.labels.shape != (self.n_patches,):
            raise ValidationError(
                f"labels length {self.labels.shape} != {self.n_patches}"
            )
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValidationError("mask labels must be 0 or 1")


@dataclass
class ProbMap:
    """Pixel-resolution prediction, values in [0, 1]."""

    height: int
    width: int
    values: np.ndarray  # (height, width) float

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValidationError("prob map dims must be >= 1")
        if self.values.shape != (self.height, self.width):
            raise ValidationError(
                f"values shape {self.values.shape} != ({self.height}, {self.width})"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("prob map contains non-finite values")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValidationError("prob map values must lie in [0, 1]")


def write_dpf(field: FeatureField, path) -> None:
    field.validate()
    image_id = field.image_id.encode("utf-8")
    header = _HEADER.pack(
        DPF_MAGIC,
        field.h_patches,
        field.w_patches,
        field.dim,
        field.source_h,
        field.source_w,
        len(image_id),
    )
    payload = np.ascontiguousarray(field.data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(image_id)
        f.write(payload)


def read_dpf(path) -> FeatureField:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, h, w, dim, sh, sw, id_len = _HEADER.unpack_from(raw, 0)
    if magic != DPF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    off = _HEADER.size
    if len(raw) < off + id_len:
        raise FormatError(f"{path}: truncated image_id at offset {off}")
    image_id = raw[off : off + id_len].decode("utf-8")
    off += id_len
    expected = h * w * dim * 4
    if len(raw) - off != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - off} bytes at offset {off}, "
            f"expected {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=h * w * dim, offset=off)
    data = data.reshape(h, w, dim).astype(np.float32)
    field = FeatureField(h, w, dim, data, image_id, sh, sw)
    try:
        field.validate()
    except ValidationError as e:
        raise FormatError(f"{path}: {e}") from e
    return field


def _quantize(values: np.ndarray) -> np.ndarray:
    # round half away from zero; values are non-negative here
    return np.floor(values * 255.0 + 0.5).astype(np.uint8)


def write_mask_pgm(obj, path) -> None:
    """Write a PatchMask (as {0,255}) or a ProbMap (quantized) as binary PGM."""
    if isinstance(obj, PatchMask):
        obj.validate()
        img = (obj.grid() * np.uint8(255)).astype(np.uint8)
    elif isinstance(obj, ProbMap):
        obj.validate()
        img = _quantize(obj.values)
    else:
        raise ValidationError(f"cannot write {type(obj).__name__} as PGM")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_mask_pgm(path) -> ProbMap:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {raw[:2]!r})")
    # header = 4 whitespace-separated tokens, then exactly one whitespace byte
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise FormatError(f"{path}: malformed PGM header tokens {tokens}") from e
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    if len(raw) - pos != w * h:
        raise FormatError(
            f"{path}: payload is {len(raw) - pos} bytes, expected {w * h}"
        )
    img = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    values = img.reshape(h, w).astype(np.float64) / 255.0
    return ProbMap(h, w, values)
