import numpy as np
import pytest

from selfseg.formats import FeatureField, PatchMask


def make_field(data, image_id="test", patch_px=16):
    """FeatureField from an (h, w, d) array."""
    data = np.asarray(data, dtype=np.float32)
    h, w, d = data.shape
    return FeatureField(h, w, d, data, image_id, h * patch_px, w * patch_px)


def field_from_flat(flat, h, w, image_id="test"):
    flat = np.asarray(flat, dtype=np.float32)
    return make_field(flat.reshape(h, w, -1), image_id=image_id)


def mask_of(labels, h, w):
    return PatchMask(h, w, np.asarray(labels, dtype=np.uint8).reshape(-1))


def random_unit_field(rng, h, w, d):
    flat = rng.standard_normal((h * w, d))
    flat /= np.linalg.norm(flat, axis=1, keepdims=True)
    return field_from_flat(flat, h, w)


def patch_iou(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    union = int((a | b).sum())
    return 1.0 if union == 0 else int((a & b).sum()) / union


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
