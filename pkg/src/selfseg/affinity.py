"""Patch affinity graph: thresholded cosine similarities plus degree vector.

Entries above the similarity threshold keep their raw inner product; all
others are floored at a small constant so the graph stays connected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError
from .formats import FeatureField

DEFAULT_TAU = 0.2
DEFAULT_EPS_FLOOR = 1e-5


@dataclass
class AffinityGraph:
    n: int
    weights: np.ndarray  # (n, n) symmetric, float64
    degree: np.ndarray  # (n,)
    tau: float
    eps_floor: float


def normalize_features(field: FeatureField) -> FeatureField:
    """Return a copy of the field with every patch embedding at unit l2 norm."""
    flat = field.flat().astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise DegenerateInputError(f"zero-norm embedding at patch {bad}")
    unit = (flat / norms[:, None]).astype(np.float32)
    return FeatureField(
        field.h_patches,
        field.w_patches,
        field.dim,
        unit.reshape(field.h_patches, field.w_patches, field.dim),
        field.image_id,
        field.source_h,
        field.source_w,
    )


def build_affinity(
    field: FeatureField,
    tau: float = DEFAULT_TAU,
    eps_floor: float = DEFAULT_EPS_FLOOR,
) -> AffinityGraph:
    """Thresholded inner-product affinity over the (normalized) patch grid."""
    flat = field.flat().astype(np.float64)
    sims = flat @ flat.T
    sims = 0.5 * (sims + sims.T)  # exact symmetry despite float rounding
    weights = np.where(sims > tau, sims, eps_floor)
    degree = weights.sum(axis=1)
    return AffinityGraph(
        n=flat.shape[0], weights=weights, degree=degree, tau=tau, eps_floor=eps_floor
    )
