"""Iterative patch optimization: alternate centroid updates and
similarity-based relabeling, with orientation consistency against the
initial centroid-difference direction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateInputError
from .formats import FeatureField, PatchMask

DEFAULT_T = 20


@dataclass
class IpoState:
    labels: PatchMask
    mu_f: np.ndarray
    mu_b: np.ndarray
    reference: np.ndarray  # mu_f(0) - mu_b(0), fixed
    iteration: int = 0
    flipped_count: int = 0
    degenerate: bool = False  # an empty class froze its centroid at some step


def _class_means(flat: np.ndarray, labels: np.ndarray):
    fg = labels == 1
    bg = ~fg
    mu_f = flat[fg].mean(axis=0) if fg.any() else None
    mu_b = flat[bg].mean(axis=0) if bg.any() else None
    return mu_f, mu_b


def ipo_init(field: FeatureField, init: PatchMask) -> IpoState:
    """Centroids of the initial foreground / background classes."""
    init.validate()
    labels = init.labels
    if labels.sum() == 0 or labels.sum() == labels.shape[0]:
        raise DegenerateInputError("initial mask must contain both classes")
    flat = field.flat().astype(np.float64)
    mu_f, mu_b = _class_means(flat, labels)
    return IpoState(
        labels=PatchMask(init.h_patches, init.w_patches, labels.copy()),
        mu_f=mu_f,
        mu_b=mu_b,
        reference=mu_f - mu_b,
        iteration=0,
        flipped_count=0,
    )


def ipo_step(state: IpoState, field: FeatureField) -> IpoState:
    """One relabel / re-center pass with orientation correction."""
    flat = field.flat().astype(np.float64)
    sim_f = flat @ state.mu_f
    sim_b = flat @ state.mu_b
    labels = (sim_f > sim_b).astype(np.uint8)  # tie -> background

    mu_f, mu_b = _class_means(flat, labels)
    degenerate = state.degenerate
    if mu_f is None:  # empty class keeps its previous centroid
        mu_f, degenerate = state.mu_f, True
    if mu_b is None:
        mu_b, degenerate = state.mu_b, True

    flipped = state.flipped_count
    if float((mu_f - mu_b) @ state.reference) < 0.0:
        labels = (1 - labels).astype(np.uint8)
        mu_f, mu_b = mu_b, mu_f
        flipped += 1

    return replace(
        state,
        labels=PatchMask(state.labels.h_patches, state.labels.w_patches, labels),
        mu_f=mu_f,
        mu_b=mu_b,
        iteration=state.iteration + 1,
        flipped_count=flipped,
        degenerate=degenerate,
    )


def ipo_run_detailed(
    field: FeatureField, init: PatchMask, T: int = DEFAULT_T
) -> tuple[PatchMask, list[dict]]:
    """As ipo_run, but the trace also records orientation flips per step."""
    state = ipo_init(field, init)
    trace: list[dict] = []
    for _ in range(T):
        prev = state.labels.labels
        prev_flips = state.flipped_count
        state = ipo_step(state, field)
        changed = int(np.count_nonzero(state.labels.labels != prev))
        trace.append(
            {
                "iteration": state.iteration,
                "labels_changed": changed,
                "orientation_flipped": int(state.flipped_count > prev_flips),
            }
        )
        if changed == 0:
            break
    return state.labels, trace


def ipo_run(
    field: FeatureField, init: PatchMask, T: int = DEFAULT_T
) -> tuple[PatchMask, list[int]]:
    """Run at most T steps, stopping early once a step changes no labels.

    Returns the final mask and the per-iteration label-change counts.
    """
    labels, detailed = ipo_run_detailed(field, init, T)
    return labels, [d["labels_changed"] for d in detailed]
