"""Spectral bipartition: generalized Fiedler vector of (D-A)x = lambda*D*x,
mean thresholding, sign resolution, seed-anchored connected component, and
the CLS / 2-means baseline initializers.

The production solver works on the symmetric normalized form
L_sym = D^{-1/2}(D-A)D^{-1/2}, deflates the known null vector D^{1/2}*1,
and runs restarted Lanczos with full reorthogonalization.  The dense
oracle diagonalizes L_sym directly and is kept independent of the solver.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .affinity import AffinityGraph
from .errors import ConvergenceError, DegenerateInputError, ValidationError
from .formats import FeatureField, PatchMask

_LANCZOS_BLOCK = 60
_START_SEED = 0x5EED


@dataclass
class Bipartition:
    fiedler: np.ndarray
    lambda2: float
    mask: PatchMask
    seed: int
    component: PatchMask
    residual: float
    iterations: int


@dataclass
class DenseSpectrum:
    """Full generalized spectrum, eigenvalues ascending.

    vectors[:, k] solves (D-A)x = eigenvalues[k]*D*x, unit l2 norm.
    sym_vectors are the orthonormal eigenvectors of L_sym.
    """

    eigenvalues: np.ndarray
    vectors: np.ndarray
    sym_vectors: np.ndarray


_TRIVIAL_SHIFT = 3.0


def _sym_operator(graph: AffinityGraph):
    """Matvec for L_sym with the known null vector D^{1/2}*1 shifted to 3.0,
    outside the [0, 2] Laplacian spectrum, so the smallest eigenvalue of the
    shifted operator is exactly lambda_2 (exact rank-one deflation)."""
    d = graph.degree
    if np.any(d <= 0.0):
        raise ValidationError("degree vector must be strictly positive")
    dinv = 1.0 / np.sqrt(d)
    A = graph.weights
    v0 = np.sqrt(d)
    v0 = v0 / np.linalg.norm(v0)

    def op(y: np.ndarray) -> np.ndarray:
        return y - dinv * (A @ (dinv * y)) + _TRIVIAL_SHIFT * v0 * (v0 @ y)

    return op, v0, dinv


def _generalized_residual(graph, x, lam):
    dx = graph.degree * x
    r = (dx - graph.weights @ x) - lam * dx
    return float(np.linalg.norm(r)), float(np.linalg.norm(dx))


def fiedler_vector(
    graph: AffinityGraph, tol: float = 1e-6, max_iter: int = 2000
) -> tuple[np.ndarray, float, float, int]:
    """Second-smallest generalized eigenpair of (D-A, D).

    Returns (x, lambda2, residual, iterations) where x has unit l2 norm and
    residual = ||(D-A)x - lambda*D*x||_2 <= tol*||D*x||_2 on success.
    """
    n = graph.n
    if n < 2:
        raise DegenerateInputError(f"need at least 2 nodes, got {n}")
    op, v0, dinv = _sym_operator(graph)

    rng = np.random.default_rng(_START_SEED)
    q = rng.standard_normal(n)
    q -= v0 * (v0 @ q)
    q /= np.linalg.norm(q)

    matvecs = 0
    best = (None, np.inf, np.inf)  # (x, lam, residual)
    block = min(n - 1, _LANCZOS_BLOCK)
    while matvecs < max_iter:
        # one Lanczos cycle with full reorthogonalization
        basis = [q]
        alphas, betas = [], []
        for _ in range(min(block, max_iter - matvecs)):
            w = op(basis[-1])
            matvecs += 1
            alphas.append(float(basis[-1] @ w))
            for b in basis:
                w -= b * (b @ w)
            for b in basis:  # second pass for orthogonality to working precision
                w -= b * (b @ w)
            beta = float(np.linalg.norm(w))
            if beta < 1e-14 or len(basis) == block:
                betas.append(beta)
                break
            betas.append(beta)
            basis.append(w / beta)
        m = len(alphas)
        if m == 1:
            theta = np.array([alphas[0]])
            svec = np.array([[1.0]])
        else:
            theta, svec = scipy.linalg.eigh_tridiagonal(
                np.array(alphas), np.array(betas[: m - 1])
            )
        y = np.column_stack(basis[:m]) @ svec[:, 0]
        y -= v0 * (v0 @ y)
        ny = np.linalg.norm(y)
        if ny < 1e-14:
            q = rng.standard_normal(n)
            q -= v0 * (v0 @ q)
            q /= np.linalg.norm(q)
            continue
        y /= ny
        lam = float(theta[0])
        x = dinv * y
        x /= np.linalg.norm(x)
        res, scale = _generalized_residual(graph, x, lam)
        if res < best[2]:
            best = (x, lam, res)
        if res <= tol * scale:
            # deterministic sign: largest-|entry| coordinate made positive
            k = int(np.argmax(np.abs(x)))
            if x[k] < 0:
                x = -x
            return x, lam, res, matvecs
        q = y
    raise ConvergenceError(
        f"fiedler_vector did not converge in {max_iter} matvecs "
        f"(best residual {best[2]:.3e})",
        best_residual=best[2],
        iterations=matvecs,
    )


def dense_eig_oracle(graph: AffinityGraph, max_n: int = 512) -> DenseSpectrum:
    """Full dense generalized spectrum; test oracle for the iterative solver."""
    if graph.n > max_n:
        raise ValidationError(f"dense oracle limited to n <= {max_n}, got {graph.n}")
    d = graph.degree
    if np.any(d <= 0.0):
        raise ValidationError("degree vector must be strictly positive")
    dinv = 1.0 / np.sqrt(d)
    L_sym = np.eye(graph.n) - (dinv[:, None] * graph.weights) * dinv[None, :]
    L_sym = 0.5 * (L_sym + L_sym.T)
    w, V = np.linalg.eigh(L_sym)
    X = dinv[:, None] * V
    X /= np.linalg.norm(X, axis=0, keepdims=True)
    return DenseSpectrum(eigenvalues=w, vectors=X, sym_vectors=V)


def threshold_at_mean(x: np.ndarray, grid: tuple[int, int] | None = None) -> PatchMask:
    """mask[i] = 1 iff x[i] strictly exceeds the mean of x."""
    x = np.asarray(x, dtype=np.float64)
    labels = (x > x.mean()).astype(np.uint8)
    h, w = grid if grid is not None else (1, x.shape[0])
    if h * w != x.shape[0]:
        raise ValidationError(f"grid {h}x{w} does not cover {x.shape[0]} values")
    return PatchMask(h, w, labels)


def _flood_fill_4(grid_labels: np.ndarray, seed_rc: tuple[int, int]) -> np.ndarray:
    h, w = grid_labels.shape
    out = np.zeros_like(grid_labels)
    queue = deque([seed_rc])
    out[seed_rc] = 1
    while queue:
        r, c = queue.popleft()
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < h and 0 <= cc < w and grid_labels[rr, cc] and not out[rr, cc]:
                out[rr, cc] = 1
                queue.append((rr, cc))
    return out


def resolve_and_component(
    x2: np.ndarray,
    mask: PatchMask,
    grid: tuple[int, int],
    lambda2: float = 0.0,
    residual: float = 0.0,
    iterations: int = 0,
) -> Bipartition:
    """Resolve eigenvector sign via the max-|x2| seed and extract the
    4-connected component of the mask that contains it."""
    h, w = grid
    x2 = np.asarray(x2, dtype=np.float64)
    if mask.n_patches != x2.shape[0] or h * w != x2.shape[0]:
        raise ValidationError("x2 / mask / grid sizes disagree")
    seed = int(np.argmax(np.abs(x2)))  # argmax ties -> lowest index
    labels = mask.labels.copy()
    if labels[seed] == 0:
        labels = (1 - labels).astype(np.uint8)
    resolved = PatchMask(h, w, labels)
    comp_grid = _flood_fill_4(resolved.grid(), divmod(seed, w))
    component = PatchMask(h, w, comp_grid.reshape(-1).astype(np.uint8))
    return Bipartition(
        fiedler=x2,
        lambda2=lambda2,
        mask=resolved,
        seed=seed,
        component=component,
        residual=residual,
        iterations=iterations,
    )


def ncut_bipartition(
    graph: AffinityGraph,
    grid: tuple[int, int],
    tol: float = 1e-6,
    max_iter: int = 2000,
) -> Bipartition:
    """Full NCut chain: Fiedler vector -> mean threshold -> sign/component."""
    x2, lam, res, iters = fiedler_vector(graph, tol=tol, max_iter=max_iter)
    mask = threshold_at_mean(x2, grid)
    return resolve_and_component(
        x2, mask, grid, lambda2=lam, residual=res, iterations=iters
    )


def _kmeans_pp_centers(points, rng):
    n = points.shape[0]
    first = int(rng.integers(n))
    c0 = points[first]
    d2 = np.sum((points - c0) ** 2, axis=1)
    total = d2.sum()
    if total <= 0.0:
        second = int(rng.integers(n))
    else:
        second = int(rng.choice(n, p=d2 / total))
    return np.stack([c0, points[second]])


def init_kmeans2(
    field: FeatureField, restarts: int = 5, seed: int = 0, max_lloyd: int = 100
) -> tuple[PatchMask, bool]:
    """2-means over patch embeddings; foreground = cluster with the smaller
    fraction of image-border patches (ties: smaller cluster).

    Returns (mask, degenerate).  Degenerate inputs (a single effective
    cluster) yield an all-background mask with the flag set.
    """
    h, w = field.h_patches, field.w_patches
    points = field.flat().astype(np.float64)
    n = points.shape[0]
    if n < 2:
        raise DegenerateInputError(f"need at least 2 patches, got {n}")
    rng = np.random.default_rng(seed)

    best_labels, best_obj = None, np.inf
    for _ in range(restarts):
        centers = _kmeans_pp_centers(points, rng)
        labels = None
        for _ in range(max_lloyd):
            d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for k in (0, 1):
                sel = labels == k
                if sel.any():
                    centers[k] = points[sel].mean(axis=0)
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        obj = float(d2[np.arange(n), labels].sum())
        if obj < best_obj:
            best_obj, best_labels = obj, labels

    if best_labels is None or len(np.unique(best_labels)) < 2:
        return PatchMask(h, w, np.zeros(n, dtype=np.uint8)), True

    grid_r, grid_c = np.divmod(np.arange(n), w)
    border = (grid_r == 0) | (grid_r == h - 1) | (grid_c == 0) | (grid_c == w - 1)
    fracs, sizes = [], []
    for k in (0, 1):
        sel = best_labels == k
        sizes.append(int(sel.sum()))
        fracs.append(border[sel].mean())
    if fracs[0] < fracs[1]:
        fg = 0
    elif fracs[1] < fracs[0]:
        fg = 1
    else:
        fg = int(np.argmin(sizes))
    return PatchMask(h, w, (best_labels == fg).astype(np.uint8)), False


def init_cls(field: FeatureField, cls_embedding: np.ndarray) -> PatchMask:
    """Mean-thresholded cosine similarity to a global (CLS) embedding."""
    cls_embedding = np.asarray(cls_embedding, dtype=np.float64).reshape(-1)
    if cls_embedding.shape[0] != field.dim:
        raise ValidationError(
            f"cls embedding dim {cls_embedding.shape[0]} != field dim {field.dim}"
        )
    cn = np.linalg.norm(cls_embedding)
    if cn == 0.0:
        raise DegenerateInputError("zero-norm cls embedding")
    flat = field.flat().astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero-norm patch embedding")
    s = (flat @ cls_embedding) / (norms * cn)
    return threshold_at_mean(s, (field.h_patches, field.w_patches))
