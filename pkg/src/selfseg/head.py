"""Lightweight patch-classification head: two-layer projection + binary
classifier, the three training losses, hand-derived reverse-mode gradients,
Adam, and the SGH1 checkpoint format.

Logits branch off the pre-normalization projection; l2 normalization is
applied only on the contrastive branch.  The background logit receives no
gradient (the losses only touch the foreground logit).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import FormatError, ValidationError
from .formats import FeatureField

DEFAULT_HIDDEN = 128
DEFAULT_EMBED = 128
DEFAULT_WEIGHTS = (0.1, 1.0, 1.0)  # (contrastive, dice, bce)
DEFAULT_TEMPERATURE = 0.1
DEFAULT_CONTRASTIVE_CAP = 1024
PROB_CLAMP = 1e-7
DICE_EPS = 1e-6

_PARAM_ORDER = ("W1", "b1", "W2", "b2", "Wc", "bc")
CKPT_MAGIC = b"SGH1"


@dataclass
class HeadParams:
    W1: np.ndarray  # (hidden, D)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (embed, hidden)
    b2: np.ndarray  # (embed,)
    Wc: np.ndarray  # (2, embed)
    bc: np.ndarray  # (2,)

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def embed(self) -> int:
        return self.W2.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_ORDER}

    def validate(self) -> None:
        h, d, e = self.hidden, self.dim, self.embed
        shapes = {
            "W1": (h, d), "b1": (h,), "W2": (e, h),
            "b2": (e,), "Wc": (2, e), "bc": (2,),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise ValidationError(f"{name} shape {arr.shape}, expected {want}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")


@dataclass
class LossBreakdown:
    con: float
    dice: float
    bce: float
    total: float
    degenerate_con: bool = False


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_params(
    dim: int,
    hidden: int = DEFAULT_HIDDEN,
    embed: int = DEFAULT_EMBED,
    seed: int = 0,
) -> HeadParams:
    """Uniform +-1/sqrt(fan_in) weights, zero biases."""
    rng = np.random.default_rng(seed)

    def mat(rows, cols):
        bound = 1.0 / np.sqrt(cols)
        return rng.uniform(-bound, bound, size=(rows, cols))

    return HeadParams(
        W1=mat(hidden, dim),
        b1=np.zeros(hidden),
        W2=mat(embed, hidden),
        b2=np.zeros(embed),
        Wc=mat(2, embed),
        bc=np.zeros(2),
    )


def _forward_cache(params: HeadParams, flat: np.ndarray) -> dict:
    h_pre = flat @ params.W1.T + params.b1
    h = np.maximum(h_pre, 0.0)
    z_raw = h @ params.W2.T + params.b2
    norms = np.linalg.norm(z_raw, axis=1)
    degenerate = norms < 1e-12
    z = np.zeros_like(z_raw)
    ok = ~degenerate
    z[ok] = z_raw[ok] / norms[ok, None]
    logits = z_raw @ params.Wc.T + params.bc
    return {
        "flat": flat, "h_pre": h_pre, "h": h, "z_raw": z_raw,
        "norms": norms, "degenerate": degenerate, "z": z, "logits": logits,
    }


def head_forward(
    params: HeadParams, field: FeatureField
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (z, logits): unit-norm contrastive embeddings (zero rows for
    degenerate projections) and N x 2 classifier logits."""
    if field.dim != params.dim:
        raise ValidationError(
            f"field dim {field.dim} != head input dim {params.dim}"
        )
    cache = _forward_cache(params, field.flat().astype(np.float64))
    return cache["z"], cache["logits"]


def loss_bce(logits: np.ndarray, labels: np.ndarray) -> float:
    l1 = np.asarray(logits)[:, 1]
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(expit(l1), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def _bce_grad_l1(l1: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = expit(l1)
    clamped = (p < PROB_CLAMP) | (p > 1.0 - PROB_CLAMP)
    g = (p - y) / l1.shape[0]
    g[clamped] = 0.0
    return g


def loss_dice(
    logits: np.ndarray, labels: np.ndarray, eps_dice: float = DICE_EPS
) -> float:
    p = expit(np.asarray(logits)[:, 1])
    y = np.asarray(labels, dtype=np.float64)
    numer = 2.0 * np.sum(p * y) + eps_dice
    denom = np.sum(p * p) + np.sum(y * y) + eps_dice
    return float(1.0 - numer / denom)


def _dice_grad_l1(l1: np.ndarray, y: np.ndarray, eps_dice: float) -> np.ndarray:
    p = expit(l1)
    numer = 2.0 * np.sum(p * y) + eps_dice
    denom = np.sum(p * p) + np.sum(y * y) + eps_dice
    dp = (numer * 2.0 * p - 2.0 * y * denom) / (denom * denom)
    return dp * p * (1.0 - p)


def _contrastive_sample(eligible: np.ndarray, cap: int, rng_seed: int) -> np.ndarray:
    # eligible is sorted ascending (canonical row-major order)
    if eligible.shape[0] <= cap:
        return eligible
    rng = np.random.default_rng(rng_seed)
    return np.sort(rng.choice(eligible, size=cap, replace=False))


def _contrastive_core(
    z: np.ndarray,
    labels: np.ndarray,
    temperature: float,
    cap: int,
    rng_seed: int,
    want_grad: bool,
):
    eligible = np.flatnonzero(np.linalg.norm(z, axis=1) > 0.5)
    idx = _contrastive_sample(eligible, cap, rng_seed)
    dz = np.zeros_like(z)
    if idx.shape[0] < 2:
        return 0.0, dz, True
    zs = z[idx]
    ys = np.asarray(labels)[idx]
    k = idx.shape[0]
    S = zs @ zs.T / temperature
    off = ~np.eye(k, dtype=bool)
    pos = (ys[:, None] == ys[None, :]) & off
    counts = pos.sum(axis=1)
    anchors = counts > 0
    if not anchors.any():
        return 0.0, dz, True

    Sd = np.where(off, S, -np.inf)
    row_max = Sd.max(axis=1)
    expv = np.exp(Sd - row_max[:, None])
    expv[~off] = 0.0
    denom = expv.sum(axis=1)
    log_denom = row_max + np.log(denom)
    pos_mean = np.where(anchors, (pos * S).sum(axis=1) / np.maximum(counts, 1), 0.0)
    terms = log_denom - pos_mean
    m = int(anchors.sum())
    loss = float(terms[anchors].mean())

    if want_grad:
        softmax = expv / denom[:, None]
        G = np.zeros((k, k))
        G[anchors] = (
            softmax[anchors] - pos[anchors] / counts[anchors, None]
        ) / m
        dzs = (G + G.T) @ zs / temperature
        dz[idx] = dzs
    return loss, dz, False


def loss_contrastive(
    z: np.ndarray,
    labels: np.ndarray,
    temperature: float = DEFAULT_TEMPERATURE,
    cap: int = DEFAULT_CONTRASTIVE_CAP,
    rng_seed: int = 0,
) -> tuple[float, bool]:
    """Supervised InfoNCE over a seeded subsample of non-degenerate patches.

    Returns (loss, degenerate): degenerate when no anchor has a positive.
    """
    loss, _, degen = _contrastive_core(
        z, labels, temperature, cap, rng_seed, want_grad=False
    )
    return loss, degen


def loss_total_and_grads(
    params: HeadParams,
    field: FeatureField,
    labels: np.ndarray,
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS,
    temperature: float = DEFAULT_TEMPERATURE,
    cap: int = DEFAULT_CONTRASTIVE_CAP,
    rng_seed: int = 0,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Total loss and analytic gradients w.r.t. every head parameter."""
    if field.dim != params.dim:
        raise ValidationError(
            f"field dim {field.dim} != head input dim {params.dim}"
        )
    w_con, w_dice, w_bce = weights
    flat = field.flat().astype(np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape[0] != flat.shape[0]:
        raise ValidationError("labels length does not match patch count")
    cache = _forward_cache(params, flat)
    l1 = cache["logits"][:, 1]

    bce = loss_bce(cache["logits"], y)
    dice = loss_dice(cache["logits"], y)
    con, dz_con, degen_con = _contrastive_core(
        cache["z"], y, temperature, cap, rng_seed, want_grad=True
    )
    total = w_con * con + w_dice * dice + w_bce * bce
    breakdown = LossBreakdown(
        con=con, dice=dice, bce=bce, total=total, degenerate_con=degen_con
    )

    d_l1 = w_bce * _bce_grad_l1(l1, y) + w_dice * _dice_grad_l1(l1, y, DICE_EPS)
    d_logits = np.zeros_like(cache["logits"])
    d_logits[:, 1] = d_l1

    d_z_raw = d_logits @ params.Wc
    ok = ~cache["degenerate"]
    if np.any(ok):
        dz = w_con * dz_con[ok]
        zn = cache["z"][ok]
        # normalization Jacobian: (I - z z^T) / ||z_raw|| applied row-wise
        d_z_raw[ok] += (dz - zn * np.sum(dz * zn, axis=1, keepdims=True)) / cache[
            "norms"
        ][ok, None]

    grads = {
        "Wc": d_logits.T @ cache["z_raw"],
        "bc": d_logits.sum(axis=0),
        "W2": d_z_raw.T @ cache["h"],
        "b2": d_z_raw.sum(axis=0),
    }
    d_h = d_z_raw @ params.W2
    d_h_pre = d_h * (cache["h_pre"] > 0.0)
    grads["W1"] = d_h_pre.T @ flat
    grads["b1"] = d_h_pre.sum(axis=0)
    return breakdown, grads


def adam_init(params: HeadParams, lr: float = 1e-3) -> AdamState:
    zeros = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    return AdamState(
        m=zeros,
        v={k: np.zeros_like(v) for k, v in params.as_dict().items()},
        step=0,
        lr=lr,
    )


def adam_step(
    state: AdamState, params: HeadParams, grads: dict[str, np.ndarray]
) -> tuple[AdamState, HeadParams]:
    """One Adam update; returns fresh state and parameters."""
    t = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    for name, p in params.as_dict().items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape mismatch for {name}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        new_m[name], new_v[name] = m, v
        new_p[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    next_state = AdamState(
        m=new_m, v=new_v, step=t,
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
    )
    return next_state, HeadParams(**new_p)


def save_head(params: HeadParams, path) -> None:
    params.validate()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<III", params.dim, params.hidden, params.embed))
        for name in _PARAM_ORDER:
            f.write(np.ascontiguousarray(getattr(params, name), dtype="<f4").tobytes())


def load_head(path) -> HeadParams:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    dim, hidden, embed = struct.unpack_from("<III", raw, 4)
    shapes = [
        (hidden, dim), (hidden,), (embed, hidden), (embed,), (2, embed), (2,),
    ]
    off = 16
    arrays = {}
    for name, shape in zip(_PARAM_ORDER, shapes):
        count = int(np.prod(shape))
        if len(raw) < off + 4 * count:
            raise FormatError(f"{path}: truncated at parameter {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        arrays[name] = arr.reshape(shape).astype(np.float64)
        off += 4 * count
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    params = HeadParams(**arrays)
    params.validate()
    return params
