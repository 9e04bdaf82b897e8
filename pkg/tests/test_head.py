import math

import numpy as np
import pytest

from selfseg.errors import FormatError, ValidationError
from selfseg.head import (
    AdamState,
    HeadParams,
    adam_init,
    adam_step,
    head_forward,
    init_params,
    load_head,
    loss_bce,
    loss_contrastive,
    loss_dice,
    loss_total_and_grads,
    save_head,
)

from conftest import field_from_flat, random_unit_field


def zero_params(d, hidden, embed):
    return HeadParams(
        W1=np.zeros((hidden, d)),
        b1=np.zeros(hidden),
        W2=np.zeros((embed, hidden)),
        b2=np.zeros(embed),
        Wc=np.zeros((2, embed)),
        bc=np.zeros(2),
    )


# ---- independent straight-line forward oracle ----------------------------

def forward_oracle(params, flat):
    """Per-patch loops, no shared code with the implementation."""
    zs, ls = [], []
    for f in flat:
        h = [max(0.0, sum(params.W1[i][j] * f[j] for j in range(len(f)))
                 + params.b1[i]) for i in range(params.hidden)]
        z_raw = [sum(params.W2[i][j] * h[j] for j in range(params.hidden))
                 + params.b2[i] for i in range(params.embed)]
        nrm = math.sqrt(sum(v * v for v in z_raw))
        z = [0.0] * len(z_raw) if nrm < 1e-12 else [v / nrm for v in z_raw]
        logit = [sum(params.Wc[i][j] * z_raw[j] for j in range(params.embed))
                 + params.bc[i] for i in range(2)]
        zs.append(z)
        ls.append(logit)
    return np.array(zs), np.array(ls)


def contrastive_oracle(z, labels, temperature):
    """Brute-force double loop over all non-degenerate patches (no cap)."""
    keep = [i for i in range(len(z)) if np.linalg.norm(z[i]) > 0.5]
    terms = []
    for i in keep:
        pos = [j for j in keep if j != i and labels[j] == labels[i]]
        if not pos:
            continue
        denom = sum(
            math.exp(float(z[i] @ z[k]) / temperature) for k in keep if k != i
        )
        s = 0.0
        for j in pos:
            s += -math.log(
                math.exp(float(z[i] @ z[j]) / temperature) / denom
            )
        terms.append(s / len(pos))
    if not terms:
        return 0.0, True
    return sum(terms) / len(terms), False


# ---- forward pass ---------------------------------------------------------

def test_forward_zero_weights(rng):
    field = random_unit_field(rng, 2, 3, 4)
    params = zero_params(4, 5, 6)
    params.bc[:] = [0.25, -0.5]
    z, logits = head_forward(params, field)
    np.testing.assert_array_equal(z, 0.0)
    np.testing.assert_allclose(logits, np.tile([0.25, -0.5], (6, 1)))
    # degenerate embeddings are excluded from the contrastive loss
    loss, degen = loss_contrastive(z, np.array([1, 0, 1, 0, 1, 0]))
    assert loss == 0.0 and degen


def test_forward_identity_like(rng):
    d = 3
    field = random_unit_field(rng, 1, 4, d)
    params = HeadParams(
        W1=np.eye(d), b1=np.zeros(d),
        W2=np.eye(d), b2=np.zeros(d),
        Wc=np.zeros((2, d)), bc=np.zeros(2),
    )
    z, logits = head_forward(params, field)
    relu = np.maximum(field.flat().astype(np.float64), 0.0)
    expect = relu / np.linalg.norm(relu, axis=1, keepdims=True)
    np.testing.assert_allclose(z, expect, atol=1e-6)
    np.testing.assert_array_equal(logits, 0.0)


def test_forward_matches_oracle(rng):
    field = random_unit_field(rng, 3, 3, 6)
    params = init_params(6, hidden=5, embed=4, seed=3)
    z, logits = head_forward(params, field)
    zo, lo = forward_oracle(params, field.flat().astype(np.float64))
    np.testing.assert_allclose(z, zo, atol=1e-6)
    np.testing.assert_allclose(logits, lo, atol=1e-6)
    norms = np.linalg.norm(z, axis=1)
    np.testing.assert_allclose(norms[norms > 0.5], 1.0, atol=1e-6)


def test_forward_dim_mismatch(rng):
    with pytest.raises(ValidationError):
        head_forward(init_params(8), random_unit_field(rng, 2, 2, 4))


# ---- losses ----------------------------------------------------------------

def test_bce_zero_logits():
    logits = np.zeros((5, 2))
    assert loss_bce(logits, np.array([1, 0, 1, 0, 1])) == pytest.approx(
        math.log(2.0), abs=1e-9
    )


def test_bce_saturated_correct():
    logits = np.zeros((3, 2))
    logits[:, 1] = 50.0
    # probability clamp at 1 - 1e-7 leaves -ln(1 - 1e-7) ~ 1e-7 residual
    assert loss_bce(logits, np.ones(3)) == pytest.approx(0.0, abs=3e-7)


def test_bce_matches_direct_formula(rng):
    logits = rng.standard_normal((8, 2)) * 3
    y = rng.integers(0, 2, 8)
    direct = 0.0
    for l, yy in zip(logits[:, 1], y):
        p = 1.0 / (1.0 + math.exp(-l))
        p = min(max(p, 1e-7), 1 - 1e-7)
        direct -= yy * math.log(p) + (1 - yy) * math.log(1 - p)
    assert loss_bce(logits, y) == pytest.approx(direct / 8, abs=1e-7)


def test_dice_saturated():
    logits = np.zeros((4, 2))
    y = np.array([1, 0, 1, 1])
    logits[:, 1] = np.where(y == 1, 50.0, -50.0)
    assert loss_dice(logits, y) <= 1e-4


def test_dice_empty_rescue():
    logits = np.full((4, 2), -50.0)
    assert loss_dice(logits, np.zeros(4)) == pytest.approx(0.0, abs=1e-6)


def test_dice_hand_case():
    logits = np.zeros((2, 2))  # p = (0.5, 0.5)
    y = np.array([1, 0])
    # 1 - (2*0.5 + 1e-6) / (0.5 + 1 + 1e-6)
    assert loss_dice(logits, y) == pytest.approx(0.333333, abs=1e-5)


def test_contrastive_no_positives():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss, degen = loss_contrastive(z, np.array([1, 0]))
    assert loss == 0.0 and degen


def test_contrastive_softplus_anchor():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    labels = np.array([1, 1, 0])
    loss, degen = loss_contrastive(z, labels, temperature=1.0)
    assert not degen
    assert loss == pytest.approx(math.log(1.0 + math.exp(-1.0)), abs=1e-6)


def test_contrastive_matches_brute_force(rng):
    for _ in range(5):
        n = int(rng.integers(4, 12))
        z = rng.standard_normal((n, 3))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        labels = rng.integers(0, 2, n)
        loss, degen = loss_contrastive(z, labels, temperature=0.1, cap=1024)
        oracle, odegen = contrastive_oracle(z, labels, 0.1)
        assert degen == odegen
        assert loss == pytest.approx(oracle, abs=1e-6)


def test_total_loss_permutation_invariant(rng):
    field = random_unit_field(rng, 3, 4, 5)
    labels = rng.integers(0, 2, 12)
    params = init_params(5, hidden=4, embed=3, seed=1)
    b1, _ = loss_total_and_grads(params, field, labels, rng_seed=9)
    perm = rng.permutation(12)
    field2 = field_from_flat(field.flat()[perm], 3, 4)
    b2, _ = loss_total_and_grads(params, field2, labels[perm], rng_seed=9)
    assert b1.total == pytest.approx(b2.total, abs=1e-6)


def test_breakdown_invariant(rng):
    field = random_unit_field(rng, 2, 5, 4)
    labels = rng.integers(0, 2, 10)
    params = init_params(4, hidden=3, embed=3, seed=2)
    b, _ = loss_total_and_grads(params, field, labels)
    assert b.total == pytest.approx(
        0.1 * b.con + 1.0 * b.dice + 1.0 * b.bce, rel=1e-7
    )


def test_zero_gradient_at_symmetric_config():
    # p = y exactly (saturated) and all z identical per class:
    # dice/bce gradients vanish
    d = 2
    flat = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]] * 3)
    y = np.array([1, 1, 1, 0, 0, 0])
    params = HeadParams(
        W1=np.eye(d) * 5, b1=np.zeros(d),
        W2=np.eye(d) * 20, b2=np.zeros(d),
        Wc=np.array([[0.0, 0.0], [10.0, -10.0]]), bc=np.zeros(2),
    )
    field = field_from_flat(flat, 2, 3)
    _, grads = loss_total_and_grads(
        params, field, y, weights=(0.0, 1.0, 1.0)
    )
    for g in grads.values():
        assert np.max(np.abs(g)) < 1e-6


def fd_check(params, field, labels, rng_seed, h=1e-4):
    """Central finite differences on every coordinate of every parameter."""
    _, grads = loss_total_and_grads(params, field, labels, rng_seed=rng_seed)
    worst = 0.0
    for name in ("W1", "b1", "W2", "b2", "Wc", "bc"):
        arr = getattr(params, name)
        g = grads[name]
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + h
            up, _ = loss_total_and_grads(params, field, labels, rng_seed=rng_seed)
            arr[ix] = orig - h
            dn, _ = loss_total_and_grads(params, field, labels, rng_seed=rng_seed)
            arr[ix] = orig
            fd = (up.total - dn.total) / (2 * h)
            err = abs(g[ix] - fd)
            tol = max(1e-4 * max(abs(g[ix]), abs(fd)), 1e-6)
            worst = max(worst, err / tol)
            it.iternext()
    return worst


def sample_smooth_instance(rng, d=8, hidden=5, embed=4, n=12, margin=2e-3,
                           norm_floor=0.1):
    """Instance whose ReLU pre-activations stay clear of zero and whose
    embedding norms stay well above the finite-difference step, so central
    differences are valid everywhere (the normalization curvature blows up
    as ||z_raw|| approaches the step size)."""
    for _ in range(500):
        params = init_params(d, hidden=hidden, embed=embed, seed=int(rng.integers(2**31)))
        params.b1[:] = rng.uniform(-0.5, 0.5, hidden)
        flat = rng.standard_normal((n, d))
        flat /= np.linalg.norm(flat, axis=1, keepdims=True)
        field = field_from_flat(flat, 1, n)
        h_pre = flat @ params.W1.T + params.b1
        if np.min(np.abs(h_pre)) <= margin:
            continue
        h = np.maximum(h_pre, 0.0)
        z_raw = h @ params.W2.T + params.b2
        if np.min(np.linalg.norm(z_raw, axis=1)) <= norm_floor:
            continue
        labels = rng.integers(0, 2, n)
        if 0 < labels.sum() < n:
            return params, field, labels
    raise AssertionError("could not sample a kink-free instance")


def test_gradients_match_finite_differences(rng):
    for _ in range(3):
        params, field, labels = sample_smooth_instance(rng)
        assert fd_check(params, field, labels, rng_seed=7) <= 1.0


# ---- Adam -------------------------------------------------------------------

def test_adam_first_step_hand_values():
    params = zero_params(2, 2, 2)
    state = adam_init(params)
    grads = {k: np.ones_like(v) for k, v in params.as_dict().items()}
    state, new = adam_step(state, params, grads)
    assert state.step == 1
    assert state.m["W1"][0, 0] == pytest.approx(0.1)
    assert state.v["W1"][0, 0] == pytest.approx(0.001)
    # bias-corrected m_hat = 1, v_hat = 1 -> delta = -1e-3/(1+1e-8)
    assert new.W1[0, 0] == pytest.approx(-0.000999999, abs=1e-9)


def test_adam_zero_gradient_no_change(rng):
    params = init_params(3, hidden=2, embed=2, seed=0)
    state = adam_init(params)
    grads = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    _, new = adam_step(state, params, grads)
    for name in ("W1", "b1", "W2", "b2", "Wc", "bc"):
        np.testing.assert_array_equal(getattr(new, name), getattr(params, name))


def test_adam_two_steps_not_one_summed(rng):
    params = init_params(3, hidden=2, embed=2, seed=0)
    g1 = {k: rng.standard_normal(v.shape) for k, v in params.as_dict().items()}
    g2 = {k: rng.standard_normal(v.shape) for k, v in params.as_dict().items()}
    s = adam_init(params)
    s, p = adam_step(s, params, g1)
    _, p_two = adam_step(s, p, g2)
    gsum = {k: g1[k] + g2[k] for k in g1}
    _, p_one = adam_step(adam_init(params), params, gsum)
    assert not np.allclose(p_two.W1, p_one.W1)


# ---- checkpoint --------------------------------------------------------------

def test_checkpoint_round_trip_byte_exact(tmp_path):
    params = init_params(6, hidden=4, embed=3, seed=5)
    a, b = tmp_path / "a.sgh", tmp_path / "b.sgh"
    save_head(params, a)
    save_head(load_head(a), b)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:4] == b"SGH1"
    back = load_head(a)
    assert (back.dim, back.hidden, back.embed) == (6, 4, 3)


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "bad.sgh"
    path.write_bytes(b"XXXX" + b"\x00" * 12)
    with pytest.raises(FormatError):
        load_head(path)
    params = init_params(4, hidden=3, embed=2, seed=0)
    good = tmp_path / "good.sgh"
    save_head(params, good)
    path.write_bytes(good.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_head(path)
