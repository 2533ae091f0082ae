"""Gradient, optimizer, and clipping tests for the numerics substrate.

Every primitive's analytic gradient is checked against an independent
central-difference oracle (float64, h=1e-5) over 100 random seeds.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastic_dt.numerics import (
    NumericFault,
    ParamStore,
    Tensor,
    adamw_update,
    clip_global_norm,
    concat,
    cross_entropy_logits,
    embedding,
    expectile_l2,
    finite_diff_check,
    gelu,
    global_grad_norm,
    layer_norm,
    log_softmax,
    masked_mean,
    masked_softmax,
    matmul,
    reverse_gradient,
    softmax,
    take_along_last,
    tanh,
)


def numeric_grad(f, x, h=1e-5):
    """Central differences of a scalar-valued f at x, one coordinate at a time."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def analytic_grad(op, x):
    t = Tensor(x.astype(np.float64), requires_grad=True)
    loss = op(t).sum()
    loss.backward()
    return t.grad


def assert_matches_oracle(op, x, rtol=1e-6):
    a = analytic_grad(op, x)
    n = numeric_grad(lambda v: float(op(Tensor(v)).sum().data), x)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    assert np.max(np.abs(a - n) / denom) < rtol


PRIMITIVES = {
    "add": lambda t: t + 1.5,
    "mul": lambda t: t * 0.7,
    "div": lambda t: t / 1.3,
    "power": lambda t: (t + 3.0) ** 2.0,
    "tanh": tanh,
    "gelu": gelu,
    "softmax": lambda t: softmax(t) ** 2.0,  # plain sum of softmax is constant
    "log_softmax": log_softmax,
    "slice": lambda t: t[1:, ::2],
    "sum_axis": lambda t: t.sum(axis=0),
    "mean": lambda t: t.mean(),
    "reshape": lambda t: t.reshape(-1, 2),
    "transpose": lambda t: t.transpose((1, 0)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(100))
def test_primitive_gradients_match_central_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    assert_matches_oracle(PRIMITIVES[name], x)


@pytest.mark.parametrize("seed", range(100))
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))

    def loss_of(a_val, b_val):
        return float((matmul(Tensor(a_val), Tensor(b_val)) ** 2.0).sum().data)

    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    (matmul(ta, tb) ** 2.0).sum().backward()
    na = numeric_grad(lambda v: loss_of(v, b), a)
    nb = numeric_grad(lambda v: loss_of(a, v), b)
    assert np.allclose(ta.grad, na, rtol=1e-6, atol=1e-8)
    assert np.allclose(tb.grad, nb, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("seed", range(100))
def test_layer_norm_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5))
    gain = rng.normal(size=5)
    bias = rng.normal(size=5)

    def loss_of(xv, gv, bv):
        out = layer_norm(Tensor(xv), Tensor(gv), Tensor(bv))
        return float((out ** 2.0).sum().data)

    tx = Tensor(x, requires_grad=True)
    tg = Tensor(gain, requires_grad=True)
    tb = Tensor(bias, requires_grad=True)
    (layer_norm(tx, tg, tb) ** 2.0).sum().backward()
    assert np.allclose(tx.grad, numeric_grad(lambda v: loss_of(v, gain, bias), x), rtol=1e-5, atol=1e-8)
    assert np.allclose(tg.grad, numeric_grad(lambda v: loss_of(x, v, bias), gain), rtol=1e-5, atol=1e-8)
    assert np.allclose(tb.grad, numeric_grad(lambda v: loss_of(x, gain, v), bias), rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("seed", range(100))
def test_masked_softmax_and_expectile_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 6))
    mask = rng.random(size=(4, 6)) < 0.6
    mask[:, 0] = True  # every row keeps one entry

    def ms_loss(v):
        return float((masked_softmax(Tensor(v), mask) ** 2.0).sum().data)

    t = Tensor(x, requires_grad=True)
    (masked_softmax(t, mask) ** 2.0).sum().backward()
    assert np.allclose(t.grad, numeric_grad(ms_loss, x), rtol=1e-6, atol=1e-9)
    # gradient at masked positions is exactly zero
    assert np.all(t.grad[~mask] == 0.0)

    pred = rng.normal(size=8)
    target = rng.normal(size=8)
    # keep residuals away from the (harmless but non-smooth-looking) kink
    target = np.where(np.abs(target - pred) < 1e-3, pred + 0.1, target)
    tp = Tensor(pred, requires_grad=True)
    expectile_l2(tp, Tensor(target), alpha=0.9).sum().backward()
    n = numeric_grad(
        lambda v: float(expectile_l2(Tensor(v), Tensor(target), alpha=0.9).sum().data), pred
    )
    assert np.allclose(tp.grad, n, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_gather_gradients(seed):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(6, 3))
    idx = rng.integers(0, 6, size=(2, 4))
    t = Tensor(table, requires_grad=True)
    (embedding(t, idx) ** 2.0).sum().backward()
    n = numeric_grad(lambda v: float((embedding(Tensor(v), idx) ** 2.0).sum().data), table)
    assert np.allclose(t.grad, n, rtol=1e-6, atol=1e-9)

    logits = rng.normal(size=(3, 5))
    picks = rng.integers(0, 5, size=3)
    tl = Tensor(logits, requires_grad=True)
    take_along_last(tl, picks).sum().backward()
    n = numeric_grad(lambda v: float(take_along_last(Tensor(v), picks).sum().data), logits)
    assert np.allclose(tl.grad, n, rtol=1e-6, atol=1e-9)


def test_concat_and_cross_entropy_gradients():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 2))
    ta = Tensor(a, requires_grad=True)
    tb = Tensor(b, requires_grad=True)
    (concat([ta, tb], axis=1) ** 2.0).sum().backward()
    na = numeric_grad(
        lambda v: float((concat([Tensor(v), Tensor(b)], axis=1) ** 2.0).sum().data), a
    )
    assert np.allclose(ta.grad, na, rtol=1e-6)

    logits = rng.normal(size=(2, 4, 5))
    targets = rng.integers(0, 5, size=(2, 4))
    mask = np.array([[True, True, False, True], [True, False, False, True]])
    t = Tensor(logits, requires_grad=True)
    cross_entropy_logits(t, targets, mask).backward()
    n = numeric_grad(
        lambda v: float(cross_entropy_logits(Tensor(v), targets, mask).data), logits
    )
    assert np.allclose(t.grad, n, rtol=1e-5, atol=1e-9)
    assert np.all(t.grad[~mask] == 0.0)


# -- spec examples -------------------------------------------------------------


def test_reverse_gradient_linear_and_quadratic():
    store = ParamStore(np.float64)
    store.add("theta", np.array([[1.0, -2.0], [0.5, 4.0]]))
    grads = reverse_gradient(lambda p: p["theta"].sum(), store)
    assert np.array_equal(grads["theta"], np.ones((2, 2)))

    store2 = ParamStore(np.float64)
    store2.add("theta", np.array(3.0))
    grads2 = reverse_gradient(lambda p: (p["theta"] ** 2.0) * 0.5, store2)
    assert np.allclose(grads2["theta"], 3.0)


def test_numeric_fault_names_op():
    t = Tensor(np.array([1e300]), dtype=np.float64, requires_grad=True)
    with np.errstate(over="ignore"), pytest.raises(NumericFault) as exc:
        _ = (t * 1e300) * 1e300
    assert exc.value.op == "mul"


def test_adamw_first_step_and_decay():
    store = ParamStore(np.float64)
    store.add("w", np.array([0.0]))
    adamw_update(store, {"w": np.array([1.0])}, lr=0.1, wd=0.0)
    assert store.step == 1
    assert abs(store["w"].data[0] + 0.1) < 1e-8  # m_hat=g, v_hat=g^2 -> step of -lr

    store2 = ParamStore(np.float64)
    store2.add("w", np.array([1.0]))
    adamw_update(store2, {"w": np.array([0.0])}, lr=0.1, wd=0.5)
    assert np.allclose(store2["w"].data, 0.95)  # pure decoupled decay


def test_adamw_zero_grad_zero_decay_is_identity():
    store = ParamStore(np.float64)
    store.add("w", np.array([1.0, -2.0]))
    before = store["w"].data.copy()
    adamw_update(store, {"w": np.zeros(2)}, lr=0.1, wd=0.0)
    assert np.array_equal(store["w"].data, before)


@given(st.floats(0.01, 10.0), st.integers(0, 10**6))
@settings(max_examples=50, deadline=None)
def test_adamw_lr_zero_is_identity(wd, seed):
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    store.add("w", rng.normal(size=4))
    before = store["w"].data.copy()
    adamw_update(store, {"w": rng.normal(size=4)}, lr=0.0, wd=wd)
    assert np.array_equal(store["w"].data, before)


def test_adamw_shape_mismatch_rejected():
    store = ParamStore(np.float64)
    store.add("w", np.zeros(3))
    with pytest.raises(ValueError, match="shape"):
        adamw_update(store, {"w": np.zeros(4)}, lr=0.1)


def test_clip_examples():
    g = {"a": np.array([3.0, 4.0])}
    assert np.array_equal(clip_global_norm(g, 10.0)["a"], g["a"])
    clipped = clip_global_norm(g, 1.0)
    assert np.allclose(clipped["a"], [0.6, 0.8])
    zeros = {"a": np.zeros(4)}
    assert np.array_equal(clip_global_norm(zeros, 1.0)["a"], zeros["a"])


@given(st.integers(0, 10**6), st.floats(0.05, 5.0))
@settings(max_examples=100, deadline=None)
def test_clip_idempotent_and_bounded(seed, max_norm):
    rng = np.random.default_rng(seed)
    grads = {"a": rng.normal(size=5), "b": rng.normal(size=(2, 3))}
    once = clip_global_norm(grads, max_norm)
    twice = clip_global_norm(once, max_norm)
    for k in grads:
        assert np.array_equal(once[k], twice[k])
    assert global_grad_norm(once) <= max_norm * (1 + 1e-6)


def test_ops_deterministic():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(8, 8)).astype(np.float32)
    w = rng.normal(size=(8, 8)).astype(np.float32)

    def run():
        t = Tensor(x, requires_grad=True)
        out = (gelu(matmul(t, Tensor(w))) ** 2.0).mean()
        out.backward()
        return out.data.copy(), t.grad.copy()

    o1, g1 = run()
    o2, g2 = run()
    assert np.array_equal(o1, o2)
    assert np.array_equal(g1, g2)


def test_finite_diff_check_pass_and_negative_control():
    rng = np.random.default_rng(1)
    store = ParamStore(np.float64)
    store.add("w", rng.normal(size=(3, 2)))
    store.add("b", rng.normal(size=2))
    x = rng.normal(size=(4, 3))

    def loss_fn(p):
        out = tanh(matmul(Tensor(x), p["w"]) + p["b"])
        return (out ** 2.0).mean()

    report = finite_diff_check(loss_fn, store, h=1e-5, tol=1e-6)
    assert report.passed, report.summary()

    corrupted = {k: 2.0 * v for k, v in reverse_gradient(loss_fn, store).items()}
    report_bad = finite_diff_check(loss_fn, store, h=1e-5, tol=1e-6, analytic=corrupted)
    assert not report_bad.passed


def test_finite_diff_check_requires_float64():
    store = ParamStore(np.float32)
    store.add("w", np.ones(2))
    with pytest.raises(ValueError, match="float64"):
        finite_diff_check(lambda p: p["w"].sum(), store)


def test_masked_mean_value():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    mask = np.array([True, False, True, False])
    assert float(masked_mean(x, mask).data) == pytest.approx(2.0)
