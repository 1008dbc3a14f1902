import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evomoe import autodiff as ad
from evomoe.errors import DimensionError, LookupFailure, NonFiniteError, ShapeError


def fd_grad(f, x, h=1e-6):
    """Independent central differences; ``f`` takes a plain array."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def autodiff_grad(build, x):
    t = ad.tensor(x.copy(), requires_grad=True)
    out = build(t)
    ad.backward(out)
    return t.grad


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


W = np.random.default_rng(0).standard_normal((3, 4))

UNARY = {
    "add": lambda t: ad.sum(ad.mul(ad.add(t, W[0]), W[1])),
    "sub": lambda t: ad.sum(ad.mul(ad.sub(W[0], t), W[2])),
    "mul": lambda t: ad.sum(ad.mul(t, t)),
    "div": lambda t: ad.sum(ad.div(W[0], ad.add(ad.mul(t, t), 1.0))),
    "tanh": lambda t: ad.sum(ad.mul(ad.tanh(t), W[1])),
    "exp": lambda t: ad.sum(ad.exp(ad.mul(t, 0.3))),
    "log": lambda t: ad.sum(ad.log(ad.add(ad.mul(t, t), 0.5))),
    "sqrt": lambda t: ad.sum(ad.sqrt(ad.add(ad.mul(t, t), 0.1))),
    "mean": lambda t: ad.mean(ad.mul(t, ad.tanh(t))),
    "softmax": lambda t: ad.sum(ad.mul(ad.softmax(ad.reshape(t, (1, 4))), W[0])),
    "log_softmax": lambda t: ad.sum(ad.mul(ad.log_softmax(ad.reshape(t, (1, 4))), W[1])),
    "take": lambda t: ad.sum(ad.mul(ad.take(t, np.array([0, 2, 2])), np.array([1.0, -2.0, 0.5]))),
    "matmul": lambda t: ad.sum(ad.tanh(ad.matmul(ad.reshape(t, (1, 4)), W.T))),
    "ce": lambda t: ad.label_smoothed_ce(t, 2, 0.2),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def test_op_gradient_matches_finite_differences(name, x):
    x = np.array(x)
    build = UNARY[name]
    got = autodiff_grad(build, x)
    want = fd_grad(lambda a: build(ad.tensor(a)).item(), x)
    assert rel_err(got, want) < 1e-6


@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 10_000),
)
def test_broadcast_gradients_are_unbroadcast(rows, cols, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((rows, cols))
    b = r.standard_normal(cols)
    ta = ad.tensor(a, requires_grad=True)
    tb = ad.tensor(b, requires_grad=True)
    ad.backward(ad.sum(ad.mul(ad.add(ta, tb), ad.div(ta, ad.add(ad.mul(tb, tb), 1.0)))))
    fa = fd_grad(lambda v: np.sum((v + b) * v / (b * b + 1)), a)
    fb = fd_grad(lambda v: np.sum((a + v) * a / (v * v + 1)), b)
    assert tb.grad.shape == b.shape
    assert rel_err(ta.grad, fa) < 1e-6 and rel_err(tb.grad, fb) < 1e-6


def test_sum_axis_keepdims_gradient(rng):
    x = rng.standard_normal((3, 5))
    build = lambda t: ad.sum(ad.mul(ad.sum(t, axis=1, keepdims=True), ad.sum(t, axis=0)))
    got = autodiff_grad(build, x)
    want = fd_grad(lambda a: build(ad.tensor(a)).item(), x)
    assert rel_err(got, want) < 1e-6


def test_reused_node_accumulates_gradient():
    t = ad.tensor(np.array([3.0]), requires_grad=True)
    y = ad.mul(t, t)
    ad.backward(ad.sum(ad.add(y, y)))
    assert t.grad[0] == pytest.approx(12.0)


def test_backward_requires_scalar():
    t = ad.tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(ad.mul(t, 2.0))


def test_deep_chain_does_not_recurse():
    t = ad.tensor(np.array([0.5]), requires_grad=True)
    y = t
    for _ in range(5000):
        y = ad.add(y, 0.0)
    ad.backward(ad.sum(y))
    assert t.grad[0] == 1.0


def test_stable_softmax_survives_huge_logits():
    p = ad.stable_softmax(np.array([1000.0, 1000.0, -1000.0]))
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0])
    with pytest.raises(DimensionError):
        ad.stable_softmax(np.array([]))


def test_label_smoothed_ce_matches_formula(rng):
    z = rng.standard_normal((4, 5))
    y = np.array([0, 3, 1, 4])
    q = np.full((4, 5), 0.2 / 4)
    q[np.arange(4), y] = 0.8
    logp = z - z.max(1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(1, keepdims=True))
    want = -(q * logp).sum() / 4
    assert ad.label_smoothed_ce(ad.tensor(z), y, 0.2).item() == pytest.approx(want, abs=1e-12)


def test_label_smoothed_ce_unbatched_equals_batch_of_one(rng):
    z = rng.standard_normal(6)
    a = ad.label_smoothed_ce(ad.tensor(z), 2).item()
    b = ad.label_smoothed_ce(ad.tensor(z[None]), [2]).item()
    assert a == b


def test_ce_rejects_out_of_range_target():
    with pytest.raises(IndexError):
        ad.label_smoothed_ce(ad.tensor(np.zeros(3)), 3)


def naive_adamw(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * wd * p
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


@given(seed=st.integers(0, 10_000), wd=st.sampled_from([0.0, 0.01]))
def test_adamw_matches_reference(seed, wd):
    r = np.random.default_rng(seed)
    p0 = r.standard_normal(5)
    grads = [r.standard_normal(5) for _ in range(7)]
    store = ad.ParamStore()
    p = store.create("w", p0)
    state = ad.AdamWState(lr=1e-2, weight_decay=wd)
    for g in grads:
        p.grad = g.copy()
        ad.adamw_step(store, state)
    np.testing.assert_allclose(p.data, naive_adamw(p0, grads, lr=1e-2, wd=wd), rtol=0, atol=1e-12)
    assert np.all(p.grad == 0)


def test_first_adam_step_moves_by_lr():
    store = ad.ParamStore()
    p = store.create("w", np.zeros(3))
    p.grad = np.array([5.0, -0.1, 1e-3])
    ad.adamw_step(store, ad.AdamWState(lr=0.01))
    np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], atol=1e-7)


def test_adamw_skips_frozen_and_rejects_nan():
    store = ad.ParamStore()
    a = store.create("a", np.ones(2))
    b = store.create("b", np.ones(2), frozen=True)
    a.grad = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteError, match="'a'"):
        ad.adamw_step(store, ad.AdamWState())
    a.grad = np.ones(2)
    ad.adamw_step(store, ad.AdamWState())
    assert np.all(b.data == 1.0) and np.all(a.data < 1.0)


def test_param_store_lookup_and_duplicates():
    store = ad.ParamStore()
    store.create("x", np.zeros(1))
    with pytest.raises(KeyError):
        store.create("x", np.zeros(1))
    with pytest.raises(LookupFailure):
        store["missing"]


def test_reset_rows_keeps_surviving_moments():
    st_ = ad.AdamWState()
    st_.m["r"] = np.arange(6.0).reshape(2, 3)
    st_.v["r"] = np.arange(6.0).reshape(2, 3) + 10
    st_.reset_rows("r", np.array([0, 2, -1]), (2, 3), axis=1)
    np.testing.assert_array_equal(st_.m["r"], [[0, 2, 0], [3, 5, 0]])
    np.testing.assert_array_equal(st_.v["r"], [[10, 12, 0], [13, 15, 0]])
