import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evomoe import autodiff as ad
from evomoe.errors import ConfigError, ConsistencyError, FrozenParameterError
from evomoe.moe import (
    ExpertPool,
    load_balance_loss,
    moe_forward,
    new_router,
    resize_router,
    top_k_mask,
    top_p_mask,
    top_p_select,
)


def brute_force_top_p(p, p0):
    """Scan the descending order (ties by lower index) until the mass exceeds p0."""
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))
    chosen, total = [], 0.0
    for i in order:
        chosen.append(i)
        total += p[i]
        if total > p0:
            break
    return chosen


@given(
    n=st.integers(1, 12),
    seed=st.integers(0, 2**31),
    p0=st.floats(0.01, 1.0),
)
def test_top_p_matches_brute_force(n, seed, p0):
    p = np.random.default_rng(seed).dirichlet(np.ones(n))
    res = top_p_select(p, p0)
    assert list(res.selected) == brute_force_top_p(p, p0)
    assert abs(res.weights.sum() - 1.0) < 1e-12
    off = np.setdiff1d(np.arange(n), res.selected)
    assert np.all(res.weights[off] == 0)


def test_top_p_hand_examples():
    assert list(top_p_select([0.5, 0.3, 0.2], 0.6).selected) == [0, 1]
    np.testing.assert_allclose(top_p_select([0.5, 0.3, 0.2], 0.6).weights, [0.625, 0.375, 0])
    # exactly p0 is not "exceeding"
    assert list(top_p_select([0.6, 0.4], 0.6).selected) == [0, 1]
    assert list(top_p_select([0.7, 0.3], 0.6).selected) == [0]
    # ties go to the lower index
    assert list(top_p_select([0.25, 0.25, 0.25, 0.25], 0.3).selected) == [0, 1]
    # p0 = 1 keeps everyone
    assert top_p_mask(np.array([[0.9, 0.05, 0.05]]), 1.0).all()


def test_top_p_rejects_bad_threshold():
    with pytest.raises(ConfigError):
        top_p_mask(np.array([[1.0]]), 0.0)


def test_top_k_mask():
    np.testing.assert_array_equal(top_k_mask(np.array([[0.1, 0.5, 0.4]]), 2), [[False, True, True]])


def naive_lb(counts, probs_sum, total, betas):
    n = len(counts)
    return n * sum(betas[i] * (counts[i] / total) * (probs_sum[i] / total) for i in range(n))


@given(seed=st.integers(0, 2**31), n=st.integers(1, 10), total=st.integers(1, 300))
def test_balance_loss_matches_naive(seed, n, total):
    r = np.random.default_rng(seed)
    counts = r.integers(0, total + 1, n).astype(float)
    psum = r.dirichlet(np.ones(n)) * total
    betas = r.choice([1.0, 0.6], n)
    got = load_balance_loss(counts, psum, total, betas).item()
    assert abs(got - naive_lb(counts, psum, total, betas)) < 1e-12


def test_balance_loss_gradient_flows_through_q_only():
    psum = ad.tensor(np.array([3.0, 1.0]), requires_grad=True)
    loss = load_balance_loss([2, 2], psum, 4, [1.0, 0.6])
    ad.backward(loss)
    # d/dQsum = N * beta * f / total
    np.testing.assert_allclose(psum.grad, [2 * 1.0 * 0.5 / 4, 2 * 0.6 * 0.5 / 4])


def test_pool_and_router_shapes():
    with pytest.raises(ConfigError):
        ExpertPool(2, 8, 8)
    store = ad.ParamStore()
    pool = ExpertPool(1, 8, 2)
    for _ in range(3):
        pool.new_expert(store, 0, 0, np.ones((8, 2)), np.zeros((2, 8)))
    r = new_router(store, 0, 0, 8, pool.ids(0))
    assert r.width == 3
    r.weight.assign(np.arange(24.0).reshape(8, 3))
    resize_router(r, add=[7], remove=[1])
    assert r.expert_ids == [0, 2, 7]
    np.testing.assert_array_equal(r.weight.data[:, :2], np.arange(24.0).reshape(8, 3)[:, [0, 2]])
    assert np.all(r.weight.data[:, 2] == 0)
    r.freeze()
    with pytest.raises(FrozenParameterError):
        resize_router(r, add=[8])
    with pytest.raises(ConsistencyError):
        moe_forward(ad.tensor(np.zeros((1, 8))), pool.experts(0)[:2], r)


def test_frozen_expert_cannot_be_removed():
    store = ad.ParamStore()
    pool = ExpertPool(1, 8, 2)
    e = pool.new_expert(store, 0, 0, np.ones((8, 2)), np.zeros((2, 8)))
    e.freeze()
    with pytest.raises(FrozenParameterError):
        pool.remove(store, 0, e.id)


def test_moe_forward_matches_manual_mixture(rng):
    store = ad.ParamStore()
    pool = ExpertPool(1, 6, 2)
    for _ in range(3):
        pool.new_expert(store, 0, 0, rng.standard_normal((6, 2)), rng.standard_normal((2, 6)))
    r = new_router(store, 0, 0, 6, pool.ids(0))
    r.weight.assign(rng.standard_normal((6, 3)))
    x = rng.standard_normal((4, 6))
    out = moe_forward(ad.tensor(x), pool.experts(0), r, p0=0.6)
    logits = x @ r.weight.data + r.bias.data
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    want = x.copy()
    for b in range(4):
        sel = top_p_select(p[b], 0.6)
        for i in sel.selected:
            e = pool.experts(0)[i]
            want[b] += sel.weights[i] * (x[b] @ e.down.data @ e.up.data)
    np.testing.assert_allclose(out.y.data, want, atol=1e-12)


def test_zero_up_projection_is_identity(rng):
    store = ad.ParamStore()
    pool = ExpertPool(1, 6, 2)
    pool.new_expert(store, 0, 0, rng.standard_normal((6, 2)), np.zeros((2, 6)))
    r = new_router(store, 0, 0, 6, pool.ids(0))
    x = rng.standard_normal((3, 6))
    np.testing.assert_array_equal(moe_forward(ad.tensor(x), pool.experts(0), r).y.data, x)
