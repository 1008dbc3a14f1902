import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from evomoe import pges


def random_spd(r, d):
    a = r.standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


def component(mean, cov):
    L = np.linalg.cholesky(cov)
    return pges.GaussianComponent(mean, cov, L, 2 * np.log(np.diag(L)).sum(), 10, 0.0)


def test_hand_example():
    c = component(np.zeros(2), np.diag([4.0, 1.0]))
    assert c.mahalanobis_sq(np.array([2.0, 0.0]))[0] == 1.0
    protos = pges.TaskPrototypeSet(0, [c])
    assert pges.task_score(np.array([2.0, 0.0]), protos) == pytest.approx(-0.5 - 0.5 * np.log(4.0), abs=1e-15)


@given(seed=st.integers(0, 2**31), d=st.integers(1, 8))
def test_score_matches_explicit_inverse(seed, d):
    r = np.random.default_rng(seed)
    cov = random_spd(r, d)
    mu = r.standard_normal(d)
    x = r.standard_normal(d) * 2
    c = component(mu, cov)
    diff = x - mu
    want = -0.5 * diff @ np.linalg.inv(cov) @ diff - 0.5 * np.linalg.slogdet(cov)[1]
    assert abs(pges.task_score(x, pges.TaskPrototypeSet(0, [c])) - want) < 1e-8 * max(1, abs(want))


@given(seed=st.integers(0, 2**31), d=st.integers(2, 6))
def test_rotation_equivariance(seed, d):
    r = np.random.default_rng(seed)
    R = special_ortho_group.rvs(d, random_state=seed % 2**32)
    cov, mu, x = random_spd(r, d), r.standard_normal(d), r.standard_normal(d)
    a = pges.task_score(x, pges.TaskPrototypeSet(0, [component(mu, cov)]))
    b = pges.task_score(R @ x, pges.TaskPrototypeSet(0, [component(R @ mu, R @ cov @ R.T)]))
    assert abs(a - b) < 1e-8 * max(1, abs(a))


def test_score_is_max_over_components():
    c1 = component(np.zeros(2), np.eye(2))
    c2 = component(np.array([10.0, 0.0]), np.eye(2))
    p = pges.TaskPrototypeSet(0, [c1, c2])
    x = np.array([[0.0, 0.0], [10.0, 0.0]])
    np.testing.assert_allclose(pges.task_score(x, p), [0.0, 0.0])


def test_kmeans_separates_blobs():
    r = np.random.default_rng(0)
    a = r.normal(0, 0.1, (30, 3))
    b = r.normal(5, 0.1, (40, 3))
    assign, centers = pges.kmeans(np.vstack([a, b]), 2, seed=1)
    assert len(set(assign[:30])) == 1 and len(set(assign[30:])) == 1 and assign[0] != assign[-1]
    assign2, _ = pges.kmeans(np.vstack([a, b]), 2, seed=1)
    np.testing.assert_array_equal(assign, assign2)


def test_kmeans_reduces_k_for_tiny_inputs():
    assign, centers = pges.kmeans(np.array([[0.0], [1.0]]), 3)
    assert centers.shape[0] == 2


def test_degenerate_points_give_floor_regularisation():
    pts = np.ones((5, 3))
    c = pges.GaussianComponent.fit(pts)
    np.testing.assert_allclose(c.cov, 1e-6 * np.eye(3))


def test_fit_uses_unbiased_covariance_plus_shrinkage():
    r = np.random.default_rng(2)
    pts = r.standard_normal((50, 4))
    c = pges.GaussianComponent.fit(pts)
    raw = np.cov(pts, rowvar=False)
    lam = max(1e-3 * np.trace(raw) / 4, 1e-6)
    np.testing.assert_allclose(c.cov, raw + lam * np.eye(4), atol=1e-12)
    np.testing.assert_allclose(c.inverse, np.linalg.inv(c.cov), rtol=1e-8)


def test_identify_task_and_fallback():
    p0 = pges.TaskPrototypeSet(0, [component(np.zeros(2), np.eye(2))])
    p1 = pges.TaskPrototypeSet(1, [component(np.array([6.0, 0.0]), np.eye(2))])
    x = np.array([[0.1, 0.0], [5.9, 0.0], [3.0, 40.0]])
    dec = pges.identify_task(x, [p0, p1], delta=-50.0)
    assert dec.task.tolist() == [0, 1, pges.FALLBACK]
    assert pges.identify_task(x, [p0, p1], np.inf).fallback.all()


def test_calibrated_threshold_is_min_of_percentiles():
    r = np.random.default_rng(0)
    a, b = r.normal(0, 1, 100), r.normal(5, 1, 100)
    assert pges.calibrate_threshold([a, b], 0.5) == min(np.percentile(a, 0.5), np.percentile(b, 0.5))
    with pytest.raises(ValueError):
        pges.calibrate_threshold([np.zeros(3)])


def test_small_clusters_are_merged():
    pts = np.vstack([np.zeros((10, 2)) + np.random.default_rng(0).normal(0, 0.1, (10, 2)), [[9.0, 9.0]]])
    assign = np.array([0] * 10 + [1])
    p = pges.build_prototypes(pts, assign)
    assert p.K == 1 and p.components[0].count == 11


def test_percentile_examples():
    assert pges.calibrate_threshold([np.arange(1.0, 101.0)], 0.5) == pytest.approx(1.5, abs=0.01)
    assert pges.calibrate_threshold([np.arange(1.0, 101.0)], 0.0) == 1.0
    assert pges.calibrate_threshold([np.full(20, 3.0), np.full(20, 5.0)]) == 3.0
