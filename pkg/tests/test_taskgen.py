import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evomoe.taskgen import generate_stream, load_stream, random_orthogonal, save_stream, verify_stream


@given(seed=st.integers(0, 2**31), strength=st.floats(0, 3))
def test_random_orthogonal_rotates_every_vector_by_strength(seed, strength):
    r = np.random.default_rng(seed)
    q = random_orthogonal(8, strength, r)
    np.testing.assert_allclose(q.T @ q, np.eye(8), atol=1e-10)
    v = r.standard_normal(8)
    v /= np.linalg.norm(v)
    assert np.isclose(v @ q @ v, np.cos(strength), atol=1e-9)


def test_stream_is_deterministic_and_valid(small_stream):
    again = generate_stream(num_tasks=3, classes_per_task=4, samples_per_class=60, seed=7)
    for a, b in zip(small_stream.tasks, again.tasks):
        np.testing.assert_array_equal(a.train.x, b.train.x)
    rep = verify_stream(small_stream, min_class_angle_deg=15)
    assert rep.ok, rep.failures
    assert set(rep.checks) == {"label_disjoint", "orthogonal", "split_disjoint", "class_counts", "class_separation"}


def test_labels_disjoint_and_hard_task(default_stream):
    labels = np.concatenate([s.labels for s in default_stream.tasks])
    assert labels.size == np.unique(labels).size == 40
    assert [s.hard for s in default_stream.tasks] == [False, False, True, False, False]
    hard = default_stream[2]
    assert set(hard.train.domain) == {0, 1}
    assert len(default_stream[0].train.x) == 8 * 200 and len(default_stream[0].test.x) == 8 * 50


def test_verify_flags_broken_transform(small_stream):
    import copy

    broken = copy.deepcopy(small_stream)
    broken.tasks[0].transforms[0] = broken.tasks[0].transforms[0] * 1.01
    rep = verify_stream(broken)
    assert not rep.ok and rep.checks["orthogonal"] is False


def test_roundtrip_bundle(tmp_path, small_stream):
    path = tmp_path / "d.npz"
    save_stream(small_stream, path)
    loaded = load_stream(path)
    for a, b in zip(small_stream.tasks, loaded.tasks):
        np.testing.assert_array_equal(a.test.x, b.test.x)
        np.testing.assert_array_equal(a.transforms[0], b.transforms[0])
    assert loaded.params == small_stream.params


def test_impossible_separation_raises():
    with pytest.raises(ValueError):
        generate_stream(num_tasks=40, min_task_angle_deg=89, retries=3)


def _zero_shot_accuracy(stream, seed=0):
    from evomoe.trainer import TrainConfig, init_state
    from evomoe.evaluator import evaluate_stage

    acc, _ = evaluate_stage(init_state(stream, TrainConfig(seed=seed)), stream, "zero_shot")
    return acc


def test_no_shift_limit_gives_near_perfect_zero_shot():
    s = generate_stream(num_tasks=2, samples_per_class=30, shift=0.0, noise=0.01, seed=3)
    assert np.all(_zero_shot_accuracy(s) >= 0.99)


def test_default_zero_shot_band(default_stream):
    acc = _zero_shot_accuracy(default_stream)
    assert np.all((acc >= 0.4) & (acc <= 0.8)), acc


def test_transforms_preserve_norms_and_seeds_differ(small_stream):
    spec = small_stream[0]
    q = spec.transforms[0]
    x = np.random.default_rng(0).standard_normal((50, q.shape[0]))
    np.testing.assert_allclose(np.linalg.norm(x @ q.T, axis=1), np.linalg.norm(x, axis=1), atol=1e-9)
    other = generate_stream(num_tasks=3, classes_per_task=4, samples_per_class=60, seed=8)
    assert not np.array_equal(other[0].train.x, spec.train.x)


def test_overlapping_labels_fail_verification(small_stream):
    import copy

    broken = copy.deepcopy(small_stream)
    broken.tasks[1].label_offset = 0
    rep = verify_stream(broken)
    assert rep.checks["label_disjoint"] is False
