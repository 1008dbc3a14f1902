import numpy as np
import pytest

from evomoe import autodiff as ad
from evomoe.backbone import ClassEmbeddingTable, FrozenEncoder, LogitHead, zero_shot_logits
from evomoe.errors import LookupFailure, ShapeError


def test_encoder_is_seeded_and_read_only():
    a, b = FrozenEncoder(seed=3), FrozenEncoder(seed=3)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != FrozenEncoder(seed=4).fingerprint()
    with pytest.raises(ValueError):
        a.weights[0][0, 0] = 1.0


def test_encode_matches_differentiable_forward(rng):
    enc = FrozenEncoder(seed=0, taps=3)
    x = rng.standard_normal((5, 16))
    feat, taps = enc.encode(x)
    assert len(taps) == 3
    np.testing.assert_array_equal(enc.forward(x).data, feat)
    np.testing.assert_allclose(enc.encode(x[0])[0], feat[0], atol=1e-14)


def test_identity_tap_changes_nothing(rng):
    enc = FrozenEncoder(seed=0)
    x = rng.standard_normal((4, 16))
    seen = []
    out = enc.forward(x, lambda layer, h: (seen.append(layer), h)[1])
    assert seen == [0, 1]
    np.testing.assert_array_equal(out.data, enc.features(x))


def test_encoder_rejects_wrong_width():
    with pytest.raises(ShapeError):
        FrozenEncoder(seed=0).encode(np.zeros(5))


def test_class_table_disjoint_labels():
    t = ClassEmbeddingTable()
    t.add_task(0, [0, 1], np.eye(2, 4))
    with pytest.raises(ValueError):
        t.add_task(1, [1, 2], np.eye(2, 4))
    with pytest.raises(LookupFailure):
        t.embeddings(5)
    np.testing.assert_allclose(np.linalg.norm(t.embeddings(0), axis=1), 1.0)


def test_zero_shot_logits_are_scaled_cosines(rng):
    t = ClassEmbeddingTable()
    emb = rng.standard_normal((3, 8))
    t.add_task(0, [0, 1, 2], emb)
    f = rng.standard_normal((2, 8))
    want = 10 * (f / np.linalg.norm(f, axis=1, keepdims=True)) @ (emb / np.linalg.norm(emb, axis=1, keepdims=True)).T
    np.testing.assert_allclose(zero_shot_logits(f, t, 0), want, atol=1e-12)
    head = LogitHead(10.0)
    np.testing.assert_allclose(head.logits(ad.tensor(f), t.embeddings(0)).data, want, atol=1e-12)
