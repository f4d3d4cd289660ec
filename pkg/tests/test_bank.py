import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cse.bank import (
    ClusterBank,
    KMeansConfig,
    anomaly_score,
    build_bank,
    cosine_distances,
    kmeans_pp_init,
    lloyd,
    load_bank,
    save_bank,
    score_batch,
)
from cse.errors import ConfigurationError, CorruptFileError, DegenerateInputError, RejectedInputError
from cse.numerics import derive_rng


def two_blobs(seed=0, n=50, d=8):
    rng = derive_rng(seed)
    c1, c2 = np.zeros(d), np.zeros(d)
    c1[0], c2[1] = 10.0, 10.0
    a = c1 + rng.normal(0, 0.1, size=(n, d))
    b = c2 + rng.normal(0, 0.1, size=(n, d))
    return a, b


def test_k1_is_the_mean():
    e = derive_rng(1).normal(size=(20, 4, 2, 2))
    bank = build_bank(e, 1)
    np.testing.assert_allclose(bank.centroids[0], e.reshape(20, -1).mean(axis=0), atol=1e-6)


def test_k_equals_n_recovers_points():
    e = derive_rng(2).normal(size=(6, 5))
    bank = build_bank(e, 6)
    for row in e:
        assert np.abs(bank.centroids - row).sum(axis=1).min() < 1e-12


def test_two_blob_recovery():
    a, b = two_blobs()
    bank = build_bank(np.concatenate([a, b]), 2, KMeansConfig(seed=3))
    truth = np.stack([a.mean(axis=0), b.mean(axis=0)])
    order = np.argsort(bank.centroids[:, 0])[::-1]
    np.testing.assert_allclose(bank.centroids[order], truth, atol=1e-3)


def test_build_bank_deterministic_and_k_checks():
    x = derive_rng(4).normal(size=(30, 6))
    a = build_bank(x, 3, KMeansConfig(seed=5))
    b = build_bank(x, 3, KMeansConfig(seed=5))
    np.testing.assert_array_equal(a.centroids, b.centroids)
    with pytest.raises(ConfigurationError):
        build_bank(x, 31)
    with pytest.raises(ConfigurationError):
        build_bank(x, 0)


def test_lloyd_inertia_non_increasing():
    x = derive_rng(6).normal(size=(200, 4))
    init = kmeans_pp_init(x, 5, derive_rng(7))
    _, _, history = lloyd(x, init, 50, 0.0)
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_score_examples():
    c = derive_rng(8).normal(size=(1, 10))
    bank = ClusterBank(c)
    assert anomaly_score(c[0], bank).score == pytest.approx(0.0, abs=1e-12)
    assert anomaly_score(-c[0], bank).score == pytest.approx(2.0, abs=1e-12)


def test_score_exhaustive_min():
    rng = derive_rng(9)
    bank = ClusterBank(rng.normal(size=(3, 12)))
    for _ in range(50):
        e = rng.normal(size=12)
        brute = min(1 - c @ e / (np.linalg.norm(c) * np.linalg.norm(e)) for c in bank.centroids)
        r = anomaly_score(e, bank)
        assert r.score == pytest.approx(brute, abs=1e-12)
        assert r.distances[r.nearest_cluster] == r.score


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), scale=st.floats(1e-3, 1e3))
def test_score_properties(seed, scale):
    rng = derive_rng(seed)
    cents = rng.normal(size=(4, 6))
    e = rng.normal(size=6)
    small, big = ClusterBank(cents[:2]), ClusterBank(cents)
    s = anomaly_score(e, small).score
    assert 0.0 <= s <= 2.0
    assert anomaly_score(e, big).score <= s
    assert anomaly_score(scale * e, small).score == pytest.approx(s, abs=1e-9)


def test_score_rejections():
    bank = ClusterBank(np.ones((1, 4)))
    with pytest.raises(DegenerateInputError):
        anomaly_score(np.zeros(4), bank)
    with pytest.raises(RejectedInputError):
        cosine_distances(np.ones(5), bank)
    with pytest.raises(DegenerateInputError):
        ClusterBank(np.zeros((1, 4)))


def test_bank_round_trip(tmp_path):
    bank = build_bank(derive_rng(10).normal(size=(9, 4)), 2, digest="abc")
    save_bank(bank, tmp_path / "b")
    again = load_bank(tmp_path / "b")
    np.testing.assert_array_equal(again.centroids, bank.centroids)
    assert again.digest == "abc"
    e = derive_rng(11).normal(size=(5, 4))
    np.testing.assert_array_equal(score_batch(e, again), score_batch(e, bank))
    (tmp_path / "t").write_bytes((tmp_path / "b").read_bytes()[:30])
    with pytest.raises(CorruptFileError):
        load_bank(tmp_path / "t")
