import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cse.errors import DegenerateInputError, RejectedInputError
from cse.losses import (
    ALPHA,
    contrastive_loss,
    contrastive_loss_batch,
    cos_sim,
    reconstruction_loss,
    reconstruction_loss_batch,
    total_loss,
)
from cse.numerics import derive_rng, grad_check


def test_cos_sim_examples():
    a = derive_rng(0).normal(size=(4, 2, 2))
    assert cos_sim(a, a) == pytest.approx(1.0, abs=1e-6)
    assert cos_sim(a, -a) == pytest.approx(-1.0, abs=1e-6)
    assert cos_sim(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0


def test_cos_sim_zero_norm():
    with pytest.raises(DegenerateInputError):
        cos_sim(np.zeros(3), np.ones(3))
    with pytest.raises(RejectedInputError):
        cos_sim(np.ones(3), np.ones(4))


@settings(max_examples=50, deadline=None)
@given(c=st.floats(1e-3, 1e3), seed=st.integers(0, 2 ** 32 - 1))
def test_cos_sim_scale_invariant(c, seed):
    a, b = derive_rng(seed).normal(size=(2, 16))
    assert abs(cos_sim(c * a, b) - cos_sim(a, b)) < 1e-6


def test_contrastive_examples():
    e = derive_rng(1).normal(size=(64, 7, 7))
    assert contrastive_loss(e, e, False) == pytest.approx(0.0, abs=1e-6)
    assert contrastive_loss(e, -e, True) == pytest.approx(0.0, abs=1e-6)
    assert contrastive_loss(e, e, True) == pytest.approx(2.0, abs=1e-6)
    assert contrastive_loss(e, e, False) + contrastive_loss(e, e, True) == 2.0


def test_contrastive_range():
    rng = derive_rng(2)
    for i in range(2000):
        a, b = rng.normal(size=(2, 8))
        assert 0.0 <= contrastive_loss(a, b, bool(i % 2)) <= 2.0


def test_total_loss_examples():
    assert total_loss(0.0, 0.0, 10) == 0.0
    assert total_loss(1.5, 0.2, 10) == pytest.approx(3.5, abs=1e-6)
    assert ALPHA == 10.0
    with pytest.raises(RejectedInputError):
        total_loss(1.0, 1.0, 0.0)


def test_reconstruction_examples():
    f = [derive_rng(3).normal(size=(5, 3, 3))]
    assert reconstruction_loss(f, [x.copy() for x in f]) == 0.0
    assert reconstruction_loss([np.full((1, 1, 1), 3.0)], [np.full((1, 1, 1), 1.0)]) == 1.0
    with pytest.raises(RejectedInputError):
        reconstruction_loss(f, [np.zeros((5, 3, 4))])


def naive_reconstruction(features, recon, squared=False):
    total = 0.0
    for f, r in zip(features, recon):
        c, h, w = f.shape
        acc = 0.0
        for i in range(h):
            for j in range(w):
                sq = sum((f[k, i, j] - r[k, i, j]) ** 2 for k in range(c))
                acc += 0.5 * (sq if squared else np.sqrt(sq))
        total += acc / (h * w)
    return total


@pytest.mark.parametrize("squared", [False, True])
def test_reconstruction_matches_loop(squared):
    rng = derive_rng(4)
    for _ in range(5):
        f = [rng.normal(size=s) for s in ((6, 4, 4), (10, 2, 2))]
        r = [rng.normal(size=s) for s in ((6, 4, 4), (10, 2, 2))]
        assert reconstruction_loss(f, r, squared) == pytest.approx(naive_reconstruction(f, r, squared), abs=1e-6)


def test_reconstruction_nonnegative_and_zero_iff_equal():
    rng = derive_rng(5)
    f = [rng.normal(size=(3, 2, 2))]
    r = [f[0].copy()]
    r[0][1, 0, 1] += 1e-3
    assert reconstruction_loss(f, r) > 0.0


@pytest.mark.parametrize("squared", [False, True])
def test_reconstruction_batch_gradient(squared):
    rng = derive_rng(6)
    feats = [rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 4, 1, 1))]
    per_image, _ = reconstruction_loss_batch(feats, [f + 1 for f in feats], squared)
    for n in range(2):
        expect = reconstruction_loss([f[n] for f in feats], [f[n] + 1 for f in feats], squared)
        assert per_image[n] == pytest.approx(expect, abs=1e-9)

    def fn(params, _):
        rec = [params["r0"], params["r1"]]
        loss, grads = reconstruction_loss_batch(feats, rec, squared)
        return loss.sum(), {"r0": grads[0], "r1": grads[1]}

    params = {"r0": rng.normal(size=feats[0].shape), "r1": rng.normal(size=feats[1].shape)}
    assert grad_check(fn, params, None) < 1e-3


def test_contrastive_batch_gradient():
    rng = derive_rng(7)
    labels = np.array([True, False, True])

    def fn(params, _):
        loss, gk, gm = contrastive_loss_batch(params["k"], params["m"], labels)
        return loss.sum(), {"k": gk, "m": gm}

    params = {"k": rng.normal(size=(3, 2, 2, 2)), "m": rng.normal(size=(3, 2, 2, 2))}
    assert grad_check(fn, params, None) < 1e-3
    loss, _, _ = contrastive_loss_batch(params["k"], params["m"], labels)
    for i in range(3):
        assert loss[i] == pytest.approx(contrastive_loss(params["k"][i], params["m"][i], labels[i]), abs=1e-12)
