import sys

import numpy as np
import pytest

from cse import features, toydata
from cse.model import DecoderConfig, DecoderMode, EmbedderConfig, init_decoder, init_embedder
from cse.training import PairFeatures, forward_backward


@pytest.fixture(scope="session")
def stub():
    return features.load_backbone("stub")


@pytest.fixture(scope="session")
def toy_tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy") / "weave"
    return toydata.write_mvtec_tree(root, n_train=12, n_test_good=4, n_test_bad=4, seed=0)


# a reduced model: layers (6,4,4) + (10,2,2) fuse to 16 x 4 x 4, embedding 4 x 2 x 2
SMALL_SHAPES = ((6, 4, 4), (10, 2, 2))


def small_models(seed=0, mode=DecoderMode.RANDOM_FROZEN, hidden=(8,), out=4):
    emb = init_embedder(EmbedderConfig(16, hidden, out), seed)
    dec = init_decoder(DecoderConfig(SMALL_SHAPES, out, 8, mode, seed))
    return emb, dec


def small_pairs(rng, n=2, dtype=np.float64):
    anchors = [rng.normal(size=(n, *s)).astype(dtype) for s in SMALL_SHAPES]
    partners = [rng.normal(size=(n, *s)).astype(dtype) for s in SMALL_SHAPES]
    return PairFeatures(anchors, partners, rng.random(n) < 0.5)


def total_loss_fn(embedder, decoder, alpha=10.0, squared=False):
    """``forward_fn(params, pairs)`` over the trainable tensors, for ``grad_check``."""

    def fn(params, pf):
        e = embedder.with_tensors({k[9:]: v for k, v in params.items() if k.startswith("embedder.")})
        d = decoder.with_tensors({k[8:]: v for k, v in params.items() if k.startswith("decoder.")})
        bd, grads = forward_backward(e, d, pf, alpha, squared, "train")
        return bd.total, grads

    return fn


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
