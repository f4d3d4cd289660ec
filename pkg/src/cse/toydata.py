"""Procedural texture corpora for smoke tests, demos and the desk-scale benchmark.

``woven_texture`` draws one sample of a single surface category: oriented
stripes crossed with a faint checker, with a random phase, slight orientation
and color jitter, plus pixel noise. ``source_texture`` draws anomaly sources
(smoothed colored noise) to stand in for a DTD-style texture corpus.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .defectgen import DefectConfig, TextureCorpus, sample_corruption
from .features import to_uint8_image
from .numerics import derive_rng, gaussian_blur


def woven_texture(rng: np.random.Generator, size: int = 224, period: float = 6.5,
                  checker: float = 20.0) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.deg2rad(rng.uniform(-1, 1))
    phase = rng.uniform(0, 2 * np.pi)
    u = x * np.cos(theta) + y * np.sin(theta)
    stripes = np.sin(2 * np.pi * u / period + phase)
    ox, oy = rng.uniform(0, checker, size=2)
    chk = np.where((np.floor((x + ox) / checker) + np.floor((y + oy) / checker)) % 2 == 0, 1.0, -1.0)
    lum = 0.5 + 0.22 * stripes + 0.05 * chk
    base = np.array([0.55, 0.45, 0.35]) + rng.normal(0, 0.02, size=3)
    img = lum[None] * (base[:, None, None] / 0.5)
    img += rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def source_texture(rng: np.random.Generator, size: int = 224) -> np.ndarray:
    noise = rng.random((3, size, size))
    sigma = rng.uniform(1.0, 4.0)
    smooth = gaussian_blur(noise, 2 * int(3 * sigma) + 1, sigma)
    lo, hi = smooth.min(), smooth.max()
    return ((smooth - lo) / (hi - lo + 1e-12)).astype(np.float32)


def make_corpus(n: int, seed: int, size: int = 224) -> list[np.ndarray]:
    return [woven_texture(derive_rng(seed, i), size) for i in range(n)]


def make_source_corpus(n: int, seed: int, size: int = 224) -> TextureCorpus:
    return TextureCorpus([source_texture(derive_rng(seed, 10_000 + i), size) for i in range(n)])


def corrupt_all(images: Sequence[np.ndarray], seed: int, config: DefectConfig | None = None,
                textures: TextureCorpus | None = None) -> list[np.ndarray]:
    return [sample_corruption(img, derive_rng(seed, i), config, textures).image
            for i, img in enumerate(images)]


def write_mvtec_tree(root, n_train: int = 20, n_test_good: int = 6, n_test_bad: int = 6,
                     seed: int = 0, size: int = 224) -> Path:
    """Write an MVTec-style category: ``train/good``, ``test/good``, ``test/synthetic``."""
    root = Path(root)
    train = make_corpus(n_train, seed, size)
    test_good = make_corpus(n_test_good, seed + 1, size)
    bad_src = make_corpus(n_test_bad, seed + 2, size)
    test_bad = corrupt_all(bad_src, seed + 3, textures=make_source_corpus(4, seed + 4, size))
    for sub, imgs in (("train/good", train), ("test/good", test_good), ("test/synthetic", test_bad)):
        d = root / sub
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(imgs):
            to_uint8_image(img).save(d / f"{i:03d}.png")
    return root
