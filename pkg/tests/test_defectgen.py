import hashlib
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cse.defectgen import (
    AnomalyMask,
    DefectConfig,
    DefectKind,
    PerlinParams,
    TextureCorpus,
    corrupt_blur,
    corrupt_structural,
    corrupt_textural,
    enabled_kinds,
    perlin_noise,
    sample_corruption,
    sample_mask,
    shuffle_patches,
    threshold_mask,
)
from cse.errors import ConfigurationError, GenerationError, RejectedInputError
from cse.numerics import derive_rng, gaussian_blur


def image(seed=0, size=32):
    return derive_rng(seed).random((3, size, size)).astype(np.float32)


def random_mask(seed=1, size=32, p=0.5):
    return AnomalyMask(derive_rng(seed).random((size, size)) < p)


def corpus(size=32, n=3):
    return TextureCorpus([derive_rng(100 + i).random((3, size, size)).astype(np.float32) for i in range(n)])


# --- Perlin noise and masks ---------------------------------------------------------

def test_perlin_deterministic():
    p = PerlinParams(4, 8, 1, 42)
    np.testing.assert_array_equal(perlin_noise(p, 64, 64), perlin_noise(p, 64, 64))


def test_perlin_range_over_many_seeds():
    lo, hi = np.inf, -np.inf
    for seed in range(1000):
        n = perlin_noise(PerlinParams(2 ** (seed % 4 + 1), 4, 1, seed), 32, 32)
        lo, hi = min(lo, n.min()), max(hi, n.max())
    assert -1.0 <= lo and hi <= 1.0


def test_perlin_zero_at_lattice_points():
    res = 4
    n = perlin_noise(PerlinParams(res, res, 1, 3), 64, 64)
    step = 64 // res
    np.testing.assert_allclose(n[::step, ::step], 0.0, atol=1e-6)


def test_perlin_rejects_lattice_finer_than_image():
    with pytest.raises(RejectedInputError):
        perlin_noise(PerlinParams(64, 64, 1, 0), 32, 32)


def test_threshold_boundaries():
    n = perlin_noise(PerlinParams(4, 4, 1, 9), 32, 32)
    assert threshold_mask(n, -1.0).coverage == 1.0
    assert threshold_mask(n, 1.0).coverage == 0.0


def test_threshold_coverage_pin():
    n = perlin_noise(PerlinParams(4, 4, 1, 123), 224, 224)
    m = threshold_mask(n, 0.5)
    assert int(m.data.sum()) == 2958
    assert m.coverage == 2958 / 224 ** 2


# --- corruption kinds ---------------------------------------------------------------

def test_textural_full_replacement_and_identity():
    img, src = image(0), image(1)
    full = AnomalyMask(np.ones((32, 32), bool))
    np.testing.assert_array_equal(corrupt_textural(img, src, full, 1.0).image, src)
    empty = AnomalyMask(np.zeros((32, 32), bool))
    np.testing.assert_array_equal(corrupt_textural(img, src, empty, 0.7).image, img)


def test_textural_half_opacity_single_pixel():
    img, src = image(0), image(1)
    m = np.zeros((32, 32), bool)
    m[5, 9] = True
    out = corrupt_textural(img, src, AnomalyMask(m), 0.5).image
    np.testing.assert_allclose(out[:, 5, 9], (img[:, 5, 9] + src[:, 5, 9]) / 2, atol=1e-7)


def test_textural_without_source_is_configuration_error():
    with pytest.raises(ConfigurationError):
        corrupt_textural(image(), None, random_mask(), 0.5)


def test_structural_empty_mask_is_identity():
    img = image()
    out = corrupt_structural(img, AnomalyMask(np.zeros((32, 32), bool)), 8, derive_rng(0)).image
    np.testing.assert_array_equal(out, img)


def test_shuffle_is_patch_bijection():
    img = image(2)
    out = shuffle_patches(img, 4, derive_rng(3))
    patches = lambda a: sorted(a[:, i:i + 8, j:j + 8].tobytes() for i in range(0, 32, 8) for j in range(0, 32, 8))
    assert patches(out) == patches(img)
    assert not np.array_equal(out, img)


def test_structural_seeded_pin():
    img = derive_rng(5).random((3, 32, 32)).astype(np.float32)
    m = AnomalyMask(derive_rng(6).random((32, 32)) > 0.5)
    a = corrupt_structural(img, m, 8, derive_rng(7)).image
    b = corrupt_structural(img, m, 8, derive_rng(7)).image
    np.testing.assert_array_equal(a, b)
    assert hashlib.sha256(a.tobytes()).hexdigest() == \
        "627e57d4390783703b8cd2daa8863b0e838e683ea255615d52d84e9a23deff6b"


def test_blur_empty_mask_and_constant_image():
    img = image()
    np.testing.assert_array_equal(
        corrupt_blur(img, AnomalyMask(np.zeros((32, 32), bool)), derive_rng(0)).image, img)
    flat = np.full((3, 32, 32), 0.3, np.float32)
    np.testing.assert_allclose(corrupt_blur(flat, random_mask(), derive_rng(0)).image, flat, atol=1e-6)


def test_blur_inside_mask_equals_full_blur():
    img, m = image(4), random_mask(5)
    s = corrupt_blur(img, m, derive_rng(6))
    assert s.spec.kernel_size % 2 == 1 and 5 <= s.spec.kernel_size <= 15
    assert 1.0 <= s.spec.sigma <= 4.0
    ref = gaussian_blur(img, s.spec.kernel_size, s.spec.sigma)
    np.testing.assert_allclose(s.image[:, m.data], ref[:, m.data], atol=1e-6)


# --- locality and range (property) --------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_outside_mask_bit_identical_and_in_range(seed):
    img = image(seed % 1000)
    s = sample_corruption(img, derive_rng(seed), None, corpus())
    outside = ~s.mask.data
    np.testing.assert_array_equal(s.image[:, outside], img[:, outside])
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert s.image.dtype == img.dtype


# --- sampling -----------------------------------------------------------------------

def test_sample_corruption_deterministic():
    img = image()
    a = sample_corruption(img, derive_rng(11), None, corpus())
    b = sample_corruption(img, derive_rng(11), None, corpus())
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask.data, b.mask.data)
    assert a.spec == b.spec


def test_sample_coverage_within_bounds():
    cfg = DefectConfig()
    for i in range(200):
        m = sample_mask(32, 32, derive_rng(12, i), cfg)
        assert cfg.coverage_range[0] <= m.coverage <= cfg.coverage_range[1]


def test_kind_frequencies_with_corpus():
    img, tex = image(), corpus()
    counts = Counter(sample_corruption(img, derive_rng(13, i), None, tex).spec.kind for i in range(3000))
    for kind in DefectKind:
        assert 0.30 <= counts[kind] / 3000 <= 0.37


def test_textural_disabled_without_corpus():
    assert enabled_kinds(DefectConfig(), None) == [DefectKind.STRUCTURAL, DefectKind.BLUR]
    img = image()
    counts = Counter(sample_corruption(img, derive_rng(14, i)).spec.kind for i in range(400))
    assert DefectKind.TEXTURAL not in counts
    assert 0.42 <= counts[DefectKind.BLUR] / 400 <= 0.58


def test_impossible_coverage_raises_generation_error():
    cfg = DefectConfig(threshold_range=(0.99, 0.999), coverage_range=(0.5, 0.6))
    with pytest.raises(GenerationError):
        sample_mask(32, 32, derive_rng(0), cfg)


def test_no_enabled_kind_is_configuration_error():
    with pytest.raises(ConfigurationError):
        sample_corruption(image(), derive_rng(0), DefectConfig(kinds=("textural",)))


def test_config_dict_round_trip():
    cfg = DefectConfig(coverage_range=(0.05, 0.2), kinds=("blur",))
    assert DefectConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        DefectConfig.from_dict({"bogus": 1})


def test_corpus_from_directory(tmp_path):
    from cse.features import to_uint8_image

    (tmp_path / "a").mkdir()
    to_uint8_image(image(0, 40)).save(tmp_path / "a" / "x.png")
    to_uint8_image(image(1, 40)).save(tmp_path / "y.jpg")
    tex = TextureCorpus.from_directory(tmp_path, (32, 32))
    assert len(tex) == 2
    assert tex.get(0, (3, 16, 16)).shape == (3, 16, 16)
    with pytest.raises(ConfigurationError):
        TextureCorpus.from_directory(tmp_path / "missing")
