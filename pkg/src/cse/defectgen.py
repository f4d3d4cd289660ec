"""Synthetic defects blended into clean images through thresholded Perlin masks.

Images are ``3 x H x W`` float32 arrays in ``[0, 1]``. Every corruption keeps
the pixels outside the mask bit-identical to the input: the blended result is
written through ``np.where(mask, blended, image)`` rather than by arithmetic on
the whole frame.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, GenerationError, RejectedInputError
from .numerics import gaussian_blur

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

# Random-gradient 2-D Perlin noise peaks at sqrt(2)/2; rescale to span [-1, 1].
_PERLIN_SCALE = math.sqrt(2.0)


class DefectKind(str, enum.Enum):
    TEXTURAL = "textural"
    STRUCTURAL = "structural"
    BLUR = "blur"


@dataclass(frozen=True)
class PerlinParams:
    grid_res_x: int
    grid_res_y: int
    octaves: int = 1
    seed: int = 0


@dataclass(frozen=True)
class AnomalyMask:
    data: np.ndarray  # H x W, bool

    @property
    def coverage(self) -> float:
        return float(self.data.mean())


@dataclass(frozen=True)
class DefectSpec:
    kind: DefectKind
    beta: float
    texture_index: int | None = None
    grid: int | None = None
    kernel_size: int | None = None
    sigma: float | None = None


@dataclass(frozen=True)
class CorruptedSample:
    image: np.ndarray
    mask: AnomalyMask
    spec: DefectSpec
    is_defective: bool = True


@dataclass
class DefectConfig:
    """Sampling ranges for :func:`sample_corruption`."""

    threshold_range: tuple[float, float] = (0.3, 0.7)
    coverage_range: tuple[float, float] = (0.02, 0.35)
    beta_range: tuple[float, float] = (0.2, 1.0)
    perlin_resolutions: tuple[int, ...] = (2, 4, 8, 16)
    octaves: int = 1
    structural_grid: int = 8
    blur_kernel_range: tuple[int, int] = (5, 15)
    blur_sigma_range: tuple[float, float] = (1.0, 4.0)
    max_attempts: int = 20
    kinds: tuple[str, ...] = ("textural", "structural", "blur")

    @classmethod
    def from_dict(cls, d: dict) -> "DefectConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown defect config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


# --- Perlin noise -------------------------------------------------------------

def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


def _perlin_octave(rng: np.random.Generator, res_y: int, res_x: int, h: int, w: int) -> np.ndarray:
    angles = rng.uniform(0.0, 2 * np.pi, size=(res_y + 1, res_x + 1))
    gy, gx = np.sin(angles), np.cos(angles)

    ys = np.arange(h) * (res_y / h)
    xs = np.arange(w) * (res_x / w)
    iy = np.minimum(np.floor(ys).astype(np.int64), res_y - 1)
    ix = np.minimum(np.floor(xs).astype(np.int64), res_x - 1)
    fy = (ys - iy)[:, None]
    fx = (xs - ix)[None, :]
    iy, ix = iy[:, None], ix[None, :]

    def corner(dy, dx):
        return gy[iy + dy, ix + dx] * (fy - dy) + gx[iy + dy, ix + dx] * (fx - dx)

    n00, n01 = corner(0, 0), corner(0, 1)
    n10, n11 = corner(1, 0), corner(1, 1)
    u, v = _fade(fx), _fade(fy)
    top = n00 + u * (n01 - n00)
    bottom = n10 + u * (n11 - n10)
    return top + v * (bottom - top)


def perlin_noise(params: PerlinParams, h: int, w: int) -> np.ndarray:
    """Fractal Perlin field in ``[-1, 1]``; octave ``o`` doubles the lattice.

    The single-octave field is exactly zero at lattice points
    ``(i * h / res_y, j * w / res_x)``.
    """
    top_y = params.grid_res_y * 2 ** (params.octaves - 1)
    top_x = params.grid_res_x * 2 ** (params.octaves - 1)
    if params.octaves < 1 or params.grid_res_x < 1 or params.grid_res_y < 1:
        raise RejectedInputError("Perlin resolution and octaves must be >= 1")
    if top_y > h or top_x > w:
        raise RejectedInputError(
            f"Perlin lattice {top_y}x{top_x} is finer than the {h}x{w} image")
    rng = np.random.default_rng(np.random.SeedSequence(int(params.seed)))
    total = np.zeros((h, w), dtype=np.float64)
    amp_sum = 0.0
    for o in range(params.octaves):
        amp = 0.5 ** o
        total += amp * _perlin_octave(rng, params.grid_res_y * 2 ** o, params.grid_res_x * 2 ** o, h, w)
        amp_sum += amp
    field = np.clip(total * (_PERLIN_SCALE / amp_sum), -1.0, 1.0)
    return field.astype(np.float32)


def threshold_mask(noise: np.ndarray, threshold: float) -> AnomalyMask:
    return AnomalyMask(noise > threshold)


# --- corruption kinds ---------------------------------------------------------

def _check_image(image: np.ndarray) -> None:
    if image.ndim != 3:
        raise RejectedInputError(f"image must be C x H x W, got {image.shape}")


def _blend(image: np.ndarray, source: np.ndarray, mask: AnomalyMask, beta: float) -> np.ndarray:
    if mask.data.shape != image.shape[1:]:
        raise RejectedInputError(f"mask {mask.data.shape} does not match image {image.shape[1:]}")
    b = image.dtype.type(beta)
    blended = b * source.astype(image.dtype, copy=False) + (image.dtype.type(1) - b) * image
    out = np.where(mask.data[None], np.clip(blended, 0, 1), image)
    return out.astype(image.dtype, copy=False)


def corrupt_textural(image: np.ndarray, source_texture: np.ndarray | None, mask: AnomalyMask,
                     beta: float, texture_index: int | None = None) -> CorruptedSample:
    _check_image(image)
    if source_texture is None:
        raise ConfigurationError("textural corruption needs a texture source")
    if source_texture.shape != image.shape:
        raise RejectedInputError(
            f"texture {source_texture.shape} must be resized to the image {image.shape} first")
    if not 0.0 < beta <= 1.0:
        raise RejectedInputError(f"opacity must lie in (0, 1], got {beta}")
    out = _blend(image, source_texture, mask, beta)
    return CorruptedSample(out, mask, DefectSpec(DefectKind.TEXTURAL, beta, texture_index=texture_index))


def shuffle_patches(image: np.ndarray, grid: int, rng: np.random.Generator) -> np.ndarray:
    """Cut the image into ``grid x grid`` patches and reorder them (never identity)."""
    c, h, w = image.shape
    if grid < 1 or h % grid or w % grid:
        raise RejectedInputError(f"grid {grid} does not divide image dims {h}x{w}")
    ph, pw = h // grid, w // grid
    patches = image.reshape(c, grid, ph, grid, pw).transpose(1, 3, 0, 2, 4).reshape(grid * grid, c, ph, pw)
    n = grid * grid
    perm = rng.permutation(n)
    if n > 1 and np.array_equal(perm, np.arange(n)):
        perm = np.roll(perm, 1)
    shuffled = patches[perm]
    return shuffled.reshape(grid, grid, c, ph, pw).transpose(2, 0, 3, 1, 4).reshape(c, h, w)


def corrupt_structural(image: np.ndarray, mask: AnomalyMask, grid: int, rng: np.random.Generator,
                       beta: float = 1.0) -> CorruptedSample:
    _check_image(image)
    source = shuffle_patches(image, grid, rng)
    out = _blend(image, source, mask, beta)
    return CorruptedSample(out, mask, DefectSpec(DefectKind.STRUCTURAL, beta, grid=grid))


def corrupt_blur(image: np.ndarray, mask: AnomalyMask, rng: np.random.Generator,
                 kernel_range: tuple[int, int] = (5, 15),
                 sigma_range: tuple[float, float] = (1.0, 4.0)) -> CorruptedSample:
    _check_image(image)
    odd = np.arange(kernel_range[0] | 1, kernel_range[1] + 1, 2)
    k = int(rng.choice(odd))
    sigma = float(rng.uniform(*sigma_range))
    source = gaussian_blur(image, k, sigma)
    out = _blend(image, source, mask, 1.0)
    return CorruptedSample(out, mask, DefectSpec(DefectKind.BLUR, 1.0, kernel_size=k, sigma=sigma))


# --- texture corpus -----------------------------------------------------------

def discover_images(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"image directory not found: {root}")
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


class TextureCorpus:
    """Anomaly-source textures, already at the working resolution.

    Build from a directory (DTD or any image folder, discovered recursively
    and sorted) with :meth:`from_directory`, or from in-memory arrays.
    """

    def __init__(self, textures: Sequence[np.ndarray]):
        if len(textures) == 0:
            raise ConfigurationError("texture corpus is empty")
        self.textures = [np.asarray(t, dtype=np.float32) for t in textures]

    @classmethod
    def from_directory(cls, root, size: tuple[int, int] = (224, 224)) -> "TextureCorpus":
        from .features import load_image  # local import: features pulls in the backbone code

        paths = discover_images(root)
        if not paths:
            raise ConfigurationError(f"no texture images under {root}")
        return cls([load_image(p, size, profile="crop") for p in paths])

    def __len__(self) -> int:
        return len(self.textures)

    def get(self, index: int, shape: tuple[int, ...]) -> np.ndarray:
        from .numerics import resize_bilinear

        t = self.textures[index]
        if t.shape != tuple(shape):
            t = resize_bilinear(t, shape[1], shape[2]).astype(np.float32)
        return t


# --- sampling -----------------------------------------------------------------

def enabled_kinds(config: DefectConfig, textures: TextureCorpus | None) -> list[DefectKind]:
    kinds = [DefectKind(k) for k in config.kinds]
    if textures is None:
        kinds = [k for k in kinds if k is not DefectKind.TEXTURAL]
    if not kinds:
        raise ConfigurationError("no defect kind is enabled")
    return kinds


def sample_mask(h: int, w: int, rng: np.random.Generator, config: DefectConfig) -> AnomalyMask:
    lo, hi = config.coverage_range
    for _ in range(config.max_attempts):
        res = [r for r in config.perlin_resolutions if r * 2 ** (config.octaves - 1) <= min(h, w)]
        if not res:
            raise ConfigurationError(f"no Perlin resolution fits a {h}x{w} image")
        params = PerlinParams(int(rng.choice(res)), int(rng.choice(res)), config.octaves,
                              int(rng.integers(2 ** 63)))
        threshold = float(rng.uniform(*config.threshold_range))
        mask = threshold_mask(perlin_noise(params, h, w), threshold)
        if lo <= mask.coverage <= hi:
            return mask
    raise GenerationError(
        f"{config.max_attempts} consecutive masks fell outside coverage [{lo}, {hi}]; "
        "check threshold and coverage bounds")


def sample_corruption(image: np.ndarray, rng: np.random.Generator, config: DefectConfig | None = None,
                      textures: TextureCorpus | None = None) -> CorruptedSample:
    """Draw a fresh defect: kind uniformly, then mask, opacity and kind parameters."""
    config = config or DefectConfig()
    _check_image(image)
    kinds = enabled_kinds(config, textures)
    kind = kinds[int(rng.integers(len(kinds)))]
    mask = sample_mask(image.shape[1], image.shape[2], rng, config)
    if kind is DefectKind.TEXTURAL:
        idx = int(rng.integers(len(textures)))
        beta = float(rng.uniform(*config.beta_range))
        return corrupt_textural(image, textures.get(idx, image.shape), mask, beta, texture_index=idx)
    if kind is DefectKind.STRUCTURAL:
        beta = float(rng.uniform(*config.beta_range))
        return corrupt_structural(image, mask, config.structural_grid, rng, beta=beta)
    return corrupt_blur(image, mask, rng, config.blur_kernel_range, config.blur_sigma_range)
