"""Frozen backbone adapters, image preprocessing and multi-layer feature fusion."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, RejectedInputError
from .numerics import derive_rng, resize_bilinear

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# (name, in_channels, out_channels, stride); every layer is a 3x3 conv followed by abs.
STUB_LAYERS = (
    ("stem", 3, 32, 2),
    ("block1", 32, 48, 2),
    ("block2", 48, 48, 1),
    ("block3", 48, 96, 2),
    ("block4", 96, 96, 1),
    ("block5", 96, 136, 2),
    ("block7", 136, 384, 2),
)
STUB_TAPS = ("block5", "block7")


# --- preprocessing --------------------------------------------------------------

def preprocess(img: Image.Image, size: tuple[int, int] = (224, 224), profile: str = "crop") -> np.ndarray:
    """PIL image -> ``3 x H x W`` float32 in ``[0, 1]``.

    ``"crop"`` resizes to ``size * 256/224`` then center-crops to ``size``
    (256 -> 224 for the default). ``"resize"`` resizes straight to ``size``.
    """
    img = img.convert("RGB")
    h, w = size
    if profile == "crop":
        rh, rw = round(h * 256 / 224), round(w * 256 / 224)
        img = img.resize((rw, rh), Image.BILINEAR)
        top, left = (rh - h) // 2, (rw - w) // 2
        img = img.crop((left, top, left + w, top + h))
    elif profile == "resize":
        img = img.resize((w, h), Image.BILINEAR)
    else:
        raise ConfigurationError(f"unknown preprocessing profile {profile!r}")
    arr = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_image(path, size: tuple[int, int] = (224, 224), profile: str = "crop") -> np.ndarray:
    with Image.open(path) as img:
        return preprocess(img, size, profile)


def to_uint8_image(arr: np.ndarray) -> Image.Image:
    """Inverse of :func:`preprocess` up to quantization, for writing PNGs."""
    hwc = np.clip(np.rint(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    return Image.fromarray(hwc)


# --- feature containers ----------------------------------------------------------

@dataclass
class FeatureStack:
    """Per-image backbone features, shallowest first and deepest last."""

    layers: list[np.ndarray]

    def __post_init__(self):
        if not self.layers:
            raise RejectedInputError("feature stack is empty")

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(l.shape[-3:]) for l in self.layers]


def fuse_features(stack: FeatureStack | Sequence[np.ndarray]) -> np.ndarray:
    """Upscale every layer to the largest spatial size and concatenate channels.

    Accepts a :class:`FeatureStack` (``C x H x W`` layers) or a sequence of
    batched ``N x C x H x W`` layers; the channel axis is ``-3`` either way.
    """
    layers = stack.layers if isinstance(stack, FeatureStack) else list(stack)
    if not layers:
        raise RejectedInputError("feature stack is empty")
    h = max(l.shape[-2] for l in layers)
    w = max(l.shape[-1] for l in layers)
    parts = [l if l.shape[-2:] == (h, w) else resize_bilinear(l, h, w) for l in layers]
    return np.concatenate(parts, axis=-3)


# --- backbones ------------------------------------------------------------------

def _conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    """Dense 3x3 convolution with zero padding 1 via im2col. ``x`` is ``C x H x W``."""
    c, _, _ = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(p, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1:3]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * 9)
    out = cols @ weight + bias
    return np.ascontiguousarray(out.T).reshape(-1, ho, wo)


class StubBackbone:
    """Seeded stack of strided random 3x3 convolutions standing in for a CNN.

    At a 224x224 input the ``block5`` and ``block7`` taps yield 136x14x14 and
    384x7x7, the same shapes as the deep EfficientNet-b3 layers. Weights are
    He-normal, regenerated from the seed on every load; the stem filters are
    made zero-mean per input channel. Each layer is rectified with ``abs``, an
    energy response that keeps both polarities of an edge.
    """

    def __init__(self, seed: int = 7):
        self.seed = int(seed)
        self.weights = []
        for i, (_, cin, cout, _) in enumerate(STUB_LAYERS):
            rng = derive_rng(self.seed, i)
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cin * 9, cout)).astype(np.float32)
            b = rng.normal(0.0, 0.05, size=cout).astype(np.float32)
            if i == 0:
                # zero-mean stem filters respond to texture, not brightness
                w = w.reshape(cin, 9, cout)
                w -= w.mean(axis=1, keepdims=True)
                w = w.reshape(cin * 9, cout)
            self.weights.append((w, b))

    @property
    def output_names(self) -> list[str]:
        return [name for name, *_ in STUB_LAYERS]

    def run(self, taps: Sequence[str], batch: np.ndarray) -> list[np.ndarray]:
        outs: dict[str, list[np.ndarray]] = {t: [] for t in taps}
        last = _last_tap(taps)
        # one image at a time so a batch is bit-identical to single calls
        for img in batch:
            x = img
            for (name, _, _, stride), (w, b) in zip(STUB_LAYERS, self.weights):
                x = np.abs(_conv3x3(x, w, b, stride))
                if name in outs:
                    outs[name].append(x)
                if name == last:
                    break
        return [np.stack(outs[t]) for t in taps]


def _last_tap(taps: Sequence[str]) -> str:
    order = [name for name, *_ in STUB_LAYERS]
    return max(taps, key=order.index)


class OnnxBackbone:
    """ONNX Runtime session exposing intermediate tensors as named outputs."""

    def __init__(self, path: str | Path, input_name: str | None = None, threads: int | None = None):
        try:
            import onnxruntime as ort
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise ConfigurationError("onnxruntime is required for ONNX backbones") from exc
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"backbone file not found: {path}")
        opts = ort.SessionOptions()
        threads = threads or int(os.environ.get("CSE_THREADS", "0") or 0)
        if threads:
            opts.intra_op_num_threads = threads
        try:
            self.session = ort.InferenceSession(str(path), opts, providers=["CPUExecutionProvider"])
        except Exception as exc:  # onnxruntime raises its own untyped failures
            raise ConfigurationError(f"cannot load backbone {path}: {exc}") from exc
        self.input_name = input_name or self.session.get_inputs()[0].name

    @property
    def output_names(self) -> list[str]:
        return [o.name for o in self.session.get_outputs()]

    def run(self, taps: Sequence[str], batch: np.ndarray) -> list[np.ndarray]:
        outs = self.session.run(list(taps), {self.input_name: batch.astype(np.float32)})
        return [np.asarray(o, dtype=np.float32) for o in outs]


@dataclass
class BackboneAdapter:
    source: str
    tap_points: list[str]
    declared_shapes: list[tuple[int, int, int]]
    input_size: tuple[int, int] = (224, 224)
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    seed: int | None = None
    runner: object = field(default=None, repr=False, compare=False)

    def descriptor(self) -> dict:
        d = {
            "source": self.source,
            "tap_points": list(self.tap_points),
            "declared_shapes": [list(s) for s in self.declared_shapes],
            "input_size": list(self.input_size),
            "mean": list(self.mean),
            "std": list(self.std),
        }
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    def normalize(self, batch: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, np.float32)[None, :, None, None]
        std = np.asarray(self.std, np.float32)[None, :, None, None]
        return (batch.astype(np.float32, copy=False) - mean) / std

    def extract(self, batch: np.ndarray) -> list[np.ndarray]:
        """Batched extraction: one ``N x c_l x h_l x w_l`` array per tap."""
        if batch.ndim != 4 or batch.shape[1] != 3 or tuple(batch.shape[2:]) != tuple(self.input_size):
            raise RejectedInputError(
                f"expected N x 3 x {self.input_size[0]} x {self.input_size[1]}, got {batch.shape}")
        return self.runner.run(self.tap_points, self.normalize(batch))


def stub_shapes(input_size: tuple[int, int]) -> dict[str, tuple[int, int, int]]:
    h, w = input_size
    shapes = {}
    for name, _, cout, stride in STUB_LAYERS:
        h, w = -(-h // stride), -(-w // stride)
        shapes[name] = (cout, h, w)
    return shapes


def load_backbone(descriptor: dict | str) -> BackboneAdapter:
    """Build an adapter from a descriptor dict, a descriptor ``.json`` file,
    a path to an ``.onnx`` file or ``"stub"``.

    Declared shapes are checked against one forward pass on a blank image.
    """
    if isinstance(descriptor, (str, Path)) and str(descriptor).endswith(".json"):
        try:
            descriptor = json.loads(Path(descriptor).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read backbone descriptor {descriptor}: {exc}") from exc
    if isinstance(descriptor, (str, Path)):
        descriptor = {"source": str(descriptor)}
    d = dict(descriptor)
    source = str(d.get("source", "stub"))
    input_size = tuple(d.get("input_size", (224, 224)))
    mean = tuple(d.get("mean", IMAGENET_MEAN))
    std = tuple(d.get("std", IMAGENET_STD))
    seed = None
    if source == "stub":
        seed = int(d.get("seed", 7))
        runner = StubBackbone(seed)
        taps = list(d.get("tap_points", STUB_TAPS))
        default_shapes = stub_shapes(input_size)
        missing = [t for t in taps if t not in default_shapes]
        if missing:
            raise ConfigurationError(f"stub backbone has no tap point(s) {missing}")
        declared = d.get("declared_shapes") or [default_shapes[t] for t in taps]
    else:
        runner = OnnxBackbone(source, d.get("input_name"))
        taps = list(d.get("tap_points") or [])
        if not taps:
            raise ConfigurationError("ONNX backbone descriptor needs tap_points")
        missing = [t for t in taps if t not in runner.output_names]
        if missing:
            raise ConfigurationError(
                f"tap point(s) {missing} not exposed by {source}; outputs are {runner.output_names}")
        declared = d.get("declared_shapes")
        if not declared:
            raise ConfigurationError("ONNX backbone descriptor needs declared_shapes")
    declared = [tuple(int(v) for v in s) for s in declared]
    if len(declared) != len(taps):
        raise ConfigurationError("declared_shapes and tap_points differ in length")

    adapter = BackboneAdapter(source, taps, declared, input_size, mean, std, seed, runner)
    probe = adapter.extract(np.zeros((1, 3, *input_size), np.float32))
    actual = [tuple(p.shape[1:]) for p in probe]
    if actual != declared:
        raise ConfigurationError(f"backbone produced shapes {actual}, declared {declared}")
    return adapter


def extract_features(adapter: BackboneAdapter, batch: np.ndarray) -> list[FeatureStack]:
    layers = adapter.extract(batch)
    return [FeatureStack([l[i] for l in layers]) for i in range(batch.shape[0])]


def features_digest(layers: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for l in layers:
        a = np.ascontiguousarray(l, dtype=np.float32)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
