"""Pointwise embedder and the per-layer decoder heads that reconstruct backbone features.

Embedder: ``[conv1x1 -> BN -> ReLU] * len(hidden) -> conv1x1 -> avgpool(2)``.
The last conv has no activation so embeddings keep signed directions, which
lets a defective pair reach a cosine of -1.

Decoder: for each backbone layer, nearest-resize the embedding to that layer's
grid, then ``conv1x1 -> ReLU -> conv1x1`` up to the layer's channel count.
"""
from __future__ import annotations

import copy
import enum
import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, RejectedInputError
from .numerics import (
    BatchNormParams,
    ConvParams,
    avg_pool2d,
    avg_pool2d_backward,
    batch_norm,
    batch_norm_backward,
    derive_rng,
    pointwise_conv,
    pointwise_conv_backward,
    relu,
    relu_backward,
    resize_backward,
    resize_nearest,
)


def _kaiming_uniform(rng: np.random.Generator, c_out: int, c_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / c_in)
    return rng.uniform(-bound, bound, size=(c_out, c_in, 1, 1)).astype(np.float32)


def tensors_digest(tensors: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# --- embedder -------------------------------------------------------------------

@dataclass(frozen=True)
class EmbedderConfig:
    in_channels: int = 520
    hidden_channels: tuple[int, ...] = (256, 128)
    out_channels: int = 64
    pool: int = 2

    @property
    def channel_plan(self) -> list[int]:
        return [self.in_channels, *self.hidden_channels, self.out_channels]

    def num_parameters(self) -> int:
        """Trainable scalars: conv weights and biases plus BN gamma and beta."""
        plan = self.channel_plan
        conv = sum(o * i + o for i, o in zip(plan[:-1], plan[1:]))
        return conv + 2 * sum(self.hidden_channels)

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels, "hidden_channels": list(self.hidden_channels),
                "out_channels": self.out_channels, "pool": self.pool}

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedderConfig":
        return cls(int(d["in_channels"]), tuple(int(c) for c in d["hidden_channels"]),
                   int(d["out_channels"]), int(d.get("pool", 2)))


@dataclass
class Embedder:
    config: EmbedderConfig
    convs: list[ConvParams]
    norms: list[BatchNormParams]

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, c in enumerate(self.convs):
            out[f"conv{i}.weight"] = c.weight
            out[f"conv{i}.bias"] = c.bias
        for i, b in enumerate(self.norms):
            out[f"bn{i}.gamma"] = b.gamma
            out[f"bn{i}.beta"] = b.beta
            out[f"bn{i}.running_mean"] = b.running_mean
            out[f"bn{i}.running_var"] = b.running_var
        return out

    def trainable_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.named_tensors().items() if "running" not in k}

    def with_tensors(self, replacements: Mapping[str, np.ndarray]) -> "Embedder":
        """Copy of this embedder with some tensors swapped (e.g. float64 versions)."""
        new = copy.deepcopy(self)
        for name, value in replacements.items():
            layer, attr = name.split(".")
            kind, idx = ("conv", int(layer[4:])) if layer.startswith("conv") else ("bn", int(layer[2:]))
            target = new.convs[idx] if kind == "conv" else new.norms[idx]
            setattr(target, attr, np.array(value))
        return new

    def digest(self) -> str:
        return tensors_digest(self.named_tensors())


def init_embedder(config: EmbedderConfig = EmbedderConfig(), seed: int = 0) -> Embedder:
    plan = config.channel_plan
    convs = []
    for i, (c_in, c_out) in enumerate(zip(plan[:-1], plan[1:])):
        rng = derive_rng(seed, 0, i)
        convs.append(ConvParams(_kaiming_uniform(rng, c_out, c_in), np.zeros(c_out, np.float32)))
    norms = [BatchNormParams.identity(c) for c in config.hidden_channels]
    return Embedder(config, convs, norms)


def embed_forward(embedder: Embedder, fused: np.ndarray, mode: str = "eval"):
    """Forward pass returning ``(embeddings, cache)`` for :func:`embed_backward`."""
    if fused.ndim != 4 or fused.shape[1] != embedder.config.in_channels:
        raise RejectedInputError(
            f"expected N x {embedder.config.in_channels} x H x W, got {fused.shape}")
    cache = []
    x = fused
    for conv, bn in zip(embedder.convs[:-1], embedder.norms):
        z = pointwise_conv(x, conv)
        y = batch_norm(z, bn, mode)
        cache.append((x, z, y))
        x = relu(y)
    z = pointwise_conv(x, embedder.convs[-1])
    cache.append((x, None, None))
    k = embedder.config.pool
    return avg_pool2d(z, k, k), (cache, mode)


def embed(embedder: Embedder, fused: np.ndarray, mode: str = "eval") -> np.ndarray:
    return embed_forward(embedder, fused, mode)[0]


def embed_backward(embedder: Embedder, cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    layers, mode = cache
    k = embedder.config.pool
    grads = {}
    g = avg_pool2d_backward(grad_out, k, k)
    last = len(embedder.convs) - 1
    x_last = layers[-1][0]
    g, gw, gb = pointwise_conv_backward(g, x_last, embedder.convs[-1])
    grads[f"conv{last}.weight"], grads[f"conv{last}.bias"] = gw, gb
    for i in range(last - 1, -1, -1):
        x, z, y = layers[i]
        g = relu_backward(g, y)
        g, ggamma, gbeta = batch_norm_backward(g, z, embedder.norms[i], mode)
        grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = ggamma, gbeta
        g, gw, gb = pointwise_conv_backward(g, x, embedder.convs[i])
        grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = gw, gb
    return grads


# --- decoder --------------------------------------------------------------------

class DecoderMode(str, enum.Enum):
    RANDOM_FROZEN = "random"
    TRAINED_BEFORE = "trained_before"
    TRAINED_TOGETHER = "trained_together"


@dataclass(frozen=True)
class DecoderConfig:
    target_shapes: tuple[tuple[int, int, int], ...] = ((136, 14, 14), (384, 7, 7))
    embed_channels: int = 64
    hidden_channels: int = 128
    mode: DecoderMode = DecoderMode.RANDOM_FROZEN
    seed: int = 0

    def to_dict(self) -> dict:
        return {"target_shapes": [list(s) for s in self.target_shapes],
                "embed_channels": self.embed_channels, "hidden_channels": self.hidden_channels,
                "mode": self.mode.value, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls(tuple(tuple(int(v) for v in s) for s in d["target_shapes"]),
                   int(d["embed_channels"]), int(d["hidden_channels"]),
                   DecoderMode(d["mode"]), int(d["seed"]))


@dataclass
class Decoder:
    config: DecoderConfig
    heads: list[tuple[ConvParams, ConvParams]]

    @property
    def trainable(self) -> bool:
        return self.config.mode is DecoderMode.TRAINED_TOGETHER

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for l, (c1, c2) in enumerate(self.heads):
            out[f"head{l}.conv0.weight"] = c1.weight
            out[f"head{l}.conv0.bias"] = c1.bias
            out[f"head{l}.conv1.weight"] = c2.weight
            out[f"head{l}.conv1.bias"] = c2.bias
        return out

    def trainable_tensors(self) -> dict[str, np.ndarray]:
        return self.named_tensors() if self.trainable else {}

    def with_tensors(self, replacements: Mapping[str, np.ndarray]) -> "Decoder":
        new = copy.deepcopy(self)
        for name, value in replacements.items():
            head, conv, attr = name.split(".")
            params = new.heads[int(head[4:])][int(conv[4:])]
            setattr(params, attr, np.array(value))
        return new

    def digest(self) -> str:
        return tensors_digest(self.named_tensors())


def _random_heads(config: DecoderConfig, trainable: bool) -> list[tuple[ConvParams, ConvParams]]:
    heads = []
    for l, (c, _, _) in enumerate(config.target_shapes):
        rng = derive_rng(config.seed, 1, l)
        hid, emb = config.hidden_channels, config.embed_channels
        c1 = ConvParams(_kaiming_uniform(rng, hid, emb),
                        rng.uniform(-1, 1, hid).astype(np.float32) / np.float32(np.sqrt(emb)), trainable)
        c2 = ConvParams(_kaiming_uniform(rng, c, hid),
                        rng.uniform(-1, 1, c).astype(np.float32) / np.float32(np.sqrt(hid)), trainable)
        heads.append((c1, c2))
    return heads


def init_decoder(config: DecoderConfig = DecoderConfig(),
                 prior: "Decoder | Mapping[str, np.ndarray] | None" = None) -> Decoder:
    """Seeded decoder whose trainability follows ``config.mode``.

    ``TRAINED_BEFORE`` copies the weights of a prior reconstruction-only fit
    (see :func:`cse.training.fit_decoder_prior`) and freezes them.
    """
    mode = config.mode
    if mode is DecoderMode.TRAINED_BEFORE:
        if prior is None:
            raise ConfigurationError("decoder mode 'trained_before' needs a prior decoder fit")
        tensors = prior.named_tensors() if isinstance(prior, Decoder) else dict(prior)
        dec = Decoder(config, _random_heads(config, False))
        expected = dec.named_tensors()
        if set(tensors) != set(expected) or any(
                tuple(tensors[k].shape) != expected[k].shape for k in expected):
            raise ConfigurationError("prior decoder does not match the decoder configuration")
        for name, arr in expected.items():
            arr[...] = tensors[name]
        return dec
    return Decoder(config, _random_heads(config, mode is DecoderMode.TRAINED_TOGETHER))


def decode_forward(decoder: Decoder, embedding: np.ndarray):
    if embedding.ndim != 4 or embedding.shape[1] != decoder.config.embed_channels:
        raise RejectedInputError(
            f"expected N x {decoder.config.embed_channels} x h x w embedding, got {embedding.shape}")
    recons, cache = [], []
    for (c, h, w), (c1, c2) in zip(decoder.config.target_shapes, decoder.heads):
        up = resize_nearest(embedding, h, w)
        z = pointwise_conv(up, c1)
        a = relu(z)
        recons.append(pointwise_conv(a, c2))
        cache.append((up, z, a))
    return recons, (cache, embedding.shape)


def decode(decoder: Decoder, embedding: np.ndarray) -> list[np.ndarray]:
    return decode_forward(decoder, embedding)[0]


def decode_backward(decoder: Decoder, cache, grad_recons: Sequence[np.ndarray]):
    """Return ``(grad_embedding, param_grads)``; ``param_grads`` is empty when frozen."""
    layers, emb_shape = cache
    grad_emb = np.zeros(emb_shape, dtype=grad_recons[0].dtype)
    pgrads = {}
    for l, ((up, z, a), (c1, c2), g) in enumerate(zip(layers, decoder.heads, grad_recons)):
        ga, gw2, gb2 = pointwise_conv_backward(g, a, c2)
        gz = relu_backward(ga, z)
        gup, gw1, gb1 = pointwise_conv_backward(gz, up, c1)
        grad_emb += resize_backward(gup, emb_shape[2], emb_shape[3], "nearest")
        if decoder.trainable:
            pgrads[f"head{l}.conv0.weight"], pgrads[f"head{l}.conv0.bias"] = gw1, gb1
            pgrads[f"head{l}.conv1.weight"], pgrads[f"head{l}.conv1.bias"] = gw2, gb2
    return grad_emb, pgrads
