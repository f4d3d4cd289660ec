"""Pair-based contrastive training of the embedder, plus checkpoint persistence.

Each step draws ``batch_size`` anchor/partner pairs. Anchors are always clean;
a partner is a freshly corrupted image with probability ``p_defective``. Both
members go through fuse -> embed in one batch-norm batch. The anchors'
embeddings are also decoded and compared against their own backbone features.
The step minimises ``mean(recon) + alpha * mean(contrastive)`` with Adam under
a one-cycle learning-rate schedule.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import container
from .defectgen import DefectConfig, TextureCorpus, sample_corruption
from .errors import ConfigurationError, CorruptFileError, TrainingError
from .features import BackboneAdapter, fuse_features, load_backbone
from .losses import LossBreakdown, contrastive_loss_batch, reconstruction_loss_batch
from .model import (
    Decoder,
    DecoderConfig,
    DecoderMode,
    Embedder,
    EmbedderConfig,
    decode_backward,
    decode_forward,
    embed,
    embed_backward,
    embed_forward,
    init_decoder,
    init_embedder,
)
from .numerics import derive_rng

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"

# derive_rng stream tags
_SPLIT, _TRAIN, _VAL, _EMBED_INIT, _PRIOR = 0, 1, 2, 3, 4


@dataclass
class TrainConfig:
    lr: float = 4e-4
    epochs: int = 100
    batch_size: int = 8
    alpha: float = 10.0
    p_defective: float = 0.5
    split: float = 0.7
    seed: int = 0
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div: float = 1e4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    steps_per_epoch: int | None = None
    hidden_channels: tuple[int, ...] = (256, 128)
    out_channels: int = 64
    decoder_mode: str = "random"
    decoder_hidden: int = 128
    decoder_prior: str | None = None
    squared_recon: bool = False
    workers: int = 1
    profile: str = "crop"
    input_size: tuple[int, int] = (224, 224)
    texture_dir: str | None = None
    backbone: dict = field(default_factory=lambda: {"source": "stub", "seed": 7})
    defect: DefectConfig = field(default_factory=DefectConfig)

    def __post_init__(self):
        if not 0.0 <= self.p_defective <= 1.0:
            raise ConfigurationError(f"p_defective must lie in [0, 1], got {self.p_defective}")
        if not 0.0 < self.split < 1.0:
            raise ConfigurationError(f"split must lie in (0, 1), got {self.split}")
        if self.alpha <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("alpha, batch_size and epochs must be positive")
        DecoderMode(self.decoder_mode)

    def to_dict(self) -> dict:
        d = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if k == "defect":
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            d[k] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        for k in ("betas", "hidden_channels", "input_size"):
            if k in kw:
                kw[k] = tuple(kw[k])
        if "defect" in kw and isinstance(kw["defect"], dict):
            kw["defect"] = DefectConfig.from_dict(kw["defect"])
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return TrainConfig.from_dict(raw)


# --- optimisation -----------------------------------------------------------------

class Adam:
    """Adam with bias correction; parameters are updated in place, math in float64."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros(p.shape, np.float64)
                self.v[name] = np.zeros(p.shape, np.float64)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p[...] = (p.astype(np.float64) - update).astype(p.dtype)


class OneCycleSchedule:
    """Cosine warm-up from ``max_lr/div_factor`` to ``max_lr``, then cosine decay
    to ``initial_lr/final_div``; ``pct_start`` of the steps are warm-up."""

    def __init__(self, max_lr: float, total_steps: int, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div: float = 1e4):
        self.max_lr = max_lr
        self.total_steps = max(int(total_steps), 1)
        self.initial_lr = max_lr / div_factor
        self.final_lr = self.initial_lr / final_div
        self.peak = pct_start * (self.total_steps - 1)

    @staticmethod
    def _anneal(start: float, end: float, frac: float) -> float:
        return end + (start - end) * (1.0 + math.cos(math.pi * frac)) / 2.0

    def lr(self, step: int) -> float:
        if self.total_steps == 1:
            return self.max_lr
        if step <= self.peak:
            return self._anneal(self.initial_lr, self.max_lr, step / self.peak if self.peak else 1.0)
        span = (self.total_steps - 1) - self.peak
        return self._anneal(self.max_lr, self.final_lr, min((step - self.peak) / span, 1.0))


# --- data -------------------------------------------------------------------------

def split_dataset(items: Sequence, split: float = 0.7, seed: int = 0):
    """Seeded shuffle, first ``round(split * n)`` items train, the rest validate."""
    n = len(items)
    if n < 2:
        raise ConfigurationError(f"need at least 2 images to split, got {n}")
    order = derive_rng(seed, _SPLIT).permutation(n)
    n_train = min(max(int(round(split * n)), 1), n - 1)
    return [items[i] for i in order[:n_train]], [items[i] for i in order[n_train:]]


@dataclass
class PairBatch:
    anchor_idx: np.ndarray
    partner_idx: np.ndarray
    is_defective: np.ndarray
    partner_images: list  # corrupted image for defective partners, None for clean ones
    masks: list

    def __len__(self) -> int:
        return len(self.anchor_idx)


def sample_pair_batch(dataset: Sequence[np.ndarray], rng: np.random.Generator, config: TrainConfig,
                      textures: TextureCorpus | None = None, size: int | None = None) -> PairBatch:
    """Anchors and partners drawn with replacement; partners corrupted with prob ``p_defective``.

    Each corruption uses its own child stream seeded from ``rng``, so the batch
    is identical whatever ``config.workers`` is.
    """
    n = len(dataset)
    if n == 0:
        raise ConfigurationError("cannot sample pairs from an empty dataset")
    b = size or config.batch_size
    anchor_idx = rng.integers(n, size=b)
    partner_idx = rng.integers(n, size=b)
    defective = rng.random(b) < config.p_defective
    seeds = rng.integers(2 ** 63, size=b)

    def corrupt(i):
        if not defective[i]:
            return None
        return sample_corruption(dataset[partner_idx[i]], np.random.default_rng(int(seeds[i])),
                                 config.defect, textures)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            samples = list(pool.map(corrupt, range(b)))
    else:
        samples = [corrupt(i) for i in range(b)]
    return PairBatch(anchor_idx, partner_idx, defective,
                     [s.image if s is not None else None for s in samples],
                     [s.mask if s is not None else None for s in samples])


@dataclass
class PairFeatures:
    anchor_layers: list[np.ndarray]
    partner_layers: list[np.ndarray]
    is_defective: np.ndarray


class FeatureCache:
    """Clean-image features computed once; corrupted partners go through the backbone."""

    def __init__(self, adapter: BackboneAdapter, images: Sequence[np.ndarray], chunk: int = 16):
        self.adapter = adapter
        self.images = images
        parts = [adapter.extract(np.stack(images[i:i + chunk])) for i in range(0, len(images), chunk)]
        self.layers = [np.concatenate([p[l] for p in parts]) for l in range(len(parts[0]))]

    def pair_features(self, batch: PairBatch) -> PairFeatures:
        anchors = [l[batch.anchor_idx] for l in self.layers]
        partners = [l[batch.partner_idx].copy() for l in self.layers]
        bad = np.flatnonzero(batch.is_defective)
        if bad.size:
            fresh = self.adapter.extract(np.stack([batch.partner_images[i] for i in bad]))
            for dst, src in zip(partners, fresh):
                dst[bad] = src
        return PairFeatures(anchors, partners, batch.is_defective.copy())


# --- loss and gradients ---------------------------------------------------------

def trainable_parameters(embedder: Embedder, decoder: Decoder) -> dict[str, np.ndarray]:
    params = {f"embedder.{k}": v for k, v in embedder.trainable_tensors().items()}
    params.update({f"decoder.{k}": v for k, v in decoder.trainable_tensors().items()})
    return params


def forward_backward(embedder: Embedder, decoder: Decoder, pf: PairFeatures, alpha: float = 10.0,
                     squared: bool = False, mode: str = "train", backward: bool = True):
    """Batch-mean loss breakdown and (optionally) gradients for every trainable tensor."""
    b = len(pf.is_defective)
    fused = np.concatenate([fuse_features(pf.anchor_layers), fuse_features(pf.partner_layers)])
    emb, ecache = embed_forward(embedder, fused, mode)
    e_k, e_m = emb[:b], emb[b:]
    contr, g_k, g_m = contrastive_loss_batch(e_k, e_m, pf.is_defective)
    recon, dcache = decode_forward(decoder, e_k)
    rec, g_rec = reconstruction_loss_batch(pf.anchor_layers, recon, squared)
    c_mean, r_mean = float(contr.mean()), float(rec.mean())
    breakdown = LossBreakdown(c_mean, r_mean, r_mean + alpha * c_mean, alpha)
    if not backward:
        return breakdown, None
    g_emb_k, dec_grads = decode_backward(decoder, dcache, [g / b for g in g_rec])
    g_emb = np.concatenate([g_emb_k + (alpha / b) * g_k, (alpha / b) * g_m]).astype(emb.dtype)
    grads = {f"embedder.{k}": v for k, v in embed_backward(embedder, ecache, g_emb).items()}
    grads.update({f"decoder.{k}": v for k, v in dec_grads.items()})
    return breakdown, grads


def train_step(embedder: Embedder, decoder: Decoder, batch: PairFeatures, optimizer: Adam,
               lr: float, alpha: float = 10.0, squared: bool = False) -> LossBreakdown:
    breakdown, grads = forward_backward(embedder, decoder, batch, alpha, squared, "train")
    if not math.isfinite(breakdown.total) or not all(np.isfinite(g).all() for g in grads.values()):
        raise TrainingError(
            f"non-finite loss or gradient (contrastive={breakdown.contrastive}, "
            f"reconstruction={breakdown.reconstruction}); check inputs and learning rate")
    optimizer.step(trainable_parameters(embedder, decoder), grads, lr)
    return breakdown


def evaluate_pairs(embedder: Embedder, decoder: Decoder, pf: PairFeatures, alpha: float,
                   squared: bool = False, chunk: int = 8) -> LossBreakdown:
    """Eval-mode loss over a pair set, averaged per pair."""
    n = len(pf.is_defective)
    c = r = 0.0
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        part = PairFeatures([l[sl] for l in pf.anchor_layers], [l[sl] for l in pf.partner_layers],
                            pf.is_defective[sl])
        bd, _ = forward_backward(embedder, decoder, part, alpha, squared, "eval", backward=False)
        k = len(part.is_defective)
        c += bd.contrastive * k
        r += bd.reconstruction * k
    c, r = c / n, r / n
    return LossBreakdown(c, r, r + alpha * c, alpha)


# --- checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    embedder: Embedder
    decoder: Decoder
    adapter_descriptor: dict
    config: dict
    config_digest: str
    epoch: int
    val_loss: float
    history: list = field(default_factory=list)
    format_version: int = container.FORMAT_VERSION

    def to_bytes(self) -> bytes:
        tensors = {f"embedder.{k}": v for k, v in self.embedder.named_tensors().items()}
        tensors.update({f"decoder.{k}": v for k, v in self.decoder.named_tensors().items()})
        meta = {
            "embedder_config": self.embedder.config.to_dict(),
            "decoder_config": self.decoder.config.to_dict(),
            "adapter": self.adapter_descriptor,
            "train_config": self.config,
            "train_config_digest": self.config_digest,
            "epoch": self.epoch,
            "val_loss": self.val_loss,
            "history": self.history,
            "embedder_digest": self.embedder.digest(),
        }
        return container.dumps(tensors, meta, CHECKPOINT_KIND)

    def digest(self) -> str:
        return container.digest(self.to_bytes())

    @classmethod
    def from_parts(cls, tensors: dict, meta: dict) -> "Checkpoint":
        emb_cfg = EmbedderConfig.from_dict(meta["embedder_config"])
        dec_cfg = DecoderConfig.from_dict(meta["decoder_config"])
        embedder = init_embedder(emb_cfg, 0)
        for name, arr in embedder.named_tensors().items():
            arr[...] = _take(tensors, f"embedder.{name}", arr.shape)
        dec_tensors = {k[len("decoder."):]: v for k, v in tensors.items() if k.startswith("decoder.")}
        if dec_cfg.mode is DecoderMode.TRAINED_BEFORE:
            decoder = init_decoder(dec_cfg, dec_tensors)
        else:
            decoder = init_decoder(dec_cfg)
            for name, arr in decoder.named_tensors().items():
                arr[...] = _take(dec_tensors, name, arr.shape)
        return cls(embedder, decoder, meta["adapter"], meta["train_config"],
                   meta["train_config_digest"], int(meta["epoch"]), float(meta["val_loss"]),
                   meta.get("history", []))


def _take(tensors: dict, name: str, shape) -> np.ndarray:
    if name not in tensors or tensors[name].shape != tuple(shape):
        raise CorruptFileError(f"tensor {name!r} missing or has the wrong shape")
    return tensors[name]


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write ``ckpt`` and return the sha256 digest of the file."""
    blob = ckpt.to_bytes()
    container.write_blob(path, blob)
    return container.digest(blob)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = container.load(path, CHECKPOINT_KIND)
    try:
        return Checkpoint.from_parts(tensors, meta)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"checkpoint metadata is incomplete: {exc}") from exc


def load_decoder_prior(path) -> dict[str, np.ndarray]:
    tensors, _ = container.load(path, "decoder")
    return tensors


def save_decoder_prior(decoder: Decoder, path) -> str:
    blob = container.save(path, decoder.named_tensors(), {"decoder_config": decoder.config.to_dict()},
                          "decoder")
    return container.digest(blob)


# --- fit --------------------------------------------------------------------------

def _make_models(config: TrainConfig, target_shapes, prior=None) -> tuple[Embedder, Decoder]:
    in_ch = sum(s[0] for s in target_shapes)
    emb_cfg = EmbedderConfig(in_ch, tuple(config.hidden_channels), config.out_channels)
    embedder = init_embedder(emb_cfg, int(derive_rng(config.seed, _EMBED_INIT).integers(2 ** 63)))
    dec_cfg = DecoderConfig(tuple(tuple(s) for s in target_shapes), config.out_channels,
                            config.decoder_hidden, DecoderMode(config.decoder_mode), config.seed)
    if dec_cfg.mode is DecoderMode.TRAINED_BEFORE and prior is None and config.decoder_prior:
        prior = load_decoder_prior(config.decoder_prior)
    return embedder, init_decoder(dec_cfg, prior)


def _load_textures(config: TrainConfig, textures):
    if textures is None and config.texture_dir:
        textures = TextureCorpus.from_directory(config.texture_dir, tuple(config.input_size))
    return textures


def fit(dataset: Sequence[np.ndarray], config: TrainConfig, adapter: BackboneAdapter | None = None,
        textures: TextureCorpus | None = None, decoder_prior=None, checkpoint_path=None) -> Checkpoint:
    """Train for ``config.epochs`` and return the minimum-validation-loss checkpoint.

    ``dataset`` holds preprocessed clean images (``3 x H x W`` in ``[0, 1]``).
    It is split ``config.split`` / rest into train and validation parts.
    """
    adapter = adapter or load_backbone({**config.backbone, "input_size": list(config.input_size)})
    textures = _load_textures(config, textures)
    train_imgs, val_imgs = split_dataset(list(dataset), config.split, config.seed)
    embedder, decoder = _make_models(config, adapter.declared_shapes, decoder_prior)
    train_cache = FeatureCache(adapter, train_imgs)
    val_cache = FeatureCache(adapter, val_imgs)

    steps = config.steps_per_epoch or math.ceil(len(train_imgs) / config.batch_size)
    schedule = OneCycleSchedule(config.lr, steps * config.epochs, config.pct_start,
                                config.div_factor, config.final_div)
    opt = Adam(config.betas, config.adam_eps)
    train_rng = derive_rng(config.seed, _TRAIN)

    best = None
    history = []
    step = 0
    for epoch in range(config.epochs):
        tl = []
        for _ in range(steps):
            batch = sample_pair_batch(train_imgs, train_rng, config, textures)
            bd = train_step(embedder, decoder, train_cache.pair_features(batch), opt,
                            schedule.lr(step), config.alpha, config.squared_recon)
            tl.append(bd.total)
            step += 1
        val_batch = sample_pair_batch(val_imgs, derive_rng(config.seed, _VAL, epoch), config, textures,
                                      size=len(val_imgs))
        val_batch.anchor_idx = np.arange(len(val_imgs))
        vb = evaluate_pairs(embedder, decoder, val_cache.pair_features(val_batch), config.alpha,
                            config.squared_recon)
        history.append({"epoch": epoch, "train_loss": float(np.mean(tl)), "val_loss": vb.total,
                        "val_contrastive": vb.contrastive, "val_reconstruction": vb.reconstruction})
        log.info("epoch %d train %.4f val %.4f", epoch, np.mean(tl), vb.total)
        if best is None or vb.total < best[0]:
            best = (vb.total, epoch, copy.deepcopy(embedder), copy.deepcopy(decoder))

    val_loss, epoch, best_emb, best_dec = best
    ckpt = Checkpoint(best_emb, best_dec, adapter.descriptor(), config.to_dict(), config.digest(),
                      epoch, float(val_loss), history)
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt


def fit_decoder_prior(dataset: Sequence[np.ndarray], config: TrainConfig,
                      adapter: BackboneAdapter | None = None, epochs: int | None = None) -> Decoder:
    """Reconstruction-only fit of embedder and decoder on clean images; returns the decoder.

    The result feeds ``decoder_mode="trained_before"``, where it is then frozen.
    """
    adapter = adapter or load_backbone({**config.backbone, "input_size": list(config.input_size)})
    cfg = copy.deepcopy(config)
    cfg.decoder_mode = DecoderMode.TRAINED_TOGETHER.value
    embedder, decoder = _make_models(cfg, adapter.declared_shapes)
    cache = FeatureCache(adapter, list(dataset))
    epochs = epochs or config.epochs
    steps = config.steps_per_epoch or math.ceil(len(dataset) / config.batch_size)
    schedule = OneCycleSchedule(config.lr, steps * epochs, config.pct_start, config.div_factor,
                                config.final_div)
    opt = Adam(config.betas, config.adam_eps)
    rng = derive_rng(config.seed, _PRIOR)
    n = len(dataset)
    params = trainable_parameters(embedder, decoder)
    for step in range(steps * epochs):
        idx = rng.integers(n, size=config.batch_size)
        layers = [l[idx] for l in cache.layers]
        emb, ecache = embed_forward(embedder, fuse_features(layers), "train")
        recon, dcache = decode_forward(decoder, emb)
        rec, g_rec = reconstruction_loss_batch(layers, recon, config.squared_recon)
        g_emb, dgrads = decode_backward(decoder, dcache, [g / len(idx) for g in g_rec])
        grads = {f"embedder.{k}": v for k, v in embed_backward(embedder, ecache, g_emb).items()}
        grads.update({f"decoder.{k}": v for k, v in dgrads.items()})
        opt.step(params, grads, schedule.lr(step))
    frozen_cfg = DecoderConfig(**{**decoder.config.__dict__, "mode": DecoderMode.TRAINED_BEFORE})
    return init_decoder(frozen_cfg, decoder)


def embed_images(ckpt_or_embedder, adapter: BackboneAdapter, images: Sequence[np.ndarray],
                 chunk: int = 16) -> np.ndarray:
    """Eval-mode embeddings, ``N x C x h x w``, for preprocessed images."""
    embedder = ckpt_or_embedder.embedder if isinstance(ckpt_or_embedder, Checkpoint) else ckpt_or_embedder
    out = []
    for i in range(0, len(images), chunk):
        layers = adapter.extract(np.stack(images[i:i + chunk]))
        out.append(embed(embedder, fuse_features(layers), "eval"))
    return np.concatenate(out)
