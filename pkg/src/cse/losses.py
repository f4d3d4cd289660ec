"""Cosine contrastive loss, per-position reconstruction loss and their weighted sum.

Embeddings are compared as flattened vectors: one global direction per image.
The batched helpers return analytic gradients next to the loss values so the
training loop never needs an autodiff graph.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, RejectedInputError
from .features import FeatureStack

ALPHA = 10.0


@dataclass(frozen=True)
class LossBreakdown:
    contrastive: float
    reconstruction: float
    total: float
    alpha: float = ALPHA


def _flat(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).reshape(-1)


def cos_sim(a, b) -> float:
    a, b = _flat(a), _flat(b)
    if a.shape != b.shape:
        raise RejectedInputError(f"embedding sizes differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def contrastive_loss(e_k, e_m, is_defective: bool) -> float:
    """``1 + cos`` for a defective partner, ``1 - cos`` for a clean one."""
    c = cos_sim(e_k, e_m)
    return 1.0 + c if is_defective else 1.0 - c


def total_loss(recon_loss: float, contr_loss: float, alpha: float = ALPHA) -> float:
    if alpha <= 0:
        raise RejectedInputError(f"alpha must be positive, got {alpha}")
    return recon_loss + alpha * contr_loss


def _as_layers(x) -> list[np.ndarray]:
    return x.layers if isinstance(x, FeatureStack) else list(x)


def reconstruction_loss(features, recon, squared: bool = False) -> float:
    """Sum over layers of the spatial mean of ``0.5 * ||F_ij - R_ij||``.

    The norm is the Euclidean norm of the channel vector at each position.
    ``squared=True`` switches to ``0.5 * ||F_ij - R_ij||^2``.
    """
    fl, rl = _as_layers(features), _as_layers(recon)
    if len(fl) != len(rl):
        raise RejectedInputError(f"{len(fl)} feature layers vs {len(rl)} reconstructions")
    total = 0.0
    for f, r in zip(fl, rl):
        if f.shape != r.shape:
            raise RejectedInputError(f"layer shape {f.shape} vs reconstruction {r.shape}")
        d = np.asarray(f, np.float64) - np.asarray(r, np.float64)
        sq = (d * d).sum(axis=-3)
        ploss = 0.5 * (sq if squared else np.sqrt(sq))
        total += float(ploss.mean())
    return total


# --- batched forms with gradients -----------------------------------------------

def cos_sim_batch(a: np.ndarray, b: np.ndarray):
    """Row-wise cosine of ``N x D`` arrays with gradients ``(cos, dcos/da, dcos/db)``."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("cosine similarity of a zero-norm embedding")
    cos = (a * b).sum(axis=1, keepdims=True) / (na * nb)
    ga = b / (na * nb) - cos * a / (na * na)
    gb = a / (na * nb) - cos * b / (nb * nb)
    return cos[:, 0], ga, gb


def contrastive_loss_batch(e_k: np.ndarray, e_m: np.ndarray, is_defective: np.ndarray):
    """Per-pair losses and their gradients w.r.t. both (flattened) embeddings."""
    n = e_k.shape[0]
    a, b = e_k.reshape(n, -1), e_m.reshape(n, -1)
    cos, ga, gb = cos_sim_batch(a, b)
    sign = np.where(np.asarray(is_defective, bool), 1.0, -1.0).astype(a.dtype)
    loss = 1.0 + sign * cos
    return loss, (sign[:, None] * ga).reshape(e_k.shape), (sign[:, None] * gb).reshape(e_m.shape)


def reconstruction_loss_batch(features: Sequence[np.ndarray], recon: Sequence[np.ndarray],
                              squared: bool = False):
    """Per-image decoder loss for batched layers and the gradient w.r.t. each ``R^l``.

    Where ``F_ij == R_ij`` the unsquared norm is not differentiable; the
    gradient there is defined as zero.
    """
    if len(features) != len(recon):
        raise RejectedInputError(f"{len(features)} feature layers vs {len(recon)} reconstructions")
    per_image = None
    grads = []
    for f, r in zip(features, recon):
        if f.shape != r.shape:
            raise RejectedInputError(f"layer shape {f.shape} vs reconstruction {r.shape}")
        hw = r.shape[-1] * r.shape[-2]
        d = r - f.astype(r.dtype, copy=False)
        sq = (d * d).sum(axis=1)
        if squared:
            ploss = 0.5 * sq
            g = d / hw
        else:
            norm = np.sqrt(sq)
            ploss = 0.5 * norm
            safe = np.where(norm > 0, norm, 1.0)
            g = np.where(norm[:, None] > 0, 0.5 * d / safe[:, None], 0.0) / hw
        layer = ploss.mean(axis=(1, 2))
        per_image = layer if per_image is None else per_image + layer
        grads.append(g.astype(r.dtype, copy=False))
    return per_image, grads
