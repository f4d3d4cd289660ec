"""k-means cluster bank over clean embeddings and minimum-cosine-distance scoring.

Cluster assignment runs on L2-normalised embeddings, where squared Euclidean
distance is ``2 - 2 cos``, so it agrees with the cosine scoring used at test
time. Each stored centroid is the plain mean of its members' raw embeddings;
with ``k = 1`` that is the mean over the whole clean training set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .errors import ConfigurationError, DegenerateInputError, RejectedInputError

BANK_KIND = "bank"


@dataclass
class ClusterBank:
    centroids: np.ndarray  # k x D
    digest: str = ""  # embedder digest the bank was built with

    def __post_init__(self):
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise RejectedInputError("centroids must be a non-empty k x D array")
        if np.any(np.linalg.norm(self.centroids, axis=1) == 0):
            raise DegenerateInputError("bank contains a zero-norm centroid")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class KMeansConfig:
    max_iter: int = 100
    tol: float = 1e-6
    seed: int = 0


@dataclass(frozen=True)
class ScoreResult:
    score: float
    nearest_cluster: int
    distances: np.ndarray


def _normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateInputError("zero-norm embedding")
    return x / n


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[int(rng.integers(n))]]
    d2 = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx:idx + 1])[:, 0])
    return np.array(centers)


def lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int = 100, tol: float = 1e-6):
    """Lloyd iterations. Returns ``(centers, labels, inertia_history)``.

    An empty cluster is re-seeded from the point farthest from its centroid.
    """
    centers = centers.copy()
    history = []
    labels = None
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        labels = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), labels].sum()))
        new = centers.copy()
        for j in range(centers.shape[0]):
            members = x[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                far = int(d[np.arange(len(x)), labels].argmax())
                new[j] = x[far]
                labels[far] = j
        shift = float(np.abs(new - centers).max())
        centers = new
        if shift < tol:
            break
    d = _sq_dists(x, centers)
    labels = d.argmin(axis=1)
    history.append(float(d[np.arange(len(x)), labels].sum()))
    return centers, labels, history


def build_bank(embeddings: np.ndarray, k: int = 1, kmeans_cfg: KMeansConfig = KMeansConfig(),
               digest: str = "") -> ClusterBank:
    x = np.asarray(embeddings, dtype=np.float64).reshape(len(embeddings), -1)
    n = x.shape[0]
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if k > n:
        raise ConfigurationError(f"k={k} clusters requested from only {n} embeddings")
    if k == 1:
        return ClusterBank(x.mean(axis=0, keepdims=True), digest)
    xn = _normalize(x)
    rng = np.random.default_rng(np.random.SeedSequence(kmeans_cfg.seed))
    init = kmeans_pp_init(xn, k, rng)
    _, labels, _ = lloyd(xn, init, kmeans_cfg.max_iter, kmeans_cfg.tol)
    centers = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
    return ClusterBank(centers, digest)


def cosine_distances(embedding: np.ndarray, bank: ClusterBank) -> np.ndarray:
    e = np.asarray(embedding, dtype=np.float64).reshape(-1)
    if e.size != bank.centroids.shape[1]:
        raise RejectedInputError(f"embedding has {e.size} values, bank expects {bank.centroids.shape[1]}")
    ne = np.linalg.norm(e)
    if ne == 0:
        raise DegenerateInputError("cannot score a zero-norm embedding")
    c = bank.centroids
    cos = c @ e / (np.linalg.norm(c, axis=1) * ne)
    return 1.0 - np.clip(cos, -1.0, 1.0)


def anomaly_score(embedding: np.ndarray, bank: ClusterBank) -> ScoreResult:
    d = cosine_distances(embedding, bank)
    j = int(d.argmin())
    return ScoreResult(float(d[j]), j, d)


def score_batch(embeddings: np.ndarray, bank: ClusterBank) -> np.ndarray:
    return np.array([anomaly_score(e, bank).score for e in embeddings])


def save_bank(bank: ClusterBank, path) -> str:
    blob = container.save(path, {"centroids": bank.centroids}, {"k": bank.k, "embedder_digest": bank.digest},
                          BANK_KIND)
    return container.digest(blob)


def load_bank(path) -> ClusterBank:
    tensors, meta = container.load(path, BANK_KIND)
    if "centroids" not in tensors:
        raise container.CorruptFileError("bank file has no centroids tensor")
    bank = ClusterBank(tensors["centroids"], meta.get("embedder_digest", ""))
    if bank.k != meta.get("k"):
        raise container.CorruptFileError("bank k does not match its centroid count")
    return bank
