"""Dataset ingestion, image-level AUROC and per-stage latency benchmarking.

Two on-disk layouts are understood:

``mvtec``
    ``root/train/good/*`` holds the clean training images and
    ``root/test/<type>/*`` the test images; ``test/good`` is the only
    non-defective test type.
``flat``
    ``root/train/**`` (any depth) is clean training data and ``root/test``
    follows the same ``<type>`` rule as ``mvtec``.

Labels come from the directory layout alone.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.stats import rankdata

from .bank import ClusterBank, anomaly_score
from .defectgen import IMAGE_SUFFIXES
from .errors import ConfigurationError, EvaluationError, RejectedInputError
from .features import BackboneAdapter, fuse_features, load_image, preprocess
from .model import embed

log = logging.getLogger(__name__)

GOOD = "good"
LAYOUTS = ("mvtec", "flat")


# --- dataset index ----------------------------------------------------------------

@dataclass(frozen=True)
class TestEntry:
    path: str
    label: str  # "good" | "defective"
    defect_type: str

    @property
    def is_defective(self) -> bool:
        return self.label != GOOD


@dataclass
class DatasetIndex:
    category: str
    train_good: list[str]
    test: list[TestEntry]
    skipped: list[str] = field(default_factory=list)

    @property
    def n_good(self) -> int:
        return sum(not e.is_defective for e in self.test)

    @property
    def n_defective(self) -> int:
        return sum(e.is_defective for e in self.test)


def _image_files(d: Path, recursive: bool) -> list[Path]:
    it = d.rglob("*") if recursive else d.iterdir()
    return sorted(p for p in it if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _readable(paths: list[Path], skipped: list[str]) -> list[str]:
    ok = []
    for p in paths:
        try:
            with Image.open(p) as img:
                img.verify()
        except (OSError, UnidentifiedImageError):
            skipped.append(str(p))
            continue
        ok.append(str(p))
    return ok


def ingest_dataset(root, layout: str = "mvtec") -> DatasetIndex:
    """Index a dataset directory. Unreadable images are skipped and listed in ``skipped``."""
    root = Path(root)
    if layout not in LAYOUTS:
        raise ConfigurationError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if not root.is_dir():
        raise ConfigurationError(f"dataset root not found: {root}")
    train_dir = root / "train" / GOOD if layout == "mvtec" else root / "train"
    if not train_dir.is_dir():
        raise ConfigurationError(f"missing training directory: {train_dir}")
    test_dir = root / "test"
    if not test_dir.is_dir():
        raise ConfigurationError(f"missing test directory: {test_dir}")

    skipped: list[str] = []
    train = _readable(_image_files(train_dir, recursive=layout == "flat"), skipped)
    if not train:
        raise ConfigurationError(f"no training images under {train_dir}")
    test = []
    for type_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        label = GOOD if type_dir.name == GOOD else "defective"
        for path in _readable(_image_files(type_dir, recursive=False), skipped):
            test.append(TestEntry(path, label, type_dir.name))
    if not test:
        raise ConfigurationError(f"no test images under {test_dir}")
    if skipped:
        log.warning("skipped %d unreadable image(s) under %s", len(skipped), root)
    return DatasetIndex(root.name, train, test, skipped)


# --- AUROC ------------------------------------------------------------------------

def compute_auroc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Image-level AUROC as the normalised Mann-Whitney U statistic.

    Higher scores mean more anomalous; ``labels`` is true for defective images.
    Ties count one half, which is what midranks give.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=bool).reshape(-1)
    if s.shape != y.shape:
        raise RejectedInputError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise RejectedInputError("scores contain NaN or inf")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUROC needs both good and defective samples")
    ranks = rankdata(s)  # midranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# --- scoring ----------------------------------------------------------------------

def score_paths(embedder, adapter: BackboneAdapter, bank: ClusterBank, paths: Sequence[str],
                profile: str = "crop", chunk: int = 16) -> np.ndarray:
    """Anomaly score for every image file, in order."""
    scores = []
    for i in range(0, len(paths), chunk):
        batch = np.stack([load_image(p, adapter.input_size, profile) for p in paths[i:i + chunk]])
        emb = embed(embedder, fuse_features(adapter.extract(batch)), "eval")
        scores.extend(anomaly_score(e, bank).score for e in emb)
    return np.asarray(scores)


@dataclass
class EvalReport:
    category: str
    auroc: float
    n_good: int
    n_defective: int
    records: list[dict]
    seconds: float
    checkpoint_digest: str = ""
    bank_k: int = 1

    def to_json(self) -> str:
        # wall-clock time stays out of the file so reports are reproducible
        d = asdict(self)
        d.pop("seconds")
        return json.dumps(d, indent=2, sort_keys=True)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def evaluate(embedder, adapter: BackboneAdapter, bank: ClusterBank, index: DatasetIndex,
             profile: str = "crop", checkpoint_digest: str = "") -> EvalReport:
    """Score every test image of ``index`` and compute the image-level AUROC."""
    t0 = time.perf_counter()
    paths = [e.path for e in index.test]
    scores = score_paths(embedder, adapter, bank, paths, profile)
    labels = [e.is_defective for e in index.test]
    records = [{"path": e.path, "score": float(s), "label": e.label, "defect_type": e.defect_type}
               for e, s in zip(index.test, scores)]
    return EvalReport(index.category, compute_auroc(scores, labels), index.n_good, index.n_defective,
                      records, time.perf_counter() - t0, checkpoint_digest, bank.k)


# --- latency ----------------------------------------------------------------------

STAGES = ("preprocess", "extract", "fuse_embed", "score")


@dataclass
class LatencyReport:
    iters: int
    warmup: int
    stages: dict[str, dict[str, float]]  # stage -> {mean, p50, p95} in ms
    total: dict[str, float]
    fps: float

    def share(self, *stages: str) -> float:
        """Fraction of the mean total spent in ``stages``."""
        return sum(self.stages[s]["mean"] for s in stages) / self.total["mean"]

    def to_dict(self) -> dict:
        return asdict(self)


def _summary(ms: np.ndarray) -> dict[str, float]:
    return {"mean": float(ms.mean()), "p50": float(np.percentile(ms, 50)),
            "p95": float(np.percentile(ms, 95))}


def bench_latency(embedder, adapter: BackboneAdapter, bank: ClusterBank, images: Sequence,
                  warmup: int = 3, iters: int = 20, profile: str = "crop") -> LatencyReport:
    """Single-stream, batch-size-one latency per pipeline stage.

    ``images`` are file paths or PIL images and are cycled. The total of an
    iteration is the sum of its stage times, and FPS is ``1000 / mean total``.
    """
    if iters < 1:
        raise ConfigurationError(f"iters must be >= 1, got {iters}")
    if warmup < 0:
        raise ConfigurationError(f"warmup must be >= 0, got {warmup}")
    if not images:
        raise ConfigurationError("bench needs at least one image")
    times = np.zeros((iters, len(STAGES)))
    for i in range(warmup + iters):
        src = images[i % len(images)]
        t0 = time.perf_counter()
        if isinstance(src, Image.Image):
            x = preprocess(src, adapter.input_size, profile)
        else:
            x = load_image(src, adapter.input_size, profile)
        t1 = time.perf_counter()
        layers = adapter.extract(x[None])
        t2 = time.perf_counter()
        emb = embed(embedder, fuse_features(layers), "eval")
        t3 = time.perf_counter()
        anomaly_score(emb[0], bank)
        t4 = time.perf_counter()
        if i >= warmup:
            times[i - warmup] = np.diff([t0, t1, t2, t3, t4]) * 1e3
    stages = {name: _summary(times[:, j]) for j, name in enumerate(STAGES)}
    total = _summary(times.sum(axis=1))
    return LatencyReport(iters, warmup, stages, total, 1e3 / total["mean"])
