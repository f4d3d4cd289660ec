"""Surface anomaly detection with a contrastively trained embedding.

A frozen backbone's multi-scale features are fused, compressed by a small
1x1-convolution embedder and compared by cosine distance against a bank of
clean-image centroids. Training pairs clean anchors with clean or
synthetically corrupted partners.
"""
__version__ = "0.1.0"

from .bank import ClusterBank, anomaly_score, build_bank, load_bank, save_bank
from .defectgen import DefectConfig, DefectKind, sample_corruption
from .errors import (
    ConfigurationError,
    CorruptFileError,
    CSEError,
    DegenerateInputError,
    EvaluationError,
    GenerationError,
    PersistenceError,
    RejectedInputError,
    TrainingError,
    VersionError,
)
from .evaluation import bench_latency, compute_auroc, evaluate, ingest_dataset
from .features import fuse_features, load_backbone, preprocess
from .losses import contrastive_loss, cos_sim, reconstruction_loss, total_loss
from .model import DecoderMode, embed, init_decoder, init_embedder
from .training import TrainConfig, embed_images, fit, load_checkpoint, save_checkpoint
