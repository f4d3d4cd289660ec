"""Train the embedder, build the bank and score held-out images.

Training pairs each clean anchor with either another clean image (pull the
embeddings together) or a synthetic defect (push them apart). A frozen random
decoder must reconstruct the backbone features from the embedding, which keeps
the embedding from collapsing to a constant.

After training, the clean training embeddings are averaged into a single
centroid. A test image scores ``1 - cos`` against it, so higher means more
anomalous.

The defaults reproduce the desk-scale benchmark and take about five minutes on
one core. ``--epochs 3 --steps 10`` gives a quick look.

    python3 demos/03_train_and_score.py
"""
import argparse
import logging

from cse import toydata
from cse.bank import build_bank, score_batch
from cse.evaluation import compute_auroc
from cse.features import load_backbone
from cse.training import TrainConfig, embed_images, fit


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--steps", type=int, default=80, help="pair batches per epoch")
    p.add_argument("--k", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    stub = load_backbone("stub")
    train = toydata.make_corpus(60, 1)
    cfg = TrainConfig(epochs=args.epochs, seed=7, steps_per_epoch=args.steps)
    ckpt = fit(train, cfg, stub, textures=toydata.make_source_corpus(8, 2))
    print(f"best epoch {ckpt.epoch}, validation loss {ckpt.val_loss:.4f}")

    bank = build_bank(embed_images(ckpt, stub, train), args.k)
    good = toydata.make_corpus(30, 3)
    bad = toydata.corrupt_all(toydata.make_corpus(30, 4), 5, textures=toydata.make_source_corpus(8, 6))
    scores = score_batch(embed_images(ckpt, stub, good + bad), bank)
    print(f"mean score clean {scores[:30].mean():.4f}  defective {scores[30:].mean():.4f}")
    print(f"AUROC {compute_auroc(scores, [False] * 30 + [True] * 30):.4f}")


if __name__ == "__main__":
    main()
