"""Full-scale run on the five MVTec AD surface categories.

This is the only script that needs external assets, none of which ship here:

* the MVTec AD dataset (``--mvtec ROOT`` containing ``carpet/``, ``grid/``, ...),
* a DTD-style texture directory for textural defects (``--textures DIR``),
* an ImageNet-pretrained EfficientNet-b3 exported with
  ``scripts/export_efficientnet_b3_onnx.py`` (``--backbone effnet_b3.json``).

Each category trains for 100 epochs with batch size 8 and learning rate 4e-4
under a one-cycle schedule, builds a single-centroid bank and reports image
AUROC. The mean over the five surfaces is compared with the published 99.8
within +-1.0. Expect hours of CPU time.

    python3 demos/mvtec_surfaces.py --mvtec /data/mvtec --textures /data/dtd/images \
        --backbone effnet_b3.json
"""
import argparse
import json
import logging
from pathlib import Path

from cse.bank import build_bank
from cse.evaluation import evaluate, ingest_dataset
from cse.features import load_backbone, load_image
from cse.training import TrainConfig, embed_images, fit

PUBLISHED = {"carpet": 100.0, "tile": 99.3, "wood": 100.0, "leather": 100.0, "grid": 99.6}
PUBLISHED_MEAN = 99.8
TOLERANCE = 1.0


def run_category(root: Path, cfg: TrainConfig, adapter) -> float:
    index = ingest_dataset(root, "mvtec")
    train = [load_image(p, adapter.input_size, cfg.profile) for p in index.train_good]
    ckpt = fit(train, cfg, adapter)
    bank = build_bank(embed_images(ckpt, adapter, train), 1)
    return evaluate(ckpt.embedder, adapter, bank, index, cfg.profile).auroc


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--mvtec", required=True)
    p.add_argument("--textures", required=True)
    p.add_argument("--backbone", required=True, help="descriptor .json from the export script")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="mvtec_surfaces.json")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    adapter = load_backbone(args.backbone)
    results = {}
    for cat in PUBLISHED:
        cfg = TrainConfig(epochs=args.epochs, seed=args.seed, texture_dir=args.textures,
                          backbone=adapter.descriptor())
        results[cat] = 100.0 * run_category(Path(args.mvtec) / cat, cfg, adapter)
        print(f"{cat:<8} AUROC {results[cat]:6.2f}  (published {PUBLISHED[cat]:.1f})")
    mean = sum(results.values()) / len(results)
    ok = abs(mean - PUBLISHED_MEAN) <= TOLERANCE
    print(f"mean     AUROC {mean:6.2f}  (published {PUBLISHED_MEAN:.1f}) -> {'PASS' if ok else 'FAIL'}")
    Path(args.out).write_text(json.dumps({"per_category": results, "mean": mean, "pass": ok}, indent=2) + "\n")


if __name__ == "__main__":
    main()
