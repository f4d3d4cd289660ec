"""Command-line entry point: ``cse {synth,train,bank,score,eval,bench}``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
Runtime failures print one JSON object to stderr, e.g.
``{"error": "configuration", "message": "..."}``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, toydata
from .bank import KMeansConfig, build_bank, load_bank, save_bank
from .defectgen import TextureCorpus, sample_corruption
from .errors import ConfigurationError, CSEError
from .evaluation import bench_latency, evaluate, ingest_dataset, score_paths
from .features import load_backbone, load_image, to_uint8_image
from .numerics import derive_rng
from .training import (
    TrainConfig,
    embed_images,
    fit,
    load_checkpoint,
    load_config,
    save_checkpoint,
)

log = logging.getLogger("cse")


def _threads() -> int | None:
    raw = os.environ.get("CSE_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"CSE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"CSE_THREADS must be >= 1, got {n}")
    return n


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "backbone", None):
        cfg.backbone = _backbone_descriptor(args.backbone, cfg.backbone)
    if getattr(args, "textures", None):
        cfg.texture_dir = args.textures
    threads = _threads()
    if threads:
        cfg.workers = threads
    return cfg


def _backbone_descriptor(arg: str, base: dict) -> dict:
    if arg == "stub":
        return {"source": "stub", "seed": base.get("seed", 7) if base.get("source") == "stub" else 7}
    if arg.endswith(".json"):
        try:
            return json.loads(Path(arg).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read backbone descriptor {arg}: {exc}") from exc
    # a bare model file; tap points and shapes come from the configured descriptor
    return {**base, "source": arg}


def _load_pair(args):
    ckpt = load_checkpoint(args.checkpoint)
    bank = load_bank(args.bank)
    if bank.digest and bank.digest != ckpt.embedder.digest():
        raise ConfigurationError(
            f"bank {args.bank} was built with a different embedder than {args.checkpoint}")
    descriptor = ckpt.adapter_descriptor
    if args.backbone:
        descriptor = _backbone_descriptor(args.backbone, descriptor)
    return ckpt, bank, load_backbone(descriptor)


# --- subcommands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.toy:
        toydata.write_mvtec_tree(out, args.n, max(args.n // 3, 2), max(args.n // 3, 2), args.seed)
        print(f"wrote toy dataset to {out}")
        return 0
    if not args.dataset:
        raise ConfigurationError("synth needs --dataset ROOT or --toy")
    cfg = _config(args)
    index = ingest_dataset(args.dataset, args.layout)
    size = tuple(cfg.input_size)
    textures = TextureCorpus.from_directory(cfg.texture_dir, size) if cfg.texture_dir else None
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "w") as fh:
        for i in range(args.n):
            src = index.train_good[i % len(index.train_good)]
            img = load_image(src, size, cfg.profile)
            s = sample_corruption(img, derive_rng(cfg.seed, i), cfg.defect, textures)
            to_uint8_image(s.image).save(out / f"{i:04d}.png")
            mask = (s.mask.data * 255).astype(np.uint8)
            to_uint8_image(np.repeat(mask[None] / 255.0, 3, axis=0)).save(out / f"{i:04d}_mask.png")
            rec = {"image": f"{i:04d}.png", "mask": f"{i:04d}_mask.png", "source": src,
                   "kind": s.spec.kind.value, "coverage": s.mask.coverage, "beta": s.spec.beta}
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {args.n} corrupted samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    index = ingest_dataset(args.dataset, args.layout)
    adapter = load_backbone({**cfg.backbone, "input_size": list(cfg.input_size)})
    images = [load_image(p, tuple(cfg.input_size), cfg.profile) for p in index.train_good]
    ckpt = fit(images, cfg, adapter)
    digest = save_checkpoint(ckpt, args.out)
    print(json.dumps({"checkpoint": str(args.out), "sha256": digest, "epoch": ckpt.epoch,
                      "val_loss": ckpt.val_loss}))
    return 0


def cmd_bank(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    descriptor = ckpt.adapter_descriptor
    if args.backbone:
        descriptor = _backbone_descriptor(args.backbone, descriptor)
    adapter = load_backbone(descriptor)
    index = ingest_dataset(args.dataset, args.layout)
    profile = ckpt.config.get("profile", "crop")
    images = [load_image(p, adapter.input_size, profile) for p in index.train_good]
    emb = embed_images(ckpt, adapter, images)
    bank = build_bank(emb, args.k, KMeansConfig(seed=args.seed or 0), ckpt.embedder.digest())
    digest = save_bank(bank, args.out)
    print(json.dumps({"bank": str(args.out), "sha256": digest, "k": bank.k}))
    return 0


def cmd_score(args) -> int:
    ckpt, bank, adapter = _load_pair(args)
    index = ingest_dataset(args.dataset, args.layout)
    profile = ckpt.config.get("profile", "crop")
    scores = score_paths(ckpt.embedder, adapter, bank, [e.path for e in index.test], profile)
    records = [{"path": e.path, "score": float(s), "label": e.label} for e, s in zip(index.test, scores)]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        if args.format == "csv":
            w = csv.DictWriter(fh, fieldnames=["path", "score", "label"])
            w.writeheader()
            w.writerows({**r, "score": repr(r["score"])} for r in records)
        else:
            for r in records:
                fh.write(json.dumps(r) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_eval(args) -> int:
    ckpt, bank, adapter = _load_pair(args)
    index = ingest_dataset(args.dataset, args.layout)
    report = evaluate(ckpt.embedder, adapter, bank, index, ckpt.config.get("profile", "crop"),
                      ckpt.digest())
    out = Path(args.out) if args.out else Path("eval_report.json")
    report.write(out)
    print(f"AUROC {report.auroc:.4f}  (good={report.n_good}, defective={report.n_defective})  "
          f"report: {out}")
    return 0


def cmd_bench(args) -> int:
    ckpt, bank, adapter = _load_pair(args)
    index = ingest_dataset(args.dataset, args.layout)
    paths = [e.path for e in index.test] or index.train_good
    rep = bench_latency(ckpt.embedder, adapter, bank, paths, args.warmup, args.iters,
                        ckpt.config.get("profile", "crop"))
    for name, st in rep.stages.items():
        print(f"{name:<11} mean {st['mean']:8.2f} ms  p50 {st['p50']:8.2f}  p95 {st['p95']:8.2f}")
    print(f"{'total':<11} mean {rep.total['mean']:8.2f} ms  fps {rep.fps:.1f}  iters {rep.iters}")
    if args.out:
        Path(args.out).write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    return 0


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cse", description="Surface anomaly detection with contrastive embeddings.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--backbone", default=None, help="stub, an .onnx file or a descriptor .json")
        if dataset:
            sp.add_argument("--dataset", required=True, help="dataset root")
            sp.add_argument("--layout", choices=("mvtec", "flat"), default="mvtec")

    sp = sub.add_parser("synth", help="write corrupted samples and masks for inspection")
    sp.add_argument("--dataset", help="dataset root whose train images get corrupted")
    sp.add_argument("--layout", choices=("mvtec", "flat"), default="mvtec")
    sp.add_argument("--toy", action="store_true", help="write a procedural toy dataset instead")
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config")
    sp.add_argument("--textures", help="directory of anomaly-source textures")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train an embedder and write a checkpoint")
    common(sp)
    sp.add_argument("--config")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--textures", help="directory of anomaly-source textures")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("bank", help="build the cluster bank from clean training images")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--k", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bank)

    for name, func, help_ in (("score", cmd_score, "score test images"),
                              ("eval", cmd_eval, "image-level AUROC report"),
                              ("bench", cmd_bench, "per-stage latency")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--bank", required=True)
        sp.add_argument("--out")
        if name == "score":
            sp.add_argument("--format", choices=("json", "csv"), default="json")
        if name == "bench":
            sp.add_argument("--warmup", type=int, default=3)
            sp.add_argument("--iters", type=int, default=20)
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CSEError as exc:
        kind = exc.kind
        msg = str(exc)
    except (OSError, json.JSONDecodeError) as exc:
        kind, msg = "io", str(exc)
    print(json.dumps({"error": kind, "message": msg}), file=sys.stderr)
    return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
