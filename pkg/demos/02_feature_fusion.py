"""From pixels to a 64 x 7 x 7 embedding.

A frozen backbone supplies two feature maps: a mid-level one at 14 x 14 and a
deeper one at 7 x 7. The deeper map is upsampled and the two are concatenated
into a 520-channel stack. A small stack of pointwise convolutions then
compresses it to 64 channels, and an average pool smooths it to 7 x 7.

The seeded stub backbone used here has the same tap shapes as EfficientNet-b3,
so an exported ONNX model drops in with ``--backbone effnet_b3.json``.

    python3 demos/02_feature_fusion.py
"""
import argparse

import numpy as np

from cse import toydata
from cse.features import fuse_features, load_backbone
from cse.losses import cos_sim
from cse.model import EmbedderConfig, embed, init_embedder


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--backbone", default="stub")
    args = p.parse_args()

    adapter = load_backbone(args.backbone)
    images = toydata.make_corpus(3, seed=0)
    layers = adapter.extract(images[0][None])
    for name, f in zip(adapter.tap_points, layers):
        print(f"tap {name:<8} {tuple(f.shape[1:])}")
    fused = fuse_features(layers)
    print(f"fused        {tuple(fused.shape[1:])}")

    embedder = init_embedder(EmbedderConfig(), seed=0)
    print(f"embedder     {embedder.config.num_parameters():,} parameters")
    e = embed(embedder, fuse_features(adapter.extract(np.stack(images))), "eval")
    print(f"embedding    {tuple(e.shape[1:])}")
    # untrained, the embeddings of two clean samples are already close
    print(f"cos(clean0, clean1) = {cos_sim(e[0], e[1]):.4f}")


if __name__ == "__main__":
    main()
