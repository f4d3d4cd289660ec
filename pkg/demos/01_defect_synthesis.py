"""Synthetic defects on a clean texture.

Training never sees a real defect. Instead each clean image is paired with a
corrupted copy: a thresholded Perlin mask picks where the damage goes, and one
of three kinds fills it in. Textural defects paste a foreign texture, structural
defects shuffle 8x8 patches of the image itself, and blur defects smear the
masked region. Pixels outside the mask are untouched.

This script draws a few of each kind and saves them side by side.

    python3 demos/01_defect_synthesis.py --out demo_out
"""
import argparse
from pathlib import Path

import numpy as np

from cse import toydata
from cse.defectgen import DefectKind, sample_corruption
from cse.features import to_uint8_image
from cse.numerics import derive_rng


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="demo_out")
    p.add_argument("--per-kind", type=int, default=3)
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    clean = toydata.make_corpus(1, seed=0)[0]
    textures = toydata.make_source_corpus(4, seed=1)

    # keep drawing until every kind has enough examples
    found = {k: [] for k in DefectKind}
    i = 0
    while min(len(v) for v in found.values()) < args.per_kind:
        s = sample_corruption(clean, derive_rng(42, i), textures=textures)
        if len(found[s.spec.kind]) < args.per_kind:
            found[s.spec.kind].append(s)
        i += 1

    rows = []
    for kind, samples in found.items():
        for s in samples:
            outside = ~s.mask.data
            assert np.array_equal(s.image[:, outside], clean[:, outside])
            print(f"{kind.value:<10} coverage {s.mask.coverage:6.1%}  beta {s.spec.beta:.2f}")
        mask_rgb = [np.repeat(s.mask.data[None].astype(np.float32), 3, axis=0) for s in samples]
        rows.append(np.concatenate([clean] + [s.image for s in samples] + mask_rgb, axis=2))
    to_uint8_image(np.concatenate(rows, axis=1)).save(out / "defects.png")
    print(f"rows: {', '.join(k.value for k in found)}; columns: clean, samples, masks -> {out / 'defects.png'}")


if __name__ == "__main__":
    main()
