"""Export torchvision's EfficientNet-b3 trunk to ONNX with two feature taps.

Writes ``<out>.onnx`` whose outputs ``block5`` (136 x 14 x 14) and ``block7``
(384 x 7 x 7) are the stage outputs the embedder expects, plus a descriptor
``<out>.json`` that ``cse --backbone`` accepts directly.

Needs torch, torchvision and onnx, none of which the library itself imports.

    python3 scripts/export_efficientnet_b3_onnx.py --out effnet_b3
    python3 scripts/export_efficientnet_b3_onnx.py --out effnet_b3 --weights none   # offline smoke run
"""
import argparse
import json
from pathlib import Path

import torch
from torchvision.models import EfficientNet_B3_Weights, efficientnet_b3


class Taps(torch.nn.Module):
    def __init__(self, features):
        super().__init__()
        self.features = features

    def forward(self, x):
        outs = []
        for i, stage in enumerate(self.features[:8]):
            x = stage(x)
            if i in (5, 7):
                outs.append(x)
        return tuple(outs)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="effnet_b3")
    p.add_argument("--weights", default="IMAGENET1K_V1", help="torchvision weight name, or 'none'")
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--opset", type=int, default=17)
    args = p.parse_args()

    weights = None if args.weights.lower() == "none" else EfficientNet_B3_Weights[args.weights]
    model = Taps(efficientnet_b3(weights=weights).features).eval()
    dummy = torch.zeros(1, 3, args.size, args.size)
    with torch.no_grad():
        shapes = [list(t.shape[1:]) for t in model(dummy)]

    out = Path(args.out)
    onnx_path = out.with_suffix(".onnx")
    torch.onnx.export(model, dummy, str(onnx_path), input_names=["input"], output_names=["block5", "block7"],
                      dynamic_axes={"input": {0: "n"}, "block5": {0: "n"}, "block7": {0: "n"}},
                      opset_version=args.opset, dynamo=False)
    descriptor = {
        "source": str(onnx_path.resolve()),
        "input_name": "input",
        "tap_points": ["block5", "block7"],
        "declared_shapes": shapes,
        "input_size": [args.size, args.size],
        "mean": [0.485, 0.456, 0.406],
        "std": [0.229, 0.224, 0.225],
    }
    out.with_suffix(".json").write_text(json.dumps(descriptor, indent=2) + "\n")
    print(f"wrote {onnx_path} and {out.with_suffix('.json')}; tap shapes {shapes}")


if __name__ == "__main__":
    main()
