"""Convert torchvision's pretrained VGG19 into the ``.npz`` layout read by
``FeatureExtractor.from_weight_file``.

    python tools/convert_vgg19.py vgg19.npz

Needs torchvision and network access for the first download; the package
itself never imports torchvision.
"""
import argparse

import numpy as np

LAYOUT = ((1, 2), (2, 2), (3, 4), (4, 4))


def convert(state_dict):
    """Map ``features.<idx>.{weight,bias}`` onto ``conv{b}_{i}.{weight,bias}``."""
    conv_indices = sorted({int(k.split(".")[1]) for k in state_dict if k.startswith("features.")})
    names = [f"conv{b}_{i}" for b, n in LAYOUT for i in range(1, n + 1)]
    out = {}
    for name, idx in zip(names, conv_indices):
        out[f"{name}.weight"] = state_dict[f"features.{idx}.weight"].detach().cpu().numpy()
        out[f"{name}.bias"] = state_dict[f"features.{idx}.bias"].detach().cpu().numpy()
    return out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out")
    args = parser.parse_args()
    from torchvision.models import VGG19_Weights, vgg19

    model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
    np.savez(args.out, **convert(model.state_dict()))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
