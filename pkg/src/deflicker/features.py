"""Perceptual feature extraction on a VGG19 trunk, plus per-channel moments.

Two weight sources share one topology:

* ``FeatureExtractor.from_weight_file(path)`` loads a flat ``.npz`` archive
  mapping ``conv{b}_{i}.weight`` / ``conv{b}_{i}.bias`` to arrays of shape
  ``(out, in, 3, 3)`` and ``(out,)``. ``tools/convert_vgg19.py`` produces it
  from torchvision's VGG19 state dict.
* ``FeatureExtractor.fixed_random(seed)`` draws He-initialised weights from
  a seeded generator, so tests never need downloads.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FrameTooSmallError

BLOCKS = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")
STYLE_BLOCKS = ("relu1_2", "relu2_2")

# (block, convs in block) for VGG19 up to the fourth block
_VGG19_LAYOUT = ((1, 2), (2, 2), (3, 4), (4, 4))
_BASE_WIDTHS = (64, 128, 256, 512)
# last conv needed in each block to reach the tapped activation
_TAP = {"relu1_2": (1, 2), "relu2_2": (2, 2), "relu3_3": (3, 3), "relu4_3": (4, 3)}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
STATS_EPS = 1e-8


def min_size(block):
    """Smallest frame side that still leaves a 2x2 map at ``block``."""
    return 2 ** _TAP[block][0]


@dataclass(frozen=True)
class ChannelStats:
    mean: torch.Tensor
    std: torch.Tensor


def channel_stats(block):
    """Per-channel spatial mean and population std of an activation map.

    ``block`` has shape ``(..., C, h, w)``; the moments are taken over the
    last two axes, with ``1e-8`` added under the square root.
    """
    if isinstance(block, np.ndarray):
        block = torch.from_numpy(block)
    if block.numel() == 0:
        raise ValueError("empty activation map")
    flat = block.flatten(-2)
    mean = flat.mean(-1)
    var = flat.var(-1, unbiased=False)
    return ChannelStats(mean, torch.sqrt(var + STATS_EPS))


def _layer_names(last=(4, 3)):
    names = []
    for b, n in _VGG19_LAYOUT:
        for i in range(1, n + 1):
            if (b, i) > last:
                return names
            names.append(f"conv{b}_{i}")
    return names


class FeatureExtractor(nn.Module):
    """Frozen VGG19 trunk returning the activations ``relu1_2`` .. ``relu4_3``.

    ``width`` scales every channel count (1.0 reproduces VGG19); narrower
    trunks keep the layer structure and are meant for CPU-scale experiments.
    """

    def __init__(self, weights: dict, provenance: str, normalize=True):
        super().__init__()
        self.provenance = provenance
        self.normalize = normalize
        self.convs = nn.ModuleDict()
        for name in _layer_names():
            w = torch.as_tensor(np.asarray(weights[f"{name}.weight"], np.float32))
            b = torch.as_tensor(np.asarray(weights[f"{name}.bias"], np.float32))
            conv = nn.Conv2d(w.shape[1], w.shape[0], 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(w)
                conv.bias.copy_(b)
            self.convs[name] = conv
        self.requires_grad_(False)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN, dtype=torch.float64).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD, dtype=torch.float64).view(1, 3, 1, 1))

    @classmethod
    def fixed_random(cls, seed=0, width=1.0):
        gen = torch.Generator().manual_seed(seed)
        weights = {}
        c_in = 3
        for (b, n), base in zip(_VGG19_LAYOUT, _BASE_WIDTHS):
            c_out = max(1, int(round(base * width)))
            for i in range(1, n + 1):
                std = (2.0 / (c_in * 9)) ** 0.5
                weights[f"conv{b}_{i}.weight"] = torch.randn(c_out, c_in, 3, 3, generator=gen) * std
                weights[f"conv{b}_{i}.bias"] = (torch.rand(c_out, generator=gen) - 0.5) * 0.2
                c_in = c_out
        return cls(weights, provenance=f"fixed_random(seed={seed}, width={width})")

    @classmethod
    def from_weight_file(cls, path):
        with np.load(Path(path)) as data:
            weights = {k: data[k] for k in data.files}
        return cls(weights, provenance=f"pretrained_file({Path(path).name})")

    def weight_arrays(self):
        out = {}
        for name, conv in self.convs.items():
            out[f"{name}.weight"] = conv.weight.detach().numpy().copy()
            out[f"{name}.bias"] = conv.bias.detach().numpy().copy()
        return out

    def save(self, path):
        np.savez(path, **self.weight_arrays())

    def forward(self, x, blocks=BLOCKS):
        """Return ``{block: (N, C, h, w)}`` for a ``(N, 3, H, W)`` batch."""
        blocks = tuple(blocks)
        unknown = set(blocks) - set(BLOCKS)
        if unknown:
            raise KeyError(f"unknown feature blocks: {sorted(unknown)}")
        if not blocks:
            return {}
        need = max(min_size(b) for b in blocks)
        if min(x.shape[-2:]) < need:
            raise FrameTooSmallError(
                f"frame {tuple(x.shape[-2:])} too small for {max(blocks, key=min_size)}; "
                f"needs at least {need}x{need}"
            )
        last = max(_TAP[b] for b in blocks)
        wanted = {_TAP[b]: b for b in blocks}
        if self.normalize:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out = {}
        for b, n in _VGG19_LAYOUT:
            if b > 1:
                x = F.max_pool2d(x, 2)
            for i in range(1, n + 1):
                if (b, i) > last:
                    return out
                conv = self.convs[f"conv{b}_{i}"]
                x = F.relu(F.conv2d(x, conv.weight.to(x.dtype), conv.bias.to(x.dtype), padding=1))
                if (b, i) in wanted:
                    out[wanted[(b, i)]] = x
        return out

    def extract(self, frame, blocks=BLOCKS):
        """Features of a single frame.

        ``frame`` may be an ``(H, W, 3)`` array or a ``(3, H, W)`` tensor;
        maps come back without the batch axis.
        """
        if isinstance(frame, np.ndarray):
            x = torch.from_numpy(np.ascontiguousarray(frame.transpose(2, 0, 1)))
        else:
            x = frame
        x = x.unsqueeze(0)
        if not x.is_floating_point():
            x = x.float()
        feats = self.forward(x, blocks)
        return {k: v[0] for k, v in feats.items()}
