"""Evaluation: warping error and perceptual distance of post-processed videos."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np
import torch

from .errors import DimensionMismatchError, EmptyMaskError, MissingOutputError, WindowTooShortError
from .features import BLOCKS, FeatureExtractor
from .flow import mean_nonoccluded_error, occlusion_mask, warp
from .video import FrameSequence, VideoTriplet


@dataclass(frozen=True)
class VideoScore:
    warping_error: float
    perceptual_distance: float
    frames_counted: int
    skipped_pairs: int


@dataclass(frozen=True)
class WarpingErrorResult:
    value: float
    per_pair: tuple
    frames_counted: int
    skipped_pairs: int


class PerceptualEmbedder(Protocol):
    def distance(self, a, b) -> float: ...


class FeatureEmbedder:
    """LPIPS-style distance on a frozen feature trunk.

    Activations are unit-normalised across channels at every position; the
    squared differences are summed over channels, averaged over positions
    and summed over blocks.
    """

    def __init__(self, extractor: FeatureExtractor, blocks=BLOCKS):
        self.extractor = extractor
        self.blocks = tuple(blocks)

    @classmethod
    def fixed_random(cls, seed=0, width=0.25):
        return cls(FeatureExtractor.fixed_random(seed, width))

    @torch.no_grad()
    def distance(self, a, b):
        x = torch.from_numpy(np.stack([np.asarray(a, np.float32), np.asarray(b, np.float32)]).transpose(0, 3, 1, 2))
        x = x.double()
        feats = self.extractor(x, self.blocks)
        total = 0.0
        for name in self.blocks:
            f = feats[name]
            f = f / (f.pow(2).sum(1, keepdim=True).sqrt() + 1e-10)
            total += float((f[0] - f[1]).pow(2).sum(0).mean())
        return total


class MeanAbsEmbedder:
    """Mean absolute pixel difference; a transparent stand-in for tests."""

    def distance(self, a, b):
        return float(np.mean(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def _frames(seq):
    return seq.frames if isinstance(seq, FrameSequence) else np.asarray(seq)


def pair_flows(flow_provider, reference, t):
    """Return ``(F_{t,t+1}, F_{t+1,t})`` for the frames of ``reference``."""
    ref = _frames(reference)
    fwd = flow_provider.flow(ref[t], ref[t + 1], src=t, dst=t + 1)
    bwd = flow_provider.flow(ref[t + 1], ref[t], src=t + 1, dst=t)
    return fwd, bwd


def warping_error_details(video, flow_provider, reference=None,
                          mask_fn: Optional[Callable] = None) -> WarpingErrorResult:
    """Per-pair warping errors of ``video`` with flows taken on ``reference``.

    ``mask_fn(t, forward, backward)`` overrides the backward-forward
    occlusion check (e.g. with analytic masks). Pairs whose mask is empty
    are skipped.
    """
    frames = _frames(video)
    ref = frames if reference is None else _frames(reference)
    if len(frames) < 2:
        raise WindowTooShortError("warping error needs at least 2 frames")
    if ref.shape != frames.shape:
        raise DimensionMismatchError(f"reference {ref.shape} does not match video {frames.shape}")
    errors, skipped = [], 0
    for t in range(len(frames) - 1):
        fwd, bwd = pair_flows(flow_provider, ref, t)
        mask = mask_fn(t, fwd, bwd) if mask_fn is not None else occlusion_mask(fwd, bwd)
        try:
            errors.append(mean_nonoccluded_error(frames[t], warp(frames[t + 1].astype(np.float64), fwd), mask))
        except EmptyMaskError:
            skipped += 1
    value = float(np.mean(errors)) if errors else math.nan
    return WarpingErrorResult(value, tuple(errors), len(errors), skipped)


def warping_error(video, flow_provider, reference=None, mask_fn=None) -> float:
    """Mean non-occluded warping error between successive frames."""
    return warping_error_details(video, flow_provider, reference, mask_fn).value


def perceptual_distance(P, O, embedder: PerceptualEmbedder) -> float:
    """Mean embedder distance between ``O_t`` and ``P_t`` over all but the first frame."""
    p, o = _frames(P), _frames(O)
    if p.shape != o.shape:
        raise DimensionMismatchError(f"processed {p.shape} and output {o.shape} differ")
    if len(p) < 2:
        raise WindowTooShortError("perceptual distance needs at least 2 frames")
    return float(np.mean([embedder.distance(o[t], p[t]) for t in range(1, len(p))]))


def score_video(triplet: VideoTriplet, flow_provider, embedder: PerceptualEmbedder,
                flow_source="raw", mask_fn=None) -> VideoScore:
    """Both metrics for ``triplet.output`` plus pair bookkeeping.

    ``flow_source`` picks the frames flows are computed on: ``"raw"`` (I)
    or ``"self"`` (the scored video).
    """
    if triplet.output is None:
        raise MissingOutputError("triplet has no output sequence to score")
    if flow_source not in ("raw", "self"):
        raise ValueError(f"flow_source must be 'raw' or 'self', got {flow_source!r}")
    reference = triplet.raw if flow_source == "raw" else triplet.output
    we = warping_error_details(triplet.output, flow_provider, reference, mask_fn)
    pd = perceptual_distance(triplet.processed, triplet.output, embedder)
    return VideoScore(we.value, pd, we.frames_counted, we.skipped_pairs)


def temporal_average(seq, radius=2) -> FrameSequence:
    """Centred moving average over ``2 * radius + 1`` frames (clipped at the ends)."""
    frames = _frames(seq).astype(np.float64)
    out = np.empty_like(frames)
    for t in range(len(frames)):
        lo, hi = max(0, t - radius), min(len(frames), t + radius + 1)
        out[t] = frames[lo:hi].mean(0)
    return FrameSequence(out.astype(np.float32))
