"""Frames, frame sequences and the raw/processed/output triplet.

A frame is a float32 array of shape ``(H, W, 3)`` holding RGB intensities in
``[0, 1]``. Time indices are 0-based in code; user-facing output (CLI, logs)
prints ``t + 1`` so that the first frame of a video is frame 1.
"""
from __future__ import annotations

import fnmatch
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, DimensionMismatchError, NoFramesError

SIDECAR_NAME = "meta.json"


def check_frame(frame, name="frame"):
    """Validate a single frame and return it as a float32 ``(H, W, 3)`` array."""
    arr = np.asarray(frame, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionMismatchError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class FrameSequence:
    """An ordered, immutable stack of equally sized RGB frames."""

    frames: np.ndarray
    frame_rate: Optional[float] = None
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise DimensionMismatchError(f"expected frames of shape (T, H, W, 3), got {arr.shape}")
        if arr.shape[0] < 1:
            raise NoFramesError("a sequence needs at least one frame")
        if not np.all(np.isfinite(arr)):
            raise ValueError("frames contain non-finite values")
        arr = np.array(arr, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)

    @classmethod
    def from_frames(cls, frames: Sequence[np.ndarray], frame_rate=None, provenance=None):
        frames = [check_frame(f, name=f"frame {i + 1}") for i, f in enumerate(frames)]
        if not frames:
            raise NoFramesError("a sequence needs at least one frame")
        shape = frames[0].shape
        for i, f in enumerate(frames):
            if f.shape != shape:
                raise DimensionMismatchError(
                    f"frame {i + 1} has shape {f.shape}, expected {shape}"
                )
        return cls(np.stack(frames), frame_rate, provenance or {})

    def __len__(self):
        return self.frames.shape[0]

    def __getitem__(self, t):
        if isinstance(t, slice):
            return FrameSequence(self.frames[t], self.frame_rate, dict(self.provenance))
        return self.frames[t]

    def __iter__(self):
        return iter(self.frames)

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    @property
    def shape(self):
        return self.frames.shape

    def take(self, indices):
        return FrameSequence(self.frames[list(indices)], self.frame_rate, dict(self.provenance))

    def to_tensor(self, dtype=torch.float32):
        """Return a ``(T, 3, H, W)`` tensor copy."""
        return torch.from_numpy(np.ascontiguousarray(self.frames.transpose(0, 3, 1, 2))).to(dtype)

    @classmethod
    def from_tensor(cls, tensor, frame_rate=None, clamp=True):
        arr = tensor.detach().cpu().to(torch.float32).numpy().transpose(0, 2, 3, 1)
        if clamp:
            arr = np.clip(arr, 0.0, 1.0)
        return cls(arr, frame_rate)


@dataclass(frozen=True)
class VideoTriplet:
    """Raw frames ``I``, processed frames ``P`` and optional outputs ``O``/``O'``."""

    raw: FrameSequence
    processed: FrameSequence
    output: Optional[FrameSequence] = None
    output_backward: Optional[FrameSequence] = None

    def __post_init__(self):
        if self.raw.shape != self.processed.shape:
            raise DimensionMismatchError(
                f"raw {self.raw.shape} and processed {self.processed.shape} differ"
            )
        if self.output is not None:
            if self.output.shape != self.processed.shape:
                raise DimensionMismatchError(
                    f"output {self.output.shape} and processed {self.processed.shape} differ"
                )
            if not np.array_equal(self.output[0], self.processed[0]):
                raise ValueError("first output frame must equal the first processed frame")
        if self.output_backward is not None:
            if self.output_backward.shape[1:] != self.processed.shape[1:]:
                raise DimensionMismatchError("backward outputs have the wrong frame size")
            if len(self.output_backward) > len(self.processed) - 1:
                raise DimensionMismatchError(
                    "backward outputs must cover at most T - 1 frames of the window"
                )

    def __len__(self):
        return len(self.raw)

    def window(self, start, length):
        sl = slice(start, start + length)
        return VideoTriplet(self.raw[sl], self.processed[sl])


def natural_key(name):
    """Sort key that orders embedded integers numerically (frame-9 < frame-10)."""
    return [int(tok) if tok.isdigit() else tok.lower() for tok in re.split(r"(\d+)", name)]


def _decode(path):
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(path, str(exc)) from exc
    return arr


def load_frame_folder(path, pattern="*.png"):
    """Load every file in ``path`` matching ``pattern`` as one sequence.

    Files are ordered by natural filename order. An optional ``meta.json``
    sidecar supplies ``frame_rate`` and ``provenance``.
    """
    root = Path(path)
    if not root.is_dir():
        raise NoFramesError(f"{root} is not a directory")
    names = sorted(
        (p.name for p in root.iterdir() if p.is_file() and fnmatch.fnmatch(p.name, pattern)),
        key=natural_key,
    )
    if not names:
        raise NoFramesError(f"no files matching {pattern!r} in {root}")
    frames = []
    for name in names:
        arr = _decode(root / name)
        if frames and arr.shape != frames[0].shape:
            raise DimensionMismatchError(
                f"{root / name} is {arr.shape[1]}x{arr.shape[0]}, "
                f"expected {frames[0].shape[1]}x{frames[0].shape[0]}"
            )
        frames.append(arr)
    frame_rate, provenance = None, {}
    sidecar = root / SIDECAR_NAME
    if sidecar.is_file():
        meta = json.loads(sidecar.read_text())
        frame_rate = meta.get("frame_rate")
        provenance = meta.get("provenance", {})
    return FrameSequence(np.stack(frames), frame_rate, provenance)


def save_frame_folder(seq: FrameSequence, path, prefix="frame-", digits=4):
    """Write one 8-bit PNG per frame plus a ``meta.json`` sidecar."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for t, frame in enumerate(seq.frames):
        img = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
        out = root / f"{prefix}{t:0{digits}d}.png"
        Image.fromarray(img, mode="RGB").save(out)
        written.append(out)
    meta = {"frame_rate": seq.frame_rate, "provenance": seq.provenance, "frames": len(seq)}
    (root / SIDECAR_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return written


def resize_keep_aspect(seq: FrameSequence, target_height: int) -> FrameSequence:
    """Bilinearly resample every frame to ``target_height`` rows.

    The width becomes ``round(W * target_height / H)``. Sampling uses
    half-pixel centres without antialiasing.
    """
    if target_height < 1:
        raise ValueError("target_height must be >= 1")
    h, w = seq.height, seq.width
    new_w = max(1, int(round(w * target_height / h)))
    if (target_height, new_w) == (h, w):
        return seq
    x = seq.to_tensor(torch.float64)
    y = F.interpolate(x, size=(target_height, new_w), mode="bilinear", align_corners=False)
    arr = y.numpy().transpose(0, 2, 3, 1).astype(np.float32)
    return FrameSequence(np.clip(arr, 0.0, 1.0), seq.frame_rate, dict(seq.provenance))
