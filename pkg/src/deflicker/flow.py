"""Dense optical flow, differentiable backward warping and flow-derived masks.

Flow convention: ``F_{a,b}`` lives on the pixel grid of frame ``a`` and
stores, for every pixel ``x`` of frame ``a``, the displacement to its
position in frame ``b``. Backward warping ``warp(V_b, F_{a,b})`` therefore
brings frame ``b`` onto the grid of frame ``a``::

    warp(V_b, F_{a,b})(x) = V_b(x + F_{a,b}(x))

Sampling is bilinear with border clamping.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
import torch

from .errors import DimensionMismatchError, EmptyMaskError, FlowFormatError, MissingFlowError

FLO_MAGIC = 202021.25
GROUND_TRUTH = "ground_truth"
ESTIMATED = "estimated"

# backward-forward consistency constants
CONSISTENCY_C1 = 0.01
CONSISTENCY_C2 = 0.5
BOUNDARY_C1 = 0.01
BOUNDARY_C2 = 0.002


@dataclass(frozen=True)
class FlowField:
    """Displacement field ``F_{source_time, target_time}`` of shape ``(H, W, 2)``.

    ``displacement[..., 0]`` is dx (columns), ``displacement[..., 1]`` is dy (rows).
    """

    displacement: np.ndarray
    source_time: Optional[int] = None
    target_time: Optional[int] = None
    provenance: str = ESTIMATED

    def __post_init__(self):
        arr = np.asarray(self.displacement, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise DimensionMismatchError(f"flow must have shape (H, W, 2), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("flow contains non-finite displacements")
        arr = np.array(arr, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "displacement", arr)

    @classmethod
    def uniform(cls, height, width, dx, dy, **kw):
        arr = np.empty((height, width, 2), np.float32)
        arr[..., 0] = dx
        arr[..., 1] = dy
        return cls(arr, **kw)

    @classmethod
    def zeros(cls, height, width, **kw):
        return cls.uniform(height, width, 0.0, 0.0, **kw)

    @property
    def height(self):
        return self.displacement.shape[0]

    @property
    def width(self):
        return self.displacement.shape[1]

    def to_tensor(self, dtype=torch.float32):
        """Return a ``(2, H, W)`` tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.displacement.transpose(2, 0, 1))).to(dtype)


def _flow_tensor(flow, dtype):
    if isinstance(flow, FlowField):
        return flow.to_tensor(dtype)
    if isinstance(flow, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(flow.transpose(2, 0, 1))).to(dtype)
    return flow.to(dtype)


def warp_tensor(x, flow):
    """Backward-warp ``x`` (``(N, C, H, W)`` or ``(C, H, W)``) by ``flow``.

    ``flow`` has shape ``(N, 2, H, W)`` or ``(2, H, W)``. Differentiable with
    respect to both ``x`` and ``flow``.
    """
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if flow.dim() == 3:
        flow = flow.unsqueeze(0)
    n, c, h, w = x.shape
    if flow.shape[-2:] != (h, w) or flow.shape[1] != 2:
        raise DimensionMismatchError(
            f"flow {tuple(flow.shape)} does not match frame {tuple(x.shape)}"
        )
    flow = flow.to(x.dtype).expand(n, 2, h, w)
    ys = torch.arange(h, dtype=x.dtype).view(1, h, 1)
    xs = torch.arange(w, dtype=x.dtype).view(1, 1, w)
    px = (xs + flow[:, 0]).clamp(0, w - 1)
    py = (ys + flow[:, 1]).clamp(0, h - 1)
    x0 = px.detach().floor()
    y0 = py.detach().floor()
    wx = px - x0
    wy = py - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = x.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).view(n, c, h, w)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    out = top * (1 - wy) + bottom * wy
    return out[0] if squeeze else out


def warp(frame, flow):
    """Warp an ``(H, W, C)`` array or a channel-first tensor by ``flow``.

    Numpy frames come back as numpy arrays; tensors stay tensors (and keep
    their autograd graph).
    """
    if isinstance(frame, torch.Tensor):
        ft = _flow_tensor(flow, frame.dtype)
        if ft.shape[-2:] != frame.shape[-2:]:
            raise DimensionMismatchError(
                f"flow {tuple(ft.shape)} does not match frame {tuple(frame.shape)}"
            )
        return warp_tensor(frame, ft)
    arr = np.asarray(frame)
    disp = flow.displacement if isinstance(flow, FlowField) else np.asarray(flow)
    if disp.shape[:2] != arr.shape[:2]:
        raise DimensionMismatchError(f"flow {disp.shape} does not match frame {arr.shape}")
    x = torch.from_numpy(np.ascontiguousarray(np.moveaxis(arr, -1, 0))).to(torch.float64)
    out = warp_tensor(x, _flow_tensor(flow, torch.float64))
    return np.moveaxis(out.numpy(), 0, -1).astype(arr.dtype)


def visibility_mask(frame_t, frame_prev, flow, alpha=50.0):
    """Continuous mask ``exp(-alpha * ||I_t - warp(I_prev, F)||^2)`` per pixel.

    The squared norm runs over the RGB channels. Accepts ``(H, W, 3)`` arrays
    (returns ``(H, W)``) or channel-first tensors (returns ``(..., 1, H, W)``).
    """
    if isinstance(frame_t, torch.Tensor):
        if frame_t.shape != frame_prev.shape:
            raise DimensionMismatchError("frames differ in shape")
        err = (frame_t - warp(frame_prev, flow)).pow(2).sum(dim=-3, keepdim=True)
        return torch.exp(-alpha * err)
    a = np.asarray(frame_t, dtype=np.float64)
    b = np.asarray(frame_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"frames differ in shape: {a.shape} vs {b.shape}")
    err = np.sum((a - warp(b, flow)) ** 2, axis=-1)
    return np.exp(-alpha * err)


def _flow_gradient_sq(disp):
    # forward differences; zero past the last row/column
    dx = np.zeros_like(disp)
    dy = np.zeros_like(disp)
    dx[:, :-1] = disp[:, 1:] - disp[:, :-1]
    dy[:-1] = disp[1:] - disp[:-1]
    return np.sum(dx ** 2 + dy ** 2, axis=-1)


def occlusion_mask(forward: FlowField, backward: FlowField) -> np.ndarray:
    """Binary non-occlusion mask for the grid of ``forward``'s source frame.

    ``forward`` is ``F_{t,t+1}`` and ``backward`` is ``F_{t+1,t}``. A pixel is
    marked 0 when it leaves the frame, fails the backward-forward
    consistency check, or sits on a motion boundary.
    """
    f = np.asarray(forward.displacement, np.float64)
    b = np.asarray(backward.displacement, np.float64)
    if f.shape != b.shape:
        raise DimensionMismatchError(f"forward {f.shape} and backward {b.shape} differ")
    h, w = f.shape[:2]
    b_warped = warp(b, f)
    residual = np.sum((f + b_warped) ** 2, axis=-1)
    bound = CONSISTENCY_C1 * (np.sum(f ** 2, axis=-1) + np.sum(b_warped ** 2, axis=-1)) + CONSISTENCY_C2
    inconsistent = residual > bound
    boundary = _flow_gradient_sq(f) > BOUNDARY_C1 * np.sum(f ** 2, axis=-1) + BOUNDARY_C2
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + f[..., 0]
    ty = ys + f[..., 1]
    outside = (tx < 0) | (tx > w - 1) | (ty < 0) | (ty > h - 1)
    return (~(inconsistent | boundary | outside)).astype(np.float32)


def mean_nonoccluded_error(frame_a, frame_b_warped, mask):
    """Mean over unmasked pixels of the squared RGB distance between two frames."""
    if isinstance(frame_a, torch.Tensor):
        m = torch.as_tensor(mask, dtype=frame_a.dtype)
        total = m.sum()
        if float(total) == 0.0:
            raise EmptyMaskError("mask has no visible pixels")
        err = (frame_a - frame_b_warped).pow(2).sum(dim=-3)
        return (m * err).sum() / total
    a = np.asarray(frame_a, np.float64)
    b = np.asarray(frame_b_warped, np.float64)
    m = np.asarray(mask, np.float64)
    if a.shape != b.shape or m.shape != a.shape[:2]:
        raise DimensionMismatchError(f"shapes differ: {a.shape}, {b.shape}, mask {m.shape}")
    total = m.sum()
    if total == 0:
        raise EmptyMaskError("mask has no visible pixels")
    return float(np.sum(m * np.sum((a - b) ** 2, axis=-1)) / total)


def compose(first: FlowField, second: FlowField) -> FlowField:
    """Chain ``F_{a,b}`` and ``F_{b,c}`` into ``F_{a,c}``."""
    f = np.asarray(first.displacement, np.float64)
    s = np.asarray(second.displacement, np.float64)
    out = f + warp(s, f)
    prov = GROUND_TRUTH if first.provenance == second.provenance == GROUND_TRUTH else ESTIMATED
    return FlowField(out, first.source_time, second.target_time, prov)


# --- flow sources -----------------------------------------------------------


class FlowProvider(Protocol):
    """Anything that can return ``F_{a,b}`` for a pair of frames.

    Index-backed stores use ``src``/``dst``; estimators use the pixels.
    """

    def flow(self, frame_a, frame_b, *, src=None, dst=None) -> FlowField: ...


class FlowStore:
    """Index-keyed flow lookup; missing pairs are composed from stored neighbours."""

    compose_missing = True

    def lookup(self, src, dst) -> Optional[FlowField]:
        raise NotImplementedError

    def get(self, src, dst) -> FlowField:
        found = self.lookup(src, dst)
        if found is not None:
            return found
        if src == dst:
            raise MissingFlowError(src, dst)
        if self.compose_missing and abs(dst - src) > 1:
            step = 1 if dst > src else -1
            acc = self.lookup(src, src + step)
            t = src + step
            while acc is not None and t != dst:
                nxt = self.lookup(t, t + step)
                if nxt is None:
                    acc = None
                    break
                acc = compose(acc, nxt)
                t += step
            if acc is not None:
                return acc
        raise MissingFlowError(src, dst)

    def flow(self, frame_a, frame_b, *, src=None, dst=None):
        if src is None or dst is None:
            raise MissingFlowError(src, dst)
        return self.get(src, dst)


class DictFlowStore(FlowStore):
    def __init__(self, flows=None):
        self._flows = dict(flows or {})

    def add(self, field: FlowField):
        self._flows[(field.source_time, field.target_time)] = field

    def lookup(self, src, dst):
        return self._flows.get((src, dst))

    def __len__(self):
        return len(self._flows)

    def __iter__(self):
        return iter(self._flows.values())


FLOW_NAME = "flow_{src:04d}_{dst:04d}.flo"
_FLOW_RE = re.compile(r"flow_(\d+)_(\d+)\.flo$")


class FloDirectoryStore(FlowStore):
    """Reads ``flow_<src>_<dst>.flo`` files (0-based indices) on demand."""

    def __init__(self, root, provenance=ESTIMATED):
        self.root = Path(root)
        self.provenance = provenance
        self.reads = 0

    def available(self):
        pairs = []
        for p in self.root.iterdir():
            m = _FLOW_RE.match(p.name)
            if m:
                pairs.append((int(m.group(1)), int(m.group(2))))
        return sorted(pairs)

    def lookup(self, src, dst):
        path = self.root / FLOW_NAME.format(src=src, dst=dst)
        if not path.is_file():
            return None
        self.reads += 1
        disp = read_flo(path)
        return FlowField(disp, src, dst, self.provenance)


# --- .flo files -------------------------------------------------------------


def write_flo(path, flow):
    """Write a Middlebury-layout ``.flo`` file (little-endian float32)."""
    disp = flow.displacement if isinstance(flow, FlowField) else np.asarray(flow)
    disp = np.ascontiguousarray(disp, dtype="<f4")
    h, w = disp.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(disp.tobytes(order="C"))


def read_flo(path) -> np.ndarray:
    """Read a ``.flo`` file into an ``(H, W, 2)`` float32 array."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FlowFormatError(f"{path}: truncated header")
    magic, w, h = struct.unpack("<fii", data[:12])
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r}")
    if w < 1 or h < 1:
        raise FlowFormatError(f"{path}: bad size {w}x{h}")
    expected = 12 + 8 * w * h
    if len(data) != expected:
        raise FlowFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2)
    return arr.astype(np.float32)
