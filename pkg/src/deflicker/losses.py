"""Training objectives: perceptual, style-preserving, temporal, Ping Pong and low-rank.

Sequences are tensors of shape ``(T, 3, H, W)`` or ``(N, T, 3, H, W)``.
Every loss returns the per-window value; batched inputs are averaged over
``N``. Time indices are 0-based: the first frame of a window is ``t = 0``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import torch

from .errors import MissingFlowError, ShapeError, WindowTooShortError
from .features import BLOCKS, STYLE_BLOCKS, channel_stats
from .flow import occlusion_mask, warp_tensor
from .network import RolloutResult

LUMA = (0.299, 0.587, 0.114)
SVD_CUTOFF = 1e-8
VISIBILITY_ALPHA = 50.0


@dataclass(frozen=True)
class LossWeights:
    content: float = 10.0
    style: float = 10.0
    short_term: float = 100.0
    long_term: float = 100.0
    rank: float = 1e-5
    pingpong: float = 100.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class LossReport:
    terms: dict
    total: float
    step: Optional[int] = None

    def to_json(self):
        return json.dumps({"step": self.step, "terms": self.terms, "total": self.total}, sort_keys=True)


def _batched(x):
    if x.dim() == 4:
        return x.unsqueeze(0)
    if x.dim() != 5:
        raise ShapeError(f"expected (T, C, H, W) or (N, T, C, H, W), got {tuple(x.shape)}")
    return x


def _check_pair(O, P):
    if O.shape != P.shape:
        raise ShapeError(f"sequences differ in shape: {tuple(O.shape)} vs {tuple(P.shape)}")
    if O.shape[1] < 2:
        raise WindowTooShortError("loss needs at least 2 frames")


def sequence_features(seq, extractor, blocks):
    """Run ``extractor`` over every frame of a ``(N, T, 3, H, W)`` sequence."""
    n, t = seq.shape[:2]
    feats = extractor(seq.reshape(n * t, *seq.shape[2:]), blocks)
    return {k: v.reshape(n, t, *v.shape[1:]) for k, v in feats.items()}


# -- perceptual ---------------------------------------------------------------


def content_perceptual(O, P, extractor, blocks=BLOCKS, p_features=None):
    """Sum over ``t >= 1`` and blocks of the mean absolute feature difference."""
    O, P = _batched(O), _batched(P)
    _check_pair(O, P)
    fo = sequence_features(O[:, 1:], extractor, blocks)
    fp = p_features if p_features is not None else sequence_features(P[:, 1:], extractor, blocks)
    total = 0.0
    for b in blocks:
        diff = (fo[b] - fp[b]).abs().flatten(2).mean(-1)
        total = total + diff.sum(1)
    return total.mean()


def _stats_distance(fa, fb):
    sa, sb = channel_stats(fa), channel_stats(fb)
    return (sa.mean - sb.mean).pow(2).sum(-1) + (sa.std - sb.std).pow(2).sum(-1)


def style_preserving(O, P, extractor, blocks=STYLE_BLOCKS, p_features=None):
    """Squared distance between per-channel feature means and stds of ``O_t`` and ``P_t``."""
    O, P = _batched(O), _batched(P)
    _check_pair(O, P)
    fo = sequence_features(O[:, 1:], extractor, blocks)
    fp = p_features if p_features is not None else sequence_features(P[:, 1:], extractor, blocks)
    total = 0.0
    for b in blocks:
        total = total + _stats_distance(fo[b], fp[b]).sum(1)
    return total.mean()


def style_temporal(O, extractor, blocks=STYLE_BLOCKS, o_features=None):
    """The same moment distance between consecutive output frames."""
    O = _batched(O)
    if O.shape[1] < 2:
        raise WindowTooShortError("loss needs at least 2 frames")
    fo = o_features if o_features is not None else sequence_features(O, extractor, blocks)
    total = 0.0
    for b in blocks:
        total = total + _stats_distance(fo[b][:, 1:], fo[b][:, :-1]).sum(1)
    return total.mean()


# -- temporal -----------------------------------------------------------------


@dataclass
class WindowFlows:
    """Flows and masks for one window of ``k + 1`` frames (batched).

    Every tensor carries a leading batch axis ``N``:

    * ``to_prev[:, t-1]``   is ``F_{t,t-1}`` for ``t = 1..k``
    * ``to_next[:, t]``     is ``F_{t,t+1}`` for ``t = 0..k-1``
    * ``to_first[:, t-1]``  is ``F_{t,0}``   for ``t = 1..k``
    * ``to_ref[:, t]``      is ``F_{t,ref}`` for ``t = 0..k`` (zero at ``ref``)
    * ``occlusion[:, t]``   binary non-occlusion mask of ``t`` against ``ref``
    """

    to_prev: Optional[torch.Tensor] = None
    to_next: Optional[torch.Tensor] = None
    to_first: Optional[torch.Tensor] = None
    to_ref: Optional[torch.Tensor] = None
    occlusion: Optional[torch.Tensor] = None
    reference_time: Optional[int] = None

    def require(self, name):
        value = getattr(self, name)
        if value is None:
            raise MissingFlowError(name, "window")
        return value

    @classmethod
    def stack(cls, items):
        def cat(name):
            vals = [getattr(w, name) for w in items]
            if any(v is None for v in vals):
                return None
            return torch.cat(vals, 0)

        refs = {w.reference_time for w in items}
        if len(refs) != 1:
            raise ValueError("windows disagree on the reference time")
        return cls(cat("to_prev"), cat("to_next"), cat("to_first"), cat("to_ref"), cat("occlusion"), refs.pop())


def window_flows_from_store(store, start, length, reference_offset=None, occlusion_truth=None):
    """Collect the flows a training window needs from a :class:`FlowStore`.

    ``start`` is the absolute index of the window's first frame. Missing
    pairs raise :class:`MissingFlowError`. Rank-loss occlusion masks come
    from ``occlusion_truth(t, ref)`` when given, else from the
    backward-forward check on the stored flows.
    """
    k = length - 1
    ref = k // 2 if reference_offset is None else reference_offset

    def ft(src, dst):
        return store.get(start + src, start + dst)

    def stack(fields):
        if not fields:
            return None
        return torch.stack([f.to_tensor() for f in fields]).unsqueeze(0)

    to_prev = stack([ft(t, t - 1) for t in range(1, k + 1)])
    to_next = stack([ft(t, t + 1) for t in range(0, k)])
    to_first = stack([ft(t, 0) for t in range(1, k + 1)])
    if k == 0:
        return WindowFlows(reference_time=ref)
    h, w = to_next.shape[-2:]
    to_ref, occ = [], []
    for t in range(k + 1):
        if t == ref:
            to_ref.append(torch.zeros(2, h, w))
            occ.append(torch.ones(h, w))
            continue
        f_tr = ft(t, ref)
        to_ref.append(f_tr.to_tensor())
        if occlusion_truth is not None:
            m = occlusion_truth(start + t, start + ref)
        else:
            m = occlusion_mask(f_tr, ft(ref, t))
        occ.append(torch.as_tensor(m, dtype=torch.float32))
    to_ref = torch.stack(to_ref).unsqueeze(0)
    occlusion = torch.stack(occ).unsqueeze(1).unsqueeze(0)
    return WindowFlows(to_prev, to_next, to_first, to_ref, occlusion, ref)


def _warp_seq(frames, flows):
    """Warp ``(N, S, C, H, W)`` frames by ``(N, S, 2, H, W)`` flows pairwise."""
    n, s = frames.shape[:2]
    out = warp_tensor(frames.reshape(n * s, *frames.shape[2:]), flows.reshape(n * s, *flows.shape[2:]).to(frames.dtype))
    return out.reshape(frames.shape)


def visibility_masks(target, source, flows, alpha=VISIBILITY_ALPHA):
    """``exp(-alpha * ||target - warp(source, flow)||^2)`` per frame pair, ``(N, S, 1, H, W)``."""
    err = (target - _warp_seq(source, flows)).pow(2).sum(2, keepdim=True)
    return torch.exp(-alpha * err)


def short_term(result: RolloutResult, I, flows: WindowFlows, masks=None, alpha=VISIBILITY_ALPHA):
    """Masked L1 warping error along the forward chain and the backward chain.

    Forward: ``O_t`` against ``warp(O_{t-1}, F_{t,t-1})`` for ``t = 1..k``.
    Backward: ``O'_t`` against ``warp(O'_{t+1}, F_{t,t+1})`` for ``t = 0..k-1``,
    where ``O'_k`` is the turn frame ``O_k``. ``masks`` may be given as a
    ``(prev_masks, next_masks)`` pair; otherwise they are computed from ``I``.
    """
    fwd = _batched(result.forward)
    bwd = _batched(result.backward)
    I = _batched(I).to(fwd.dtype)
    to_prev = flows.require("to_prev").to(fwd.dtype)
    to_next = flows.require("to_next").to(fwd.dtype)
    if masks is None:
        m_prev = visibility_masks(I[:, 1:], I[:, :-1], to_prev, alpha)
        m_next = visibility_masks(I[:, :-1], I[:, 1:], to_next, alpha)
    else:
        m_prev, m_next = masks
    forward_term = m_prev * (fwd[:, 1:] - _warp_seq(fwd[:, :-1], to_prev)).abs()
    chain = torch.cat([bwd, fwd[:, -1:]], 1)
    backward_term = m_next * (bwd - _warp_seq(chain[:, 1:], to_next)).abs()
    return (forward_term.flatten(1).sum(1) + backward_term.flatten(1).sum(1)).mean()


def long_term(O, I, flows: WindowFlows, masks=None, alpha=VISIBILITY_ALPHA):
    """Masked L1 error between ``O_t`` and the first output warped to ``t``."""
    O = _batched(O)
    I = _batched(I).to(O.dtype)
    if O.shape[1] < 2:
        return O.new_zeros(())
    to_first = flows.require("to_first").to(O.dtype)
    t_count = O.shape[1] - 1
    first_O = O[:, :1].expand(-1, t_count, -1, -1, -1)
    if masks is None:
        first_I = I[:, :1].expand(-1, t_count, -1, -1, -1)
        masks = visibility_masks(I[:, 1:], first_I, to_first, alpha)
    err = masks * (O[:, 1:] - _warp_seq(first_O, to_first)).abs()
    return err.flatten(1).sum(1).mean()


def pingpong(result: RolloutResult):
    """Sum of ``||O_t - O'_t||_2`` over ``t = 0..k-2``; empty for ``k < 2``."""
    fwd = _batched(result.forward)
    bwd = _batched(result.backward)
    k = bwd.shape[1]
    if k < 2:
        return fwd.new_zeros(())
    diff = (fwd[:, : k - 1] - bwd[:, : k - 1]).flatten(2)
    return torch.linalg.vector_norm(diff, dim=-1).sum(1).mean()


# -- low rank -----------------------------------------------------------------


def luminance(frames):
    w = torch.tensor(LUMA, dtype=frames.dtype).view(3, 1, 1)
    return (frames * w).sum(-3, keepdim=True)


def build_rank_matrix(frames, flows_to_ref, masks):
    """Stack ``vec(mask_t * warp(Y_t, F_{t,ref}))`` row by row, ``Y`` = luminance.

    ``frames`` is ``(T, 3, H, W)`` (or batched); ``flows_to_ref`` is
    ``(T, 2, H, W)`` with zeros at the reference row; ``masks`` is
    ``(T, 1, H, W)`` or ``(T, H, W)``. Returns ``(T, H*W)`` (or batched).
    """
    single = frames.dim() == 4
    frames = _batched(frames)
    if flows_to_ref is None:
        raise MissingFlowError("t", "reference")
    flows = flows_to_ref.unsqueeze(0) if flows_to_ref.dim() == 4 else flows_to_ref
    masks = masks.to(frames.dtype)
    if masks.dim() == 3:
        masks = masks.unsqueeze(1)
    if masks.dim() == 4:
        masks = masks.unsqueeze(0)
    if flows.shape[:2] != frames.shape[:2] or masks.shape[:2] != frames.shape[:2]:
        raise ShapeError("flows/masks must provide one entry per frame")
    warped = _warp_seq(luminance(frames), flows)
    chi = (masks * warped).flatten(2)
    return chi[0] if single else chi


class _NuclearNorm(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a):
        if not torch.isfinite(a).all():
            # let the caller's finiteness check report the bad term
            ctx.save_for_backward(torch.zeros_like(a), torch.eye(a.shape[-1], dtype=a.dtype).expand(*a.shape[:-2], -1, -1))
            return torch.full(a.shape[:-2], float("nan"), dtype=a.dtype)
        u, s, vh = torch.linalg.svd(a, full_matrices=False)
        keep = (s > SVD_CUTOFF).to(a.dtype)
        ctx.save_for_backward(u * keep.unsqueeze(-2), vh)
        return s.sum(-1)

    @staticmethod
    def backward(ctx, grad):
        u, vh = ctx.saved_tensors
        return grad[..., None, None] * (u @ vh)


def nuclear_norm(a):
    """Sum of singular values; subgradient ``U V^T`` ignoring ``s <= 1e-8``."""
    return _NuclearNorm.apply(a)


def low_rank(chi_I, chi_O):
    """``(||chi_I||_* - ||chi_O||_*)^2`` (batched matrices are averaged)."""
    if chi_I.shape != chi_O.shape:
        raise ShapeError(f"rank matrices differ: {tuple(chi_I.shape)} vs {tuple(chi_O.shape)}")
    diff = nuclear_norm(chi_I.to(chi_O.dtype)) - nuclear_norm(chi_O)
    return diff.pow(2).mean()


# -- combination --------------------------------------------------------------

TERMS = ("content", "style", "style_temporal", "short_term", "long_term", "rank", "pingpong")


def weighted_total(values: dict, weights: LossWeights):
    """Combine term values; ``style`` and ``style_temporal`` share one weight.

    ``values`` may hold either the two style parts or a single precombined
    ``style_preserving`` entry.
    """
    if "style_preserving" in values:
        sp = values["style_preserving"]
    else:
        sp = values.get("style", 0.0) + values.get("style_temporal", 0.0)
    return (
        weights.content * values.get("content", 0.0)
        + weights.style * sp
        + weights.short_term * values.get("short_term", 0.0)
        + weights.long_term * values.get("long_term", 0.0)
        + weights.rank * values.get("rank", 0.0)
        + weights.pingpong * values.get("pingpong", 0.0)
    )


def total(result: RolloutResult, I, P, flows: WindowFlows, extractor, weights: LossWeights = LossWeights(),
          alpha=VISIBILITY_ALPHA):
    """Evaluate every term on one (batched) window.

    Returns ``(loss_tensor, values)`` where ``values`` maps term names to
    tensors; terms whose weight is zero are skipped and reported as 0.
    """
    fwd = _batched(result.forward)
    I = _batched(I).to(fwd.dtype)
    P = _batched(P).to(fwd.dtype)
    zero = fwd.new_zeros(())
    values = {name: zero for name in TERMS}

    if weights.content > 0 or weights.style > 0:
        need = set()
        if weights.content > 0:
            need |= set(BLOCKS)
        if weights.style > 0:
            need |= set(STYLE_BLOCKS)
        blocks = tuple(b for b in BLOCKS if b in need)
        fo = sequence_features(fwd, extractor, blocks)
        with torch.no_grad():
            fp = sequence_features(P[:, 1:], extractor, blocks)
        fo_tail = {b: v[:, 1:] for b, v in fo.items()}
        if weights.content > 0:
            c = 0.0
            for b in BLOCKS:
                c = c + (fo_tail[b] - fp[b]).abs().flatten(2).mean(-1).sum(1)
            values["content"] = c.mean()
        if weights.style > 0:
            s = 0.0
            st = 0.0
            for b in STYLE_BLOCKS:
                s = s + _stats_distance(fo_tail[b], fp[b]).sum(1)
                st = st + _stats_distance(fo[b][:, 1:], fo[b][:, :-1]).sum(1)
            values["style"] = s.mean()
            values["style_temporal"] = st.mean()
    if weights.short_term > 0:
        values["short_term"] = short_term(result, I, flows, alpha=alpha)
    if weights.long_term > 0:
        values["long_term"] = long_term(fwd, I, flows, alpha=alpha)
    if weights.rank > 0:
        to_ref = flows.require("to_ref")
        occ = flows.require("occlusion")
        chi_I = build_rank_matrix(I, to_ref, occ)
        chi_O = build_rank_matrix(fwd, to_ref, occ)
        values["rank"] = low_rank(chi_I, chi_O)
    if weights.pingpong > 0:
        values["pingpong"] = pingpong(result)
    return weighted_total(values, weights), values
