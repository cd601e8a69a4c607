import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from instances import make_instance
from deflicker.errors import MissingFlowError, ShapeError, WindowTooShortError
from deflicker.features import BLOCKS, STYLE_BLOCKS
from deflicker.losses import (LossWeights, WindowFlows, build_rank_matrix, content_perceptual, long_term,
                              low_rank, nuclear_norm, pingpong, short_term, style_preserving, style_temporal,
                              total, weighted_total)
from deflicker.network import RolloutResult

SMALL_BLOCKS = ("relu1_2", "relu2_2")


def seq(a):
    return torch.from_numpy(np.ascontiguousarray(np.asarray(a, np.float64).transpose(0, 3, 1, 2)))


# -- content --------------------------------------------------------------------


def test_content_zero_when_equal(extractor, rng):
    P = seq(rng.random((3, 4, 4, 3)))
    assert content_perceptual(P, P, extractor, SMALL_BLOCKS).item() == 0.0


def test_content_single_pixel_matches_oracle(extractor, weights, rng):
    P = rng.random((3, 16, 16, 3))
    O = P.copy()
    O[1, 5, 7, 2] += 0.3
    got = content_perceptual(seq(O), seq(P), extractor, BLOCKS).item()
    want = oracles.content(O, P, weights, BLOCKS)
    assert got > 0
    assert got == pytest.approx(want, rel=1e-10)


def test_content_zero_contribution_frame(extractor, rng):
    P = rng.random((3, 4, 4, 3))
    O = rng.random((3, 4, 4, 3))
    O[2] = P[2]
    a = content_perceptual(seq(O[:2]), seq(P[:2]), extractor, SMALL_BLOCKS)
    b = content_perceptual(seq(O), seq(P), extractor, SMALL_BLOCKS)
    assert a.item() == pytest.approx(b.item(), rel=1e-12)


def test_content_too_short(extractor, rng):
    with pytest.raises(WindowTooShortError):
        content_perceptual(seq(rng.random((1, 4, 4, 3))), seq(rng.random((1, 4, 4, 3))), extractor, SMALL_BLOCKS)


@pytest.mark.parametrize("seed", range(5))
def test_content_matches_oracle(extractor, weights, seed):
    inst = make_instance(seed)
    got = content_perceptual(inst.t("fwd"), inst.t("P"), extractor, SMALL_BLOCKS).item()
    assert got == pytest.approx(oracles.content(inst.fwd, inst.P, weights, SMALL_BLOCKS), rel=1e-5)


# -- style ------------------------------------------------------------------------


def test_style_zero_when_equal(extractor, rng):
    P = seq(rng.random((3, 4, 4, 3)))
    assert style_preserving(P, P, extractor).item() == 0.0
    static = seq(np.repeat(rng.random((1, 4, 4, 3)), 3, 0))
    assert style_temporal(static, extractor).item() == 0.0


class ToyExtractor:
    """Identity 'features': the frame itself, exposed as both style blocks."""

    def __call__(self, x, blocks):
        return {b: x for b in blocks}


class LinearToyExtractor:
    """A fixed 1x1 linear map to 2 channels."""

    W = torch.tensor([[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]], dtype=torch.float64)

    def __call__(self, x, blocks):
        y = torch.einsum("oc,nchw->nohw", self.W.to(x.dtype), x)
        return {b: y for b in blocks}


def test_style_hand_computed_means():
    # channel 0 mean 2.5 vs 3.0, equal spreads; channel 1 identical
    base = np.array([[1.0, 2.0], [3.0, 4.0]])
    P = np.zeros((2, 2, 2, 3))
    O = np.zeros((2, 2, 2, 3))
    for t in range(2):
        P[t, ..., 0] = base
        O[t, ..., 0] = base + 0.5
        P[t, ..., 1] = O[t, ..., 1] = base * 2
    got = style_preserving(seq(O), seq(P), ToyExtractor()).item()
    # one frame (t = 1) x two blocks x (0.5)^2
    assert got == pytest.approx(2 * 0.25, rel=1e-9)


def test_style_permutation_invariant(extractor, rng):
    P = rng.random((3, 4, 4, 3))
    perm = rng.permutation(16)
    O = P.reshape(3, 16, 3)[:, perm].reshape(3, 4, 4, 3)
    got = style_preserving(seq(O), seq(P), ToyExtractor()).item()
    assert got == pytest.approx(0.0, abs=1e-12)
    a = style_temporal(seq(P), extractor).item()
    b = style_temporal(seq(P.reshape(3, 16, 3)[:, perm].reshape(3, 4, 4, 3)), ToyExtractor()).item()
    c = style_temporal(seq(P), ToyExtractor()).item()
    assert b == pytest.approx(c, rel=1e-10)
    assert a >= 0


def test_style_temporal_brightness_shift():
    rng = np.random.default_rng(8)
    frame = rng.random((4, 4, 3))
    delta = 0.07
    O = np.stack([frame, frame + delta])
    got = style_temporal(seq(O), LinearToyExtractor()).item()
    # oracle: a uniform shift moves each channel mean by delta * row-sum of W, stds unchanged
    row_sums = LinearToyExtractor.W.sum(1).numpy()
    k = len(STYLE_BLOCKS) * float(np.sum(row_sums ** 2))
    assert got == pytest.approx(k * delta ** 2, rel=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_style_matches_oracle(extractor, weights, seed):
    inst = make_instance(seed)
    got = style_preserving(inst.t("fwd"), inst.t("P"), extractor).item()
    assert got == pytest.approx(oracles.style(inst.fwd, inst.P, weights), rel=1e-5)
    got = style_temporal(inst.t("fwd"), extractor).item()
    assert got == pytest.approx(oracles.style_temporal(inst.fwd, weights), rel=1e-5)


# -- temporal -------------------------------------------------------------------


def _static_flows(k, h, w, ref=0):
    z = lambda n: torch.zeros(1, n, 2, h, w, dtype=torch.float64)
    return WindowFlows(z(k), z(k), z(k), z(k + 1), torch.ones(1, k + 1, 1, h, w, dtype=torch.float64), ref)


def test_short_term_static_zero(rng):
    frame = rng.random((4, 4, 3))
    clip = seq(np.repeat(frame[None], 3, 0))
    res = RolloutResult(clip, clip[:2])
    assert short_term(res, clip, _static_flows(2, 4, 4)).item() == 0.0


def test_short_term_single_pixel():
    I = seq(np.full((2, 2, 2, 3), 0.5))
    fwd = np.full((2, 2, 2, 3), 0.4)
    fwd[1, 0, 1, 2] += 0.2
    bwd = fwd[:1].copy()
    # make the backward chain consistent with the turn frame so only the forward term counts
    bwd[0] = fwd[1]
    res = RolloutResult(seq(fwd), seq(bwd))
    flows = _static_flows(1, 2, 2)
    value = short_term(res, I, flows).item()
    assert value == pytest.approx(0.2, rel=1e-9)


def test_short_term_fully_masked(rng):
    inst = make_instance(1)
    k, h = inst.k, inst.I.shape[1]
    zeros = torch.zeros(1, k, 1, h, h, dtype=torch.float64)
    v = short_term(inst.result(), inst.t("I"), inst.flows(), masks=(zeros, zeros)).item()
    assert v == 0.0
    # alpha large on mismatched raw frames drives the computed masks to zero
    I = np.zeros_like(inst.I)
    I[1::2] = 1.0
    v = short_term(inst.result(), seq(I), inst.flows(), alpha=1e6).item()
    assert v == pytest.approx(0.0, abs=1e-12)


def test_short_term_missing_flow():
    inst = make_instance(2)
    with pytest.raises(MissingFlowError):
        short_term(inst.result(), inst.t("I"), WindowFlows())


@pytest.mark.parametrize("seed", range(5))
def test_short_term_matches_oracle(seed):
    inst = make_instance(seed, similar=True)
    got = short_term(inst.result(), inst.t("I"), inst.flows()).item()
    want = oracles.short_term(inst.fwd, inst.bwd, inst.I, inst.to_prev, inst.to_next)
    assert got == pytest.approx(want, rel=1e-5)


def test_long_term_static_zero(rng):
    clip = seq(np.repeat(rng.random((1, 4, 4, 3)), 3, 0))
    assert long_term(clip, clip, _static_flows(2, 4, 4)).item() == 0.0


def test_long_term_hand_example():
    O = np.zeros((3, 2, 2, 3))
    O[0] = 0.5
    O[1] = 0.5
    O[2] = 0.7
    I = np.full((3, 2, 2, 3), 0.3)
    got = long_term(seq(O), seq(I), _static_flows(2, 2, 2)).item()
    assert got == pytest.approx(2.4, rel=1e-9)


def test_long_term_zero_masks():
    inst = make_instance(3)
    T, h = inst.fwd.shape[0], inst.I.shape[1]
    masks = torch.zeros(1, T - 1, 1, h, h, dtype=torch.float64)
    assert long_term(inst.t("fwd"), inst.t("I"), inst.flows(), masks=masks).item() == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_long_term_matches_oracle(seed):
    inst = make_instance(seed, similar=True)
    got = long_term(inst.t("fwd"), inst.t("I"), inst.flows()).item()
    assert got == pytest.approx(oracles.long_term(inst.fwd, inst.I, inst.to_first), rel=1e-5)


# -- ping pong --------------------------------------------------------------------


def test_pingpong_examples(rng):
    P = seq(rng.random((3, 4, 4, 3)))
    assert pingpong(RolloutResult(P, P[:2])).item() == 0.0
    fwd = np.zeros((3, 2, 2, 3))
    bwd = np.zeros((2, 2, 2, 3))
    bwd[0, 1, 1, 0] = 0.3
    bwd[1] = 5.0  # index k-1 is not part of the sum
    assert pingpong(RolloutResult(seq(fwd), seq(bwd))).item() == pytest.approx(0.3)
    assert pingpong(RolloutResult(seq(fwd[:2]), seq(bwd[:1]))).item() == 0.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_pingpong_symmetric(seed):
    rng = np.random.default_rng(seed)
    fwd = seq(rng.random((4, 3, 3, 3)))
    bwd = seq(rng.random((3, 3, 3, 3)))
    a = pingpong(RolloutResult(fwd, bwd)).item()
    swapped = RolloutResult(torch.cat([bwd, fwd[-1:]]), fwd[:3])
    assert a == pytest.approx(pingpong(swapped).item(), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_pingpong_matches_oracle(seed):
    inst = make_instance(seed)
    assert pingpong(inst.result()).item() == pytest.approx(oracles.pingpong(inst.fwd, inst.bwd), rel=1e-5)


# -- rank ---------------------------------------------------------------------------


def test_rank_matrix_static():
    frame = np.random.default_rng(0).random((1, 3, 3, 3))
    clip = seq(np.repeat(frame, 4, 0))
    chi = build_rank_matrix(clip, torch.zeros(4, 2, 3, 3, dtype=torch.float64), torch.ones(4, 3, 3))
    assert np.linalg.matrix_rank(chi.numpy()) == 1
    assert torch.allclose(chi, chi[:1].expand_as(chi))


def test_rank_matrix_hand_assembled():
    frames = np.zeros((3, 2, 2, 3))
    frames[0, 0, 0, 0] = 1.0                      # luminance 0.299 at (0, 0)
    frames[1, ..., 1] = [[0, 1], [1, 0]]          # luminance 0.587 on the anti-diagonal
    frames[2] = 0.5                               # luminance 0.5 everywhere
    flows = torch.zeros(3, 2, 2, 2, dtype=torch.float64)
    flows[0, 0] = -1.0  # frame 0 sampled one pixel to the left (clamped at the border)
    masks = torch.tensor([[[1, 0], [1, 1]], [[1, 1], [1, 1]], [[0, 1], [1, 0]]], dtype=torch.float64)
    chi = build_rank_matrix(seq(frames), flows, masks).numpy()
    expected = np.array([
        [0.299, 0.0, 0.0, 0.0],
        [0.0, 0.587, 0.587, 0.0],
        [0.0, 0.5, 0.5, 0.0],
    ])
    assert np.allclose(chi, expected, atol=1e-12)


def test_rank_matrix_zero_masks(rng):
    clip = seq(rng.random((3, 2, 2, 3)))
    chi = build_rank_matrix(clip, torch.zeros(3, 2, 2, 2, dtype=torch.float64), torch.zeros(3, 2, 2))
    assert torch.count_nonzero(chi) == 0


@pytest.mark.parametrize("seed", range(5))
def test_rank_matrix_matches_oracle(seed):
    inst = make_instance(seed)
    chi = build_rank_matrix(inst.t("fwd"), inst.t("to_ref"), torch.from_numpy(inst.occ)).numpy()
    assert np.allclose(chi, oracles.rank_matrix(inst.fwd, inst.to_ref, inst.occ), rtol=1e-10, atol=1e-12)


def test_low_rank_examples():
    a = torch.rand(3, 5, dtype=torch.float64)
    assert low_rank(a, a).item() == 0.0
    chi = torch.zeros(2, 4, dtype=torch.float64)
    chi[0, 0], chi[1, 1] = 3.0, 4.0
    assert low_rank(chi, torch.zeros(2, 4, dtype=torch.float64)).item() == pytest.approx(49.0)
    rng = np.random.default_rng(11)
    A, B = rng.standard_normal((2, 4, 9))
    got = low_rank(torch.from_numpy(A), torch.from_numpy(B)).item()
    assert got == pytest.approx(oracles.low_rank(A, B), rel=1e-6)
    with pytest.raises(ShapeError):
        low_rank(torch.zeros(2, 3), torch.zeros(3, 2))


def test_nuclear_gradient_finite_differences():
    rng = np.random.default_rng(12)
    for _ in range(5):
        A = rng.standard_normal((4, 6))
        x = torch.tensor(A, requires_grad=True)
        nuclear_norm(x).backward()
        fd = oracles.central_difference(oracles.nuclear, A, 1e-3)
        assert np.linalg.norm(x.grad.numpy() - fd) / np.linalg.norm(fd) <= 1e-2


def test_nuclear_gradient_at_zero_is_finite():
    x = torch.zeros(3, 4, dtype=torch.float64, requires_grad=True)
    nuclear_norm(x).backward()
    assert torch.all(torch.isfinite(x.grad)) and torch.count_nonzero(x.grad) == 0


# -- combination ------------------------------------------------------------------


def test_weighted_total_defaults():
    w = LossWeights()
    values = dict(content=1, style_preserving=1, short_term=1, long_term=1, rank=1, pingpong=1)
    assert weighted_total(values, w) == pytest.approx(320.00001, rel=1e-12)
    assert weighted_total(values, LossWeights(0, 0, 0, 0, 0, 0)) == 0
    split = dict(content=1, style=0.5, style_temporal=0.5, short_term=1, long_term=1, rank=1, pingpong=1)
    assert weighted_total(split, w) == pytest.approx(320.00001, rel=1e-12)


def test_weights_nonnegative():
    with pytest.raises(ValueError):
        LossWeights(content=-1)


def test_total_identity_on_static_scene():
    h = w = 16
    rng = np.random.default_rng(4)
    I = seq(np.repeat(rng.random((1, h, w, 3)), 5, 0))
    P = seq(np.repeat(rng.random((1, h, w, 3)), 5, 0))
    from deflicker.features import FeatureExtractor

    ex = FeatureExtractor.fixed_random(0, 0.0625)
    res = RolloutResult(P.clone(), P[:4].clone())
    flows = _static_flows(4, h, w, ref=2)
    loss, values = total(res, I, P, flows, ex)
    chi_I = oracles.rank_matrix(I.numpy().transpose(0, 2, 3, 1), np.zeros((5, h, w, 2)), np.ones((5, h, w)))
    chi_P = oracles.rank_matrix(P.numpy().transpose(0, 2, 3, 1), np.zeros((5, h, w, 2)), np.ones((5, h, w)))
    expected = 1e-5 * (oracles.nuclear(chi_I) - oracles.nuclear(chi_P)) ** 2
    for name, v in values.items():
        if name != "rank":
            assert abs(v.item()) <= 1e-8, name
    assert loss.item() == pytest.approx(expected, rel=1e-8)


def test_losses_nonnegative():
    for seed in range(5):
        inst = make_instance(seed)
        assert short_term(inst.result(), inst.t("I"), inst.flows()).item() >= 0
        assert long_term(inst.t("fwd"), inst.t("I"), inst.flows()).item() >= 0
        assert pingpong(inst.result()).item() >= 0
