import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from deflicker.errors import FrameTooSmallError
from deflicker.features import BLOCKS, FeatureExtractor, channel_stats


def test_identical_frames_identical_features(extractor, rng):
    frame = rng.random((16, 16, 3)).astype(np.float32)
    a = extractor.extract(frame)
    b = extractor.extract(frame.copy())
    assert set(a) == set(BLOCKS)
    for k in a:
        assert torch.equal(a[k], b[k])


def test_zero_frame_matches_layer_oracle():
    ex = FeatureExtractor.fixed_random(seed=7, width=0.125)
    frame = np.zeros((16, 16, 3))
    got = ex.extract(torch.zeros(3, 16, 16, dtype=torch.float64))
    want = oracles.vgg_features(frame, ex.weight_arrays(), BLOCKS)
    for b in BLOCKS:
        assert np.allclose(got[b].numpy(), want[b], rtol=1e-10, atol=1e-10)
        assert np.all(np.isfinite(want[b]))


def test_random_frame_matches_layer_oracle(extractor, weights, rng):
    frame = rng.random((16, 16, 3))
    got = extractor.extract(torch.from_numpy(frame.transpose(2, 0, 1).copy()))
    want = oracles.vgg_features(frame, weights, BLOCKS)
    for b in BLOCKS:
        assert np.allclose(got[b].numpy(), want[b], atol=1e-10)


def test_block_sizes_halve(extractor):
    feats = extractor.extract(torch.zeros(3, 32, 32))
    sizes = [feats[b].shape[-1] for b in BLOCKS]
    assert sizes == [32, 16, 8, 4]


def test_only_requested_blocks(extractor):
    feats = extractor.extract(torch.zeros(3, 8, 8), ("relu1_2", "relu3_3"))
    assert set(feats) == {"relu1_2", "relu3_3"}


def test_too_small(extractor):
    with pytest.raises(FrameTooSmallError):
        extractor.extract(np.zeros((8, 8, 3), np.float32), ("relu4_3",))
    extractor.extract(np.zeros((16, 16, 3), np.float32), ("relu4_3",))


def test_channel_stats_constant():
    s = channel_stats(torch.full((4, 5, 3), 3.0, dtype=torch.float64))
    assert torch.allclose(s.mean, torch.full((4,), 3.0, dtype=torch.float64))
    assert torch.all(s.std <= 1e-4)


def test_channel_stats_hand_example():
    s = channel_stats(torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=torch.float64))
    assert s.mean.item() == pytest.approx(2.5)
    assert s.std.item() == pytest.approx(math.sqrt(1.25 + 1e-8), rel=1e-12)
    assert s.std.item() == pytest.approx(1.1180, abs=1e-4)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_channel_stats_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    fmap = rng.standard_normal((3, 4, 5))
    perm = rng.permutation(20)
    shuffled = fmap.reshape(3, 20)[:, perm].reshape(3, 4, 5)
    a, b = channel_stats(torch.from_numpy(fmap)), channel_stats(torch.from_numpy(shuffled))
    assert torch.allclose(a.mean, b.mean, atol=1e-12)
    assert torch.allclose(a.std, b.std, atol=1e-12)
    m, s = oracles.stats(fmap)
    assert np.allclose(a.mean.numpy(), m) and np.allclose(a.std.numpy(), s)


def test_extract_gradient_finite_differences(extractor):
    rng = np.random.default_rng(4)
    frame = rng.random((3, 16, 16))
    probe = {b: torch.from_numpy(rng.standard_normal(v.shape)) for b, v in
             extractor.extract(torch.from_numpy(frame)).items()}

    def f(x):
        feats = extractor.extract(torch.from_numpy(x))
        return float(sum((feats[b] * probe[b]).sum() for b in BLOCKS))

    x = torch.tensor(frame, requires_grad=True)
    feats = extractor.extract(x)
    sum((feats[b] * probe[b]).sum() for b in BLOCKS).backward()
    fd = oracles.central_difference(f, frame, 1e-3)
    rel = np.linalg.norm(x.grad.numpy() - fd) / np.linalg.norm(fd)
    assert rel <= 1e-2


def test_weight_file_round_trip(tmp_path, rng):
    src = FeatureExtractor.fixed_random(seed=3, width=0.125)
    src.save(tmp_path / "vgg.npz")
    a = FeatureExtractor.from_weight_file(tmp_path / "vgg.npz")
    b = FeatureExtractor.from_weight_file(tmp_path / "vgg.npz")
    x = torch.from_numpy(rng.random((1, 3, 16, 16)).astype(np.float32))
    fa, fb, fs = a(x), b(x), src(x)
    for k in BLOCKS:
        assert torch.equal(fa[k], fb[k])
        assert torch.equal(fa[k], fs[k])
    assert a.provenance.startswith("pretrained_file")


def test_fixed_random_deterministic():
    a = FeatureExtractor.fixed_random(seed=11, width=0.125).weight_arrays()
    b = FeatureExtractor.fixed_random(seed=11, width=0.125).weight_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_converted_torchvision_trunk_matches(tmp_path):
    tv = pytest.importorskip("torchvision")
    import sys
    from pathlib import Path

    sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tools"))
    from convert_vgg19 import convert

    torch.manual_seed(0)
    model = tv.models.vgg19(weights=None).eval()
    np.savez(tmp_path / "vgg.npz", **convert(model.state_dict()))
    ex = FeatureExtractor.from_weight_file(tmp_path / "vgg.npz")
    x = torch.rand(1, 3, 16, 16)
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    with torch.no_grad():
        ref = model.features[:25]((x - mean) / std)
        ours = ex(x, ("relu4_3",))["relu4_3"]
    assert torch.allclose(ours, ref, rtol=1e-4, atol=1e-5)
