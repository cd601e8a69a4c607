import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from deflicker.estimator import TemporalConsistencyModel, check_training_videos, check_triplet
from deflicker.synth import FlickerSpec, SceneSpec, generate
from deflicker.video import FrameSequence


def _video(seed=0):
    return generate(SceneSpec(height=16, width=16, length=6, seed=seed), FlickerSpec(seed=seed))


def test_params_round_trip():
    m = TemporalConsistencyModel(base_channels=8, lambda_rank=0.0)
    params = m.get_params()
    assert params["base_channels"] == 8 and params["lambda_rank"] == 0.0
    c = clone(m)
    assert c.get_params() == params
    m.set_params(epochs=3)
    assert m.epochs == 3


def test_transform_before_fit():
    with pytest.raises(NotFittedError):
        TemporalConsistencyModel().transform(_video())


def test_identity_model_returns_processed():
    v = _video()
    m = TemporalConsistencyModel(base_channels=4, residual_blocks=1).init_identity()
    out = m.transform(v)
    assert isinstance(out, FrameSequence)
    assert np.array_equal(out.frames, v.triplet.processed.frames)
    pair = (v.triplet.raw.frames, v.triplet.processed.frames)
    assert np.array_equal(m.predict(pair).frames, out.frames)
    assert len(m.transform([v, _video(1)])) == 2


def test_fit_runs_requested_steps():
    m = TemporalConsistencyModel(base_channels=4, residual_blocks=1, window_frames=3, batch_size=1,
                                 epochs=1, batches_per_epoch=2, feature_width=0.0625)
    m.fit([_video(), _video(1)])
    assert m.n_steps_ == 2 and len(m.history_) == 2
    assert m.transform(_video()).frames.shape == (6, 16, 16, 3)


def test_input_checks():
    with pytest.raises(TypeError):
        check_triplet(42)
    with pytest.raises(TypeError):
        check_training_videos([(np.zeros((3, 4, 4, 3)), np.zeros((3, 4, 4, 3)))])
    with pytest.raises(ValueError):
        check_training_videos([])
