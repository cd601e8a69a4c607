"""Ping Pong training loop: window sampling, loss evaluation, Adam updates, checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import MissingFlowError, NonFiniteLossError
from .features import FeatureExtractor
from .flow import FlowStore
from .losses import LossReport, LossWeights, WindowFlows, total, window_flows_from_store
from .network import ConsistencyNet, NetConfig, load_checkpoint, save_checkpoint
from .video import VideoTriplet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batches_per_epoch: int = 1000
    batch_size: int = 4
    window_frames: int = 5
    learning_rate: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weights: LossWeights = LossWeights()
    seed: int = 0
    net: NetConfig = NetConfig()
    checkpoint_every: int = 1000
    grad_clip: Optional[float] = 10.0
    alpha: float = 50.0

    def __post_init__(self):
        if self.window_frames < 2:
            raise ValueError("window_frames must be >= 2")
        if self.epochs < 0 or self.batches_per_epoch < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("epochs must be >= 0 and batch/checkpoint counts >= 1")
        object.__setattr__(self, "betas", tuple(self.betas))
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if isinstance(self.net, dict):
            object.__setattr__(self, "net", NetConfig(**self.net))

    @property
    def total_steps(self):
        return self.epochs * self.batches_per_epoch

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    @classmethod
    def from_file(cls, path):
        """Load a JSON or TOML mirror of the config."""
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
        return cls.from_dict(data)


@dataclass
class TrainingVideo:
    """A training clip with an index-keyed flow store."""

    triplet: VideoTriplet
    flows: FlowStore
    occlusion_truth: Optional[Callable] = None
    name: str = ""

    @classmethod
    def from_synth(cls, video, name=""):
        return cls(video.triplet, video.flows, video.occlusion_truth, name)


@dataclass
class Window:
    raw: torch.Tensor
    processed: torch.Tensor
    flows: WindowFlows
    video: int = 0
    start: int = 0


def build_pingpong_window(seq_length, start, k):
    """Palindromic index list ``start..start+k..start`` (length ``2k + 1``)."""
    if k < 1 or start < 0 or start + k >= seq_length:
        raise IndexError(f"window start={start}, k={k} does not fit a sequence of {seq_length} frames")
    up = list(range(start, start + k + 1))
    return up + up[-2::-1]


class WindowSampler:
    """Uniform sampling of ``(video, start)`` pairs that never cross a video end."""

    def __init__(self, videos: Sequence[TrainingVideo], window_frames, seed=0):
        self.videos = list(videos)
        self.window_frames = window_frames
        self.slots = [(v, s) for v, vid in enumerate(self.videos)
                      for s in range(len(vid.triplet) - window_frames + 1)]
        if not self.slots:
            raise ValueError(f"no video has {window_frames} frames")
        self.rng = np.random.default_rng(seed)
        self._cache = {}

    def window(self, v, start):
        key = (v, start)
        if key not in self._cache:
            vid = self.videos[v]
            n = self.window_frames
            raw = vid.triplet.raw.to_tensor()[start:start + n]
            processed = vid.triplet.processed.to_tensor()[start:start + n]
            flows = window_flows_from_store(vid.flows, start, n, occlusion_truth=vid.occlusion_truth)
            self._cache[key] = Window(raw, processed, flows, v, start)
        return self._cache[key]

    def sample(self, batch_size):
        picks = self.rng.integers(len(self.slots), size=batch_size)
        return [self.window(*self.slots[i]) for i in picks]


@dataclass
class TrainState:
    net: ConsistencyNet
    optimizer: torch.optim.Optimizer
    step: int = 0
    rng_state: Optional[dict] = None


def make_optimizer(net, config: TrainConfig):
    return torch.optim.Adam(net.parameters(), lr=config.learning_rate, betas=config.betas)


def init_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    net = ConsistencyNet(config.net)
    return TrainState(net, make_optimizer(net, config), 0, None)


def _report(values, loss, step):
    terms = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in values.items()}
    return LossReport(terms, float(loss.detach()), step)


def evaluate_batch(net, windows: Sequence[Window], extractor, config: TrainConfig):
    """Loss tensor and term values for a batch of windows (graph retained)."""
    raw = torch.stack([w.raw for w in windows])
    processed = torch.stack([w.processed for w in windows])
    flows = WindowFlows.stack([w.flows for w in windows])
    result = net.pingpong_rollout(raw, processed)
    return total(result, raw, processed, flows, extractor, config.weights, config.alpha)


def train_step(windows: Sequence[Window], state: TrainState, config: TrainConfig, extractor):
    """One Adam update on the batch-mean total loss."""
    for w in windows:
        if w.flows.to_prev is None and config.window_frames > 1:
            raise MissingFlowError(w.start, w.start + 1)
    state.net.train()
    loss, values = evaluate_batch(state.net, windows, extractor, config)
    report = _report(values, loss, state.step + 1)
    if not math.isfinite(report.total) or not all(math.isfinite(v) for v in report.terms.values()):
        raise NonFiniteLossError(report.terms)
    state.optimizer.zero_grad(set_to_none=False)
    loss.backward()
    if config.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(state.net.parameters(), config.grad_clip)
    state.optimizer.step()
    state.step += 1
    return state, report


# -- checkpoints --------------------------------------------------------------


def save_train_state(path, state: TrainState, config: TrainConfig, rng=None):
    extra = {"train_config": np.array(json.dumps(config.to_dict()))}
    rng_state = rng.bit_generator.state if rng is not None else state.rng_state
    if rng_state is not None:
        extra["rng_state"] = np.array(json.dumps(rng_state))
    opt = state.optimizer.state_dict()
    for i, pstate in opt["state"].items():
        for key, value in pstate.items():
            extra[f"opt/{i}/{key}"] = value.detach().numpy() if torch.is_tensor(value) else np.array(value)
    save_checkpoint(path, state.net, state.step, extra)


def load_train_state(path, config: Optional[TrainConfig] = None):
    """Restore ``(state, config)``; ``config`` defaults to the stored one."""
    net, step, extra = load_checkpoint(path)
    if config is None:
        config = TrainConfig.from_dict(json.loads(str(extra["train_config"])))
    optimizer = make_optimizer(net, config)
    opt = optimizer.state_dict()
    restored = {}
    for key, value in extra.items():
        if key.startswith("opt/"):
            _, i, name = key.split("/", 2)
            restored.setdefault(int(i), {})[name] = torch.from_numpy(np.array(value))
    opt["state"] = restored
    optimizer.load_state_dict(opt)
    rng_state = json.loads(str(extra["rng_state"])) if "rng_state" in extra else None
    return TrainState(net, optimizer, step, rng_state), config


# -- training loop ------------------------------------------------------------


def fit(videos: Sequence[TrainingVideo], config: TrainConfig, extractor: FeatureExtractor,
        state: Optional[TrainState] = None, checkpoint_dir=None, log_path=None, max_steps=None,
        callback=None):
    """Run ``epochs * batches_per_epoch`` steps (or up to ``max_steps``).

    Returns ``(state, log)`` where ``log`` is a list of :class:`LossReport`.
    Resuming from a saved state continues the sampling stream exactly.
    """
    if not videos:
        raise ValueError("training needs at least one video")
    if state is None:
        state = init_state(config)
    sampler = WindowSampler(videos, config.window_frames, config.seed)
    if state.rng_state is not None:
        sampler.rng.bit_generator.state = state.rng_state
    end = config.total_steps if max_steps is None else min(config.total_steps, max_steps)
    history = []
    log_fh = open(log_path, "a") if log_path else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    try:
        while state.step < end:
            batch = sampler.sample(config.batch_size)
            state, report = train_step(batch, state, config, extractor)
            history.append(report)
            if log_fh:
                log_fh.write(report.to_json() + "\n")
                log_fh.flush()
            if callback:
                callback(state, report)
            if ckpt_dir and (state.step % config.checkpoint_every == 0 or state.step == end):
                save_train_state(ckpt_dir / f"step-{state.step:07d}.npz", state, config, sampler.rng)
                save_train_state(ckpt_dir / "latest.npz", state, config, sampler.rng)
            if state.step % 100 == 0:
                log.info("step %d total %.4g", state.step, report.total)
    finally:
        if log_fh:
            log_fh.close()
    state.rng_state = sampler.rng.bit_generator.state
    return state, history


@torch.no_grad()
def infer(net: ConsistencyNet, triplet: VideoTriplet):
    """Run the recurrent model over a whole video; returns clamped outputs."""
    from .video import FrameSequence

    net.eval()
    out = net.rollout(triplet.raw.to_tensor(), triplet.processed.to_tensor())
    frames = out.clamp(0, 1).numpy().transpose(0, 2, 3, 1)
    frames[0] = triplet.processed[0]
    return FrameSequence(frames, triplet.processed.frame_rate)
