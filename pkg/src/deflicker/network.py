"""Recurrent residual network ``O_t = P_t + F(I_t, I_{t-1}, P_t, O_{t-1})``.

Encoder (7x7 stem, two stride-2 convs) -> residual blocks -> ConvLSTM ->
decoder (two transposed convs) with concatenation skips, and a final
zero-initialised projection so an untrained model is the identity.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError, WindowTooShortError


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 32
    residual_blocks: int = 5
    lstm_hidden_channels: Optional[int] = None
    downsample_stages: int = 2
    zero_init_output: bool = True

    def __post_init__(self):
        if self.lstm_hidden_channels is None:
            object.__setattr__(self, "lstm_hidden_channels", 4 * self.base_channels)
        if self.base_channels < 1 or self.residual_blocks < 1 or self.lstm_hidden_channels < 1:
            raise ValueError("all channel and block counts must be >= 1")
        if self.downsample_stages != 2:
            raise ValueError("downsample_stages is fixed at 2")


@dataclass
class RecurrentState:
    lstm_hidden: torch.Tensor
    lstm_cell: torch.Tensor
    prev_output: torch.Tensor


@dataclass
class RolloutResult:
    """Outputs of one Ping Pong pass over a window of ``k + 1`` frames.

    ``forward`` is ``(N, k+1, 3, H, W)``; ``backward`` is ``(N, k, 3, H, W)``
    indexed by time, so ``backward[:, t]`` is ``O'_t`` and pairs with
    ``forward[:, t]``.
    """

    forward: torch.Tensor
    backward: torch.Tensor

    @property
    def k(self):
        return self.backward.shape[1]


def _conv_block(c_in, c_out, kernel, stride=1):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2),
        nn.InstanceNorm2d(c_out, affine=True),
        nn.ReLU(inplace=True),
    )


def _up_block(c_in, c_out):
    return nn.Sequential(
        nn.ConvTranspose2d(c_in, c_out, 3, stride=2, padding=1, output_padding=1),
        nn.InstanceNorm2d(c_out, affine=True),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class ConvLSTMCell(nn.Module):
    def __init__(self, input_channels, hidden_channels, kernel=3):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv2d(input_channels + hidden_channels, 4 * hidden_channels, kernel, padding=kernel // 2)

    def forward(self, x, hidden, cell):
        i, f, o, g = self.gates(torch.cat([x, hidden], 1)).chunk(4, 1)
        cell = torch.sigmoid(f) * cell + torch.sigmoid(i) * torch.tanh(g)
        hidden = torch.sigmoid(o) * torch.tanh(cell)
        return hidden, cell


class ConsistencyNet(nn.Module):
    def __init__(self, config: NetConfig = NetConfig()):
        super().__init__()
        self.config = config
        c = config.base_channels
        hid = config.lstm_hidden_channels
        self.stem = _conv_block(12, c, 7)
        self.down1 = _conv_block(c, 2 * c, 3, stride=2)
        self.down2 = _conv_block(2 * c, 4 * c, 3, stride=2)
        self.res = nn.Sequential(*[ResidualBlock(4 * c) for _ in range(config.residual_blocks)])
        self.lstm = ConvLSTMCell(4 * c, hid)
        self.up1 = _up_block(hid + 4 * c, 2 * c)
        self.up2 = _up_block(2 * c + 2 * c, c)
        self.head = nn.Conv2d(c + c, 3, 3, padding=1)
        if config.zero_init_output:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    # -- single step ----------------------------------------------------------

    def initial_state(self, first_processed):
        """Zero LSTM maps and ``prev_output = P_1`` for a ``(N, 3, H, W)`` batch."""
        n, _, h, w = first_processed.shape
        self._check_size(h, w)
        hid = self.config.lstm_hidden_channels
        zeros = first_processed.new_zeros(n, hid, h // 4, w // 4)
        return RecurrentState(zeros, zeros.clone(), first_processed)

    @staticmethod
    def _check_size(h, w):
        if h % 4 or w % 4:
            raise ShapeError(f"frame size {h}x{w} must be divisible by 4")

    def residual(self, I_t, I_prev, P_t, state):
        x = torch.cat([I_t, I_prev, P_t, state.prev_output], 1)
        e0 = self.stem(x)
        e1 = self.down1(e0)
        e2 = self.down2(e1)
        r = self.res(e2)
        h, c = self.lstm(r, state.lstm_hidden, state.lstm_cell)
        d1 = self.up1(torch.cat([h, e2], 1))
        d2 = self.up2(torch.cat([d1, e1], 1))
        return self.head(torch.cat([d2, e0], 1)), h, c

    def step(self, I_t, I_prev, P_t, state: RecurrentState):
        """One recurrent update on ``(N, 3, H, W)`` batches; returns ``(O_t, new_state)``."""
        shape = P_t.shape
        for name, x in (("I_t", I_t), ("I_prev", I_prev), ("prev_output", state.prev_output)):
            if x.shape != shape:
                raise ShapeError(f"{name} has shape {tuple(x.shape)}, expected {tuple(shape)}")
        if len(shape) != 4 or shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) batches, got {tuple(shape)}")
        self._check_size(shape[2], shape[3])
        res, h, c = self.residual(I_t, I_prev, P_t, state)
        out = P_t + res
        return out, RecurrentState(h, c, out)

    # -- rollouts -------------------------------------------------------------

    @staticmethod
    def _batched(x):
        if x.dim() == 4:
            return x.unsqueeze(0), True
        if x.dim() != 5:
            raise ShapeError(f"expected (T, 3, H, W) or (N, T, 3, H, W), got {tuple(x.shape)}")
        return x, False

    def rollout(self, raw, processed, return_state=False):
        """Forward outputs ``O_1..O_T`` for raw/processed clips.

        Inputs are ``(T, 3, H, W)`` or ``(N, T, 3, H, W)`` tensors; the
        output has the same layout. ``O_1`` is ``P_1`` verbatim.
        """
        I, single = self._batched(raw)
        P, _ = self._batched(processed)
        if I.shape != P.shape:
            raise ShapeError(f"raw {tuple(I.shape)} and processed {tuple(P.shape)} differ")
        if I.shape[1] < 1:
            raise WindowTooShortError("empty window")
        state = self.initial_state(P[:, 0])
        outs = [P[:, 0]]
        for t in range(1, I.shape[1]):
            o, state = self.step(I[:, t], I[:, t - 1], P[:, t], state)
            outs.append(o)
        out = torch.stack(outs, 1)
        out = out[0] if single else out
        return (out, state) if return_state else out

    def pingpong_rollout(self, raw, processed):
        """Forward pass over the window, then back down to its first frame.

        The recurrent state carries through the turn: ``O'_{k-1}`` is computed
        from ``(I_{k-1}, I_k, P_{k-1})`` with ``O_k`` as the previous output.
        """
        I, single = self._batched(raw)
        P, _ = self._batched(processed)
        k = I.shape[1] - 1
        if k < 1:
            raise WindowTooShortError("a Ping Pong window needs at least 2 frames")
        fwd, state = self.rollout(I, P, return_state=True)
        back = [None] * k
        for t in range(k - 1, -1, -1):
            o, state = self.step(I[:, t], I[:, t + 1], P[:, t], state)
            back[t] = o
        bwd = torch.stack(back, 1)
        if single:
            fwd, bwd = fwd[0], bwd[0]
        return RolloutResult(fwd, bwd)


# -- checkpoints --------------------------------------------------------------

_CONFIG_KEY = "__config__"
_STEP_KEY = "__step__"


def save_checkpoint(path, net: ConsistencyNet, step=0, extra=None):
    """Write parameters as named arrays plus the config and step counter."""
    arrays = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    arrays[_CONFIG_KEY] = np.array(json.dumps(asdict(net.config)))
    arrays[_STEP_KEY] = np.array(step, dtype=np.int64)
    for key, value in (extra or {}).items():
        arrays[f"__extra__/{key}"] = value
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(net, step, extra)`` from :func:`save_checkpoint` output."""
    with np.load(Path(path), allow_pickle=False) as data:
        config = NetConfig(**json.loads(str(data[_CONFIG_KEY])))
        step = int(data[_STEP_KEY])
        net = ConsistencyNet(config)
        state = {}
        extra = {}
        for key in data.files:
            if key in (_CONFIG_KEY, _STEP_KEY):
                continue
            if key.startswith("__extra__/"):
                extra[key[len("__extra__/"):]] = data[key]
            else:
                state[key] = torch.from_numpy(data[key].copy())
    net.load_state_dict(state)
    return net, step, extra
