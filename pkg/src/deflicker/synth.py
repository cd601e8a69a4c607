"""Synthetic videos with analytically known flow, occlusion and flicker.

A scene is a textured plane panned under a fixed camera: frame ``t`` shows
``texture(x - o_t)`` where the offset ``o_t`` accumulates the per-frame
velocity. Every flow ``F_{a,b}`` is therefore the uniform displacement
``o_b - o_a`` and a pixel is occluded exactly when that displacement pushes
it outside the frame.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import SpecError
from .flow import FLOW_NAME, GROUND_TRUTH, FlowField, FlowStore, FloDirectoryStore, write_flo
from .video import FrameSequence, VideoTriplet, load_frame_folder, save_frame_folder

TEXTURES = ("checker", "gradient", "noise")
FLICKERS = ("global_brightness", "local_patch", "hue_shift")
MANIFEST_NAME = "manifest.json"
OCCLUSION_NAME = "occ_{src:04d}_{dst:04d}.png"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    length: int = 20
    texture: str = "checker"
    velocity: tuple = (1.0, 0.0)
    reversal_at: Optional[int] = None
    cell: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        if self.texture not in TEXTURES:
            raise SpecError(f"unknown texture {self.texture!r}; choose from {TEXTURES}")
        if self.length < 2:
            raise SpecError("a scene needs at least 2 frames")
        if self.height < 1 or self.width < 1 or self.cell < 1:
            raise SpecError("canvas and cell sizes must be positive")
        if len(self.velocity) != 2 or any((2 * v) % 1 for v in self.velocity):
            raise SpecError(f"velocity must be integer or half-integer pixels, got {self.velocity}")
        if self.reversal_at is not None and not 0 < self.reversal_at < self.length:
            raise SpecError(f"reversal_at must lie in 1..{self.length - 1}")

    def step_velocity(self, t):
        """Displacement from frame ``t`` to ``t + 1``."""
        if self.reversal_at is not None and t >= self.reversal_at:
            return tuple(-v for v in self.velocity)
        return self.velocity

    def offsets(self):
        o = np.zeros((self.length, 2))
        for t in range(self.length - 1):
            o[t + 1] = o[t] + self.step_velocity(t)
        return o


@dataclass(frozen=True)
class FlickerSpec:
    kind: str = "global_brightness"
    amplitude: float = 0.15
    region: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in FLICKERS:
            raise SpecError(f"unknown flicker {self.kind!r}; choose from {FLICKERS}")
        if self.amplitude < 0:
            raise SpecError("flicker amplitude must be >= 0")
        if self.region is not None:
            object.__setattr__(self, "region", tuple(int(v) for v in self.region))
            if len(self.region) != 4:
                raise SpecError("region is (top, left, bottom, right)")
        elif self.kind == "local_patch":
            raise SpecError("local_patch flicker needs a region")


class GroundTruthFlowStore(FlowStore):
    """Analytic flows ``F_{a,b} = o_b - o_a`` for any pair of frame indices."""

    compose_missing = False

    def __init__(self, offsets, height, width):
        self.offsets = np.asarray(offsets, dtype=np.float64)
        self.height, self.width = height, width

    def lookup(self, src, dst):
        n = len(self.offsets)
        if not (0 <= src < n and 0 <= dst < n):
            return None
        dx, dy = self.offsets[dst] - self.offsets[src]
        return FlowField.uniform(self.height, self.width, dx, dy,
                                 source_time=src, target_time=dst, provenance=GROUND_TRUTH)


@dataclass
class SynthVideo:
    triplet: VideoTriplet
    flows: GroundTruthFlowStore
    scene: SceneSpec
    flicker: FlickerSpec
    flicker_values: np.ndarray = field(repr=False, default=None)

    def occlusion_truth(self, src, dst):
        """1 where a pixel of frame ``src`` stays inside frame ``dst``."""
        o = self.flows.offsets
        dx, dy = o[dst] - o[src]
        h, w = self.scene.height, self.scene.width
        ys, xs = np.mgrid[0:h, 0:w]
        inside = (xs + dx >= 0) & (xs + dx <= w - 1) & (ys + dy >= 0) & (ys + dy <= h - 1)
        return inside.astype(np.float32)

    def __len__(self):
        return len(self.triplet)


def _texture(scene: SceneSpec, shape, rng):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    if scene.texture == "checker":
        colors = rng.uniform(0.25, 0.75, size=(2, 3))
        parity = ((ys // scene.cell) + (xs // scene.cell)) % 2
        return colors[parity]
    if scene.texture == "gradient":
        base = rng.uniform(0.3, 0.7, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        period = 4.0 * scene.cell
        out = np.empty((h, w, 3))
        for c in range(3):
            out[..., c] = base[c] + 0.2 * np.sin(2 * np.pi * (xs + ys * 0.5) / period + phase[c])
        return out
    blocks = rng.uniform(0.2, 0.8, size=(-(-h // scene.cell), -(-w // scene.cell), 3))
    return blocks[ys // scene.cell, xs // scene.cell]


def render_raw(scene: SceneSpec):
    """Render the clean frames ``I`` and return ``(frames, offsets)``."""
    rng = np.random.default_rng(scene.seed)
    offsets = scene.offsets()
    margin = int(np.ceil(np.abs(offsets).max())) + 2
    tex = _texture(scene, (scene.height + 2 * margin, scene.width + 2 * margin), rng)
    ys, xs = np.mgrid[0:scene.height, 0:scene.width]
    frames = np.empty((scene.length, scene.height, scene.width, 3))
    for t, (ox, oy) in enumerate(offsets):
        if float(ox).is_integer() and float(oy).is_integer():
            y0, x0 = margin - int(oy), margin - int(ox)
            frames[t] = tex[y0:y0 + scene.height, x0:x0 + scene.width]
        else:
            coords = [ys - oy + margin, xs - ox + margin]
            for c in range(3):
                frames[t, ..., c] = ndimage.map_coordinates(tex[..., c], coords, order=1)
    return np.clip(frames, 0.0, 1.0), offsets


def _hue_rotation(theta):
    # rotation about the grey axis (1, 1, 1)
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx


def apply_flicker(frames, flicker: FlickerSpec):
    """Per-frame, temporally independent perturbation. Returns ``(P, values)``."""
    frames = np.asarray(frames, dtype=np.float64)
    t_count, h, w, _ = frames.shape
    rng = np.random.default_rng(flicker.seed)
    values = rng.uniform(-1.0, 1.0, size=t_count) * flicker.amplitude
    if flicker.amplitude == 0:
        return frames.copy(), values
    out = frames.copy()
    if flicker.kind == "global_brightness":
        out += values[:, None, None, None]
    elif flicker.kind == "local_patch":
        top, left, bottom, right = flicker.region
        out[:, top:bottom, left:right] += values[:, None, None, None]
    else:
        for t in range(t_count):
            out[t] = out[t] @ _hue_rotation(np.pi * values[t]).T
    return np.clip(out, 0.0, 1.0), values


def generate(scene: SceneSpec, flicker: FlickerSpec) -> SynthVideo:
    """Render ``I``, flicker it into ``P`` and attach ground-truth flows."""
    if flicker.region is not None:
        top, left, bottom, right = flicker.region
        if not (0 <= top < bottom <= scene.height and 0 <= left < right <= scene.width):
            raise SpecError(f"flicker region {flicker.region} lies outside the {scene.height}x{scene.width} canvas")
    raw, offsets = render_raw(scene)
    processed, values = apply_flicker(raw, flicker)
    provenance = {"scene": _spec_dict(scene), "flicker": _spec_dict(flicker)}
    triplet = VideoTriplet(
        FrameSequence(raw.astype(np.float32), provenance={"role": "raw", **provenance}),
        FrameSequence(processed.astype(np.float32), provenance={"role": "processed", **provenance}),
    )
    flows = GroundTruthFlowStore(offsets, scene.height, scene.width)
    return SynthVideo(triplet, flows, scene, flicker, values)


def b1_scene(seed=1234, **overrides):
    """The canonical benchmark scene: 32x32 checker panning right, reversing mid-way."""
    kw = dict(height=32, width=32, length=20, texture="checker", velocity=(1, 0),
              reversal_at=10, cell=4, seed=seed)
    kw.update(overrides)
    return SceneSpec(**kw)


def b1(seed=1234, kind="global_brightness", amplitude=0.15, **scene_overrides):
    """Benchmark case B1 (``seed=1234``) or a member of its family."""
    return generate(b1_scene(seed, **scene_overrides), FlickerSpec(kind, amplitude, seed=seed))


def b1_family(seeds, kind="global_brightness", amplitude=0.15, **scene_overrides):
    return [b1(s, kind, amplitude, **scene_overrides) for s in seeds]


# -- spec files and export ----------------------------------------------------


def _spec_dict(spec):
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def specs_from_dict(data: dict):
    """Parse ``{"scene": {...}, "flicker": {...}}`` into spec objects."""
    if not isinstance(data, dict) or "scene" not in data:
        raise SpecError("spec must be an object with a 'scene' entry")
    try:
        scene = SceneSpec(**data["scene"])
        flicker = FlickerSpec(**data.get("flicker", {"amplitude": 0.0}))
    except TypeError as exc:
        raise SpecError(str(exc)) from exc
    return scene, flicker


def export(video: SynthVideo, root) -> dict:
    """Write frames, adjacent flows, occlusion truth and a manifest under ``root``.

    Layout::

        root/raw/frame-0000.png ...        clean frames I
        root/processed/frame-0000.png ...  flickered frames P
        root/flows/flow_0000_0001.flo ...  F_{t,t+1} and F_{t+1,t}
        root/occlusion/occ_0000_0001.png   truth masks for the same pairs
        root/manifest.json
    """
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        save_frame_folder(video.triplet.raw, root / "raw")
        save_frame_folder(video.triplet.processed, root / "processed")
        flow_dir = root / "flows"
        occ_dir = root / "occlusion"
        flow_dir.mkdir(exist_ok=True)
        occ_dir.mkdir(exist_ok=True)
        pairs = []
        for t in range(len(video) - 1):
            for src, dst in ((t, t + 1), (t + 1, t)):
                write_flo(flow_dir / FLOW_NAME.format(src=src, dst=dst), video.flows.get(src, dst))
                mask = (video.occlusion_truth(src, dst) * 255).astype(np.uint8)
                Image.fromarray(mask, mode="L").save(occ_dir / OCCLUSION_NAME.format(src=src, dst=dst))
                pairs.append([src, dst])
        manifest = {
            "format_version": FORMAT_VERSION,
            "scene": _spec_dict(video.scene),
            "flicker": _spec_dict(video.flicker),
            "frames": len(video),
            "flow_pairs": pairs,
            "flow_convention": "F_{a,b} on frame a's grid: warp(V_b, F_{a,b})(x) = V_b(x + F(x))",
            "time_index_base": 0,
        }
        (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        where = exc.filename or root
        raise OSError(exc.errno, f"export failed at {where}: {exc.strerror}", str(where)) from exc
    return manifest


def load_export(root):
    """Re-ingest an exported tree as ``(triplet, flow_store, manifest)``."""
    root = Path(root)
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    triplet = VideoTriplet(load_frame_folder(root / "raw"), load_frame_folder(root / "processed"))
    return triplet, FloDirectoryStore(root / "flows", provenance=GROUND_TRUTH), manifest


def regenerate(manifest: dict) -> SynthVideo:
    scene, flicker = specs_from_dict(manifest)
    return generate(scene, flicker)


def load_occlusion_truth(root, src, dst):
    path = Path(root) / "occlusion" / OCCLUSION_NAME.format(src=src, dst=dst)
    with Image.open(path) as im:
        return (np.asarray(im) > 127).astype(np.float32)
