"""Synthetic two-sensor scenes, box geometry, axis-aligned 3D IoU and JSONL I/O.

Each object is an axis-aligned box in camera coordinates (x right, y down,
z forward). The camera-like modality sees a sine-warped random projection of
the box's 2D image footprint; the lidar-like modality sees one of the 3D
centre, size and range. Both projections are frozen by ``projection_seed`` so
every dataset drawn with the same sensor model is comparable.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

CORNER_SIGNS = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))
SAMPLE_FIELDS = ("center", "size", "corners", "feat_a", "feat_b", "proposal", "noise_level_a", "noise_level_b")

# horizontal / vertical tangent of the half field of view
TAN_HALF_FOV = (0.9, 0.3)
PROPOSAL_JITTER = 0.05


class DataFormatError(ValueError):
    pass


@dataclass
class DataConfig:
    n_samples: int = 5000
    center_x: tuple[float, float] = (-6.0, 6.0)
    center_y: tuple[float, float] = (0.5, 2.0)
    center_z: tuple[float, float] = (8.0, 30.0)
    size_x: tuple[float, float] = (1.5, 2.0)
    size_y: tuple[float, float] = (1.4, 1.8)
    size_z: tuple[float, float] = (3.5, 4.8)
    noise_level_a: float = 0.1
    noise_level_b: float = 0.1
    dropout_prob_a: float = 0.0
    dropout_prob_b: float = 0.0
    feat_dim_a: int = 32
    feat_dim_b: int = 32
    seed: int = 0
    projection_seed: int = 1234

    def __post_init__(self):
        for name in ("center_x", "center_y", "center_z", "size_x", "size_y", "size_z"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
            setattr(self, name, (float(lo), float(hi)))
        if min(self.size_x[0], self.size_y[0], self.size_z[0]) <= 0:
            raise ValueError("size ranges must be positive")
        if self.center_z[0] <= 0:
            raise ValueError("objects must lie in front of the camera (center_z > 0)")
        for name in ("dropout_prob_a", "dropout_prob_b"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.noise_level_a < 0 or self.noise_level_b < 0:
            raise ValueError("noise levels must be non-negative")
        if self.n_samples < 0:
            raise ValueError("n_samples must be non-negative")


@dataclass
class SceneSample:
    center: np.ndarray
    size: np.ndarray
    corners: np.ndarray
    feat_a: np.ndarray
    feat_b: np.ndarray
    proposal: np.ndarray
    noise_level_a: float = 0.0
    noise_level_b: float = 0.0

    def to_json(self) -> dict:
        out = {}
        for name in SAMPLE_FIELDS:
            v = getattr(self, name)
            out[name] = float(v) if np.ndim(v) == 0 else np.asarray(v, dtype=np.float64).tolist()
        return out

    def __eq__(self, other):
        if not isinstance(other, SceneSample):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in SAMPLE_FIELDS)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def corners_from_box(center, size) -> np.ndarray:
    """Flattened ``[8, 3]`` corners at ``center +/- size/2``, sign order (---, --+, -+-, ...)."""
    center = np.asarray(center, dtype=np.float64)
    size = np.asarray(size, dtype=np.float64)
    if np.any(size <= 0):
        raise ValueError(f"box size must be positive, got {size.tolist()}")
    return (center + 0.5 * CORNER_SIGNS * size).reshape(-1)


def box_from_corners(corners) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis (centre, extent) of the corner cloud; inverts :func:`corners_from_box`."""
    pts = np.asarray(corners, dtype=np.float64).reshape(-1, 8, 3)
    lo, hi = pts.min(axis=1), pts.max(axis=1)
    center, size = 0.5 * (lo + hi), hi - lo
    if np.ndim(corners) == 1:
        return center[0], size[0]
    return center, size


def iou3d_axis_aligned(box_a, box_b) -> float:
    """Intersection over union of two ``(center, size)`` axis-aligned boxes."""
    (ca, sa), (cb, sb) = box_a, box_b
    ca, sa, cb, sb = (np.asarray(v, dtype=np.float64) for v in (ca, sa, cb, sb))
    a_lo, a_hi, b_lo, b_hi = ca - sa / 2, ca + sa / 2, cb - sb / 2, cb + sb / 2
    # volumes from the same rounded extents as the overlap, so IoU(a, a) is exactly 1
    inter = np.prod(np.clip(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0.0, None), axis=-1)
    union = np.prod(a_hi - a_lo, axis=-1) + np.prod(b_hi - b_lo, axis=-1) - inter
    out = inter / union
    return float(out) if np.ndim(out) == 0 else out


def project_box(center, size) -> np.ndarray:
    """Normalized 2D image box ``(cx, cy, w, h)`` of the 3D box, clipped to the image."""
    pts = corners_from_box(center, size).reshape(8, 3)
    u = 0.5 + 0.5 * pts[:, 0] / (pts[:, 2] * TAN_HALF_FOV[0])
    v = 0.5 + 0.5 * pts[:, 1] / (pts[:, 2] * TAN_HALF_FOV[1])
    u0, u1 = np.clip([u.min(), u.max()], 0.0, 1.0)
    v0, v1 = np.clip([v.min(), v.max()], 0.0, 1.0)
    return np.array([(u0 + u1) / 2, (v0 + v1) / 2, u1 - u0, v1 - v0])


# ---------------------------------------------------------------------------
# sensor models
# ---------------------------------------------------------------------------


@dataclass
class _Projection:
    weight: np.ndarray
    bias: np.ndarray

    def __call__(self, x):
        return np.sin(self.weight @ x + self.bias)


@dataclass
class SensorModel:
    camera: _Projection
    lidar: _Projection
    ranges: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: DataConfig) -> "SensorModel":
        rng = np.random.default_rng(cfg.projection_seed)
        n_cam, n_lidar = 6, 7
        camera = _Projection(rng.normal(0.0, 1.2 / np.sqrt(n_cam), (cfg.feat_dim_a, n_cam)), rng.uniform(-0.5, 0.5, cfg.feat_dim_a))
        lidar = _Projection(rng.normal(0.0, 1.2 / np.sqrt(n_lidar), (cfg.feat_dim_b, n_lidar)), rng.uniform(-0.5, 0.5, cfg.feat_dim_b))
        return cls(camera, lidar, {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name.startswith(("center_", "size_"))})

    def _unit(self, value, name):
        lo, hi = self.ranges[name]
        return (value - lo) / (hi - lo) * 2.0 - 1.0

    def camera_inputs(self, box2d: np.ndarray) -> np.ndarray:
        cx, cy, w, h = box2d
        # apparent size spans roughly an order of magnitude; log keeps it well spread
        return np.array([2 * cx - 1, 2 * cy - 1, 4 * w - 1, 2 * h - 1, np.log(w + 1e-3) / 2 + 1, np.log(h + 1e-3) / 2 + 1])

    def lidar_inputs(self, center, size) -> np.ndarray:
        rng_z = self.ranges["center_z"]
        depth = float(np.linalg.norm(center))
        return np.array(
            [
                self._unit(center[0], "center_x"),
                self._unit(center[1], "center_y"),
                self._unit(center[2], "center_z"),
                self._unit(size[0], "size_x"),
                self._unit(size[1], "size_y"),
                self._unit(size[2], "size_z"),
                (depth - rng_z[0]) / (rng_z[1] - rng_z[0]) * 2.0 - 1.0,
            ]
        )


def generate_scene(config: DataConfig, index: int, sensors: SensorModel | None = None) -> SceneSample:
    """Draw object ``index`` from a generator seeded by ``(config.seed, index)``."""
    sensors = sensors or SensorModel.from_config(config)
    rng = np.random.default_rng([config.seed, index])
    lows = np.array([config.center_x[0], config.center_y[0], config.center_z[0]])
    highs = np.array([config.center_x[1], config.center_y[1], config.center_z[1]])
    center = rng.uniform(lows, highs)
    lows = np.array([config.size_x[0], config.size_y[0], config.size_z[0]])
    highs = np.array([config.size_x[1], config.size_y[1], config.size_z[1]])
    size = rng.uniform(lows, highs)
    noise_a = rng.standard_normal(config.feat_dim_a)
    noise_b = rng.standard_normal(config.feat_dim_b)
    noise_p = rng.standard_normal(4)
    drop_a, drop_b = rng.random(2)

    box2d = project_box(center, size)
    feat_a = sensors.camera(sensors.camera_inputs(box2d)) + config.noise_level_a * noise_a
    feat_b = sensors.lidar(sensors.lidar_inputs(center, size)) + config.noise_level_b * noise_b
    if drop_a < config.dropout_prob_a:
        feat_a = np.zeros(config.feat_dim_a)
    if drop_b < config.dropout_prob_b:
        feat_b = np.zeros(config.feat_dim_b)
    proposal = np.clip(box2d + PROPOSAL_JITTER * config.noise_level_a * noise_p, 0.0, 1.0)
    return SceneSample(
        center=center,
        size=size,
        corners=corners_from_box(center, size),
        feat_a=feat_a,
        feat_b=feat_b,
        proposal=proposal,
        noise_level_a=float(config.noise_level_a),
        noise_level_b=float(config.noise_level_b),
    )


def generate_dataset(config: DataConfig) -> list[SceneSample]:
    sensors = SensorModel.from_config(config)
    return [generate_scene(config, i, sensors) for i in range(config.n_samples)]


@dataclass
class Batch:
    feat_a: np.ndarray
    feat_b: np.ndarray
    proposal: np.ndarray
    corners: np.ndarray
    center: np.ndarray
    size: np.ndarray

    def __len__(self):
        return self.corners.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(*(getattr(self, f.name)[idx] for f in fields(self)))


def stack(samples: Iterable[SceneSample]) -> Batch:
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to stack")
    return Batch(*(np.stack([getattr(s, f.name) for s in samples]) for f in fields(Batch)))


# ---------------------------------------------------------------------------
# line-delimited JSON
# ---------------------------------------------------------------------------


def write_samples(path, samples: Iterable[SceneSample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")
            n += 1
    return n


def _parse_sample(doc, lineno: int) -> SceneSample:
    if not isinstance(doc, dict):
        raise DataFormatError(f"line {lineno}: expected a JSON object")
    for name in SAMPLE_FIELDS:
        if name not in doc:
            raise DataFormatError(f"line {lineno}: missing field '{name}'")
    kwargs = {}
    for name in SAMPLE_FIELDS:
        try:
            value = np.asarray(doc[name], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise DataFormatError(f"line {lineno}: field '{name}' is not numeric") from exc
        kwargs[name] = float(value) if name.startswith("noise_level") else value
    if kwargs["corners"].shape != (24,) or kwargs["center"].shape != (3,) or kwargs["size"].shape != (3,):
        raise DataFormatError(f"line {lineno}: geometry fields have wrong lengths")
    if kwargs["proposal"].shape != (4,):
        raise DataFormatError(f"line {lineno}: proposal must have 4 entries")
    return SceneSample(**kwargs)


def read_samples(path) -> list[SceneSample]:
    """Read a dataset; feature vectors may come from any extractor with this schema."""
    out = []
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            out.append(_parse_sample(doc, lineno))
    return out
