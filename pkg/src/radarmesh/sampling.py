"""Ray sampling: turn measured radar points into labeled training samples.

Every retained radar point x with sensor origin o spawns samples on the ray
o -> x: ``surface_samples`` draws near x inside the truncation band and
``free_space_samples`` draws in the free segment between the near clip and
the band.  Signed-distance labels are positive on the sensor side of the
surface and negative beyond it; a sample at ray range t against a detection
at range r gets label r - t.  Near-surface samples inherit the (normalized)
intensity of their generating point, free-space samples are labeled 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloudFrame, Pose

log = logging.getLogger("radarmesh.sampling")


@dataclass(frozen=True)
class SamplerConfig:
    surface_samples: int = 6
    free_space_samples: int = 6
    truncation: float = 0.3
    free_space_margin: float = 0.3
    near_clip: float = 0.0

    def __post_init__(self):
        if self.surface_samples < 0 or self.free_space_samples < 0:
            raise ValueError("sample counts must be >= 0")
        if self.truncation <= 0:
            raise ValueError("truncation must be positive")
        if self.free_space_margin < 0 or self.near_clip < 0:
            raise ValueError("margins must be >= 0")


@dataclass
class TrainingSample:
    position: np.ndarray
    view_dir: np.ndarray
    sdf_label: float
    intensity_label: float
    is_free_space: bool


class SamplePool:
    """Immutable flat arrays of all training samples."""

    def __init__(self, positions, view_dirs, sdf_labels, intensity_labels,
                 is_free_space, truncation: float):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.view_dirs = np.asarray(view_dirs, dtype=np.float64).reshape(-1, 3)
        self.sdf_labels = np.asarray(sdf_labels, dtype=np.float64).reshape(-1)
        self.intensity_labels = np.asarray(intensity_labels, dtype=np.float64).reshape(-1)
        self.is_free_space = np.asarray(is_free_space, dtype=bool).reshape(-1)
        self.truncation = float(truncation)
        n = len(self.positions)
        if not all(
            len(a) == n
            for a in (self.view_dirs, self.sdf_labels, self.intensity_labels, self.is_free_space)
        ):
            raise ValueError("sample pool arrays disagree in length")

    def __len__(self) -> int:
        return len(self.positions)

    def save(self, path):
        np.savez(
            path,
            positions=self.positions,
            view_dirs=self.view_dirs,
            sdf_labels=self.sdf_labels,
            intensity_labels=self.intensity_labels,
            is_free_space=self.is_free_space,
            truncation=np.array(self.truncation),
        )

    @classmethod
    def load(cls, path) -> "SamplePool":
        data = np.load(path)
        return cls(
            data["positions"], data["view_dirs"], data["sdf_labels"],
            data["intensity_labels"], data["is_free_space"],
            float(data["truncation"]),
        )


def _frame_samples(frame: PointCloudFrame, cfg: SamplerConfig,
                   rng: np.random.Generator):
    """Vectorized per-frame sampling; returns pool columns plus skip counts."""
    origins = frame.ray_origins
    delta = frame.points - origins
    r = np.linalg.norm(delta, axis=1)
    valid = r > max(cfg.truncation, 1e-9)
    n_degenerate = int(np.sum(r <= 1e-9))
    n_short = int(np.sum(~valid)) - n_degenerate

    dirs = np.zeros_like(delta)
    dirs[valid] = delta[valid] / r[valid, None]

    cols = []
    if cfg.surface_samples > 0:
        offs = rng.uniform(-cfg.truncation, cfg.truncation,
                           size=(len(frame), cfg.surface_samples))
        t = r[:, None] + offs
        pos = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        cols.append((
            pos[valid].reshape(-1, 3),
            np.repeat(dirs[valid], cfg.surface_samples, axis=0),
            (-offs[valid]).reshape(-1),
            np.repeat(frame.intensities[valid], cfg.surface_samples),
            np.zeros(valid.sum() * cfg.surface_samples, dtype=bool),
        ))

    n_clipped = 0
    if cfg.free_space_samples > 0:
        upper = r - cfg.truncation - cfg.free_space_margin
        free_ok = valid & (upper > cfg.near_clip)
        n_clipped = int(np.sum(valid & ~free_ok))
        unit = rng.uniform(0.0, 1.0, size=(len(frame), cfg.free_space_samples))
        t = cfg.near_clip + unit * (upper[:, None] - cfg.near_clip)
        pos = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        labels = r[:, None] - t
        cols.append((
            pos[free_ok].reshape(-1, 3),
            np.repeat(dirs[free_ok], cfg.free_space_samples, axis=0),
            labels[free_ok].reshape(-1),
            np.zeros(free_ok.sum() * cfg.free_space_samples),
            np.ones(free_ok.sum() * cfg.free_space_samples, dtype=bool),
        ))

    return cols, n_degenerate, n_short, n_clipped


def build_sample_pool(frames: list[PointCloudFrame], cfg: SamplerConfig,
                      seed: int = 0) -> SamplePool:
    """Sample every frame; frames must be in world coordinates with
    normalized intensities."""
    rng = np.random.default_rng(seed)
    parts = []
    degenerate = short = clipped = 0
    for frame in frames:
        if not frame.is_world:
            raise ValueError("sampling expects world frames with ray origins")
        cols, n_deg, n_short, n_clip = _frame_samples(frame, cfg, rng)
        parts.extend(cols)
        degenerate += n_deg
        short += n_short
        clipped += n_clip
    if degenerate or short:
        log.warning("skipped %d degenerate and %d too-short rays", degenerate, short)
    if clipped:
        log.info("%d rays too short for free-space samples", clipped)
    if not parts:
        return SamplePool(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0),
            np.zeros(0, dtype=bool), cfg.truncation,
        )
    return SamplePool(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]),
        np.concatenate([p[4] for p in parts]),
        cfg.truncation,
    )


def sample_point(origin: np.ndarray, x: np.ndarray, intensity: float,
                 cfg: SamplerConfig, rng: np.random.Generator) -> list[TrainingSample]:
    """Sample one measured point; see module docstring for label conventions."""
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    x = np.asarray(x, dtype=np.float64).reshape(3)
    frame = PointCloudFrame(
        timestamp=0.0,
        sensor_pose=Pose.identity(),
        points=x.reshape(1, 3),
        intensities=np.array([intensity]),
        ray_origins=origin.reshape(1, 3),
    )
    cols, n_deg, _, _ = _frame_samples(frame, cfg, rng)
    if n_deg:
        log.warning("degenerate ray (origin == point); skipped")
        return []
    samples = []
    for pos, dirs, labels, ints, free in cols:
        for i in range(len(pos)):
            samples.append(
                TrainingSample(pos[i], dirs[i], float(labels[i]), float(ints[i]), bool(free[i]))
            )
    return samples
