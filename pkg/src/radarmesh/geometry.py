"""Geometric primitives and radar frame preprocessing.

Positions and directions are plain ``(3,)`` / ``(N, 3)`` float64 numpy arrays
in metres.  The signed-distance convention used throughout the package is
positive in free space (the sensor side) and negative behind surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class FrameError(ValueError):
    """Raised for malformed point cloud frames."""


def _as_points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, 3)
    if a.ndim != 2 or a.shape[1] != 3:
        raise FrameError(f"expected (N, 3) point array, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion (x, y, z, w) plus translation."""

    quat: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64).reshape(4)
        t = np.asarray(self.trans, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
            raise FrameError(f"quaternion norm {n} too far from 1")
        object.__setattr__(self, "quat", q / n)
        object.__setattr__(self, "trans", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        x, y, z, w = self.quat
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = _as_points(points)
        return p @ self.rotation_matrix().T + self.trans

    def inverse(self) -> "Pose":
        q = self.quat * np.array([-1.0, -1.0, -1.0, 1.0])
        r_inv = self.rotation_matrix().T
        return Pose(q, -(r_inv @ self.trans))

    def compose(self, other: "Pose") -> "Pose":
        """Return self ∘ other (apply ``other`` first)."""
        x1, y1, z1, w1 = self.quat
        x2, y2, z2, w2 = other.quat
        q = np.array(
            [
                w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
                w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            ]
        )
        return Pose(q, self.apply(other.trans)[0])

    def is_identity(self, tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(np.abs(self.quat), [0, 0, 0, 1], atol=tol)
            and np.allclose(self.trans, 0.0, atol=tol)
        )


@dataclass
class PointCloudFrame:
    """One radar sweep: pose, points, raw intensities.

    ``points`` are in the sensor frame until :func:`transform_to_world` is
    applied, after which ``sensor_pose`` is identity and ``ray_origins``
    records the emitting sensor position per point (needed after frame
    accumulation, when points of one frame come from several origins).
    """

    timestamp: float
    sensor_pose: Pose
    points: np.ndarray
    intensities: np.ndarray
    ray_origins: np.ndarray | None = None

    def __post_init__(self):
        self.points = _as_points(self.points) if len(self.points) else np.zeros((0, 3))
        self.intensities = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.intensities):
            raise FrameError(
                f"{len(self.points)} points but {len(self.intensities)} intensities"
            )
        if self.ray_origins is not None:
            self.ray_origins = _as_points(self.ray_origins)
            if len(self.ray_origins) != len(self.points):
                raise FrameError("ray_origins length mismatch")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_world(self) -> bool:
        return self.ray_origins is not None

    def ranges(self) -> np.ndarray:
        """Sensor-to-point range per point."""
        if self.ray_origins is not None:
            return np.linalg.norm(self.points - self.ray_origins, axis=1)
        return np.linalg.norm(self.points, axis=1)

    def validate(self):
        if not np.all(np.isfinite(self.points)):
            bad = np.nonzero(~np.isfinite(self.points).all(axis=1))[0]
            raise FrameError(f"non-finite points at indices {bad[:10].tolist()}")
        if not np.all(np.isfinite(self.intensities)):
            bad = np.nonzero(~np.isfinite(self.intensities))[0]
            raise FrameError(f"non-finite intensities at indices {bad[:10].tolist()}")
        r = self.ranges()
        if len(r) and r.min() <= 0:
            bad = np.nonzero(r <= 0)[0]
            raise FrameError(f"zero-range points at indices {bad[:10].tolist()}")


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box, min ≤ max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError(f"invalid box: min {lo} > max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = _as_points(points)
        return np.all((p >= self.min) & (p <= self.max), axis=1)

    def clamp(self, points: np.ndarray) -> np.ndarray:
        return np.clip(_as_points(points), self.min, self.max)

    def expanded(self, margin: float) -> "Aabb":
        return Aabb(self.min - margin, self.max + margin)


def transform_to_world(frame: PointCloudFrame) -> PointCloudFrame:
    """Move a sensor-frame sweep into world coordinates.

    The returned frame has an identity pose; the original sensor position is
    kept per point in ``ray_origins`` so rays can still be reconstructed.
    Raises :class:`FrameError` (listing offending indices) on non-finite input.
    """
    frame.validate()
    world_pts = frame.sensor_pose.apply(frame.points) if len(frame) else frame.points
    origin = np.tile(frame.sensor_pose.trans, (len(frame), 1))
    return PointCloudFrame(
        timestamp=frame.timestamp,
        sensor_pose=Pose.identity(),
        points=world_pts,
        intensities=frame.intensities.copy(),
        ray_origins=origin,
    )


def near_field_filter(frame: PointCloudFrame, radius: float) -> PointCloudFrame:
    """Drop points with sensor-frame range <= radius (strict keep on >).

    An empty result is legal.  Intensities (and ray origins, when present)
    stay in lockstep with the retained points.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    keep = frame.ranges() > radius
    return PointCloudFrame(
        timestamp=frame.timestamp,
        sensor_pose=frame.sensor_pose,
        points=frame.points[keep],
        intensities=frame.intensities[keep],
        ray_origins=None if frame.ray_origins is None else frame.ray_origins[keep],
    )


def accumulate_frames(
    frames: list[PointCloudFrame], k: int, stride: int | None = None
) -> list[PointCloudFrame]:
    """Merge groups of ``k`` consecutive world frames into denser frames.

    Expects world-coordinate frames (see :func:`transform_to_world`), sorted
    by timestamp.  Groups do not overlap by default (``stride = k``); pass
    ``stride=1`` for overlapping windows.  A trailing partial group is kept.
    The merged frame carries the first timestamp of its group and per-point
    ray origins of the contributing sensors.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if any(not f.is_world for f in frames):
        raise FrameError("accumulate_frames expects world frames with ray origins")
    ts = [f.timestamp for f in frames]
    if ts != sorted(ts):
        raise FrameError("frames must be sorted by timestamp")
    if k == 1 and (stride is None or stride == 1):
        return list(frames)
    stride = k if stride is None else stride
    merged = []
    for start in range(0, len(frames), stride):
        group = frames[start : start + k]
        if not group:
            break
        merged.append(
            PointCloudFrame(
                timestamp=group[0].timestamp,
                sensor_pose=Pose.identity(),
                points=np.concatenate([f.points for f in group]),
                intensities=np.concatenate([f.intensities for f in group]),
                ray_origins=np.concatenate([f.ray_origins for f in group]),
            )
        )
        if start + k >= len(frames):
            break
    return merged


@dataclass(frozen=True)
class IntensityRange:
    """Raw-unit range used to map intensities to [0, 1] and back."""

    i_min: float
    i_max: float

    def __post_init__(self):
        if not self.i_min < self.i_max:
            raise ValueError(f"need i_min < i_max, got [{self.i_min}, {self.i_max}]")

    @classmethod
    def from_frames(cls, frames: list[PointCloudFrame]) -> "IntensityRange":
        """Rounded dataset-wide minimum and maximum."""
        vals = np.concatenate([f.intensities for f in frames if len(f)])
        if vals.size == 0:
            raise FrameError("no intensities to infer range from")
        return cls(float(np.floor(vals.min())), float(np.ceil(vals.max())))

    @property
    def span(self) -> float:
        return self.i_max - self.i_min

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return np.clip((np.asarray(raw, dtype=np.float64) - self.i_min) / self.span, 0.0, 1.0)

    def denormalize(self, unit: np.ndarray) -> np.ndarray:
        return np.asarray(unit, dtype=np.float64) * self.span + self.i_min


def normalize_intensities(
    frames: list[PointCloudFrame], i_min: float, i_max: float
) -> tuple[list[PointCloudFrame], IntensityRange]:
    """Map raw intensities to [0, 1], clamping out-of-range values.

    Returns the new frames together with the persisted range so predictions
    can be mapped back to raw sensor units.
    """
    rng = IntensityRange(i_min, i_max)
    out = [
        replace(f, intensities=rng.normalize(f.intensities), points=f.points.copy())
        for f in frames
    ]
    return out, rng
