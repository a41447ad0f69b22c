"""Head-orientation gaze detection against a sphere around the robot's head.

Conventions: in sensor coordinates +z is forward, +y up and +x left; yaw turns
about +y, pitch about +x and roll about +z.  The facing direction of a head is
``Rz(roll) @ Rx(pitch) @ Ry(yaw) @ (0, 0, 1)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DataError, PoseFrame, Turn


def rot_x(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class GazeGeometry:
    sensor_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sensor_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    target_center: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 2.0]))
    target_radius: float = 0.30
    gap_tolerance_ms: int = 200
    min_gaze_ms: int = 10000

    def __post_init__(self):
        self.sensor_position = np.asarray(self.sensor_position, dtype=float).reshape(3)
        self.sensor_rotation = np.asarray(self.sensor_rotation, dtype=float).reshape(3, 3)
        self.target_center = np.asarray(self.target_center, dtype=float).reshape(3)
        if not self.target_radius > 0:
            raise ValueError("target_radius must be > 0")
        R = self.sensor_rotation
        if not (np.allclose(R @ R.T, np.eye(3), atol=1e-9) and abs(np.linalg.det(R) - 1.0) <= 1e-9):
            raise ValueError("sensor_rotation must be orthonormal with determinant +1")
        if self.gap_tolerance_ms < 0 or self.min_gaze_ms <= 0:
            raise ValueError("gap_tolerance_ms must be >= 0 and min_gaze_ms > 0")

    def to_dict(self):
        return {
            "sensor_position": self.sensor_position.tolist(),
            "sensor_rotation": self.sensor_rotation.ravel().tolist(),
            "target_center": self.target_center.tolist(),
            "target_radius": float(self.target_radius),
            "gap_tolerance_ms": int(self.gap_tolerance_ms),
            "min_gaze_ms": int(self.min_gaze_ms),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["sensor_position"], np.asarray(d["sensor_rotation"], dtype=float).reshape(3, 3),
                       d["target_center"], float(d.get("target_radius", 0.30)),
                       int(d.get("gap_tolerance_ms", 200)), int(d.get("min_gaze_ms", 10000)))
        except (KeyError, ValueError, TypeError) as e:
            raise DataError(f"invalid gaze geometry: {e}") from None

    @classmethod
    def load(cls, path) -> "GazeGeometry":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except DataError as e:
            raise DataError(str(e), path) from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def head_direction(yaw_deg, pitch_deg, roll_deg) -> np.ndarray:
    """Unit facing direction in sensor coordinates (vectorised over arrays)."""
    y, p, r = (np.radians(np.asarray(a, dtype=float)) for a in (yaw_deg, pitch_deg, roll_deg))
    # Ry(yaw) ez
    x0, y0, z0 = np.sin(y), np.zeros_like(y), np.cos(y)
    # Rx(pitch)
    x1, y1, z1 = x0, y0 * np.cos(p) - z0 * np.sin(p), y0 * np.sin(p) + z0 * np.cos(p)
    # Rz(roll)
    x2, y2 = x1 * np.cos(r) - y1 * np.sin(r), x1 * np.sin(r) + y1 * np.cos(r)
    d = np.stack([x2, y2, z1], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def head_ray_world(frame: PoseFrame, geom: GazeGeometry):
    vals = (*frame.head_pos, frame.yaw_deg, frame.pitch_deg, frame.roll_deg)
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite pose frame")
    origin = geom.sensor_rotation @ np.asarray(frame.head_pos, dtype=float) + geom.sensor_position
    d = geom.sensor_rotation @ head_direction(frame.yaw_deg, frame.pitch_deg, frame.roll_deg)
    return origin, d / np.linalg.norm(d)


def rays_world(positions, angles, geom: GazeGeometry):
    """Vectorised rays for (n, 3) sensor positions and (n, 3) yaw/roll/pitch angles."""
    R = geom.sensor_rotation
    origins = positions @ R.T + geom.sensor_position
    dirs = head_direction(angles[:, 0], angles[:, 2], angles[:, 1]) @ R.T
    return origins, dirs


def intersects_target(origin, direction, geom: GazeGeometry) -> bool:
    """True iff the ray ``origin + t * direction`` (t >= 0) touches the target sphere."""
    return bool(intersects_many(np.asarray(origin, float)[None], np.asarray(direction, float)[None], geom)[0])


def intersects_many(origins, directions, geom: GazeGeometry) -> np.ndarray:
    d = directions / np.linalg.norm(directions, axis=-1, keepdims=True)
    oc = geom.target_center - origins
    t = np.maximum(np.einsum("ij,ij->i", oc, d), 0.0)
    closest = origins + t[:, None] * d
    dist2 = np.einsum("ij,ij->i", closest - geom.target_center, closest - geom.target_center)
    return dist2 <= geom.target_radius ** 2


def looking_flags(positions, angles, geom: GazeGeometry) -> np.ndarray:
    o, d = rays_world(np.asarray(positions, float), np.asarray(angles, float), geom)
    return intersects_many(o, d, geom)


def longest_gaze_ms(timestamps, flags, t_start_ms=None, t_end_ms=None, gap_tolerance_ms=200) -> int:
    """Length of the longest looking stretch, merging gaps up to the tolerance.

    Frame i covers ``[ts[i], ts[i+1])``; the last frame covers one median gap.
    Coverage is clipped to ``[t_start_ms, t_end_ms)`` when given.
    """
    ts = np.asarray(timestamps, dtype=np.int64)
    flags = np.asarray(flags, dtype=bool)
    if len(ts) == 0 or not flags.any():
        return 0
    gap = int(np.median(np.diff(ts))) if len(ts) > 1 else 33
    ends = np.append(ts[1:], ts[-1] + gap)
    lo = ts[0] if t_start_ms is None else t_start_ms
    hi = ends[-1] if t_end_ms is None else t_end_ms
    best = 0
    cur = None
    for a, b in zip(np.maximum(ts[flags], lo), np.minimum(ends[flags], hi)):
        if b <= a:
            continue
        if cur is not None and a - cur[1] <= gap_tolerance_ms:
            cur[1] = max(cur[1], b)
        else:
            cur = [a, b]
        best = max(best, cur[1] - cur[0])
    return int(best)


def gaze_label_from_flags(timestamps, flags, geom: GazeGeometry, turn: Turn | None = None) -> bool:
    ts = np.asarray(timestamps, dtype=np.int64)
    if turn is not None:
        duration = turn.duration_ms
        lo, hi = turn.t_start_ms, turn.t_end_ms
    else:
        if len(ts) == 0:
            return False
        gap = int(np.median(np.diff(ts))) if len(ts) > 1 else 33
        lo, hi = int(ts[0]), int(ts[-1]) + gap
        duration = hi - lo
    if duration < geom.min_gaze_ms:
        return False
    return longest_gaze_ms(ts, flags, lo, hi, geom.gap_tolerance_ms) >= geom.min_gaze_ms


def gaze_label_turn(frames, geom: GazeGeometry, turn: Turn | None = None) -> bool:
    """Turn-level gaze: a looking stretch of at least ``min_gaze_ms``.

    Turns shorter than ``min_gaze_ms`` are negative.  Without ``turn`` the span
    of the frames stands in for the turn.
    """
    if len(frames) == 0:
        return False
    ts = [f.timestamp_ms for f in frames]
    pos = np.array([f.head_pos for f in frames], dtype=float)
    ang = np.array([(f.yaw_deg, f.roll_deg, f.pitch_deg) for f in frames], dtype=float)
    return gaze_label_from_flags(ts, looking_flags(pos, ang, geom), geom, turn)
