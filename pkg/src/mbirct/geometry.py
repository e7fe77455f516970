"""Acquisition geometry, view-angle schedules and beam-blocking masks."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GEOMETRY_KINDS = ("parallel2d", "parallel3d", "laminography")


@dataclass(frozen=True)
class Geometry:
    kind: str = "parallel2d"
    detector_channels: int = 1
    detector_rows: int = 1
    channel_pitch: float = 1.0
    tilt_deg: float = 0.0

    def __post_init__(self):
        if self.kind not in GEOMETRY_KINDS:
            raise ValueError(f"unknown geometry kind {self.kind!r}")
        if self.kind == "laminography":
            if not 0.0 < self.tilt_deg < 90.0:
                raise ValueError("laminography requires 0 < tilt_deg < 90")
        elif self.tilt_deg != 0.0:
            raise ValueError(f"{self.kind} geometry must have tilt_deg = 0")
        if self.detector_channels < 1 or self.detector_rows < 1:
            raise ValueError("detector dimensions must be positive")
        if self.kind == "parallel2d" and self.detector_rows != 1:
            raise ValueError("parallel2d has a single detector row")
        if not self.channel_pitch > 0:
            raise ValueError("channel_pitch must be positive")

    @property
    def is_parallel(self) -> bool:
        return self.kind != "laminography"


@dataclass(frozen=True)
class AngleSchedule:
    """View angles in degrees with a frame index per view."""

    angles_deg: np.ndarray
    frame_of_view: np.ndarray = None
    n_frames: int = 1
    limited: bool = False

    def __post_init__(self):
        angles = np.asarray(self.angles_deg, dtype=np.float64).ravel()
        if angles.size < 1 or not np.all(np.isfinite(angles)):
            raise ValueError("schedule needs at least one finite angle")
        frames = (
            np.zeros(angles.size, dtype=np.int64)
            if self.frame_of_view is None
            else np.asarray(self.frame_of_view, dtype=np.int64).ravel()
        )
        if frames.size != angles.size:
            raise ValueError("one frame index per view required")
        if self.n_frames < 1 or frames.min() < 0 or frames.max() >= self.n_frames:
            raise ValueError("frame index out of range")
        if np.any(np.bincount(frames, minlength=self.n_frames) == 0):
            raise ValueError("every frame must own at least one view")
        angles.setflags(write=False)
        frames.setflags(write=False)
        object.__setattr__(self, "angles_deg", angles)
        object.__setattr__(self, "frame_of_view", frames)

    @property
    def n_views(self) -> int:
        return self.angles_deg.size

    def views_of_frame(self, frame: int) -> np.ndarray:
        return np.flatnonzero(self.frame_of_view == frame)

    def subset(self, views) -> "AngleSchedule":
        views = np.asarray(views)
        return AngleSchedule(self.angles_deg[views], np.zeros(views.size, dtype=np.int64), 1, self.limited)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["angle_deg", "frame"])
            for angle, frame in zip(self.angles_deg, self.frame_of_view):
                writer.writerow([repr(float(angle)), int(frame)])

    @classmethod
    def from_csv(cls, path) -> "AngleSchedule":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        angles = [float(r["angle_deg"]) for r in rows]
        frames = [int(r["frame"]) for r in rows]
        return cls(np.array(angles), np.array(frames), max(frames) + 1)


def _grid(n_views: int, lo: float, hi: float) -> np.ndarray:
    return lo + np.arange(n_views) * (hi - lo) / n_views


def uniform_angles(n_views: int, range_deg=(0.0, 180.0)) -> AngleSchedule:
    lo, hi = map(float, range_deg)
    if n_views < 1 or not lo < hi:
        raise ValueError("need n_views >= 1 and lo < hi")
    return AngleSchedule(_grid(n_views, lo, hi))


def limited_angles(n_views: int, lo_deg: float, hi_deg: float) -> AngleSchedule:
    if n_views < 1 or not lo_deg < hi_deg:
        raise ValueError("need n_views >= 1 and lo < hi")
    if hi_deg - lo_deg >= 180.0:
        raise ValueError("range spans >= 180 degrees; use uniform_angles")
    return AngleSchedule(_grid(n_views, float(lo_deg), float(hi_deg)), limited=True)


def bitrev(k: int, bits: int) -> int:
    out = 0
    for _ in range(bits):
        out = (out << 1) | (k & 1)
        k >>= 1
    return out


def interlaced_angles(views_per_frame: int, n_frames: int) -> AngleSchedule:
    """Time-interlaced schedule: frame k uses angles (j*K + bitrev(k)) * 180/(N*K).

    The union of all frames is the uniform N*K-view grid on [0, 180).
    """
    if views_per_frame < 1:
        raise ValueError("views_per_frame must be >= 1")
    if n_frames < 1 or n_frames & (n_frames - 1):
        raise ValueError(f"n_frames must be a power of two, got {n_frames}")
    bits = n_frames.bit_length() - 1
    step = 180.0 / (views_per_frame * n_frames)
    angles, frames = [], []
    for k in range(n_frames):
        offset = bitrev(k, bits)
        for j in range(views_per_frame):
            angles.append((j * n_frames + offset) * step)
            frames.append(k)
    return AngleSchedule(np.array(angles), np.array(frames), n_frames)


def progressive_angles(views_per_frame: int, n_frames: int) -> AngleSchedule:
    """Uniform grid over [0, 180) cut into contiguous frames (conventional baseline)."""
    n = views_per_frame * n_frames
    angles = _grid(n, 0.0, 180.0)
    frames = np.repeat(np.arange(n_frames), views_per_frame)
    return AngleSchedule(angles, frames, n_frames)


def repeated_angles(views_per_frame: int, n_frames: int) -> AngleSchedule:
    """Every frame reuses the same sparse uniform set of angles."""
    base = _grid(views_per_frame, 0.0, 180.0)
    return AngleSchedule(np.tile(base, n_frames), np.repeat(np.arange(n_frames), views_per_frame), n_frames)


@dataclass(frozen=True)
class MeasurementMask:
    keep: np.ndarray

    def __post_init__(self):
        keep = np.asarray(self.keep, dtype=bool)
        if keep.ndim == 2:
            keep = keep[:, None, :]
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)

    @property
    def shape(self):
        return self.keep.shape


def beam_block_mask(schedule: AngleSchedule, blocked_ranges_deg, sino_shape) -> MeasurementMask:
    """Mask out every measurement of a view whose angle (mod 180) lies in a blocked range."""
    sino_shape = tuple(sino_shape)
    if len(sino_shape) == 2:
        sino_shape = (sino_shape[0], 1, sino_shape[1])
    if sino_shape[0] != schedule.n_views:
        raise ValueError("sinogram view count does not match schedule")
    folded = np.mod(schedule.angles_deg, 180.0)
    blocked = np.zeros(schedule.n_views, dtype=bool)
    for lo, hi in blocked_ranges_deg:
        lo, hi = float(lo), float(hi)
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise ValueError("blocked ranges must be finite")
        blocked |= (folded >= lo) & (folded <= hi)
    keep = np.broadcast_to(~blocked[:, None, None], sino_shape).copy()
    return MeasurementMask(keep)
