"""Data containers, the SCT1 on-disk format and PGM rendering."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SCT1\n"
SEPARATOR = b"---\n"


class ContainerError(ValueError):
    """Base class for container parse/validation failures."""


class BadMagicError(ContainerError):
    pass


class HeaderError(ContainerError):
    pass


class LengthMismatchError(ContainerError):
    pass


def _require_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class Volume:
    """Voxel grid indexed (t, z, y, x).

    2D images use nt = nz = 1; 4D volumes stack nt frames.
    """

    data: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None, None]
        elif data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"bad volume shape {data.shape}")
        _require_finite(data, "volume")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)

    @property
    def nt(self) -> int:
        return self.data.shape[0]

    def frame(self, t: int = 0) -> np.ndarray:
        return self.data[t]

    def slice2d(self, t: int = 0, z: int = 0) -> np.ndarray:
        return self.data[t, z]


SINO_KINDS = ("counts", "log_normalized")


@dataclass(frozen=True)
class Sinogram:
    """Projection data indexed (view, row, channel)."""

    data: np.ndarray
    kind: str = "log_normalized"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, None, :]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"bad sinogram shape {data.shape}")
        if self.kind not in SINO_KINDS:
            raise ValueError(f"unknown sinogram kind {self.kind!r}")
        _require_finite(data, "sinogram")
        if self.kind == "counts" and np.any(data < 0):
            raise ValueError("counts sinogram has negative entries")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def n_views(self) -> int:
        return self.data.shape[0]

    @property
    def n_rows(self) -> int:
        return self.data.shape[1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class WeightMap:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, None, :]
        if data.ndim != 3:
            raise ValueError(f"bad weight shape {data.shape}")
        _require_finite(data, "weights")
        if np.any(data < 0):
            raise ValueError("weights must be nonnegative")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def check_matches(self, sino: Sinogram) -> None:
        if self.shape != sino.shape:
            raise ValueError(f"weight shape {self.shape} != sinogram shape {sino.shape}")

    @classmethod
    def ones_like(cls, sino: Sinogram) -> "WeightMap":
        return cls(np.ones(sino.shape))


@dataclass
class CostTrace:
    """Per-outer-iteration record of (iteration, total, fidelity, prior)."""

    values: list[tuple[int, float, float, float]] = field(default_factory=list)

    def append(self, iteration: int, fidelity: float, prior: float) -> None:
        self.values.append((int(iteration), float(fidelity) + float(prior), float(fidelity), float(prior)))

    @property
    def totals(self) -> np.ndarray:
        return np.array([v[1] for v in self.values])

    def __len__(self) -> int:
        return len(self.values)

    def to_csv(self, path) -> None:
        lines = ["iteration,total_cost,fidelity_cost,prior_cost"]
        lines += [f"{it},{float(tot)!r},{float(fid)!r},{float(pri)!r}" for it, tot, fid, pri in self.values]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "CostTrace":
        rows = Path(path).read_text().strip().splitlines()[1:]
        trace = cls()
        for row in rows:
            it, tot, fid, pri = row.split(",")
            trace.values.append((int(it), float(tot), float(fid), float(pri)))
        return trace


# ---------------------------------------------------------------- container I/O

_KIND_OF = {Volume: "volume", Sinogram: "sinogram", WeightMap: "weights"}


def write_container(path, payload, meta: Mapping[str, str] | None = None) -> None:
    """Write a Volume, Sinogram or WeightMap as an SCT1 container.

    Layout: ``SCT1\\n``, ``key=value`` header lines, ``---\\n``, then
    little-endian float32 samples in row-major order.
    """
    kind = _KIND_OF.get(type(payload))
    if kind is None:
        raise TypeError(f"cannot store {type(payload).__name__}")
    data = payload.data
    _require_finite(data, kind)
    header = {"kind": kind, "dims": ",".join(str(d) for d in data.shape), "dtype": "f32le"}
    if isinstance(payload, Volume):
        header["voxel_size"] = repr(float(payload.voxel_size))
    elif isinstance(payload, Sinogram):
        header["sino_kind"] = payload.kind
    for key, value in (meta or {}).items():
        key, value = str(key), str(value)
        if key in header:
            continue
        if "=" in key or "\n" in key or "\n" in value or not key:
            raise ValueError(f"meta entry {key!r} cannot be encoded")
        header[key] = value
    blob = bytearray(MAGIC)
    for key, value in header.items():
        blob += f"{key}={value}\n".encode("utf-8")
    blob += SEPARATOR
    blob += np.ascontiguousarray(data, dtype="<f4").tobytes()
    path = Path(path)
    try:
        path.write_bytes(bytes(blob))
    except OSError as exc:
        raise OSError(f"failed to write container {path}: {exc}") from exc


def read_container(path):
    """Inverse of :func:`write_container`; returns ``(payload, meta)``.

    ``meta`` holds every header key that is not part of the fixed layout.
    """
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise BadMagicError(f"{path}: not an SCT1 container")
    pos = len(MAGIC)
    header: dict[str, str] = {}
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise HeaderError(f"{path}: header not terminated")
        line = raw[pos : end + 1]
        pos = end + 1
        if line == SEPARATOR:
            break
        try:
            text = line[:-1].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise HeaderError(f"{path}: header is not UTF-8") from exc
        key, sep, value = text.partition("=")
        if not sep or not key:
            raise HeaderError(f"{path}: malformed header line {text!r}")
        header[key] = value
    for required in ("kind", "dims", "dtype"):
        if required not in header:
            raise HeaderError(f"{path}: missing header key {required!r}")
    if header["dtype"] != "f32le":
        raise HeaderError(f"{path}: unsupported dtype {header['dtype']!r}")
    try:
        dims = tuple(int(d) for d in header["dims"].split(","))
    except ValueError as exc:
        raise HeaderError(f"{path}: bad dims {header['dims']!r}") from exc
    if not dims or min(dims) < 1:
        raise HeaderError(f"{path}: bad dims {dims}")
    payload_bytes = raw[pos:]
    if len(payload_bytes) != 4 * math.prod(dims):
        raise LengthMismatchError(
            f"{path}: payload has {len(payload_bytes)} bytes, dims {dims} need {4 * math.prod(dims)}"
        )
    data = np.frombuffer(payload_bytes, dtype="<f4").reshape(dims).astype(np.float32)
    kind = header.pop("kind")
    header.pop("dims")
    header.pop("dtype")
    if kind == "volume":
        if len(dims) != 4:
            raise HeaderError(f"{path}: volume needs 4 dims")
        payload = Volume(data, voxel_size=float(header.pop("voxel_size", "1.0")))
    elif kind == "sinogram":
        if len(dims) != 3:
            raise HeaderError(f"{path}: sinogram needs 3 dims")
        payload = Sinogram(data, kind=header.pop("sino_kind", "log_normalized"))
    elif kind == "weights":
        if len(dims) != 3:
            raise HeaderError(f"{path}: weight map needs 3 dims")
        payload = WeightMap(data)
    else:
        raise HeaderError(f"{path}: unknown kind {kind!r}")
    return payload, header


# ---------------------------------------------------------------- rendering

def pgm_pixels(slice2d, window=None) -> np.ndarray:
    img = np.asarray(slice2d, dtype=np.float64)
    if img.ndim == 1:
        img = img[None]
    _require_finite(img, "slice")
    lo, hi = (float(img.min()), float(img.max())) if window is None else map(float, window)
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    # round half up so 0.5 -> 128
    return np.floor(255.0 * scaled + 0.5).astype(np.uint8)


def render_pgm(slice2d, path, window=None) -> None:
    """Write a binary (P5) greyscale PGM, default window = slice min/max."""
    pixels = pgm_pixels(slice2d, window)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a P5 PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
