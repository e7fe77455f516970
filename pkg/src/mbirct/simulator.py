"""Phantoms and corrupted measurement synthesis."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Sinogram, Volume, WeightMap
from .geometry import MeasurementMask
from .projector import ProjectorSpec, forward_project_array

PHANTOM_KINDS = ("shepp_logan", "ellipses", "growing_ellipses")

# Modified Shepp-Logan on [-1, 1]^2 with absolute (overwrite) intensities in [0, 1]:
# (cx, cy, a, b, angle_deg, value)
SHEPP_LOGAN = (
    (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, 0.2),
    (0.22, 0.0, 0.11, 0.31, -18.0, 0.0),
    (-0.22, 0.0, 0.16, 0.41, 18.0, 0.0),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.3),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.3),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.3),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.3),
    (0.0, -0.606, 0.023, 0.023, 0.0, 0.3),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.3),
)


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    axes: tuple[float, float]
    angle_deg: float = 0.0
    value: float = 1.0
    growth: float = 0.0  # fractional semi-axis growth per frame

    def __post_init__(self):
        if min(self.axes) <= 0:
            raise ValueError("ellipse semi-axes must be positive")
        if not np.isfinite(self.value):
            raise ValueError("ellipse value must be finite")


@dataclass(frozen=True)
class PhantomSpec:
    """Ellipse phantom on the square [-1, 1]^2, extruded along z."""

    kind: str = "shepp_logan"
    dims: tuple = (1, 128, 128)  # (nz, ny, nx)
    ellipses: tuple = ()
    n_frames: int = 1

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) == 2:
            dims = (1,) + dims
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "ellipses", tuple(self.ellipses))
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")


def _ellipse_support(e: Ellipse, X, Y, scale: float = 1.0) -> np.ndarray:
    phi = np.deg2rad(e.angle_deg)
    dx, dy = X - e.center[0], Y - e.center[1]
    xr = dx * np.cos(phi) + dy * np.sin(phi)
    yr = -dx * np.sin(phi) + dy * np.cos(phi)
    a, b = e.axes[0] * scale, e.axes[1] * scale
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


def make_phantom(spec: PhantomSpec, voxel_size: float | None = None) -> Volume:
    """Rasterize ellipses at voxel centres; default voxel size maps the grid onto [-1, 1]."""
    nz, ny, nx = spec.dims
    n = max(ny, nx)
    vs = 2.0 / n if voxel_size is None else voxel_size
    xs = (np.arange(nx) - (nx - 1) / 2) * (2.0 / n)
    ys = (np.arange(ny) - (ny - 1) / 2) * (2.0 / n)
    X, Y = np.meshgrid(xs, ys)
    # image row index increases with y; flip so +y is up in rendered output
    Y = -Y
    nt = spec.n_frames if spec.kind == "growing_ellipses" else 1
    frames = []
    for t in range(nt):
        img = np.zeros((ny, nx))
        if spec.kind == "shepp_logan":
            ells = spec.ellipses or tuple(Ellipse((cx, cy), (a, b), ang, val) for cx, cy, a, b, ang, val in SHEPP_LOGAN)
            for e in ells:
                img[_ellipse_support(e, X, Y)] = e.value
        else:
            for e in spec.ellipses:
                scale = 1.0 + e.growth * t if spec.kind == "growing_ellipses" else 1.0
                img[_ellipse_support(e, X, Y, scale)] += e.value
        frames.append(np.broadcast_to(img, (nz, ny, nx)))
    return Volume(np.stack(frames), voxel_size=vs)


# ---------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class CorruptionSpec:
    dose_I0: float = 1e4
    view_gain_sigma: float = 0.0
    view_offset: float = 0.0
    channel_gain_sigma: float = 0.0
    zinger_rate: float = 0.0
    zinger_amplitude: float = 0.0
    seed: int = 0
    mode: str = "transmission"  # or "linear": y = g p + d - ln(g_chan) + N(0, noise_sigma^2)
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.dose_I0 > 0:
            raise ValueError("dose_I0 must be positive")
        if not 0.0 <= self.zinger_rate <= 1.0:
            raise ValueError("zinger_rate must lie in [0, 1]")
        if min(self.view_gain_sigma, self.channel_gain_sigma, self.view_offset, self.noise_sigma) < 0:
            raise ValueError("sigmas and offsets must be nonnegative")
        if self.mode not in ("transmission", "linear"):
            raise ValueError(f"unknown synthesis mode {self.mode!r}")


@dataclass
class TruthParams:
    view_gains: np.ndarray
    view_offsets: np.ndarray
    channel_gains: np.ndarray
    zingers: list = field(default_factory=list)  # (view, row, channel)

    @property
    def channel_log_offsets(self) -> np.ndarray:
        """Additive offsets the channel gains induce in log-normalized data, zero-mean."""
        d = -np.log(self.channel_gains)
        return d - d.mean()

    def to_csv(self, path) -> None:
        lines = ["kind,index0,index1,index2,value"]
        lines += [f"view_gain,{k},,,{float(g)!r}" for k, g in enumerate(self.view_gains)]
        lines += [f"view_offset,{k},,,{float(d)!r}" for k, d in enumerate(self.view_offsets)]
        lines += [f"channel_gain,{c},,,{float(g)!r}" for c, g in enumerate(self.channel_gains)]
        lines += [f"channel_offset,{c},,,{float(d)!r}" for c, d in enumerate(self.channel_log_offsets)]
        lines += [f"zinger,{v},{r},{c}," for v, r, c in self.zingers]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _check_volume(x) -> np.ndarray:
    arr = x.data if isinstance(x, Volume) else np.asarray(x, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("phantom must be nonnegative")
    return arr


def synthesize(x, spec: ProjectorSpec, corruption: CorruptionSpec):
    """Project ``x`` and corrupt it.

    Returns ``(counts, log_norm, truth)``.  Every view draws from its own RNG
    stream seeded by ``(seed, view)`` so results do not depend on evaluation order.
    In linear mode ``counts`` is None and ``log_norm`` holds the log-domain model
    (view gain and offset, channel offset -ln g_c) plus optional Gaussian noise.
    """
    arr = _check_volume(x)
    p = forward_project_array(arr, spec)
    nviews, nrows, nch = p.shape
    c = corruption
    setup = np.random.default_rng([c.seed, 0x5EED])
    g_chan = np.exp(c.channel_gain_sigma * setup.standard_normal(nch)) if c.channel_gain_sigma else np.ones(nch)
    g_view = np.ones(nviews)
    d_view = np.zeros(nviews)
    counts = np.empty_like(p)
    linear = np.empty_like(p)
    zingers = []
    for k in range(nviews):
        rng = np.random.default_rng([c.seed, k])
        if c.view_gain_sigma:
            g_view[k] = np.exp(c.view_gain_sigma * rng.standard_normal())
        if c.view_offset:
            d_view[k] = c.view_offset * rng.random()
        if c.mode == "linear":
            noise = rng.standard_normal(p[k].shape) * c.noise_sigma if c.noise_sigma else 0.0
            linear[k] = g_view[k] * p[k] + d_view[k] - np.log(g_chan)[None, :] + noise
            continue
        lam = c.dose_I0 * g_chan[None, :] * g_view[k] * np.exp(-p[k]) + d_view[k]
        counts[k] = rng.poisson(lam).astype(np.float64)
        if c.zinger_rate > 0:
            hits = rng.random(lam.shape) < c.zinger_rate
            counts[k][hits] += c.zinger_amplitude
            zingers.extend((k, int(r), int(ch)) for r, ch in zip(*np.nonzero(hits)))
    truth = TruthParams(g_view, d_view, g_chan, zingers)
    if c.mode == "linear":
        return None, Sinogram(linear, kind="log_normalized"), truth
    log_norm = -np.log(np.maximum(counts, 1.0) / c.dose_I0)
    return Sinogram(counts, kind="counts"), Sinogram(log_norm, kind="log_normalized"), truth


def compute_weights(counts: Sinogram, mask: MeasurementMask | None = None) -> WeightMap:
    """Inverse-variance weights for log-normalized transmission data (W = counts),
    zeroed where masked and scaled so the nonzero weights average 1."""
    if counts.kind != "counts":
        raise ValueError("compute_weights expects a counts sinogram")
    w = counts.data.copy()
    if mask is not None:
        if mask.shape != w.shape:
            raise ValueError("mask shape does not match sinogram")
        w[~mask.keep] = 0.0
    nonzero = w > 0
    if np.any(nonzero):
        w /= w[nonzero].mean()
    return WeightMap(w)
