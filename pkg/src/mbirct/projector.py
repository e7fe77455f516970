"""Ray-driven parallel-beam / laminography projector, its matched adjoint, and FBP.

Every measurement is a line integral computed by marching along the ray with a
fixed step and interpolating the voxel grid (bilinear within a slice for the
parallel kinds, trilinear for laminography).  The same sample weights drive
:func:`forward_project`, :func:`back_project` and :func:`system_matrix`, so the
adjoint is exact up to floating-point rounding.

Coordinates: voxel (iz, iy, ix) sits at ((ix - (nx-1)/2) * vs, (iy - (ny-1)/2) * vs,
(iz - (nz-1)/2) * vs).  Detector channel c sits at u = (c - (nc-1)/2) * pitch.
A lab point (u, s, v) -- s along the beam -- maps into the sample frame through
R_z(-theta) R_x(-tilt).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .core import Sinogram, Volume
from .geometry import AngleSchedule, Geometry

N_CHUNKS = 16


@dataclass(frozen=True)
class ProjectorSpec:
    geometry: Geometry
    schedule: AngleSchedule
    image_dims: tuple  # (nz, ny, nx)
    voxel_size: float = 1.0
    step_factor: float = 0.5

    def __post_init__(self):
        dims = tuple(int(d) for d in self.image_dims)
        if len(dims) == 2:
            dims = (1,) + dims
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"bad image dims {self.image_dims}")
        object.__setattr__(self, "image_dims", dims)
        g = self.geometry
        if g.kind == "parallel2d" and dims[0] != 1:
            raise ValueError("parallel2d needs nz = 1")
        if g.kind in ("parallel2d", "parallel3d") and g.detector_rows != dims[0]:
            raise ValueError("parallel geometries need one detector row per slice")
        if not (self.voxel_size > 0 and self.step_factor > 0):
            raise ValueError("voxel_size and step_factor must be positive")
        nz, ny, nx = dims
        if g.detector_channels * g.channel_pitch < math.hypot(ny, nx) * self.voxel_size:
            warnings.warn("detector does not cover the image diagonal", stacklevel=2)

    @property
    def channel_pitch(self) -> float:
        return self.geometry.channel_pitch

    @property
    def n_frames(self) -> int:
        return self.schedule.n_frames

    @property
    def sino_shape(self) -> tuple[int, int, int]:
        return (self.schedule.n_views, self.geometry.detector_rows, self.geometry.detector_channels)

    @property
    def n_voxels(self) -> int:
        nz, ny, nx = self.image_dims
        return nz * ny * nx

    def volume_dims(self) -> tuple[int, int, int, int]:
        return (self.n_frames,) + self.image_dims

    def with_schedule(self, schedule: AngleSchedule) -> "ProjectorSpec":
        return ProjectorSpec(self.geometry, schedule, self.image_dims, self.voxel_size, self.step_factor)


# ---------------------------------------------------------------- ray setup

def _ray_setup(spec: ProjectorSpec):
    """Per-view direction vectors in voxel-index units plus per-ray sample grid."""
    g = spec.geometry
    nz, ny, nx = spec.image_dims
    vs = spec.voxel_size
    theta = np.deg2rad(spec.schedule.angles_deg)
    tilt = math.radians(g.tilt_deg)
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = math.cos(tilt), math.sin(tilt)
    # columns of M = R_z(-theta) R_x(-tilt), components ordered (x, y, z)
    n = theta.size
    cu = np.stack([ct, -st, np.zeros(n)], axis=1)
    cs = np.stack([st * ca, ct * ca, -np.full(n, sa)], axis=1)
    cv = np.stack([st * sa, ct * sa, np.full(n, ca)], axis=1)
    dirs = np.stack([cu, cs, cv], axis=1) / vs  # (views, 3 lab axes, 3 sample axes)
    u = (np.arange(g.detector_channels) - (g.detector_channels - 1) / 2) * g.channel_pitch
    v = (np.arange(g.detector_rows) - (g.detector_rows - 1) / 2) * g.channel_pitch
    if g.kind == "laminography":
        radius = 0.5 * vs * math.sqrt(nx * nx + ny * ny + nz * nz) + vs
    else:
        radius = 0.5 * vs * math.hypot(nx, ny) + vs
    step = spec.step_factor * vs
    half = int(math.ceil(radius / step))
    s = np.arange(-half, half + 1) * step
    centers = np.array([(nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2])
    lamino = g.kind == "laminography"
    return dirs, u, v, s, step, centers, lamino


@numba.njit(cache=True, nogil=True)
def _ray_entries(view, row, ch, dirs, u, v, s, step, centers, lamino, nz, ny, nx, out_idx, out_w):
    """Fill (voxel index, weight) pairs for one ray; returns the count (may repeat voxels)."""
    uu = u[ch]
    vv = v[row]
    if lamino:
        ox = uu * dirs[view, 0, 0] + vv * dirs[view, 2, 0] + centers[0]
        oy = uu * dirs[view, 0, 1] + vv * dirs[view, 2, 1] + centers[1]
        oz = uu * dirs[view, 0, 2] + vv * dirs[view, 2, 2] + centers[2]
    else:
        ox = uu * dirs[view, 0, 0] + centers[0]
        oy = uu * dirs[view, 0, 1] + centers[1]
        oz = 0.0
    dx = dirs[view, 1, 0]
    dy = dirs[view, 1, 1]
    dz = dirs[view, 1, 2]
    nxy = ny * nx
    cnt = 0
    for k in range(s.size):
        px = ox + s[k] * dx
        py = oy + s[k] * dy
        if px <= -1.0 or py <= -1.0 or px >= nx or py >= ny:
            continue
        ix = int(math.floor(px))
        iy = int(math.floor(py))
        fx = px - ix
        fy = py - iy
        if lamino:
            pz = oz + s[k] * dz
            if pz <= -1.0 or pz >= nz:
                continue
            iz = int(math.floor(pz))
            fz = pz - iz
            for cz in range(2):
                zz = iz + cz
                if zz < 0 or zz >= nz:
                    continue
                wz = fz if cz == 1 else 1.0 - fz
                for cy in range(2):
                    yy = iy + cy
                    if yy < 0 or yy >= ny:
                        continue
                    wy = fy if cy == 1 else 1.0 - fy
                    for cx in range(2):
                        xx = ix + cx
                        if xx < 0 or xx >= nx:
                            continue
                        wx = fx if cx == 1 else 1.0 - fx
                        w = wz * wy * wx * step
                        if w > 0.0:
                            out_idx[cnt] = zz * nxy + yy * nx + xx
                            out_w[cnt] = w
                            cnt += 1
        else:
            base = row * nxy
            for cy in range(2):
                yy = iy + cy
                if yy < 0 or yy >= ny:
                    continue
                wy = fy if cy == 1 else 1.0 - fy
                for cx in range(2):
                    xx = ix + cx
                    if xx < 0 or xx >= nx:
                        continue
                    wx = fx if cx == 1 else 1.0 - fx
                    w = wy * wx * step
                    if w > 0.0:
                        out_idx[cnt] = base + yy * nx + xx
                        out_w[cnt] = w
                        cnt += 1
    return cnt


@numba.njit(cache=True, parallel=True)
def _forward_kernel(x, frames, dirs, u, v, s, step, centers, lamino, nz, ny, nx, out):
    nviews, nrows, nch = out.shape
    cap = s.size * 8
    for view in numba.prange(nviews):
        idx = np.empty(cap, np.int64)
        w = np.empty(cap, np.float64)
        xf = x[frames[view]]
        for row in range(nrows):
            for ch in range(nch):
                cnt = _ray_entries(view, row, ch, dirs, u, v, s, step, centers, lamino, nz, ny, nx, idx, w)
                acc = 0.0
                for k in range(cnt):
                    acc += w[k] * xf[idx[k]]
                out[view, row, ch] = acc


@numba.njit(cache=True, parallel=True)
def _back_kernel(y, frames, nt, nvox, dirs, u, v, s, step, centers, lamino, nz, ny, nx, nchunks):
    nviews, nrows, nch = y.shape
    cap = s.size * 8
    acc = np.zeros((nchunks, nt, nvox))
    for c in numba.prange(nchunks):
        idx = np.empty(cap, np.int64)
        w = np.empty(cap, np.float64)
        lo = (c * nviews) // nchunks
        hi = ((c + 1) * nviews) // nchunks
        for view in range(lo, hi):
            f = frames[view]
            for row in range(nrows):
                for ch in range(nch):
                    val = y[view, row, ch]
                    if val == 0.0:
                        continue
                    cnt = _ray_entries(view, row, ch, dirs, u, v, s, step, centers, lamino, nz, ny, nx, idx, w)
                    for k in range(cnt):
                        acc[c, f, idx[k]] += w[k] * val
    out = np.zeros((nt, nvox))
    for c in range(nchunks):
        out += acc[c]
    return out


@numba.njit(cache=True, nogil=True)
def _merge(idx, w, cnt):
    order = np.argsort(idx[:cnt], kind="mergesort")
    m = 0
    last = -1
    out_i = np.empty(cnt, np.int64)
    out_w = np.empty(cnt, np.float64)
    for k in range(cnt):
        j = idx[order[k]]
        if j == last:
            out_w[m - 1] += w[order[k]]
        else:
            out_i[m] = j
            out_w[m] = w[order[k]]
            m += 1
            last = j
    return out_i[:m], out_w[:m]


@numba.njit(cache=True, parallel=True)
def _count_kernel(nviews, nrows, nch, dirs, u, v, s, step, centers, lamino, nz, ny, nx):
    counts = np.zeros(nviews * nrows * nch, np.int64)
    cap = s.size * 8
    for view in numba.prange(nviews):
        idx = np.empty(cap, np.int64)
        w = np.empty(cap, np.float64)
        for row in range(nrows):
            for ch in range(nch):
                cnt = _ray_entries(view, row, ch, dirs, u, v, s, step, centers, lamino, nz, ny, nx, idx, w)
                mi, _ = _merge(idx, w, cnt)
                counts[(view * nrows + row) * nch + ch] = mi.size
    return counts


@numba.njit(cache=True, parallel=True)
def _fill_kernel(indptr, frames, nvox, nviews, nrows, nch, dirs, u, v, s, step, centers, lamino, nz, ny, nx,
                 out_idx, out_w):
    cap = s.size * 8
    for view in numba.prange(nviews):
        idx = np.empty(cap, np.int64)
        w = np.empty(cap, np.float64)
        shift = frames[view] * nvox
        for row in range(nrows):
            for ch in range(nch):
                r = (view * nrows + row) * nch + ch
                cnt = _ray_entries(view, row, ch, dirs, u, v, s, step, centers, lamino, nz, ny, nx, idx, w)
                mi, mw = _merge(idx, w, cnt)
                p = indptr[r]
                for k in range(mi.size):
                    out_idx[p + k] = mi[k] + shift
                    out_w[p + k] = mw[k]


# ---------------------------------------------------------------- public API

def _frames_array(spec: ProjectorSpec, nt: int) -> np.ndarray:
    if nt == 1:
        return np.zeros(spec.schedule.n_views, dtype=np.int64)
    if nt != spec.n_frames:
        raise ValueError(f"volume has {nt} frames, schedule has {spec.n_frames}")
    return np.ascontiguousarray(spec.schedule.frame_of_view, dtype=np.int64)


def _volume_array(x, spec: ProjectorSpec) -> tuple[np.ndarray, float]:
    if isinstance(x, Volume):
        arr, vs = x.data, x.voxel_size
    else:
        arr, vs = np.asarray(x, dtype=np.float64), spec.voxel_size
        arr = arr.reshape((-1,) + spec.image_dims)
    if arr.shape[1:] != spec.image_dims:
        raise ValueError(f"volume dims {arr.shape[1:]} do not match projector {spec.image_dims}")
    return arr, vs


def forward_project_array(x: np.ndarray, spec: ProjectorSpec) -> np.ndarray:
    """A x for a (nt, nz, ny, nx) array; returns a (views, rows, channels) array."""
    arr, _ = _volume_array(x, spec)
    nt = arr.shape[0]
    frames = _frames_array(spec, nt)
    dirs, u, v, s, step, centers, lamino = _ray_setup(spec)
    nz, ny, nx = spec.image_dims
    out = np.zeros(spec.sino_shape)
    flat = np.ascontiguousarray(arr.reshape(nt, -1), dtype=np.float64)
    _forward_kernel(flat, frames, dirs, u, v, s, step, centers, lamino, nz, ny, nx, out)
    return out


def back_project_array(y: np.ndarray, spec: ProjectorSpec, nt: int = 1) -> np.ndarray:
    """A^T y into an (nt, nz, ny, nx) array; reduction order is fixed so results do not depend on threads."""
    y = np.ascontiguousarray(np.asarray(y, dtype=np.float64).reshape(spec.sino_shape))
    frames = _frames_array(spec, nt)
    dirs, u, v, s, step, centers, lamino = _ray_setup(spec)
    nz, ny, nx = spec.image_dims
    nchunks = max(1, min(N_CHUNKS, spec.schedule.n_views))
    out = _back_kernel(y, frames, nt, spec.n_voxels, dirs, u, v, s, step, centers, lamino, nz, ny, nx, nchunks)
    return out.reshape((nt,) + spec.image_dims)


def forward_project(x: Volume, spec: ProjectorSpec) -> Sinogram:
    return Sinogram(forward_project_array(x, spec), kind="log_normalized")


def back_project(y: Sinogram, spec: ProjectorSpec, nt: int = 1) -> Volume:
    data = y.data if isinstance(y, Sinogram) else y
    if tuple(np.shape(data)) != spec.sino_shape:
        raise ValueError(f"sinogram shape {np.shape(data)} does not match projector {spec.sino_shape}")
    return Volume(back_project_array(data, spec, nt), voxel_size=spec.voxel_size)


def system_matrix(spec: ProjectorSpec, nt: int = 1) -> sp.csr_matrix:
    """Sparse A with rows = measurements (view, row, channel) and columns = (frame, voxel).

    With nt > 1 each view only couples to the voxels of its own frame.
    """
    frames = _frames_array(spec, nt)
    dirs, u, v, s, step, centers, lamino = _ray_setup(spec)
    nz, ny, nx = spec.image_dims
    nviews, nrows, nch = spec.sino_shape
    counts = _count_kernel(nviews, nrows, nch, dirs, u, v, s, step, centers, lamino, nz, ny, nx)
    indptr = np.zeros(counts.size + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    out_idx = np.empty(indptr[-1], dtype=np.int64)
    out_w = np.empty(indptr[-1], dtype=np.float64)
    _fill_kernel(indptr, frames, spec.n_voxels, nviews, nrows, nch, dirs, u, v, s, step, centers, lamino,
                 nz, ny, nx, out_idx, out_w)
    return sp.csr_matrix((out_w, out_idx, indptr), shape=(counts.size, nt * spec.n_voxels))


# ---------------------------------------------------------------- FBP

FILTERS = ("ramlak", "hamming")


def ramp_filter(n_channels: int, kind: str = "ramlak") -> np.ndarray:
    """Frequency response of the band-limited ramp (in cycles/sample) on a padded grid.

    Built as the FFT of the sampled spatial ramp kernel, which avoids the DC
    bias of sampling |f| directly.
    """
    if kind not in FILTERS:
        raise ValueError(f"unknown filter {kind!r}")
    size = 1 << int(math.ceil(math.log2(max(2 * n_channels, 2))))
    n = np.concatenate([np.arange(1, size // 2 + 1, 2), np.arange(size // 2 - 1, 0, -2)])
    h = np.zeros(size)
    h[0] = 0.25
    h[1::2] = -1.0 / (np.pi * n) ** 2
    response = np.real(np.fft.fft(h))
    if kind == "hamming":
        freq = np.fft.fftfreq(size)
        response = response * (0.54 + 0.46 * np.cos(2 * np.pi * freq))
    return response


def fbp(y: Sinogram, spec: ProjectorSpec, filter: str = "ramlak") -> Volume:
    """Filtered back projection for the parallel geometries (slice by slice)."""
    if not spec.geometry.is_parallel:
        raise NotImplementedError("FBP is not available for laminography geometry")
    if y.kind != "log_normalized":
        raise ValueError("FBP needs log-normalized data")
    if y.shape != spec.sino_shape:
        raise ValueError(f"sinogram shape {y.shape} does not match projector {spec.sino_shape}")
    nviews, nrows, nch = y.shape
    response = ramp_filter(nch, filter)
    size = response.size
    padded = np.zeros((nviews, nrows, size))
    padded[..., :nch] = y.data
    filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=-1) * response, axis=-1))[..., :nch]
    filtered /= spec.channel_pitch

    nz, ny, nx = spec.image_dims
    vs = spec.voxel_size
    xs = (np.arange(nx) - (nx - 1) / 2) * vs
    ys = (np.arange(ny) - (ny - 1) / 2) * vs
    X, Y = np.meshgrid(xs, ys)
    out = np.zeros((nz, ny, nx))
    theta = np.deg2rad(spec.schedule.angles_deg)
    c0 = (nch - 1) / 2
    for k in range(nviews):
        t = (X * np.cos(theta[k]) - Y * np.sin(theta[k])) / spec.channel_pitch + c0
        i0 = np.floor(t).astype(np.int64)
        frac = t - i0
        for z in range(nz):
            q = np.concatenate([[0.0], filtered[k, z], [0.0]])
            lo = np.clip(i0 + 1, 0, nch + 1)
            hi = np.clip(i0 + 2, 0, nch + 1)
            out[z] += (1 - frac) * q[lo] + frac * q[hi]
    out *= np.pi / nviews
    return Volume(out[None], voxel_size=vs)
