"""Majorize-minimize iterative coordinate descent (ICD) for the MBIR objective.

One outer iteration:

1. refresh the fidelity majorizer at the current iterate (robust kinds only);
2. sweep every voxel once in a seeded random order, each update minimizing
   the local 1-D quadratic surrogate with the residual kept incrementally;
3. optionally re-solve the calibration parameters in closed form;
4. record the cost and test the stopping rules.

Each step minimizes a majorizer of the objective that is tight at the start of
the step, so the recorded cost never increases.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .core import CostTrace, Sinogram, Volume, WeightMap
from .geometry import AngleSchedule, Geometry
from .models import (
    GAMMA_QUADRATIC,
    CalibrationState,
    FidelityModel,
    PriorModel,
    cost_gradient,
    effective_weights,
    fidelity_cost_from_residual,
    gamma_coeff_scalar,
    gamma_surrogate_coeff,
    neighbor_offsets,
    prior_cost,
    rho_coeff_scalar,
    solve_calibration,
)
from .projector import ProjectorSpec, fbp, system_matrix

log = logging.getLogger(__name__)

RESIDUAL_REFRESH = 10


@dataclass(frozen=True)
class ReconOptions:
    max_outer_iters: int = 200
    stop_rel_cost: float = 1e-6
    stop_rel_x: float = 1e-5
    nonneg: bool = True
    multires_levels: int = 1
    multires_iters: int = 10
    init: str = "zero"  # zero | fbp | given
    calib_every: int = 1
    seed: int = 0
    robust_refresh: str = "per_sweep"  # or per_voxel
    threads: int | None = None
    compute_kkt: bool = True

    def __post_init__(self):
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if not (self.stop_rel_cost > 0 and self.stop_rel_x > 0):
            raise ValueError("tolerances must be positive")
        if self.multires_levels < 1 or self.calib_every < 1:
            raise ValueError("multires_levels and calib_every must be >= 1")
        if self.init not in ("zero", "fbp", "given"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.robust_refresh not in ("per_sweep", "per_voxel"):
            raise ValueError(f"unknown robust_refresh {self.robust_refresh!r}")


@dataclass
class ReconResult:
    x_hat: Volume
    calib_hat: CalibrationState
    trace: CostTrace
    iterations_run: int
    converged: bool
    stop_reason: str
    kkt_initial: float | None = None
    kkt_final: float | None = None
    residual_drift: float = 0.0


# ---------------------------------------------------------------- ICD kernel

@numba.njit(cache=True)
def _icd_sweep(order, x, e, colptr, rowidx, vals, wq, scale, raw_w, dims, nb, nbw,
               beta_s, beta_t, rkind, rp, rq, rT, rs, nonneg,
               per_voxel, gkind, gT, gdelta, gnu, gsigma):
    nt, nz, ny, nx = dims[0], dims[1], dims[2], dims[3]
    nvox = nz * ny * nx
    nxy = ny * nx
    dx2 = 0.0
    for n in range(order.size):
        j = order[n]
        t = j // nvox
        v = j - t * nvox
        iz = v // nxy
        rem = v - iz * nxy
        iy = rem // nx
        ix = rem - iy * nx
        th1 = 0.0
        th2 = 0.0
        for k in range(colptr[j], colptr[j + 1]):
            i = rowidx[k]
            a = vals[k] * scale[i]
            if per_voxel:
                sw = math.sqrt(raw_w[i])
                wgt = 0.5 * raw_w[i] * gamma_coeff_scalar(e[i] * sw / gsigma, gkind, gT, gdelta, gnu)
            else:
                wgt = wq[i]
            th1 -= wgt * e[i] * a
            th2 += wgt * a * a
        xj = x[j]
        if beta_s > 0.0:
            for m in range(nb.shape[0]):
                zz = iz + nb[m, 0]
                yy = iy + nb[m, 1]
                xx = ix + nb[m, 2]
                if zz < 0 or zz >= nz or yy < 0 or yy >= ny or xx < 0 or xx >= nx:
                    continue
                d = xj - x[t * nvox + zz * nxy + yy * nx + xx]
                c = beta_s * nbw[m] * rho_coeff_scalar(d, rkind, rp, rq, rT, rs)
                th1 += c * d
                th2 += c
        if beta_t > 0.0:
            for tt in (t - 1, t + 1):
                if tt < 0 or tt >= nt:
                    continue
                d = xj - x[tt * nvox + v]
                c = beta_t * rho_coeff_scalar(d, rkind, rp, rq, rT, rs)
                th1 += c * d
                th2 += c
        if th2 <= 0.0:
            continue
        new = xj - th1 / th2
        if nonneg and new < 0.0:
            new = 0.0
        delta = new - xj
        if delta == 0.0:
            continue
        x[j] = new
        dx2 += delta * delta
        for k in range(colptr[j], colptr[j + 1]):
            i = rowidx[k]
            e[i] -= vals[k] * scale[i] * delta
    return dx2


# ---------------------------------------------------------------- helpers

def _set_threads(threads):
    if threads:
        numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))


def _full_neighbors(nz):
    half, w = neighbor_offsets(nz)
    return np.ascontiguousarray(np.concatenate([half, -half])), np.concatenate([w, w])


def _fbp_init(y: Sinogram, spec: ProjectorSpec, nt: int) -> np.ndarray:
    if not spec.geometry.is_parallel or y.kind != "log_normalized":
        return np.zeros((nt,) + spec.image_dims)
    frames = []
    for t in range(nt):
        views = spec.schedule.views_of_frame(t) if nt > 1 else np.arange(spec.schedule.n_views)
        sub = spec.with_schedule(spec.schedule.subset(views))
        frames.append(fbp(Sinogram(y.data[views]), sub).data[0])
    return np.maximum(np.stack(frames), 0.0)


def _initial_x(y, W, spec, fid, prior, opts, nt, x0):
    if x0 is not None:
        arr = x0.data if isinstance(x0, Volume) else np.asarray(x0, dtype=np.float64)
        arr = np.broadcast_to(arr.reshape((-1,) + spec.image_dims), (nt,) + spec.image_dims).copy()
        return np.maximum(arr, 0.0) if opts.nonneg else arr
    if opts.multires_levels > 1:
        return multires_init(y, W, spec, fid, prior, opts, nt=nt).data.copy()
    if opts.init == "fbp":
        return _fbp_init(y, spec, nt)
    return np.zeros((nt,) + spec.image_dims)


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def _solve(y: Sinogram, W: WeightMap, spec: ProjectorSpec, fid: FidelityModel, prior: PriorModel,
           opts: ReconOptions, nt: int, x0=None, calib0: CalibrationState | None = None) -> ReconResult:
    W.check_matches(y)
    if y.shape != spec.sino_shape:
        raise ValueError(f"sinogram shape {y.shape} does not match projector {spec.sino_shape}")
    _set_threads(opts.threads)
    dims = (nt,) + spec.image_dims
    nvox = spec.n_voxels
    A = system_matrix(spec, nt)
    Acsc = A.tocsc()
    Acsc.sort_indices()
    colptr = Acsc.indptr.astype(np.int64)
    rowidx = Acsc.indices.astype(np.int64)
    vals = Acsc.data

    nviews, nrows, nch = spec.sino_shape
    weights = effective_weights(y, W, fid)
    wflat = np.ascontiguousarray(weights.ravel())
    yflat = y.data.ravel()
    calib = calib0 or CalibrationState.identity(nviews, nch)
    mode = fid.gain_offset_mode

    x = np.ascontiguousarray(_initial_x(y, W, spec, fid, prior, opts, nt, x0).ravel())
    Ax = A @ x
    e = yflat - calib.predict(Ax.reshape(spec.sino_shape)).ravel()

    def costs(e, x):
        fid_part = fidelity_cost_from_residual(e, wflat, fid)
        return fid_part, prior_cost(x.reshape(dims), prior)

    trace = CostTrace()
    f0, p0 = costs(e, x)
    trace.append(0, f0, p0)
    kkt0 = kkt_residual(Volume(x.reshape(dims), spec.voxel_size), calib, y, W, fid, prior, spec, opts.nonneg, A) \
        if opts.compute_kkt else None

    nb, nbw = _full_neighbors(spec.image_dims[0])
    rkind, rp, rq, rT, rs = prior.params
    gkind = fid.gamma_code
    per_voxel = fid.is_robust and opts.robust_refresh == "per_voxel"
    rng = np.random.default_rng(opts.seed)
    frame_base = (np.arange(nt) * nvox)[None, :]
    converged, reason, drift = False, "max_iters", 0.0
    it = 0
    for it in range(1, opts.max_outer_iters + 1):
        if fid.is_robust and not per_voxel:
            sw = np.sqrt(wflat)
            wq = 0.5 * wflat * gamma_surrogate_coeff(e * sw / fid.sigma, fid)
        else:
            wq = wflat
        scale = np.ascontiguousarray(np.broadcast_to(calib.scale(), spec.sino_shape).ravel())
        perm = rng.permutation(nvox)
        order = np.ascontiguousarray((perm[:, None] + frame_base).ravel())
        x_prev_norm = math.sqrt(float(x @ x))
        dx2 = _icd_sweep(order, x, e, colptr, rowidx, vals, np.ascontiguousarray(wq), scale, wflat,
                         np.array(dims, dtype=np.int64), nb, nbw, float(prior.beta_s), float(prior.beta_t),
                         rkind, rp, rq, rT, rs, bool(opts.nonneg), per_voxel, gkind,
                         float(fid.T), float(fid.delta), float(fid.nu), float(fid.sigma))
        if it % RESIDUAL_REFRESH == 0:
            fresh = yflat - calib.predict((A @ x).reshape(spec.sino_shape)).ravel()
            drift = max(drift, float(np.max(np.abs(fresh - e))))
            e = fresh
        if fid.calibrated and it % opts.calib_every == 0:
            p = (A @ x).reshape(spec.sino_shape)
            wq_now = wq if not per_voxel else wflat
            old_fit = fidelity_cost_from_residual(e, wq_now, replace(fid, kind="wls"))
            new_calib = solve_calibration(None, y, None, mode, spec, weights=wq_now.reshape(spec.sino_shape),
                                          current=calib, gauge="constrained", projection=p)
            e_new = yflat - new_calib.predict(p).ravel()
            if fidelity_cost_from_residual(e_new, wq_now, replace(fid, kind="wls")) <= old_fit:
                calib, e = new_calib, e_new
        f1, p1 = costs(e, x)
        trace.append(it, f1, p1)
        if not np.isfinite(f1 + p1):
            raise FloatingPointError("cost became non-finite")
        prev_total = trace.values[-2][1]
        cur_total = trace.values[-1][1]
        log.debug("iter %d cost %.9g", it, cur_total)
        if math.sqrt(dx2) <= opts.stop_rel_x * max(x_prev_norm, 1e-300) or x_prev_norm == 0 and dx2 == 0:
            converged, reason = True, "rel_x"
            break
        if _rel(cur_total, prev_total) < opts.stop_rel_cost:
            converged, reason = True, "rel_cost"
            break

    x_hat = Volume(x.reshape(dims), voxel_size=spec.voxel_size)
    kkt1 = kkt_residual(x_hat, calib, y, W, fid, prior, spec, opts.nonneg, A) if opts.compute_kkt else None
    return ReconResult(x_hat, calib, trace, it, converged, reason, kkt0, kkt1, drift)


# ---------------------------------------------------------------- public drivers

def mbir_reconstruct(y: Sinogram, W: WeightMap, spec: ProjectorSpec, fid: FidelityModel, prior: PriorModel,
                     opts: ReconOptions = ReconOptions(), x0=None, calib0=None) -> ReconResult:
    """Single-frame (2D or 3D) MBIR reconstruction."""
    if opts.init == "given" and x0 is None:
        raise ValueError("init='given' needs x0")
    return _solve(y, W, spec, fid, prior, opts, 1, x0, calib0)


def mbir4d_reconstruct(y: Sinogram, W: WeightMap, spec: ProjectorSpec, fid: FidelityModel, prior: PriorModel,
                       opts: ReconOptions = ReconOptions(), schedule: AngleSchedule | None = None,
                       x0=None, calib0=None) -> ReconResult:
    """Joint reconstruction of all frames with the spatio-temporal prior.

    Each view only sees the volume of its own frame; with beta_t = 0 the
    frames decouple and each matches an independent single-frame solve.
    """
    if schedule is not None:
        spec = spec.with_schedule(schedule)
    nt = spec.schedule.n_frames
    counts = np.bincount(spec.schedule.frame_of_view, minlength=nt)
    if np.any(counts == 0):
        raise ValueError("every frame needs at least one view")
    if opts.init == "given" and x0 is None:
        raise ValueError("init='given' needs x0")
    return _solve(y, W, spec, fid, prior, opts, nt, x0, calib0)


# ---------------------------------------------------------------- multiresolution

def downsample(arr: np.ndarray) -> np.ndarray:
    """2x2 block average over the last two axes."""
    *lead, ny, nx = arr.shape
    return arr.reshape(*lead, ny // 2, 2, nx // 2, 2).mean(axis=(-3, -1))


def _upsample_axis(arr, axis, n_out):
    n_in = arr.shape[axis]
    coords = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = coords - i0
    shape = [1] * arr.ndim
    shape[axis] = n_out
    f = f.reshape(shape)
    return np.take(arr, i0, axis=axis) * (1 - f) + np.take(arr, i1, axis=axis) * f


def upsample(arr: np.ndarray, shape_yx) -> np.ndarray:
    """Bilinear (cell-centred) upsampling of the last two axes."""
    out = _upsample_axis(arr, arr.ndim - 2, shape_yx[0])
    return _upsample_axis(out, arr.ndim - 1, shape_yx[1])


def _coarsen(y: Sinogram, W: WeightMap, spec: ProjectorSpec):
    g = spec.geometry
    w = W.data
    yw = (y.data * w).reshape(*y.shape[:2], -1, 2).sum(axis=-1)
    wc = w.reshape(*w.shape[:2], -1, 2).sum(axis=-1)
    yc = np.where(wc > 0, yw / np.where(wc > 0, wc, 1.0), y.data.reshape(*y.shape[:2], -1, 2).mean(axis=-1))
    geom = Geometry(g.kind, g.detector_channels // 2, g.detector_rows, g.channel_pitch * 2, g.tilt_deg)
    nz, ny, nx = spec.image_dims
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cspec = ProjectorSpec(geom, spec.schedule, (nz, ny // 2, nx // 2), spec.voxel_size * 2, spec.step_factor)
    return Sinogram(yc, kind=y.kind), WeightMap(wc), cspec


def multires_init(y: Sinogram, W: WeightMap, spec: ProjectorSpec, fid: FidelityModel, prior: PriorModel,
                  opts: ReconOptions, nt: int | None = None) -> Volume:
    """Coarse-to-fine initialization: solve on 2^(L-1)-times coarser grids, upsample, repeat.

    Levels whose grid or detector cannot be halved are skipped.
    """
    nt = nt or 1
    base = replace(opts, multires_levels=1, max_outer_iters=opts.multires_iters, compute_kkt=False)
    if opts.multires_levels <= 1 or not spec.geometry.is_parallel:
        if opts.multires_levels > 1:
            warnings.warn("multiresolution is only available for parallel geometries; level skipped")
        return Volume(_initial_x(y, W, spec, fid, prior, base, nt, None), voxel_size=spec.voxel_size)
    pyramid = [(y, W, spec)]
    for _ in range(opts.multires_levels - 1):
        cy, cW, cs = pyramid[-1]
        nz, ny, nx = cs.image_dims
        if ny % 2 or nx % 2 or cs.geometry.detector_channels % 2 or min(ny, nx) < 8:
            warnings.warn("grid too small to downsample further; level skipped")
            break
        pyramid.append(_coarsen(cy, cW, cs))
    x = None
    for cy, cW, cs in reversed(pyramid[1:]):
        if x is not None:
            x = upsample(x, cs.image_dims[1:])
        res = _solve(cy, cW, cs, replace(fid, gain_offset_mode="none"), prior, base, nt, x0=x)
        x = res.x_hat.data
    if x is None:
        return Volume(_initial_x(y, W, spec, fid, prior, base, nt, None), voxel_size=spec.voxel_size)
    return Volume(upsample(x, spec.image_dims[1:]), voxel_size=spec.voxel_size)


# ---------------------------------------------------------------- diagnostics

def kkt_residual(x_hat, calib, y, W, fid, prior, spec, nonneg: bool = True, A=None) -> float:
    """Largest projected-gradient magnitude; zero at a KKT point of the (nonnegative) problem."""
    arr = x_hat.data if isinstance(x_hat, Volume) else np.asarray(x_hat)
    g = cost_gradient(arr, calib, y, W, fid, prior, spec, A)
    if not nonneg:
        return float(np.max(np.abs(g)))
    proj = np.where(arr > 0, np.abs(g), np.maximum(-g, 0.0))
    return float(np.max(proj))
