"""Data-fidelity terms, MRF prior potentials and their quadratic surrogates.

The fidelity is written in one scaled form for every kind::

    l(x) = 1/2 * sigma^2 * sum_i gamma(u_i),   u_i = e_i * sqrt(W_i) / sigma,
    e = y - I*Ax - d

With gamma(u) = u^2 this is the weighted least-squares term 1/2 ||y - IAx - d||_W^2
for any sigma; the robust penalties (generalized Huber, Student-T) measure u in
units of the noise scale sigma.  The prior is the pairwise MRF
``beta_s * sum w_ij rho(x_i - x_j)`` plus, for time series, the temporal term
``beta_t * sum rho(x_{t,i} - x_{t+1,i})``.

Every potential f here has a half-quadratic majorizer (a/2) z^2 + b tangent at
z' with a = f'(z')/z', which the ICD solver uses voxel by voxel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.optimize import brentq

from .core import Sinogram, Volume, WeightMap
from .projector import ProjectorSpec, forward_project_array, back_project_array

FIDELITY_KINDS = ("wls", "wls_gain_offset", "robust_genhuber", "robust_student_t", "poisson_approx")
RHO_KINDS = ("quadratic", "qggmrf")
CALIB_MODES = ("none", "per_view", "per_channel")

GAMMA_QUADRATIC, GAMMA_GENHUBER, GAMMA_STUDENT = 0, 1, 2
RHO_QUADRATIC, RHO_QGGMRF = 0, 1

# |delta| floor for qGGMRF coefficients when q < 2 (the curvature is unbounded at 0)
_QGG_FLOOR = 1e-12


@dataclass(frozen=True)
class FidelityModel:
    kind: str = "wls"
    T: float = 3.0
    delta: float = 0.5
    nu: float = 5.0
    sigma: float = 1.0
    gain_offset_mode: str = "none"

    def __post_init__(self):
        if self.kind not in FIDELITY_KINDS:
            raise ValueError(f"unknown fidelity kind {self.kind!r}")
        if self.gain_offset_mode not in CALIB_MODES:
            raise ValueError(f"unknown gain_offset_mode {self.gain_offset_mode!r}")
        if not self.T > 0 or not 0 < self.delta <= 1 or not self.nu > 0 or not self.sigma > 0:
            raise ValueError("need T > 0, 0 < delta <= 1, nu > 0, sigma > 0")

    @property
    def gamma_code(self) -> int:
        return {"robust_genhuber": GAMMA_GENHUBER, "robust_student_t": GAMMA_STUDENT}.get(self.kind, GAMMA_QUADRATIC)

    @property
    def is_robust(self) -> bool:
        return self.gamma_code != GAMMA_QUADRATIC

    @property
    def calibrated(self) -> bool:
        return self.gain_offset_mode != "none"


@dataclass(frozen=True)
class PriorModel:
    rho_kind: str = "qggmrf"
    p: float = 1.2
    q: float = 2.0
    T: float = 1.0
    sigma_x: float = 1.0
    beta_s: float = 1.0
    beta_t: float = 0.0

    def __post_init__(self):
        if self.rho_kind not in RHO_KINDS:
            raise ValueError(f"unknown prior kind {self.rho_kind!r}")
        if not 1.0 <= self.p <= self.q <= 2.0:
            raise ValueError("need 1 <= p <= q <= 2")
        if not self.sigma_x > 0 or not self.T > 0 or self.beta_s < 0 or self.beta_t < 0:
            raise ValueError("need sigma_x > 0, T > 0, beta_s >= 0, beta_t >= 0")

    @property
    def rho_code(self) -> int:
        return RHO_QGGMRF if self.rho_kind == "qggmrf" else RHO_QUADRATIC

    @property
    def params(self) -> tuple:
        return (self.rho_code, float(self.p), float(self.q), float(self.T), float(self.sigma_x))


@dataclass(frozen=True)
class CalibrationState:
    view_gains: np.ndarray
    view_offsets: np.ndarray
    channel_offsets: np.ndarray
    x_scale: float = 1.0  # factor the caller must apply to x after a rescaling gauge fix

    def __post_init__(self):
        for name in ("view_gains", "view_offsets", "channel_offsets"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            object.__setattr__(self, name, arr)
        if np.any(self.view_gains <= 0):
            raise ValueError("view gains must be positive")

    @classmethod
    def identity(cls, n_views: int, n_channels: int) -> "CalibrationState":
        return cls(np.ones(n_views), np.zeros(n_views), np.zeros(n_channels))

    def scale(self) -> np.ndarray:
        return self.view_gains[:, None, None]

    def offset(self) -> np.ndarray:
        return self.view_offsets[:, None, None] + self.channel_offsets[None, None, :]

    def predict(self, Ax: np.ndarray) -> np.ndarray:
        return self.scale() * Ax + self.offset()

    def to_csv(self, path) -> None:
        lines = ["kind,index,value"]
        lines += [f"view_gain,{k},{float(g)!r}" for k, g in enumerate(self.view_gains)]
        lines += [f"view_offset,{k},{float(d)!r}" for k, d in enumerate(self.view_offsets)]
        lines += [f"channel_offset,{c},{float(d)!r}" for c, d in enumerate(self.channel_offsets)]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- scalar kernels (shared with the solver)

@numba.njit(cache=True, inline="always")
def rho_scalar(d, kind, p, q, T, s):
    if kind == RHO_QUADRATIC:
        return d * d / (2.0 * s * s)
    ad = abs(d)
    if ad == 0.0:
        return 0.0
    r = (ad / (T * s)) ** (q - p)
    return ad**p / (p * s**p) * (r / (1.0 + r))


@numba.njit(cache=True, inline="always")
def rho_coeff_scalar(d, kind, p, q, T, s):
    """a = rho'(d)/d, or rho''(0) at d = 0."""
    if kind == RHO_QUADRATIC:
        return 1.0 / (s * s)
    ad = abs(d)
    if q < 2.0 and ad < _QGG_FLOOR * s:
        ad = _QGG_FLOOR * s
    r = (ad / (T * s)) ** (q - p)
    lead = ad ** (q - 2.0) / (s**p * (T * s) ** (q - p))
    return lead / (1.0 + r) * (1.0 + (q - p) / (p * (1.0 + r)))


@numba.njit(cache=True, inline="always")
def gamma_scalar(u, kind, T, delta, nu):
    if kind == GAMMA_QUADRATIC:
        return u * u
    if kind == GAMMA_GENHUBER:
        au = abs(u)
        if au < T:
            return u * u
        return 2.0 * delta * T * au + T * T * (1.0 - 2.0 * delta)
    return math.log1p(u * u / nu)


@numba.njit(cache=True, inline="always")
def gamma_coeff_scalar(u, kind, T, delta, nu):
    """a = gamma'(u)/u (2/nu for Student-T at u = 0)."""
    if kind == GAMMA_QUADRATIC:
        return 2.0
    if kind == GAMMA_GENHUBER:
        au = abs(u)
        if au < T:
            return 2.0
        return 2.0 * delta * T / au
    return 2.0 / (nu + u * u)


@numba.njit(cache=True)
def _rho_array(d, kind, p, q, T, s, coeff):
    out = np.empty(d.size)
    flat = d.ravel()
    for i in range(flat.size):
        out[i] = rho_coeff_scalar(flat[i], kind, p, q, T, s) if coeff else rho_scalar(flat[i], kind, p, q, T, s)
    return out


@numba.njit(cache=True)
def _gamma_array(u, kind, T, delta, nu, coeff):
    out = np.empty(u.size)
    flat = u.ravel()
    for i in range(flat.size):
        out[i] = gamma_coeff_scalar(flat[i], kind, T, delta, nu) if coeff else gamma_scalar(flat[i], kind, T, delta, nu)
    return out


def _shaped(fn, z, *args):
    arr = np.asarray(z, dtype=np.float64)
    out = fn(np.ascontiguousarray(arr), *args).reshape(arr.shape)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------- potentials

def rho(delta, prior: PriorModel):
    """Prior potential applied to neighbour differences."""
    return _shaped(_rho_array, delta, *prior.params, False)


def rho_surrogate_coeff(delta_prime, prior: PriorModel):
    return _shaped(_rho_array, delta_prime, *prior.params, True)


def rho_deriv(delta, prior: PriorModel):
    return rho_surrogate_coeff(delta, prior) * np.asarray(delta, dtype=np.float64)


def _gamma_params(fid: FidelityModel) -> tuple:
    return (fid.gamma_code, float(fid.T), float(fid.delta), float(fid.nu))


def gamma(e, fid: FidelityModel):
    """Scalar fidelity penalty in noise-scaled residual units."""
    return _shaped(_gamma_array, e, *_gamma_params(fid), False)


def gamma_surrogate_coeff(e_prime, fid: FidelityModel):
    return _shaped(_gamma_array, e_prime, *_gamma_params(fid), True)


def gamma_deriv(e, fid: FidelityModel):
    return gamma_surrogate_coeff(e, fid) * np.asarray(e, dtype=np.float64)


# ---------------------------------------------------------------- surrogates

@dataclass(frozen=True)
class Surrogate:
    """Quadratic majorizer q(z; z') = (a(z')/2) z^2 + b(z') of a symmetric potential t."""

    t: callable
    coeff: callable

    def a(self, z_prime):
        return self.coeff(z_prime)

    def b(self, z_prime):
        a = self.coeff(z_prime)
        return self.t(z_prime) - 0.5 * a * np.asarray(z_prime) ** 2

    def __call__(self, z, z_prime):
        a = self.coeff(z_prime)
        zp = np.asarray(z_prime, dtype=np.float64)
        return 0.5 * a * np.asarray(z, dtype=np.float64) ** 2 + (self.t(z_prime) - 0.5 * a * zp**2)


def rho_surrogate(prior: PriorModel) -> Surrogate:
    return Surrogate(lambda d: rho(d, prior), lambda d: rho_surrogate_coeff(d, prior))


def gamma_surrogate(fid: FidelityModel) -> Surrogate:
    return Surrogate(lambda e: gamma(e, fid), lambda e: gamma_surrogate_coeff(e, fid))


@dataclass(frozen=True)
class ComposedSurrogate:
    """q~(z; z') = q(h(z); h(z')) for affine h(z) = alpha*z + c, majorizing t(h(z))."""

    base: Surrogate
    alpha: float
    c: float = 0.0

    def h(self, z):
        return self.alpha * np.asarray(z, dtype=np.float64) + self.c

    def t(self, z):
        return self.base.t(self.h(z))

    def __call__(self, z, z_prime):
        return self.base(self.h(z), self.h(z_prime))

    def quadratic(self, z_prime):
        """Coefficients (k2, k1, k0) of q~(z; z') = k2 z^2 + k1 z + k0."""
        a = self.base.a(self.h(z_prime))
        b = self.base.b(self.h(z_prime))
        return 0.5 * a * self.alpha**2, a * self.alpha * self.c, 0.5 * a * self.c**2 + b


def compose_surrogate(surrogate: Surrogate, alpha: float, c: float = 0.0) -> ComposedSurrogate:
    return ComposedSurrogate(surrogate, float(alpha), float(c))


# ---------------------------------------------------------------- neighbourhoods

def neighbor_offsets(nz: int):
    """Half of the spatial neighbourhood as (dz, dy, dx) offsets and their weights.

    8-neighbourhood for single slices, 26-neighbourhood for volumes.  Weights are
    1/distance scaled so the full neighbourhood of an interior voxel sums to 1.
    """
    offs = []
    for dz in ((-1, 0, 1) if nz > 1 else (0,)):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if (dz, dy, dx) > (0, 0, 0):
                    offs.append((dz, dy, dx))
    offs = np.array(offs, dtype=np.int64)
    inv = 1.0 / np.sqrt((offs**2).sum(axis=1))
    return offs, inv / (2.0 * inv.sum())


def _pair_slices(shape, off):
    """Slices (a, b) such that x[a] and x[b] enumerate all in-bounds pairs (v, v + off)."""
    sa, sb = [slice(None)], [slice(None)]
    for n, o in zip(shape[1:], off):
        if o >= 0:
            sa.append(slice(0, n - o))
            sb.append(slice(o, n))
        else:
            sa.append(slice(-o, n))
            sb.append(slice(0, n + o))
    return tuple(sa), tuple(sb)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Volume) else np.asarray(x, dtype=np.float64)


def prior_cost(x, prior: PriorModel) -> float:
    arr = _as_array(x)
    total = 0.0
    if prior.beta_s > 0:
        offs, w = neighbor_offsets(arr.shape[1])
        for off, wk in zip(offs, w):
            sa, sb = _pair_slices(arr.shape, off)
            total += prior.beta_s * wk * float(np.sum(rho(arr[sa] - arr[sb], prior)))
    if prior.beta_t > 0 and arr.shape[0] > 1:
        total += prior.beta_t * float(np.sum(rho(arr[:-1] - arr[1:], prior)))
    return total


def prior_gradient(x, prior: PriorModel) -> np.ndarray:
    arr = _as_array(x)
    g = np.zeros_like(arr)
    if prior.beta_s > 0:
        offs, w = neighbor_offsets(arr.shape[1])
        for off, wk in zip(offs, w):
            sa, sb = _pair_slices(arr.shape, off)
            d = prior.beta_s * wk * rho_deriv(arr[sa] - arr[sb], prior)
            g[sa] += d
            g[sb] -= d
    if prior.beta_t > 0 and arr.shape[0] > 1:
        d = prior.beta_t * rho_deriv(arr[:-1] - arr[1:], prior)
        g[:-1] += d
        g[1:] -= d
    return g


def laplacian_matrix(dims, prior: PriorModel) -> np.ndarray:
    """Dense graph Laplacian L with prior_cost = x^T L x / (2 sigma_x^2) for the quadratic potential."""
    nt, nz, ny, nx = dims
    n = nt * nz * ny * nx
    idx = np.arange(n).reshape(dims)
    L = np.zeros((n, n))

    def add(i, j, w):
        L[i, i] += w
        L[j, j] += w
        L[i, j] -= w
        L[j, i] -= w

    offs, ws = neighbor_offsets(nz)
    for off, wk in zip(offs, ws):
        sa, sb = _pair_slices(dims, off)
        for i, j in zip(idx[sa].ravel(), idx[sb].ravel()):
            add(i, j, prior.beta_s * wk)
    if nt > 1:
        for i, j in zip(idx[:-1].ravel(), idx[1:].ravel()):
            add(i, j, prior.beta_t)
    return L


# ---------------------------------------------------------------- fidelity

def effective_weights(y: Sinogram, W: WeightMap, fid: FidelityModel) -> np.ndarray:
    """Per-measurement quadratic weights for the data term.

    ``poisson_approx`` on raw counts uses the inverse-variance 1/max(y, 1) of the
    Poisson likelihood expanded about the data; on log-normalized transmission
    data the supplied (count-derived) weights already are that approximation.
    """
    W.check_matches(y)
    if fid.kind == "poisson_approx" and y.kind == "counts":
        return np.where(W.data > 0, 1.0 / np.maximum(y.data, 1.0), 0.0)
    return W.data


@dataclass(frozen=True)
class CostBreakdown:
    total: float
    fidelity: float
    prior: float
    poisson_nll: float | None = None
    clamped: bool = False

    def __iter__(self):
        return iter((self.total, self.fidelity, self.prior))


def fidelity_cost_from_residual(e: np.ndarray, weights: np.ndarray, fid: FidelityModel) -> float:
    if fid.gamma_code == GAMMA_QUADRATIC:
        return 0.5 * float(np.sum(weights * e * e))
    u = e * np.sqrt(weights) / fid.sigma
    return 0.5 * fid.sigma**2 * float(np.sum(gamma(u, fid)))


def _projection(x, spec: ProjectorSpec, A=None) -> np.ndarray:
    arr = _as_array(x)
    if A is not None:
        return (A @ arr.ravel()).reshape(spec.sino_shape)
    return forward_project_array(arr, spec)


def eval_cost(x, calib: CalibrationState | None, y: Sinogram, W: WeightMap, fid: FidelityModel,
              prior: PriorModel, spec: ProjectorSpec, A=None) -> CostBreakdown:
    """Total objective split into fidelity and prior parts."""
    Ax = _projection(x, spec, A)
    if calib is None:
        calib = CalibrationState.identity(spec.sino_shape[0], spec.sino_shape[2])
    weights = effective_weights(y, W, fid)
    e = y.data - calib.predict(Ax)
    fidelity = fidelity_cost_from_residual(e, weights, fid)
    pri = prior_cost(x, prior)
    nll, clamped = None, False
    if fid.kind == "poisson_approx":
        mean = calib.predict(Ax)
        clamped = bool(np.any(mean <= 1e-12))
        mean = np.maximum(mean, 1e-12)
        nll = float(np.sum(mean - y.data * np.log(mean)))
    return CostBreakdown(fidelity + pri, fidelity, pri, nll, clamped)


def fidelity_gradient(x, calib, y: Sinogram, W: WeightMap, fid: FidelityModel, spec: ProjectorSpec, A=None):
    arr = _as_array(x)
    Ax = _projection(arr, spec, A)
    if calib is None:
        calib = CalibrationState.identity(spec.sino_shape[0], spec.sino_shape[2])
    weights = effective_weights(y, W, fid)
    e = y.data - calib.predict(Ax)
    if fid.gamma_code == GAMMA_QUADRATIC:
        r = weights * e
    else:
        sw = np.sqrt(weights)
        r = 0.5 * fid.sigma * gamma_deriv(e * sw / fid.sigma, fid) * sw
    r = -calib.scale() * r
    if A is not None:
        return (A.T @ r.ravel()).reshape(arr.shape)
    return back_project_array(r, spec, arr.shape[0])


def cost_gradient(x, calib, y, W, fid, prior, spec, A=None) -> np.ndarray:
    """Gradient of eval_cost's total with respect to x."""
    return fidelity_gradient(x, calib, y, W, fid, spec, A) + prior_gradient(x, prior)


# ---------------------------------------------------------------- calibration

def _view_moments(p, y, w):
    sw = w.sum(axis=(1, 2))
    safe = np.where(sw > 0, sw, 1.0)
    mp = (w * p).sum(axis=(1, 2)) / safe
    my = (w * y).sum(axis=(1, 2)) / safe
    dp = p - mp[:, None, None]
    dy = y - my[:, None, None]
    cpp = (w * dp * dp).sum(axis=(1, 2))
    cpy = (w * dp * dy).sum(axis=(1, 2))
    return sw, mp, my, cpp, cpy


def _constrained_gains(istar, curv, fixed_log_sum):
    """Minimise sum curv_k/2 (I_k - I*_k)^2 subject to sum log I_k = -fixed_log_sum."""
    target = -fixed_log_sum

    def gains(lam):
        return 0.5 * (istar + np.sqrt(np.maximum(istar**2 - 4.0 * lam / curv, 0.0)))

    def g(lam):
        return np.sum(np.log(gains(lam))) - target

    pos = istar > 0
    hi = np.min(curv[pos] * istar[pos] ** 2 / 4.0) if np.any(pos) else 0.0
    if g(hi) > 0:
        return None
    lo = min(-1.0, hi - 1.0)
    while g(lo) < 0:
        lo *= 2.0
        if lo < -1e300:
            return None
    lam = brentq(g, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return gains(lam)


def solve_calibration(x, y: Sinogram, W, mode: str, spec: ProjectorSpec, *, weights=None,
                      current: CalibrationState | None = None, gauge: str = "rescale", A=None,
                      projection=None) -> CalibrationState:
    """Closed-form weighted least-squares calibration update with x held fixed.

    per_view: per-view gain and offset; per_channel: zero-sum channel offsets.
    ``gauge`` selects how the gain scale ambiguity is removed: "rescale" divides
    the gains by their geometric mean and reports that factor as ``x_scale``
    (multiply x by it); "constrained" solves the problem exactly under
    mean(log I) = 0; "none" leaves the gains free.
    """
    if mode not in ("per_view", "per_channel"):
        raise ValueError(f"calibration mode must be per_view or per_channel, got {mode!r}")
    p = projection if projection is not None else _projection(x, spec, A)
    w = (W.data if isinstance(W, WeightMap) else np.asarray(W)) if weights is None else weights
    ydat = y.data if isinstance(y, Sinogram) else np.asarray(y)
    nviews, _, nch = p.shape
    cur = current or CalibrationState.identity(nviews, nch)

    if mode == "per_channel":
        r = ydat - cur.scale() * p - cur.view_offsets[:, None, None]
        sc = w.sum(axis=(0, 1))
        active = sc > 0
        m = np.zeros(nch)
        m[active] = (w * r).sum(axis=(0, 1))[active] / sc[active]
        d = np.zeros(nch)
        if gauge == "none":
            d[active] = m[active]
        else:
            # zero-sum offsets; with uniform channel weights this is plain mean removal
            inv = 1.0 / sc[active]
            lam = m[active].sum() / inv.sum()
            d[active] = m[active] - lam * inv
        return CalibrationState(cur.view_gains, cur.view_offsets, d)

    r = ydat - cur.channel_offsets[None, None, :]
    sw, mp, my, cpp, cpy = _view_moments(p, r, w)
    scale = np.maximum(np.abs(mp), 1.0) ** 2 * np.maximum(sw, 1e-300)
    degenerate = (cpp <= 1e-12 * scale) | (sw <= 0)
    gains = cur.view_gains.copy()
    ok = ~degenerate
    gains[ok] = cpy[ok] / cpp[ok]
    x_scale = 1.0
    if gauge == "constrained":
        sol = _constrained_gains(gains[ok], cpp[ok], np.sum(np.log(cur.view_gains[degenerate])))
        if sol is None:
            sol = np.maximum(gains[ok], 1e-6)
            sol = sol / np.exp(np.mean(np.log(np.concatenate([sol, cur.view_gains[degenerate]]))))
        gains[ok] = sol
    elif np.any(gains <= 0):
        raise FloatingPointError("calibration produced non-positive gains")
    if gauge == "rescale":
        x_scale = float(np.exp(np.mean(np.log(gains))))
        gains = gains / x_scale
        offsets = np.where(sw > 0, my - gains * x_scale * mp, cur.view_offsets)
    else:
        offsets = np.where(sw > 0, my - gains * mp, cur.view_offsets)
    return CalibrationState(gains, offsets, cur.channel_offsets, x_scale)
