"""Reconstruction quality metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter

from .core import Volume


def _arr(v) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)


def rmse(a, b) -> float:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    return math.sqrt(float(np.mean((a - b) ** 2)))


def nrmse(a, truth) -> float:
    t = _arr(truth)
    rng = float(t.max() - t.min())
    return rmse(a, truth) / rng if rng > 0 else math.inf


def psnr(a, truth) -> float:
    t = _arr(truth)
    err = rmse(a, truth)
    rng = float(t.max() - t.min())
    return 20.0 * math.log10(rng / err) if err > 0 else math.inf


def annular_means(img: np.ndarray, center=None) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    ny, nx = img.shape
    cy, cx = ((ny - 1) / 2, (nx - 1) / 2) if center is None else center
    yy, xx = np.indices(img.shape)
    r = np.rint(np.hypot(yy - cy, xx - cx)).astype(np.int64)
    sums = np.bincount(r.ravel(), weights=img.ravel())
    counts = np.bincount(r.ravel())
    return sums / np.maximum(counts, 1)


def ring_score(img, center=None) -> float:
    """RMS deviation of the radial profile from its width-5 running median.

    Concentric rings show up as narrow bumps in the annular means; genuine
    radial structure survives the median and cancels.
    """
    img = np.asarray(img, dtype=np.float64)
    m = annular_means(img, center)
    smooth = median_filter(m, size=5, mode="nearest")
    r_max = int(0.45 * min(img.shape))
    if r_max < 5:
        return 0.0
    dev = (m - smooth)[5 : r_max + 1]
    return float(np.sqrt(np.mean(dev**2)))


@dataclass
class MetricReport:
    rows: list  # (frame, rmse, nrmse, psnr, ring_score)

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean([r[1] ** 2 for r in self.rows])))

    def to_csv(self, path) -> None:
        lines = ["frame,rmse,nrmse,psnr,ring_score"]
        lines += [f"{f},{float(a)!r},{float(b)!r},{float(c)!r},{float(d)!r}" for f, a, b, c, d in self.rows]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def to_text(self) -> str:
        out = [f"{'frame':>5} {'rmse':>12} {'nrmse':>12} {'psnr':>10} {'ring':>12}"]
        out += [f"{f:>5d} {a:12.6g} {b:12.6g} {c:10.4g} {d:12.6g}" for f, a, b, c, d in self.rows]
        return "\n".join(out)


def metric_report(recon, truth) -> MetricReport:
    r, t = _arr(recon), _arr(truth)
    if r.shape != t.shape:
        raise ValueError(f"dimension mismatch {r.shape} vs {t.shape}")
    rows = []
    for f in range(r.shape[0]):
        mid = r.shape[1] // 2
        rows.append((f, rmse(r[f], t[f]), nrmse(r[f], t[f]), psnr(r[f], t[f]), ring_score(r[f, mid])))
    return MetricReport(rows)
