"""Desk-scale metrics: Gaussian fits, Frechet distance, crop-based FD+,
seam ratios and per-block drift profiles."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math

import numpy as np
from scipy.stats import kendalltau

from .errors import NumericalError

JACOBI_SWEEPS = 100
JACOBI_TOL = 1e-12


@dataclasses.dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("a Gaussian fit needs at least 2 samples")
        c = np.asarray(self.covariance)
        if c.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match the mean")
        if not np.allclose(c, c.T, rtol=0, atol=1e-12 * max(1.0, np.abs(c).max(initial=0))):
            raise ValueError("covariance must be symmetric")


@dataclasses.dataclass
class MetricReport:
    name: str
    value: float
    details: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if not math.isfinite(self.value):
            raise NumericalError(f"metric {self.name} is not finite")

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "details": self.details}


def fit_gaussian(samples) -> GaussianFit:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("fit_gaussian needs at least 2 samples of equal dimension")
    mean = x.mean(axis=0)
    r = x - mean
    cov = r.T @ r / (x.shape[0] - 1)
    return GaussianFit(mean, 0.5 * (cov + cov.T), x.shape[0])


def _off_norm(A) -> float:
    return float(np.linalg.norm(A - np.diag(np.diag(A))))


def jacobi_eigh(a, sweeps: int = JACOBI_SWEEPS, tol: float = JACOBI_TOL):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, Q) with a = Q diag(w) Q^T. Converged when the
    off-diagonal Frobenius norm falls below ``tol`` times the matrix norm.
    """
    A = np.array(a, dtype=np.float64, copy=True)
    n = A.shape[0]
    Q = np.eye(n)
    scale = max(np.linalg.norm(A), np.finfo(float).tiny)
    for _ in range(sweeps):
        off = _off_norm(A)
        if off <= tol * scale:
            return np.diag(A).copy(), Q
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                Ap, Aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * Ap - s * Aq
                A[:, q] = s * Ap + c * Aq
                Ap, Aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * Ap - s * Aq
                A[q, :] = s * Ap + c * Aq
                Qp, Qq = Q[:, p].copy(), Q[:, q].copy()
                Q[:, p] = c * Qp - s * Qq
                Q[:, q] = s * Qp + c * Qq
    off = _off_norm(A)
    if off <= tol * scale:
        return np.diag(A).copy(), Q
    raise NumericalError(f"Jacobi eigensolver did not converge in {sweeps} sweeps (off-diagonal {off:.3g})")


def sqrtm_psd(a) -> np.ndarray:
    w, Q = jacobi_eigh(0.5 * (a + np.transpose(a)))
    return (Q * np.sqrt(np.clip(w, 0, None))) @ Q.T


def frechet_gaussian(a: GaussianFit, b: GaussianFit) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)."""
    if a.mean.shape != b.mean.shape:
        raise ValueError("Gaussian fits have different dimensions")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.covariance, b.covariance):
        return 0.0
    root_a = sqrtm_psd(a.covariance)
    cross = sqrtm_psd(root_a @ b.covariance @ root_a)
    d = float(np.sum((a.mean - b.mean) ** 2) + np.trace(a.covariance) + np.trace(b.covariance)
              - 2 * np.trace(cross))
    return max(d, 0.0)


def random_crops(long_samples, crop_len: int, gen: np.random.Generator) -> np.ndarray:
    x = np.asarray(long_samples, dtype=np.float64)
    n = x.shape[1]
    if not 1 <= crop_len <= n:
        raise ValueError(f"crop length {crop_len} does not fit content of length {n}")
    offsets = gen.integers(0, n - crop_len + 1, size=x.shape[0])
    return x[np.arange(x.shape[0])[:, None], offsets[:, None] + np.arange(crop_len)]


def fd_plus(long_samples, reference, crop_len: int, count: int | None, gen: np.random.Generator,
            name: str = "fd_plus") -> MetricReport:
    """Frechet distance between random crops of long content and short references.

    ``reference`` is either an array of short samples or a callable
    ``(count, gen) -> array``.
    """
    crops = random_crops(long_samples, crop_len, gen)
    if callable(reference):
        ref = np.asarray(reference(count or crops.shape[0], gen), dtype=np.float64)
    else:
        ref = np.asarray(reference, dtype=np.float64)
        if count is not None:
            ref = ref[:count]
    if ref.shape[1] != crop_len:
        raise ValueError(f"reference samples have length {ref.shape[1]}, crop length is {crop_len}")
    value = frechet_gaussian(fit_gaussian(crops), fit_gaussian(ref))
    return MetricReport(name, value, {"crop_len": crop_len, "crops": crops.shape[0], "reference": ref.shape[0]})


def seam_statistic(samples, boundaries, name: str = "seam_ratio") -> MetricReport:
    """Mean squared step across boundaries over mean squared step elsewhere.

    A boundary index b means the step between coordinates b-1 and b.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[1]
    bounds = sorted({int(b) for b in boundaries})
    if not bounds or bounds[0] < 1 or bounds[-1] > n - 1:
        raise ValueError("boundaries must be interior coordinate indices")
    steps = np.diff(x, axis=1) ** 2
    at = np.zeros(n - 1, dtype=bool)
    at[np.asarray(bounds) - 1] = True
    if at.all():
        raise ValueError("every step is a boundary; no interior reference")
    across = steps[:, at].mean()
    inside = steps[:, ~at].mean()
    if inside == 0:
        value = 1.0 if across == 0 else math.inf
    else:
        value = across / inside
    return MetricReport(name, value, {"boundaries": bounds, "samples": x.shape[0]})


def drift_profile(blocks, name: str = "drift") -> list[MetricReport]:
    """Per-block mean/variance plus spread and trend summaries.

    ``blocks[b]`` is an (n, width) sample set for block b. Spread is
    max_b |var_b - mean_var| / mean_var; the trend is Kendall's tau between
    block index and block variance.
    """
    if len(blocks) < 2:
        raise ValueError("drift profile needs at least 2 blocks")
    means, variances = [], []
    reports = []
    for b, x in enumerate(blocks):
        x = np.asarray(x, dtype=np.float64)
        m, v = float(x.mean()), float(x.var(ddof=1))
        means.append(m)
        variances.append(v)
        reports.append(MetricReport(f"{name}.block", v, {"block": b, "mean": m, "variance": v, "n": x.size}))
    var = np.asarray(variances)
    ref = var.mean()
    spread = float(np.max(np.abs(var - ref)) / ref)
    tau = float(kendalltau(np.arange(len(var)), var).statistic)
    if not math.isfinite(tau):
        tau = 0.0
    reports.append(MetricReport(f"{name}.spread", spread, {"blocks": len(var)}))
    reports.append(MetricReport(f"{name}.kendall_tau", tau, {"blocks": len(var)}))
    return reports


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "value", "details"])
    for r in reports:
        w.writerow([r.name, repr(r.value), json.dumps(r.details, sort_keys=True)])
    return buf.getvalue()


def reports_to_json(reports) -> dict:
    return {"metrics": [r.to_dict() for r in reports]}
