"""Error metrics, correlation maps and memory estimates for low-rank factors."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .matcore import SIGMA_ZERO, SvdFactors, as_matrix, power_spectral_norm, truncated_svd_oracle
from .baselines import sketch_sizes


class MetricError(ValueError):
    pass


ORTH_CHECK_TOL = 1e-6


def _same_shape(x, approx):
    x = as_matrix(x, "x")
    approx = as_matrix(approx, "approx")
    if x.shape != approx.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {approx.shape}")
    return x, approx


def tail_energy(x, approx) -> float:
    x, approx = _same_shape(x, approx)
    return float(np.linalg.norm(x - approx))


def _oracle_tail(x, r, oracle: SvdFactors | None):
    f = oracle if oracle is not None else truncated_svd_oracle(x, r)
    return x - f.truncate(r).reconstruct()


def relative_tail_energy(x, approx, r: int, oracle: SvdFactors | None = None) -> float:
    """``||x - approx||_F / ||x - X_r||_F - 1``."""
    x, approx = _same_shape(x, approx)
    denom = float(np.linalg.norm(_oracle_tail(x, r, oracle)))
    if denom <= 1e-12 * max(float(np.linalg.norm(x)), 1e-300):
        raise MetricError("x has rank <= r, relative tail energy is undefined; use tail_energy")
    return float(np.linalg.norm(x - approx)) / denom - 1.0


def scree_error(sigma_true, sigma_est) -> np.ndarray:
    a = np.asarray(sigma_true, dtype=float)
    b = np.asarray(sigma_est, dtype=float)
    if a.shape != b.shape:
        raise MetricError(f"length mismatch {a.shape} vs {b.shape}")
    return np.abs(a - b)


def frob_err(x, approx, r: int, oracle: SvdFactors | None = None) -> float:
    """``||x - approx||_F^2 - ||x - X_r||_F^2`` (nonnegative for rank-<=r approx)."""
    x, approx = _same_shape(x, approx)
    d = x - approx
    t = _oracle_tail(x, r, oracle)
    return float(np.sum(d * d)) - float(np.sum(t * t))


def spectral_err(x, approx, r: int, oracle: SvdFactors | None = None,
                 iters: int = 1000, tol: float = 1e-12) -> float:
    """``||x - approx||_2 - ||x - X_r||_2`` by power iteration on both residuals."""
    x, approx = _same_shape(x, approx)
    out = []
    for resid in (x - approx, _oracle_tail(x, r, oracle)):
        est, used, ok = power_spectral_norm(resid, iters=iters, tol=tol, return_iters=True)
        if not ok:
            raise MetricError(f"power iteration did not converge in {used} iterations")
        out.append(est)
    return out[0] - out[1]


def _check_orthonormal(v, name):
    v = as_matrix(v, name)
    res = float(np.linalg.norm(v.T @ v - np.eye(v.shape[1])))
    if res > ORTH_CHECK_TOL:
        raise MetricError(f"{name} columns are not orthonormal (residual {res:.2e})")
    return v


def chi2_err(v_true, v_est, squared: bool = True) -> float:
    """Subspace deviation ``1 - ||v_true^T v_est||_F^2 / r``.

    ``squared=False`` gives ``1 - ||v_true^T v_est||_F / r``, which is
    ``1 - 1/sqrt(r)`` even at perfect recovery.  ``r`` is the column count of
    ``v_true``; ``v_est`` may have more columns, in which case the value
    measures how far ``span(v_true)`` sits outside ``span(v_est)``.
    """
    v_true = _check_orthonormal(v_true, "v_true")
    v_est = _check_orthonormal(v_est, "v_est")
    if v_true.shape[0] != v_est.shape[0] or v_est.shape[1] < v_true.shape[1]:
        raise MetricError(f"shape mismatch {v_true.shape} vs {v_est.shape}")
    r = v_true.shape[1]
    nrm = float(np.linalg.norm(v_true.T @ v_est))
    val = 1.0 - (nrm * nrm if squared else nrm) / r
    return min(max(val, 0.0), 1.0)


def cross_correlation_map(v_true, v_est) -> np.ndarray:
    """``|cos|`` between every true and estimated singular vector (r x r)."""
    v_true = _check_orthonormal(v_true, "v_true")
    v_est = _check_orthonormal(v_est, "v_est")
    return np.abs(v_true.T @ v_est)


def pearson_correlation_map(v_true, v_est) -> np.ndarray:
    """Absolute Pearson correlation of column entries, the other reading of Corr."""
    a = v_true - v_true.mean(axis=0)
    b = v_est - v_est.mean(axis=0)
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    denom = np.outer(np.where(na > 0, na, 1.0), np.where(nb > 0, nb, 1.0))
    return np.abs(a.T @ b) / denom


@dataclass(frozen=True)
class MemoryEstimate:
    rangenet_params: int
    sketchy_peak: int
    s_eff: float
    s_eff_exact: float


def memory_estimates(m: int, n: int, r: int) -> MemoryEstimate:
    """Scalar counts for the two-layer model and the sketch.

    ``s_eff`` keeps only the leading terms of the sketch count,
    ``(12 (m + n) + 128 r) / (n + r)``, which is how the efficiency factor is
    usually quoted; ``s_eff_exact`` is ``sketchy_peak / rangenet_params``.
    """
    if m < 1 or n < 1 or r < 1:
        raise MetricError("m, n and r must be positive")
    k, s = sketch_sizes(r)
    params = r * (n + r)
    peak = (m + n) * (k + s) + 2 * s * s
    lead = (12.0 * (m + n) + 128.0 * r) / (n + r)
    return MemoryEstimate(params, peak, lead, peak / params)


@dataclass
class MetricReport:
    rank: int
    scree: list
    frob_err: float
    spectral_err: float
    chi2: float
    tail_energy: float
    relative_tail_energy: float | None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def evaluate(x, factors: SvdFactors, r: int | None = None,
             oracle: SvdFactors | None = None) -> MetricReport:
    """All metrics of ``factors`` against the dense oracle of ``x``."""
    x = as_matrix(x, "x")
    r = factors.rank if r is None else r
    oracle = oracle if oracle is not None else truncated_svd_oracle(x, r)
    f = factors.truncate(r)
    approx = f.reconstruct()
    try:
        rel = relative_tail_energy(x, approx, r, oracle)
    except MetricError:
        rel = None
    # Null-space oracle directions are arbitrary; compare only the identified ones.
    sig = oracle.sigma[:r]
    r_id = int(np.count_nonzero(sig > SIGMA_ZERO * max(float(sig[0]), 1.0))) if sig.size else 0
    r_id = min(r_id, f.v.shape[1])
    chi2 = chi2_err(oracle.v[:, :r_id], f.v) if r_id > 0 else 0.0
    return MetricReport(
        rank=r,
        scree=scree_error(oracle.sigma[:r], f.sigma).tolist(),
        frob_err=frob_err(x, approx, r, oracle),
        spectral_err=spectral_err(x, approx, r, oracle),
        chi2=chi2,
        tail_energy=tail_energy(x, approx),
        relative_tail_energy=rel,
    )


def write_matrix_csv(path, a) -> None:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in a:
            w.writerow([repr(float(v)) for v in row])


def write_scree_csv(path, sigma_true, sigma_est) -> None:
    err = scree_error(sigma_true, sigma_est)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "sigma_true", "sigma_est", "abs_error"])
        for i, (a, b, e) in enumerate(zip(sigma_true, sigma_est, err)):
            w.writerow([i, repr(float(a)), repr(float(b)), repr(float(e))])


def finite_or_none(v):
    return v if v is None or math.isfinite(v) else None
