"""Comparison solvers: single-pass SketchySVD and randomized SVD (HMT)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .matcore import SvdFactors, apply_sign_convention, as_matrix, jacobi_svd, lstsq_qr, qr_econ
from .stream import BatchSource, MemorySource


class BaselineError(ValueError):
    pass


class SketchSizeWarning(UserWarning):
    """Sketch dimension k exceeds min(m, n): no memory advantage remains."""


@dataclass
class SketchState:
    """Streaming accumulators ``A = Ups X``, ``B = X Om^T``, ``Z = Phi X Psi^T``.

    ``core`` is scratch space for the s x s core solve, allocated up front so
    that the state's footprint is fixed for the whole run.
    """

    m: int
    n: int
    r: int
    k: int
    s: int
    upsilon: np.ndarray  # k x m
    omega: np.ndarray    # k x n
    phi: np.ndarray      # s x m
    psi: np.ndarray      # s x n
    a: np.ndarray        # k x n
    b: np.ndarray        # m x k
    z: np.ndarray        # s x s
    core: np.ndarray     # s x s
    rows_seen: int = 0

    def scalar_count(self) -> int:
        arrays = (self.upsilon, self.omega, self.phi, self.psi, self.a, self.b, self.z, self.core)
        return int(sum(x.size for x in arrays))


def sketch_sizes(r: int) -> tuple[int, int]:
    k = 4 * r + 1
    return k, 2 * k + 1


def sketchy_init(m: int, n: int, r: int, seed: int = 0, k: int | None = None,
                 s: int | None = None) -> SketchState:
    if r < 1:
        raise BaselineError("rank must be >= 1")
    k0, s0 = sketch_sizes(r)
    k = k0 if k is None else k
    s = (2 * k + 1) if s is None else s
    if k > min(m, n):
        warnings.warn(f"sketch size k={k} exceeds min(m, n)={min(m, n)}; "
                      "the sketch is no smaller than the data", SketchSizeWarning, stacklevel=2)
    rng = np.random.default_rng(seed)
    return SketchState(
        m, n, r, k, s,
        upsilon=rng.standard_normal((k, m)),
        omega=rng.standard_normal((k, n)),
        phi=rng.standard_normal((s, m)),
        psi=rng.standard_normal((s, n)),
        a=np.zeros((k, n)),
        b=np.zeros((m, k)),
        z=np.zeros((s, s)),
        core=np.zeros((s, s)),
    )


def sketchy_update(state: SketchState, row_index: int, row) -> SketchState:
    """Add row ``i`` of X as rank-1 contributions to the three sketches."""
    row = np.asarray(row, dtype=float)
    if row.shape != (state.n,):
        raise BaselineError(f"row must have length {state.n}")
    if not 0 <= row_index < state.m:
        raise BaselineError(f"row index {row_index} outside [0, {state.m})")
    state.a += np.outer(state.upsilon[:, row_index], row)
    state.b[row_index] += state.omega @ row
    state.z += np.outer(state.phi[:, row_index], state.psi @ row)
    state.rows_seen += 1
    return state


def sketchy_update_batch(state: SketchState, start: int, batch) -> SketchState:
    """Same as ``sketchy_update`` over consecutive rows ``start..start+b-1``."""
    batch = np.asarray(batch, dtype=float)
    stop = start + batch.shape[0]
    if batch.ndim != 2 or batch.shape[1] != state.n:
        raise BaselineError(f"batch must have {state.n} columns")
    if start < 0 or stop > state.m:
        raise BaselineError(f"rows {start}..{stop} outside [0, {state.m})")
    state.a += state.upsilon[:, start:stop] @ batch
    state.b[start:stop] += batch @ state.omega.T
    state.z += state.phi[:, start:stop] @ (batch @ state.psi.T)
    state.rows_seen += batch.shape[0]
    return state


def _range_basis(a: np.ndarray) -> np.ndarray:
    # An oversized sketch (k >= rows) spans the whole space; identity is exact.
    if a.shape[0] <= a.shape[1]:
        return np.eye(a.shape[0], dtype=a.dtype)
    return qr_econ(a)[0]


def sketchy_finalize(state: SketchState, r: int | None = None) -> SvdFactors:
    r = state.r if r is None else r
    if not np.any(state.b) or not np.any(state.a):
        raise BaselineError("sketch is all zero: nothing was streamed")
    q = _range_basis(state.b)         # m x k, range basis
    p = _range_basis(state.a.T)       # n x k, co-range basis
    # Least squares (Phi Q) C (Psi P)^T = Z, one side at a time.
    w = lstsq_qr(state.phi @ q, state.z)                  # k x s
    state.core[: q.shape[1], : w.shape[1]] = w
    c = lstsq_qr(state.psi @ p, w.T).T                    # k x k
    f = jacobi_svd(c)
    r = min(r, f.rank)
    u = q @ f.u[:, :r]
    v = p @ f.v[:, :r]
    u, v = apply_sign_convention(u, v)
    return SvdFactors(u, f.sigma[:r].copy(), v)


def sketchy_run(src: BatchSource, r: int, seed: int = 0, **kw) -> tuple[SvdFactors, SketchState]:
    """One streaming pass then finalize."""
    m, n = src.shape
    state = sketchy_init(m, n, r, seed, **kw)
    before = src.passes_completed
    for start, batch in src.iter_pass():
        sketchy_update_batch(state, start, batch)
    assert src.passes_completed == before + 1
    return sketchy_finalize(state, r), state


def sketchy_peak_scalars(m: int, n: int, r: int) -> int:
    """``(m + n)(k + s) + 2 s^2 + k n + m k`` scalars held by SketchState."""
    k, s = sketch_sizes(r)
    return (m + n) * (k + s) + 2 * s * s + k * n + m * k


def randsvd(x, r: int, oversample: int = 10, power_iters: int = 0, seed: int = 0) -> SvdFactors:
    """Randomized range finder with ``q`` power iterations.

    ``x`` is a dense matrix or a BatchSource.  With ``power_iters == 0`` a source
    is read in two streaming passes; power iterations need the matrix resident,
    so a source is materialised first.
    """
    if isinstance(x, BatchSource):
        src = x
        m, n = src.shape
        if power_iters > 0:
            from .stream import materialize
            return randsvd(materialize(src), r, oversample, power_iters, seed)
    else:
        x = as_matrix(x)
        m, n = x.shape
        src = MemorySource(x, m)
    if r < 1 or r > min(m, n):
        raise BaselineError(f"rank {r} must lie in [1, min(m, n) = {min(m, n)}]")
    ell = min(r + max(oversample, 0), min(m, n))  # oversample clipped to fit
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, ell))
    y = np.zeros((m, ell))
    for start, batch in src.iter_pass():
        y[start:start + batch.shape[0]] = batch @ g
    if power_iters:
        xm = x
        for _ in range(power_iters):
            q, _ = qr_econ(y)
            z, _ = qr_econ(xm.T @ q)
            y = xm @ z
    q, _ = qr_econ(y)
    bt = np.zeros((n, ell))  # (Q^T X)^T, accumulated row block by row block
    for start, batch in src.iter_pass():
        bt += batch.T @ q[start:start + batch.shape[0]]
    f = jacobi_svd(bt.T)
    u = q @ f.u[:, :r]
    v = f.v[:, :r]
    u, v = apply_sign_convention(u, v)
    return SvdFactors(u, f.sigma[:r].copy(), v)
