"""Dense linear-algebra kernels and small-scale oracle solvers.

Matrices are plain row-major ``numpy.ndarray`` objects.  The oracle SVD is a
one-sided Jacobi solver with round-robin pair ordering, so every rotation
sweep is vectorised over ``n // 2`` disjoint column pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Largest min(m, n) the dense oracle accepts.
ORACLE_CAP = 4096
# Singular values at or below this are treated as zero when building factors.
SIGMA_ZERO = 1e-8


class MatcoreError(ValueError):
    pass


@dataclass
class SvdFactors:
    """Truncated SVD ``X ~ u @ diag(sigma) @ v.T``.

    ``sigma`` is descending and nonnegative.  Columns of ``u`` belonging to
    singular values ``<= SIGMA_ZERO`` are zero vectors; ``v`` keeps unit
    columns throughout.  Each ``v`` column has its largest-magnitude entry
    nonnegative (ties go to the lowest index).
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T

    def truncate(self, r: int) -> "SvdFactors":
        if not 1 <= r <= self.rank:
            raise MatcoreError(f"rank {r} outside [1, {self.rank}]")
        return SvdFactors(self.u[:, :r].copy(), self.sigma[:r].copy(), self.v[:, :r].copy())


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float) if not isinstance(a, np.ndarray) else a
    if a.ndim != 2:
        raise MatcoreError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise MatcoreError(f"{name} has non-finite entries")
    return a


def frobenius_norm(a) -> float:
    a = as_matrix(a)
    # Scale first so huge entries cannot overflow the sum of squares.
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if scale == 0.0:
        return 0.0
    b = a / scale
    return scale * float(np.sqrt(np.sum(b * b)))


def qr_econ(a) -> tuple[np.ndarray, np.ndarray]:
    """Householder economy QR of an ``m x k`` matrix with ``m >= k``.

    ``r`` has a nonnegative diagonal.  Rank-deficient input still yields an
    orthonormal ``q``.
    """
    a = as_matrix(a)
    m, k = a.shape
    if m < k:
        raise MatcoreError(f"qr_econ needs rows >= cols, got {a.shape}")
    r = a.astype(np.result_type(a.dtype, np.float32), copy=True)
    reflectors = []
    for j in range(k):
        x = r[j:, j]
        alpha = np.linalg.norm(x)
        w = x.copy()
        if alpha == 0.0:
            reflectors.append(None)
            continue
        w[0] += np.copysign(alpha, x[0]) if x[0] != 0 else alpha
        w /= np.linalg.norm(w)
        r[j:, j:] -= 2.0 * np.outer(w, w @ r[j:, j:])
        reflectors.append(w)
    q = np.zeros((m, k), dtype=r.dtype)
    q[np.arange(k), np.arange(k)] = 1.0
    for j in range(k - 1, -1, -1):
        w = reflectors[j]
        if w is not None:
            q[j:, j:] -= 2.0 * np.outer(w, w @ q[j:, j:])
    r = np.triu(r[:k, :k])
    signs = np.where(np.diag(r) < 0, -1.0, 1.0).astype(r.dtype)
    return q * signs, r * signs[:, None]


def solve_upper(r: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Back substitution for ``r @ x = b`` with ``r`` upper triangular."""
    k = r.shape[0]
    x = np.zeros((k,) + b.shape[1:], dtype=np.result_type(r, b))
    tiny = np.finfo(x.dtype).eps * max(float(np.max(np.abs(np.diag(r)), initial=0.0)), 1.0)
    for i in range(k - 1, -1, -1):
        d = r[i, i]
        if abs(d) <= tiny:
            raise MatcoreError("triangular factor is singular")
        x[i] = (b[i] - r[i, i + 1:] @ x[i + 1:]) / d
    return x


def lstsq_qr(a, b) -> np.ndarray:
    """Least-squares solution of ``a @ x ~ b`` for full-column-rank ``a``."""
    q, r = qr_econ(a)
    return solve_upper(r, q.T @ b)


def apply_sign_convention(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip column pairs so the largest-|entry| of each ``v`` column is >= 0."""
    if v.shape[1] == 0:
        return u, v
    idx = np.argmax(np.abs(v), axis=0)  # argmax returns the lowest index on ties
    signs = np.where(v[idx, np.arange(v.shape[1])] < 0, -1.0, 1.0)
    return u * signs, v * signs


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Brent-Luk tournament: n-1 rounds of disjoint pairs covering all pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    p = len(players)
    rounds = []
    for _ in range(p - 1):
        left, right = [], []
        for i in range(p // 2):
            a, b = players[i], players[p - 1 - i]
            if a >= 0 and b >= 0:
                left.append(min(a, b))
                right.append(max(a, b))
        rounds.append((np.array(left, dtype=int), np.array(right, dtype=int)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(a: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m, n = a.shape
    w = a.astype(float, copy=True)
    v = np.eye(n)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            if p.size == 0:
                continue
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            active &= gamma != 0.0
            if not np.any(active):
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0.0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wq = w[:, p], w[:, q]
            w[:, p] = c * wp - s * wq
            w[:, q] = s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break
    sigma = np.linalg.norm(w, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, w, v = sigma[order], w[:, order], v[:, order]
    u = np.zeros_like(w)
    keep = sigma > SIGMA_ZERO
    u[:, keep] = w[:, keep] / sigma[keep]
    return u, sigma, v


def jacobi_svd(a, tol: float = 1e-15, max_sweeps: int = 60) -> SvdFactors:
    """Full SVD of a dense matrix by one-sided Jacobi (rank ``min(m, n)``)."""
    a = as_matrix(a)
    m, n = a.shape
    if min(m, n) > ORACLE_CAP:
        raise MatcoreError(
            f"min(m, n) = {min(m, n)} exceeds the dense oracle cap {ORACLE_CAP}; "
            "use the streaming decomposition instead"
        )
    if m >= n:
        u, sigma, v = _jacobi_tall(a, tol, max_sweeps)
    else:
        v, sigma, u = _jacobi_tall(a.T, tol, max_sweeps)
        # The roles swap: keep v orthonormal and zero the u columns instead.
        zero = sigma <= SIGMA_ZERO
        if np.any(zero):
            v = v.copy()
            u = u.copy()
            v[:, zero] = _complete_basis(v[:, ~zero], int(zero.sum()))
            u[:, zero] = 0.0
    u, v = apply_sign_convention(u, v)
    return SvdFactors(u, sigma, v)


def _complete_basis(basis: np.ndarray, count: int) -> np.ndarray:
    """``count`` orthonormal columns orthogonal to ``basis``."""
    n = basis.shape[0]
    out = []
    existing = basis
    for e in np.eye(n):
        x = e - existing @ (existing.T @ e)
        x -= existing @ (existing.T @ x)
        nx = np.linalg.norm(x)
        if nx > 1e-6:
            x /= nx
            out.append(x)
            existing = np.column_stack([existing, x])
            if len(out) == count:
                break
    return np.column_stack(out)


def power_spectral_norm(a, iters: int = 1000, tol: float = 1e-12, seed: int = 0,
                        return_iters: bool = False):
    """Largest singular value by power iteration on ``a.T @ a``.

    The running estimate ``||a v_k||`` is nondecreasing for the normalised
    iterates ``v_k``.  With ``return_iters`` the result is ``(estimate,
    iterations_used, converged)``.
    """
    a = as_matrix(a)
    if iters < 1:
        raise MatcoreError("iters must be >= 1")
    if not np.any(a):
        return (0.0, 0, True) if return_iters else 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    est = float(np.linalg.norm(a @ v))
    converged = False
    it = 0
    for it in range(1, iters + 1):
        w = a.T @ (a @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            converged = True
            break
        v = w / nw
        new = max(float(np.linalg.norm(a @ v)), est)
        change = (new - est) / new
        est = new
        if change < tol:
            converged = True
            break
    return (est, it, converged) if return_iters else est


def truncated_svd_oracle(a, r: int) -> SvdFactors:
    a = as_matrix(a)
    if not 1 <= r <= min(a.shape):
        raise MatcoreError(f"rank {r} outside [1, {min(a.shape)}]")
    return jacobi_svd(a).truncate(r)
