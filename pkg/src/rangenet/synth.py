"""Synthetic matrices with prescribed spectra."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matcore import qr_econ
from .stream import write_binary

# Default spectrum for the rank-5 15 x 15 interpretability fixture.
RANK5_SIGMAS = (10.0, 8.0, 6.0, 4.0, 2.0)


class SynthError(ValueError):
    pass


def random_orthogonal(n: int, k: int, rng) -> np.ndarray:
    """``n x k`` orthonormal columns: QR of a Gaussian with ``diag(R) >= 0``."""
    q, _ = qr_econ(rng.standard_normal((n, k)))
    return q


@dataclass
class SpectrumSpec:
    m: int
    n: int
    sigmas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    basis: str = "random"  # "random" or "canonical"
    seed: int = 0

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=float)
        f = min(self.m, self.n)
        if self.m < 1 or self.n < 1:
            raise SynthError("dimensions must be positive")
        if self.sigmas.ndim != 1 or self.sigmas.size > f:
            raise SynthError(f"need at most {f} singular values")
        if self.sigmas.size < f:
            self.sigmas = np.concatenate([self.sigmas, np.zeros(f - self.sigmas.size)])
        if np.any(self.sigmas < 0) or np.any(np.diff(self.sigmas) > 0):
            raise SynthError("sigmas must be nonnegative and descending")
        if self.basis not in ("random", "canonical"):
            raise SynthError(f"unknown basis {self.basis!r}")


def gen_from_spectrum(spec: SpectrumSpec) -> np.ndarray:
    f = min(spec.m, spec.n)
    if spec.basis == "canonical":
        x = np.zeros((spec.m, spec.n))
        x[np.arange(f), np.arange(f)] = spec.sigmas
        return x
    rng = np.random.default_rng(spec.seed)
    u = random_orthogonal(spec.m, f, rng)
    v = random_orthogonal(spec.n, f, rng)
    return (u * spec.sigmas) @ v.T


def gen_linear_decay(m: int, n: int, f: int) -> np.ndarray:
    """``diag(f, f-1, ..., 1, 0, ...)`` of shape m x n."""
    if f < 1:
        raise SynthError("rank f must be >= 1")
    if f > min(m, n):
        raise SynthError(f"rank {f} exceeds min(m, n) = {min(m, n)}")
    return gen_from_spectrum(SpectrumSpec(m, n, np.arange(f, 0, -1.0), "canonical"))


def linear_decay_tail(f: int, r: int) -> float:
    """Closed-form oracle tail energy ``sqrt(sum_{i<=f-r} i^2)``."""
    k = max(f - r, 0)
    return float(np.sqrt(k * (k + 1) * (2 * k + 1) / 6.0))


def gen_low_rank_plus_noise(m: int, n: int, f: int, noise_scale: float = 0.0,
                            seed: int = 0) -> np.ndarray:
    """Rank-f matrix with unit-scale singular values ``1..1/f`` plus Gaussian noise."""
    if not 1 <= f <= min(m, n):
        raise SynthError(f"rank {f} outside [1, {min(m, n)}]")
    rng = np.random.default_rng(seed)
    u = random_orthogonal(m, f, rng)
    v = random_orthogonal(n, f, rng)
    sig = 1.0 / np.arange(1, f + 1)
    x = (u * sig) @ v.T
    if noise_scale:
        x = x + noise_scale * rng.standard_normal((m, n))
    return x


def gen_pca_fixture(m: int = 1000, n: int = 32, seed: int = 0, ratio: float = 0.8,
                    offset: float = 5.0) -> np.ndarray:
    """Rows with a nonzero mean around a centred part of geometric spectrum.

    The centred part has singular values ``10 * sqrt(m) * ratio**i`` and
    exactly zero column sums, so the column mean of the result is a known
    random vector of scale ``offset``.
    """
    rng = np.random.default_rng(seed)
    # Orthonormal columns orthogonal to the all-ones vector give zero column sums.
    g = rng.standard_normal((m, n))
    g -= g.mean(axis=0)
    u = qr_econ(g)[0]
    v = random_orthogonal(n, n, rng)
    sig = 10.0 * np.sqrt(m) * ratio ** np.arange(n)
    mean = offset * (1.0 + rng.random(n))
    return (u * sig) @ v.T + mean


def write_fixture(path, x, dtype: str = "f64") -> None:
    write_binary(path, x, dtype)
