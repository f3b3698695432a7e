"""Two-stage streaming SVD: subspace projection, rotation, factor extraction.

Stage 1 learns ``V~`` (n x r) minimising ``||B - B V~ V~^T||_F^2`` summed over
streamed row batches ``B``, plus ``lambda_orth * ||V~^T V~ - I||_F^2`` per
batch.  Stage 2 learns an r x r rotation ``theta`` that diagonalises the Gram
matrix of ``A = X V*``.  Factors are then read off in one more pass.

Losses are squared Frobenius norms; convergence is reported in unsquared
units (tail energy).
"""

from __future__ import annotations

import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .matcore import SIGMA_ZERO, SvdFactors, apply_sign_convention, qr_econ
from .optim import AdaMaxState, adamax_step
from .stream import BatchSource, CenteredSource, compute_mean_pass


class SolverError(RuntimeError):
    pass


_DTYPES = {"f64": np.float64, "f32": np.float32}


def _default_loss_tol(precision: str) -> float:
    return 1e-9 if precision == "f64" else 1e-6


# --------------------------------------------------------------------------
# Losses and gradients
# --------------------------------------------------------------------------

def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise SolverError("non-finite input")


def stage1_data_loss(batch: np.ndarray, v: np.ndarray) -> float:
    resid = batch - (batch @ v) @ v.T
    return float(np.sum(resid * resid))


def stage1_loss(batch, v, lambda_orth: float = 1.0) -> float:
    batch = np.asarray(batch)
    v = np.asarray(v)
    if batch.shape[1] != v.shape[0]:
        raise SolverError(f"batch {batch.shape} and v {v.shape} are not conformable")
    _check_finite(batch, v)
    e = v.T @ v - np.eye(v.shape[1], dtype=v.dtype)
    return stage1_data_loss(batch, v) + lambda_orth * float(np.sum(e * e))


def stage1_grad(batch, v, lambda_orth: float = 1.0) -> np.ndarray:
    batch = np.asarray(batch)
    v = np.asarray(v)
    if batch.shape[1] != v.shape[0]:
        raise SolverError(f"batch {batch.shape} and v {v.shape} are not conformable")
    return _stage1_loss_grad(batch, v, lambda_orth)[2]


def _stage1_loss_grad(batch, v, lam):
    bv = batch @ v
    gv = batch.T @ bv
    vtv = v.T @ v
    e = vtv - np.eye(v.shape[1], dtype=v.dtype)
    resid = batch - bv @ v.T
    data = float(np.sum(resid * resid))
    grad = -4.0 * gv + 2.0 * gv @ vtv + 2.0 * v @ (v.T @ gv) + (4.0 * lam) * (v @ e)
    return data, data + lam * float(np.sum(e * e)), grad


def stage2_loss_gram(gram, theta, lambda_diag: float = 1.0) -> float:
    """Stage-2 loss written in terms of ``M = A^T A`` only."""
    r = theta.shape[0]
    c = theta @ theta.T - np.eye(r, dtype=theta.dtype)
    p = theta.T @ gram @ theta
    off = p - np.diag(np.diag(p))
    return float(np.trace(c @ gram @ c)) + lambda_diag * float(np.sum(off * off))


def stage2_grad_gram(gram, theta, lambda_diag: float = 1.0) -> np.ndarray:
    r = theta.shape[0]
    c = theta @ theta.T - np.eye(r, dtype=theta.dtype)
    mt = gram @ theta
    p = theta.T @ mt
    off = p - np.diag(np.diag(p))
    return 2.0 * (gram @ c + c @ gram) @ theta + (4.0 * lambda_diag) * (mt @ off)


def _stage2_loss_grad(gram, theta, lam):
    r = theta.shape[0]
    c = theta @ theta.T - np.eye(r, dtype=theta.dtype)
    mc = gram @ c
    mt = gram @ theta
    p = theta.T @ mt
    off = p - np.diag(np.diag(p))
    loss = float(np.sum(c * mc)) + lam * float(np.sum(off * off))
    return loss, 2.0 * (mc + mc.T) @ theta + (4.0 * lam) * (mt @ off)


def stage2_loss(a_batch, theta, lambda_diag: float = 1.0) -> float:
    a_batch = np.asarray(a_batch)
    theta = np.asarray(theta)
    if a_batch.shape[1] != theta.shape[0] or theta.shape[0] != theta.shape[1]:
        raise SolverError(f"a_batch {a_batch.shape} and theta {theta.shape} are not conformable")
    _check_finite(a_batch, theta)
    y = a_batch @ theta
    fit = y @ theta.T - a_batch
    g = y.T @ y
    off = g - np.diag(np.diag(g))
    return float(np.sum(fit * fit)) + lambda_diag * float(np.sum(off * off))


def stage2_grad(a_batch, theta, lambda_diag: float = 1.0) -> np.ndarray:
    a_batch = np.asarray(a_batch)
    if a_batch.shape[1] != theta.shape[0]:
        raise SolverError(f"a_batch {a_batch.shape} and theta {theta.shape} are not conformable")
    return stage2_grad_gram(a_batch.T @ a_batch, theta, lambda_diag)


def offdiag_ratio(gram: np.ndarray) -> float:
    """``||offdiag(G)||_F / ||diag(G)||_F`` (0 for a zero matrix)."""
    d = np.diag(gram)
    nd = float(np.linalg.norm(d))
    if nd == 0.0:
        return 0.0
    return float(np.linalg.norm(gram - np.diag(d))) / nd


def orth_residual(w: np.ndarray) -> float:
    return float(np.linalg.norm(w.T @ w - np.eye(w.shape[1])))


# --------------------------------------------------------------------------
# Models, configuration, reports
# --------------------------------------------------------------------------

@dataclass
class Stage1Model:
    v_tilde: np.ndarray
    lambda_orth: float
    opt: AdaMaxState

    @classmethod
    def init(cls, n: int, r: int, lambda_orth: float, opt: AdaMaxState, rng, dtype=np.float64):
        bound = 1.0 / math.sqrt(n)
        v = rng.uniform(-bound, bound, size=(n, r)).astype(dtype)
        return cls(v, lambda_orth, opt)


@dataclass
class Stage2Model:
    theta: np.ndarray
    lambda_diag: float
    opt: AdaMaxState

    @classmethod
    def init(cls, r: int, lambda_diag: float, opt: AdaMaxState, rng, dtype=np.float64):
        bound = 1.0 / math.sqrt(r)
        q, _ = qr_econ(rng.uniform(-bound, bound, size=(r, r)))
        return cls(q.astype(dtype), lambda_diag, opt)


def parameter_count(stage1: Stage1Model, stage2: Stage2Model) -> int:
    """Trainable scalars held by the two layers: ``r (n + r)``."""
    return int(stage1.v_tilde.size + stage2.theta.size)


@dataclass
class Stage1Config:
    lr: float = 1e-2
    beta1: float = 0.99
    beta2: float = 0.999
    lambda_orth: float = 1.0
    max_passes: int = 5
    # Optimiser steps per pass; None means one exact traversal of the rows.
    steps_per_pass: int | None = 2000
    # lr is multiplied by lr_decay after any pass whose relative loss change
    # falls below plateau_tol.
    lr_decay: float = 0.1
    plateau_tol: float = 1e-2
    loss_tol: float | None = None
    orth_tol: float = 1e-6
    seed: int = 42
    precision: str = "f64"
    checkpoint: str | None = None


@dataclass
class Stage2Config:
    lr: float = 1e-2
    beta1: float = 0.99
    beta2: float = 0.999
    lambda_diag: float = 1.0
    max_passes: int = 20
    steps_per_pass: int | None = 5000
    # AdaMax settles at a residual proportional to lr, so lr is halved after
    # every pass; tolerances are checked every few hundred steps.
    lr_decay: float = 0.5
    orth_tol: float = 1e-8
    diag_tol: float = 1e-8
    # "gram": accumulate A^T A in one pass and optimise on it exactly.
    # "stream": one optimiser step per streamed A-batch.
    source: str = "gram"
    null_shift: float = 1e-3
    seed: int = 42
    precision: str = "f64"


@dataclass
class TrainReport:
    passes_used: int = 0
    loss_history: list = field(default_factory=list)
    pass_losses: list = field(default_factory=list)
    final_tail_energy: float = float("nan")
    final_orth_residual: float = float("nan")
    final_diag_residual: float = float("nan")
    final_det: float = float("nan")
    converged: bool = False
    data_passes: float = 0.0
    steps: int = 0
    final_lr: float = float("nan")
    wall_time: float = 0.0

    def summary(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "loss_history"}
        out["loss_history_len"] = len(self.loss_history)
        return out


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CK_MAGIC = b"RNCK"
CK_VERSION = 1
_CK_HEAD = struct.Struct("<4sIQQBIdQd")


@dataclass
class Checkpoint:
    """Resumable Stage-1 state: weights, AdaMax buffers and pass counter."""

    v: np.ndarray
    m: np.ndarray
    u: np.ndarray
    step: int
    lr: float
    passes_done: int
    prev_loss: float
    theta: np.ndarray | None = None
    stage: int = 1


def save_checkpoint(path, ck: Checkpoint) -> None:
    n, r = ck.v.shape
    theta = ck.theta if ck.theta is not None else np.zeros((r, r))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CK_HEAD.pack(CK_MAGIC, CK_VERSION, r, n, ck.stage, ck.passes_done,
                               ck.lr, ck.step, ck.prev_loss))
        for a in (ck.v, ck.m, ck.u, theta):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read(_CK_HEAD.size)
        if len(raw) != _CK_HEAD.size:
            raise SolverError(f"{path}: truncated checkpoint header")
        magic, version, r, n, stage, passes, lr, step, prev = _CK_HEAD.unpack(raw)
        if magic != CK_MAGIC or version != CK_VERSION:
            raise SolverError(f"{path}: not a version-{CK_VERSION} checkpoint")
        body = np.frombuffer(fh.read(), dtype="<f8")
    if body.size != 3 * n * r + r * r:
        raise SolverError(f"{path}: checkpoint payload has the wrong size")
    v, m, u = (body[i * n * r:(i + 1) * n * r].reshape(n, r).copy() for i in range(3))
    theta = body[3 * n * r:].reshape(r, r).copy()
    return Checkpoint(v, m, u, int(step), float(lr), int(passes), float(prev),
                      theta if stage > 1 else None, int(stage))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def tail_energy_pass(src: BatchSource, v: np.ndarray) -> float:
    """``||X - X v v^T||_F`` from one streaming pass."""
    total = 0.0
    for _, batch in src.iter_pass():
        total += stage1_data_loss(batch.astype(v.dtype, copy=False), v)
    return math.sqrt(total)


def train_stage1(src: BatchSource, r: int, cfg: Stage1Config | None = None,
                 v0: np.ndarray | None = None):
    """Learn an orthonormal basis of the top-r right singular subspace.

    Returns ``(v_star, report)``.  Each pass runs ``cfg.steps_per_pass``
    AdaMax steps on consecutive batches of the (wrapping) stream.  When the
    pass budget runs out before convergence the lowest-loss end-of-pass
    iterate is returned with ``report.converged = False``.
    """
    cfg = cfg or Stage1Config()
    t0 = time.perf_counter()
    m_rows, n = src.shape
    if not 1 <= r <= n:
        raise SolverError(f"rank {r} outside [1, {n}]")
    dtype = _DTYPES[cfg.precision]
    loss_tol = cfg.loss_tol if cfg.loss_tol is not None else _default_loss_tol(cfg.precision)
    rng = np.random.default_rng(cfg.seed)
    opt = AdaMaxState(cfg.lr, cfg.beta1, cfg.beta2)
    model = Stage1Model.init(n, r, cfg.lambda_orth, opt, rng, dtype)
    if v0 is not None:
        model.v_tilde = np.array(v0, dtype=dtype)
    start_pass, prev = 0, None
    if cfg.checkpoint and os.path.exists(cfg.checkpoint):
        ck = load_checkpoint(cfg.checkpoint)
        if ck.v.shape != (n, r):
            raise SolverError("checkpoint shape does not match this problem")
        model.v_tilde = ck.v.astype(dtype)
        opt.m, opt.u, opt.step, opt.lr = ck.m.astype(dtype), ck.u.astype(dtype), ck.step, ck.lr
        start_pass = ck.passes_done
        prev = ck.prev_loss if math.isfinite(ck.prev_loss) else None

    v = model.v_tilde
    lam = cfg.lambda_orth
    steps = cfg.steps_per_pass or src.batches_per_pass
    rows_before = src.rows_delivered
    src.reset()
    batches = src.cycle()
    report = TrainReport()
    energy = None
    best_loss, best_v = math.inf, v.copy()
    for p in range(start_pass, cfg.max_passes):
        total = 0.0
        batch_energy = 0.0
        for _ in range(steps):
            batch = next(batches).astype(dtype, copy=False)
            _, loss, grad = _stage1_loss_grad(batch, v, lam)
            if not math.isfinite(loss):
                raise SolverError("stage-1 loss became non-finite")
            report.loss_history.append(loss)
            total += loss
            if energy is None:
                batch_energy += float(np.sum(batch * batch))
            adamax_step(opt, v, grad)
        avg = total / steps
        if energy is None:
            energy = batch_energy / steps
        report.pass_losses.append(avg)
        report.passes_used = p + 1
        if avg < best_loss:
            best_loss, best_v = avg, v.copy()
        orth_ok = lam == 0.0 or orth_residual(v) <= cfg.orth_tol
        # A loss at rounding level of the data energy cannot improve further
        # (r >= rank(X)); relative change is meaningless there.
        if avg <= np.finfo(dtype).eps * energy and orth_ok:
            report.converged = True
        elif prev is not None:
            rel = abs(avg - prev) / max(prev, 1e-12 * energy, np.finfo(float).tiny)
            if rel < loss_tol and orth_ok:
                report.converged = True
            elif (prev - avg) / max(prev, np.finfo(float).tiny) < cfg.plateau_tol:
                opt.lr *= cfg.lr_decay
        prev = avg
        if cfg.checkpoint:
            save_checkpoint(cfg.checkpoint, Checkpoint(v, opt.m, opt.u, opt.step, opt.lr,
                                                       p + 1, prev))
        if report.converged:
            break
    v_star = v if report.converged else best_v
    report.final_tail_energy = tail_energy_pass(src, v_star)
    report.final_orth_residual = orth_residual(v_star)
    report.data_passes = (src.rows_delivered - rows_before) / m_rows
    report.steps = opt.step
    report.final_lr = opt.lr
    report.wall_time = time.perf_counter() - t0
    return v_star, report


def accumulate_projected_gram(src: BatchSource, w: np.ndarray) -> np.ndarray:
    """``(X w)^T (X w)`` from one streaming pass."""
    r = w.shape[1]
    gram = np.zeros((r, r), dtype=w.dtype)
    for _, batch in src.iter_pass():
        a = batch.astype(w.dtype, copy=False) @ w
        gram += a.T @ a
    return gram


# Stage 2 checks its tolerances this often within a pass.
_S2_CHECK_EVERY = 250


def train_stage2(src: BatchSource, v_star: np.ndarray, cfg: Stage2Config | None = None):
    """Learn the rotation ``theta`` aligning ``v_star`` with the singular vectors.

    Batches of ``X`` are projected on the fly (``A_b = B v_star``).  The Gram
    matrix is divided by its mean eigenvalue before optimisation; this leaves
    the minimiser unchanged and makes the loss weights scale-free.
    """
    cfg = cfg or Stage2Config()
    t0 = time.perf_counter()
    dtype = _DTYPES[cfg.precision]
    v_star = np.asarray(v_star, dtype=dtype)
    r = v_star.shape[1]
    report = TrainReport()
    rows_before = src.rows_delivered
    if r == 1:
        theta = np.ones((1, 1), dtype=dtype)
        report.converged = True
        report.final_orth_residual = 0.0
        report.final_diag_residual = 0.0
        report.final_det = 1.0
        report.wall_time = time.perf_counter() - t0
        return theta, report
    if cfg.source not in ("gram", "stream"):
        raise SolverError(f"unknown stage-2 source {cfg.source!r}")

    gram = accumulate_projected_gram(src, v_star)
    scale = float(np.trace(gram)) / r
    rng = np.random.default_rng(cfg.seed)
    opt = AdaMaxState(cfg.lr, cfg.beta1, cfg.beta2)
    model = Stage2Model.init(r, cfg.lambda_diag, opt, rng, dtype)
    theta = model.theta
    if scale == 0.0:
        theta = np.eye(r, dtype=dtype)
        report.converged = True
    gram_n = gram / scale if scale > 0 else gram
    # The loss never sees theta on null directions of X v_star (r > rank X).
    # A small identity shift pins those directions to orthonormality and
    # leaves every orthogonal diagonaliser of the Gram a minimiser.
    shift = cfg.null_shift * np.eye(r, dtype=dtype)
    gram_n = gram_n + shift
    inv_sqrt = 1.0 / math.sqrt(scale) if scale > 0 else 0.0
    lam = cfg.lambda_diag
    steps = cfg.steps_per_pass or src.batches_per_pass
    batches = None
    if cfg.source == "stream":
        src.reset()
        batches = src.cycle()

    def self_check(th):
        return (orth_residual(th) <= cfg.orth_tol
                and offdiag_ratio(th.T @ gram_n @ th) <= cfg.diag_tol)

    for p in range(cfg.max_passes if not report.converged else 0):
        total = 0.0
        done = 0
        for _ in range(steps):
            if batches is None:
                g_m = gram_n
            else:
                a = (next(batches).astype(dtype, copy=False) @ v_star) * inv_sqrt
                g_m = a.T @ a + shift / src.batches_per_pass
            loss, grad = _stage2_loss_grad(g_m, theta, lam)
            if not math.isfinite(loss):
                raise SolverError("stage-2 loss became non-finite")
            report.loss_history.append(loss)
            total += loss
            adamax_step(opt, theta, grad)
            done += 1
            if done % _S2_CHECK_EVERY == 0 and self_check(theta):
                report.converged = True
                break
        report.pass_losses.append(total / done)
        report.passes_used = p + 1
        if report.converged or self_check(theta):
            report.converged = True
            break
        opt.lr *= cfg.lr_decay

    report.final_orth_residual = orth_residual(theta)
    report.final_det = float(np.linalg.det(theta))
    report.final_diag_residual = offdiag_ratio(theta.T @ (gram_n - shift) @ theta) if scale > 0 else 0.0
    report.data_passes = (src.rows_delivered - rows_before) / src.shape[0]
    report.steps = opt.step
    report.final_lr = opt.lr
    report.wall_time = time.perf_counter() - t0
    return theta, report


def extract_factors(src: BatchSource, v_star: np.ndarray, theta: np.ndarray) -> SvdFactors:
    """Read ``U, Sigma, V`` off the trained layers in one streaming pass.

    ``V`` is ``v_star @ theta`` with unit columns and ``sigma_i = ||X v_i||``
    from the accumulated r x r Gram of ``X V``.  ``U = X V Sigma^-1``, where
    only singular values above ``1e-8`` are inverted and the remaining ``U``
    columns are zero.
    """
    w = np.asarray(v_star, dtype=float) @ np.asarray(theta, dtype=float)
    norms = np.linalg.norm(w, axis=0)
    if np.any(norms == 0.0):
        raise SolverError("v_star @ theta has a zero column")
    w = w / norms
    m, r = src.shape[0], w.shape[1]
    y = np.zeros((m, r))
    gram = np.zeros((r, r))
    for start, batch in src.iter_pass():
        a = batch @ w
        y[start:start + a.shape[0]] = a
        gram += a.T @ a
    d = np.diag(gram).copy()
    if np.any(d < -1e-10):
        raise SolverError("negative Gram diagonal: numerical failure")
    sigma = np.sqrt(np.clip(d, 0.0, None))
    order = np.argsort(-sigma, kind="stable")
    sigma, w, y = sigma[order], w[:, order], y[:, order]
    u = np.zeros_like(y)
    keep = sigma > SIGMA_ZERO
    u[:, keep] = y[:, keep] / sigma[keep]
    u, v = apply_sign_convention(u, w)
    return SvdFactors(u, sigma, v)


@dataclass
class DecomposeResult:
    factors: SvdFactors
    v_star: np.ndarray
    theta: np.ndarray
    stage1: TrainReport
    stage2: TrainReport
    mean: np.ndarray | None
    parameter_count: int
    wall_time: float

    @property
    def converged(self) -> bool:
        return self.stage1.converged and self.stage2.converged


def decompose(src: BatchSource, r: int, stage1: Stage1Config | None = None,
              stage2: Stage2Config | None = None, center: bool = False) -> DecomposeResult:
    """Stage 1, Stage 2 and factor extraction over one batch source.

    With ``center`` a first pass computes the column mean and every later
    batch is mean-corrected (PCA mode: ``sigma**2`` are covariance
    eigenvalues of the centred data, unnormalised).
    """
    t0 = time.perf_counter()
    mean = None
    if center:
        state = compute_mean_pass(src)
        mean = state.mean
        src = CenteredSource(src, state)
    v_star, rep1 = train_stage1(src, r, stage1)
    theta, rep2 = train_stage2(src, v_star, stage2)
    factors = extract_factors(src, v_star, theta)
    count = int(v_star.size + theta.size)
    return DecomposeResult(factors, v_star, theta, rep1, rep2, mean, count,
                           time.perf_counter() - t0)
