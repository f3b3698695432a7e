import math

import numpy as np
import pytest

from rangenet.matcore import SIGMA_ZERO, qr_econ, truncated_svd_oracle
from rangenet.optim import AdaMaxState, adamax_step
from rangenet.solver import (
    SolverError,
    Stage1Config,
    Stage2Config,
    decompose,
    extract_factors,
    load_checkpoint,
    offdiag_ratio,
    stage1_grad,
    stage1_loss,
    stage2_grad,
    stage2_loss,
    train_stage1,
    train_stage2,
)
from rangenet.stream import MemorySource

from conftest import orth_res


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestStage1Loss:
    def test_minimiser_value(self, diag51):
        assert stage1_loss(diag51, np.array([[1.0], [0.0]])) == pytest.approx(1.0, abs=1e-15)

    def test_other_critical_point(self, diag51):
        assert stage1_loss(diag51, np.array([[0.0], [1.0]])) == pytest.approx(25.0)

    def test_oracle_plug_in(self, rng):
        x = rng.standard_normal((20, 10))
        f = truncated_svd_oracle(x, 4)
        tail = np.linalg.norm(x - f.reconstruct())
        assert stage1_loss(x, f.v, 0.0) == pytest.approx(tail ** 2, rel=1e-10)

    def test_nonfinite(self):
        with pytest.raises(SolverError):
            stage1_loss(np.array([[np.inf, 0.0]]), np.ones((2, 1)))

    def test_shape_check(self):
        with pytest.raises(SolverError):
            stage1_loss(np.ones((2, 3)), np.ones((2, 1)))


class TestStage1Grad:
    def test_stationary_at_top_subspace(self, rng):
        x = rng.standard_normal((30, 8))
        v = truncated_svd_oracle(x, 3).v
        g = stage1_grad(x, v)
        assert np.linalg.norm(g) <= 1e-8 * np.linalg.norm(x.T @ x)

    def test_finite_differences(self, rng):
        b = rng.standard_normal((8, 6))
        v = rng.standard_normal((6, 3)) * 0.5
        g = stage1_grad(b, v, 0.7)
        num = fd_grad(lambda w: stage1_loss(b, w, 0.7), v)
        assert np.max(np.abs(g - num)) / np.max(np.abs(num)) <= 1e-6

    def test_zero_batch(self, rng):
        v = rng.standard_normal((5, 2))
        lam = 0.3
        expect = (4 * lam) * (v @ (v.T @ v - np.eye(2)))
        np.testing.assert_array_equal(stage1_grad(np.zeros((4, 5)), v, lam), expect)


class TestStage2Loss:
    def test_orthogonal_columns(self, rng):
        q, _ = qr_econ(rng.standard_normal((10, 3)))
        a = q * [3.0, 2.0, 1.0]
        assert stage2_loss(a, np.eye(3)) == pytest.approx(0.0, abs=1e-24)

    def test_identity_theta_gives_offdiag(self, rng):
        a = rng.standard_normal((10, 3))
        g = a.T @ a
        off = g - np.diag(np.diag(g))
        assert stage2_loss(a, np.eye(3), 2.0) == pytest.approx(2.0 * np.sum(off ** 2), rel=1e-14)

    def test_oracle_rotation(self, rng):
        x = rng.standard_normal((20, 10))
        f = truncated_svd_oracle(x, 4)
        q, _ = qr_econ(rng.standard_normal((4, 4)))
        v_star = f.v @ q
        theta = v_star.T @ f.v
        a = x @ v_star
        assert stage2_loss(a, theta) <= 1e-10 * np.sum((a.T @ a) ** 2)


class TestStage2Grad:
    def test_stationary(self, rng):
        x = rng.standard_normal((20, 10))
        f = truncated_svd_oracle(x, 4)
        q, _ = qr_econ(rng.standard_normal((4, 4)))
        a = x @ (f.v @ q)
        g = stage2_grad(a, q.T)
        assert np.linalg.norm(g) <= 1e-8 * np.linalg.norm(a.T @ a) ** 2

    def test_finite_differences(self, rng):
        a = rng.standard_normal((12, 4))
        th = rng.standard_normal((4, 4)) * 0.5
        g = stage2_grad(a, th, 0.8)
        num = fd_grad(lambda t: stage2_loss(a, t, 0.8), th)
        assert np.max(np.abs(g - num)) / np.max(np.abs(num)) <= 1e-6

    def test_isotropic_gram(self, rng):
        q, _ = qr_econ(rng.standard_normal((9, 3)))
        a = 2.0 * q  # A^T A = 4 I
        th, _ = qr_econ(rng.standard_normal((3, 3)))
        np.testing.assert_allclose(stage2_grad(a, th, 1.0), 0.0, atol=1e-12)


class TestTrainStage1:
    def test_rank5_orthonormal_past_true_rank(self, rank5_15):
        v, rep = train_stage1(MemorySource(rank5_15, 64), 10)
        assert orth_res(v) <= 1e-6
        assert rep.converged

    def test_diag51_equal_minima(self, diag51):
        for seed in range(10):
            v, rep = train_stage1(MemorySource(diag51, 2), 1, Stage1Config(seed=seed))
            assert stage1_loss(diag51, v, 0.0) == pytest.approx(1.0, abs=1e-8)

    def test_report_fields(self, rng):
        x = rng.standard_normal((40, 8))
        v, rep = train_stage1(MemorySource(x, 16), 3)
        assert rep.passes_used >= 1
        assert len(rep.loss_history) == rep.steps
        assert all(math.isfinite(l) for l in rep.loss_history)
        assert rep.data_passes > rep.passes_used  # 2000 steps each, 3 batches per traversal
        tail = np.linalg.norm(x - truncated_svd_oracle(x, 3).reconstruct())
        assert rep.final_tail_energy == pytest.approx(tail, rel=1e-6)

    def test_exact_traversal_passes(self, rng):
        x = rng.standard_normal((40, 8))
        src = MemorySource(x, 10)
        v, rep = train_stage1(src, 2, Stage1Config(steps_per_pass=None, max_passes=3))
        assert rep.steps == 3 * 4
        assert not rep.converged  # 12 steps are nowhere near enough
        assert rep.final_orth_residual == pytest.approx(orth_res(v))

    def test_rank_validated(self):
        with pytest.raises(SolverError):
            train_stage1(MemorySource(np.eye(3), 2), 4)

    def test_stochastic_matches_full_batch(self, rng):
        x = rng.standard_normal((200, 12)) * np.linspace(4, 1, 12)
        tail = np.linalg.norm(x - truncated_svd_oracle(x, 3).reconstruct())
        _, full = train_stage1(MemorySource(x, 200), 3)
        _, mini = train_stage1(MemorySource(x, 20), 3)
        assert full.final_tail_energy == pytest.approx(tail, rel=1e-6)
        assert mini.final_tail_energy == pytest.approx(full.final_tail_energy, rel=1e-6)

    def test_shuffled_matches_sequential(self, rng):
        x = rng.standard_normal((120, 10)) * np.linspace(4, 1, 10)
        _, a = train_stage1(MemorySource(x, 16), 3)
        _, b = train_stage1(MemorySource(x, 16, "shuffled", seed=9), 3)
        assert a.final_tail_energy == pytest.approx(b.final_tail_energy, rel=1e-6)

    def test_f32(self, rng):
        x = rng.standard_normal((60, 10)) * np.linspace(4, 1, 10)
        v, rep = train_stage1(MemorySource(x, 60), 3, Stage1Config(precision="f32"))
        assert v.dtype == np.float32
        tail = np.linalg.norm(x - truncated_svd_oracle(x, 3).reconstruct())
        assert rep.final_tail_energy == pytest.approx(tail, rel=1e-4)


def test_eym_bound_is_a_floor(rng):
    x = rng.standard_normal((30, 10))
    r = 3
    bound = np.linalg.norm(x - truncated_svd_oracle(x, r).reconstruct()) ** 2
    v, rep = train_stage1(MemorySource(x, 30), r)
    assert stage1_loss(x, v, 0.0) >= bound * (1 - 1e-12)
    assert stage1_loss(x, v, 0.0) == pytest.approx(bound, rel=1e-9)
    for _ in range(100):
        q, _ = qr_econ(rng.standard_normal((10, r)))
        assert stage1_loss(x, q, 0.0) > bound


def test_checkpoint_resume_matches_uninterrupted(tmp_path, rng):
    x = rng.standard_normal((32, 6)) * np.linspace(3, 1, 6)
    ck = tmp_path / "run.rnck"
    base = dict(steps_per_pass=400, max_passes=4, loss_tol=1e-30, lr_decay=1.0)
    full, _ = train_stage1(MemorySource(x, 8), 2, Stage1Config(**base))
    train_stage1(MemorySource(x, 8), 2, Stage1Config(checkpoint=str(ck), **{**base, "max_passes": 2}))
    saved = load_checkpoint(ck)
    assert saved.passes_done == 2 and saved.step == 800
    resumed, rep = train_stage1(MemorySource(x, 8), 2, Stage1Config(checkpoint=str(ck), **base))
    assert rep.passes_used == 4
    np.testing.assert_allclose(resumed, full, rtol=0, atol=1e-12)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.rnck"
    p.write_bytes(b"nope")
    with pytest.raises(SolverError):
        load_checkpoint(p)


class TestTrainStage2:
    def test_rank1_trivial(self, rng):
        x = rng.standard_normal((10, 4))
        v = truncated_svd_oracle(x, 1).v
        th, rep = train_stage2(MemorySource(x, 5), v)
        assert th.shape == (1, 1) and abs(th[0, 0]) == 1.0
        assert rep.converged

    def test_aligned_start_is_signed_permutation(self, rng):
        x = rng.standard_normal((30, 8))
        v = truncated_svd_oracle(x, 4).v
        th, rep = train_stage2(MemorySource(x, 8), v)
        assert rep.converged
        p = np.abs(th)
        np.testing.assert_allclose(np.sort(p, axis=1)[:, -1], 1.0, atol=1e-6)
        assert offdiag_ratio((x @ v @ th).T @ (x @ v @ th)) <= 1e-8

    def test_streamed_gram_source(self, rng):
        x = rng.standard_normal((40, 6))
        v = truncated_svd_oracle(x, 3).v @ qr_econ(rng.standard_normal((3, 3)))[0]
        th, rep = train_stage2(MemorySource(x, 40), v, Stage2Config(source="stream"))
        assert rep.final_orth_residual <= 1e-6
        assert rep.final_diag_residual <= 1e-6

    def test_sigma_matches_oracle(self, rng):
        x = rng.standard_normal((20, 10))
        res = decompose(MemorySource(x, 20), 4)
        np.testing.assert_allclose(res.factors.sigma, truncated_svd_oracle(x, 4).sigma, rtol=1e-6)

    def test_unknown_source(self, rng):
        x = rng.standard_normal((10, 4))
        with pytest.raises(SolverError):
            train_stage2(MemorySource(x, 5), np.eye(4)[:, :2], Stage2Config(source="disk"))


class TestExtract:
    def test_diag51(self, diag51):
        f = extract_factors(MemorySource(diag51, 1), np.eye(2), np.eye(2))
        np.testing.assert_allclose(f.sigma, [5.0, 1.0])
        np.testing.assert_allclose(f.v, np.eye(2))

    def test_reorders_and_signs(self, diag51):
        f = extract_factors(MemorySource(diag51, 2), np.eye(2), np.array([[0.0, -1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(f.sigma, [5.0, 1.0])
        np.testing.assert_allclose(f.v, np.eye(2), atol=1e-15)

    def test_rank5_zero_columns(self, rank5_15):
        res = decompose(MemorySource(rank5_15, 64), 10)
        f = res.factors
        assert np.all(f.sigma[5:] <= 1e-6)
        np.testing.assert_array_equal(f.u[:, f.sigma <= SIGMA_ZERO], 0.0)
        assert orth_res(f.v) <= 1e-6

    def test_reconstruction_matches_oracle(self, rng):
        x = rng.standard_normal((30, 12))
        res = decompose(MemorySource(x, 30), 6)
        f = res.factors
        o = truncated_svd_oracle(x, 6)
        assert orth_res(f.u) <= 1e-6
        xr = o.reconstruct()
        assert np.linalg.norm(f.reconstruct() - xr) <= 1e-6 * np.linalg.norm(xr)
        assert res.parameter_count == 6 * (12 + 6)


def _tanh_loss_grad(x, v, lam):
    t = np.tanh(x @ v)
    r = x - t @ v.T
    e = v.T @ v - np.eye(v.shape[1])
    loss = float(np.sum(r * r)) + lam * float(np.sum(e * e))
    grad = -2 * r.T @ t - 2 * x.T @ ((r @ v) * (1 - t * t)) + 4 * lam * v @ e
    return loss, grad


def test_tanh_activation_misses_bound(diag51):
    """With a saturating activation Stage 1 cannot reach the rank-1 bound of 1."""
    lam = 1.0
    v0 = np.array([[0.6], [0.1]])
    h = 1e-6
    num = np.zeros_like(v0)
    for i in range(2):
        e = np.zeros_like(v0)
        e[i] = h
        num[i] = (_tanh_loss_grad(diag51, v0 + e, lam)[0] - _tanh_loss_grad(diag51, v0 - e, lam)[0]) / (2 * h)
    np.testing.assert_allclose(_tanh_loss_grad(diag51, v0, lam)[1], num, rtol=1e-6)

    best = math.inf
    for seed in range(5):
        rng = np.random.default_rng(seed)
        v = rng.uniform(-1 / math.sqrt(2), 1 / math.sqrt(2), (2, 1))
        st = AdaMaxState(lr=1e-2, beta1=0.9)
        for k in range(20000):
            _, g = _tanh_loss_grad(diag51, v, lam)
            adamax_step(st, v, g)
            if k % 5000 == 4999:
                st.lr *= 0.3
        t = np.tanh(diag51 @ v)
        best = min(best, float(np.sum((diag51 - t @ v.T) ** 2)))
    assert best > 1.0 + 1e-2
