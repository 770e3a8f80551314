import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajlab.sampler import (NoiseStream, SamplerConfig, TrajectoryTensor,
                             branch_step_count, d_ddpm_step, ddim_sigma,
                             ddim_step, ddim_subsequence, ddpm_step,
                             forward_noise, sample_standard, total_evals,
                             tree_sample)
from trajlab.schedule import NoiseSchedule, make_linear_schedule

T_F = 12


def traj(value: float, k: int) -> TrajectoryTensor:
    return TrajectoryTensor(np.full((T_F, 2), value), k)


def schedule_with(alpha_k: float, abar_k: float) -> NoiseSchedule:
    """Two-step schedule with alpha_2 = alpha_k and abar_2 = abar_k."""
    abar_prev = abar_k / alpha_k
    return NoiseSchedule(np.array([1.0 - abar_prev, 1.0 - alpha_k]))


class TestForwardNoise:
    def test_zero_noise(self):
        s = make_linear_schedule(10)
        y0 = traj(1.0, 0)
        out = forward_noise(y0, 5, np.zeros((T_F, 2)), s)
        assert np.allclose(out.values, np.sqrt(s.alpha_bar(5)))
        assert out.step_index == 5

    def test_direct_arithmetic(self):
        # abar_k = 0.9, eps = 0.5 everywhere: sqrt(0.9) + sqrt(0.1)*0.5
        s = schedule_with(0.99, 0.9)
        out = forward_noise(traj(1.0, 0), 2, np.full((T_F, 2), 0.5), s)
        expected = np.sqrt(0.9) + np.sqrt(0.1) * 0.5
        assert np.allclose(out.values, expected)
        assert expected == pytest.approx(1.106797, abs=1e-6)

    def test_shape_mismatch(self):
        s = make_linear_schedule(10)
        with pytest.raises(ValueError):
            forward_noise(traj(1.0, 0), 5, np.zeros((3, 2)), s)

    def test_out_of_range_k(self):
        s = make_linear_schedule(10)
        with pytest.raises(ValueError):
            forward_noise(traj(1.0, 0), 11, np.zeros((T_F, 2)), s)


class TestDDPMSteps:
    def test_d_ddpm_scalar_case(self):
        # alpha_k = 0.99, abar_k = 0.9, eps_pred = 0.5 -> 0.989147
        s = schedule_with(0.99, 0.9)
        with mpmath.workdps(40):
            a, ab, e = mpmath.mpf("0.99"), mpmath.mpf("0.9"), mpmath.mpf("0.5")
            expected = float((1 / mpmath.sqrt(a)) * (1 - (1 - a) / mpmath.sqrt(1 - ab) * e))
        out = d_ddpm_step(traj(1.0, 2), 2, np.full((T_F, 2), 0.5), s)
        assert np.allclose(out.values, expected)
        assert expected == pytest.approx(0.989147, abs=1e-6)

    def test_d_ddpm_deterministic_bitwise(self):
        s = make_linear_schedule(50)
        rng = np.random.default_rng(0)
        y = TrajectoryTensor(rng.standard_normal((T_F, 2)), 30)
        eps = rng.standard_normal((T_F, 2))
        a = d_ddpm_step(y, 30, eps, s)
        b = d_ddpm_step(y, 30, eps, s)
        assert np.array_equal(a.values, b.values)

    def test_ddpm_zero_z_equals_d_ddpm(self):
        s = make_linear_schedule(50)
        rng = np.random.default_rng(1)
        y = TrajectoryTensor(rng.standard_normal((T_F, 2)), 20)
        eps = rng.standard_normal((T_F, 2))
        stoch = ddpm_step(y, 20, eps, np.zeros((T_F, 2)), s)
        det = d_ddpm_step(y, 20, eps, s)
        assert np.array_equal(stoch.values, det.values)

    def test_ddpm_mean_plus_sigma(self):
        s = schedule_with(0.99, 0.9)
        z = np.ones((T_F, 2))
        out = ddpm_step(traj(1.0, 2), 2, np.full((T_F, 2), 0.5), z, s)
        beta_tilde = (1.0 - 0.9 / 0.99) / (1.0 - 0.9) * (1.0 - 0.99)
        mean = (1.0 - 0.01 / np.sqrt(0.1) * 0.5) / np.sqrt(0.99)
        assert mean == pytest.approx(0.989147, abs=1e-6)
        assert np.allclose(out.values, mean + np.sqrt(beta_tilde), atol=1e-12)

    def test_ddpm_rejects_noise_at_last_step(self):
        s = make_linear_schedule(10)
        with pytest.raises(ValueError):
            ddpm_step(traj(1.0, 1), 1, np.zeros((T_F, 2)), np.ones((T_F, 2)), s)


class TestDDIM:
    def test_sigma_eta_zero(self):
        s = make_linear_schedule(50)
        for k in range(2, 51):
            assert ddim_sigma(s, k, 0.0) == 0.0

    def test_sigma_direct_arithmetic(self):
        # abar_{k-1} = 0.95, abar_k = 0.9, eta = 1
        s = schedule_with(0.9 / 0.95, 0.9)
        expected = np.sqrt((1 - 0.95) / (1 - 0.9) * (1 - 0.9 / 0.95))
        assert ddim_sigma(s, 2, 1.0) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.162221, abs=1e-5)

    def test_sigma_negative_eta(self):
        s = make_linear_schedule(10)
        with pytest.raises(ValueError):
            ddim_sigma(s, 5, -0.1)

    def test_degenerate_jump_identity(self):
        # abar equal at both ends and sigma 0 -> output equals input
        s = NoiseSchedule(np.array([0.1, 1e-12]))
        y = traj(1.3, 2)
        out = ddim_step(y, 2, 1, np.full((T_F, 2), 0.7), np.zeros((T_F, 2)), 0.0, s)
        assert np.allclose(out.values, y.values, atol=1e-5)

    def test_scalar_jump_oracle(self):
        # abar_hi = 0.9, abar_lo = 0.95, eps = 0.5, eta = 0
        s = schedule_with(0.9 / 0.95, 0.9)
        with mpmath.workdps(40):
            hi, lo, e = mpmath.mpf("0.9"), mpmath.mpf("0.95"), mpmath.mpf("0.5")
            expected = float(mpmath.sqrt(lo / hi) * 1
                             + (mpmath.sqrt(1 - lo) - mpmath.sqrt(lo * (1 - hi) / hi)) * e)
        out = ddim_step(traj(1.0, 2), 2, 1, np.full((T_F, 2), 0.5), np.zeros((T_F, 2)), 0.0, s)
        assert np.allclose(out.values, expected, atol=1e-12)

    def test_eta1_consecutive_matches_ddpm(self):
        s = make_linear_schedule(100)
        rng = np.random.default_rng(3)
        for k in rng.integers(2, 101, size=20):
            y = TrajectoryTensor(rng.standard_normal((T_F, 2)), int(k))
            eps = rng.standard_normal((T_F, 2))
            z = rng.standard_normal((T_F, 2))
            via_ddim = ddim_step(y, int(k), int(k) - 1, eps, z, 1.0, s)
            via_ddpm = ddpm_step(y, int(k), eps, z, s)
            assert np.allclose(via_ddim.values, via_ddpm.values, atol=1e-9)

    def test_rejects_bad_index_order(self):
        s = make_linear_schedule(10)
        with pytest.raises(ValueError):
            ddim_step(traj(1.0, 5), 5, 5, np.zeros((T_F, 2)), np.zeros((T_F, 2)), 0.0, s)


class TestStepCounts:
    def test_reference_config(self):
        assert branch_step_count(100, 20, 20) == 16

    def test_no_trunk(self):
        assert branch_step_count(100, 20, 0) == 20

    def test_floor(self):
        assert branch_step_count(90, 20, 20) == 15

    def test_subsequence_reference_config(self):
        pairs = ddim_subsequence(100, 20, 16)
        assert len(pairs) == 16
        assert pairs[0][0] == 80
        assert pairs[-1][1] == 0
        strides = [hi - lo for hi, lo in pairs]
        assert all(s == 5 for s in strides)

    def test_subsequence_full_resolution(self):
        pairs = ddim_subsequence(100, 0, 100)
        assert pairs == [(k, k - 1) for k in range(100, 0, -1)]

    def test_subsequence_stride_two(self):
        assert ddim_subsequence(10, 0, 5) == [(10, 8), (8, 6), (6, 4), (4, 2), (2, 0)]

    def test_subsequence_rejects_oversized(self):
        with pytest.raises(ValueError):
            ddim_subsequence(10, 5, 6)


class _CountingStub:
    """Deterministic stub denoiser keyed by (k, conditioning id)."""

    def __init__(self, scale=0.1):
        self.count = 0
        self.scale = scale

    def __call__(self, k, y, f):
        self.count += 1
        fid = f if isinstance(f, (int, float)) else 0.0
        return self.scale * (np.sin(k + fid) + 0.1 * y)


class TestTreeSample:
    def test_eval_count_contract(self):
        s = make_linear_schedule(100)
        cfg = SamplerConfig(K=100, K_I=20, K_t=20, N=3, eta=1.0)
        stub = _CountingStub()
        tree_sample(stub, 0.0, [1.0, 2.0, 3.0], cfg, s, NoiseStream(0))
        assert stub.count == 20 + 3 * 16

    def test_kt0_equals_standard_ddim_bitwise(self):
        s = make_linear_schedule(100)
        cfg = SamplerConfig(K=100, K_I=20, K_t=0, N=4, eta=1.0)
        stub = _CountingStub()
        fs = [0.5, 1.5, 2.5, 3.5]
        a = tree_sample(stub, 9.0, fs, cfg, s, NoiseStream(7))
        b = sample_standard(stub, fs, cfg, s, NoiseStream(7), rule="ddim")
        for ta, tb in zip(a, b):
            assert np.array_equal(ta.values, tb.values)

    def test_identical_conditions_eta0_bitwise_equal(self):
        s = make_linear_schedule(100)
        cfg = SamplerConfig(K=100, K_I=20, K_t=20, N=3, eta=0.0)
        out = tree_sample(_CountingStub(), 1.0, [2.0, 2.0, 2.0], cfg, s, NoiseStream(5))
        assert np.array_equal(out[0].values, out[1].values)
        assert np.array_equal(out[1].values, out[2].values)

    def test_branch_permutation_equivariance(self):
        s = make_linear_schedule(100)
        cfg = SamplerConfig(K=100, K_I=20, K_t=20, N=3, eta=1.0)
        fs = [1.0, 2.0, 3.0]
        out = tree_sample(_CountingStub(), 0.0, fs, cfg, s, NoiseStream(3))
        # permuting features permutes outputs only if noise streams were keyed
        # by branch index; instead check determinism of repeated runs and that
        # distinct features give distinct outputs
        again = tree_sample(_CountingStub(), 0.0, fs, cfg, s, NoiseStream(3))
        for ta, tb in zip(out, again):
            assert np.array_equal(ta.values, tb.values)
        assert not np.allclose(out[0].values, out[1].values)

    def test_trunk_output_fully_denoised(self):
        s = make_linear_schedule(50)
        cfg = SamplerConfig(K=50, K_I=10, K_t=10, N=2, eta=1.0, t_f=5)
        out = tree_sample(_CountingStub(), 0.0, [1.0, 2.0], cfg, s, NoiseStream(1))
        assert all(t.step_index == 0 for t in out)
        assert all(t.values.shape == (5, 2) for t in out)


class TestSampleStandard:
    def test_ddpm_eval_count(self):
        s = make_linear_schedule(100)
        cfg = SamplerConfig(K=100, K_I=20, K_t=20, N=20)
        stub = _CountingStub()
        sample_standard(stub, [float(i) for i in range(20)], cfg, s, NoiseStream(0), "ddpm")
        assert stub.count == 2000

    def test_ddim_eval_count(self):
        s = make_linear_schedule(100)
        cfg = SamplerConfig(K=100, K_I=20, K_t=20, N=20)
        stub = _CountingStub()
        sample_standard(stub, [float(i) for i in range(20)], cfg, s, NoiseStream(0), "ddim")
        assert stub.count == 400

    def test_d_ddpm_identical_features_identical_outputs(self):
        s = make_linear_schedule(60)
        cfg = SamplerConfig(K=60, K_I=10, K_t=0, N=3)
        out = sample_standard(_CountingStub(), [1.0, 1.0, 1.0], cfg, s, NoiseStream(2), "d_ddpm")
        assert np.array_equal(out[0].values, out[1].values)
        assert np.array_equal(out[1].values, out[2].values)

    def test_unknown_rule(self):
        s = make_linear_schedule(10)
        cfg = SamplerConfig(K=10, K_I=5, K_t=0, N=1)
        with pytest.raises(ValueError):
            sample_standard(_CountingStub(), [0.0], cfg, s, NoiseStream(0), "euler")


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 300), st.data())
def test_eval_count_closed_forms(K, data):
    K_I = data.draw(st.integers(1, K))
    K_t = data.draw(st.integers(0, K))
    N = data.draw(st.integers(1, 40))
    cfg = SamplerConfig(K=K, K_I=K_I, K_t=K_t, N=N)
    assert total_evals("ddpm", cfg) == N * K
    assert total_evals("d_ddpm", cfg) == N * K
    assert total_evals("ddim", cfg) == N * K_I
    assert total_evals("ts", cfg) == K_t + N * ((K - K_t) * K_I // K)


class TestNoiseStream:
    def test_reproducible(self):
        a = NoiseStream(42).normal((4, 2))
        b = NoiseStream(42).normal((4, 2))
        assert np.array_equal(a, b)

    def test_fork_independent_of_parent_consumption(self):
        s1 = NoiseStream(42)
        s1.normal((10,))
        child_after = s1.fork(3).normal((5,))
        child_fresh = NoiseStream(42).fork(3).normal((5,))
        assert np.array_equal(child_after, child_fresh)

    def test_forks_differ(self):
        s = NoiseStream(1)
        assert not np.array_equal(s.fork(0).normal((8,)), s.fork(1).normal((8,)))
