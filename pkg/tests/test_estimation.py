import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delaycarto import kkf
from delaycarto.covmodel import DelayTrace, simulate_trace
from delaycarto.estimation import (
    TrainingAccumulator,
    TrainingConfig,
    estimate_c_eta,
    finalize_c_nu,
    fit_gamma,
    q_statistics,
    training_phase,
    update_innovation_cov,
)


def _diag_err(c_eta_hat, target=0.5):
    return float(np.median(np.abs(np.diag(c_eta_hat) - target) / target))


class TestQStatistics:
    def test_identical_samples(self):
        mean, cov = q_statistics(np.tile([1.0, -2.0], (5, 1)))
        np.testing.assert_array_equal(mean, [1.0, -2.0])
        assert not cov.any()

    def test_alternating_orthogonal(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]] * 2)
        mean, cov = q_statistics(q)
        np.testing.assert_allclose(mean, [0.5, 0.5])
        # centred rows are +-(0.5, -0.5); four of them over n - 1 = 3
        np.testing.assert_allclose(cov, np.array([[1, -1], [-1, 1]]) / 3)

    def test_gaussian_samples(self, rng):
        _, cov = q_statistics(rng.standard_normal((10_000, 3)))
        assert np.linalg.norm(cov - np.eye(3)) <= 0.05 * np.linalg.norm(np.eye(3))

    def test_too_few(self):
        with pytest.raises(ValueError):
            q_statistics(np.zeros((2, 3)))

    def test_online_matches_batch(self, rng):
        q = rng.standard_normal((50, 3))
        acc = TrainingAccumulator(3)
        for row in q:
            acc.add_increment(row, np.eye(3), np.eye(3))
        mean, cov = acc.q_stats()
        ref_mean, ref_cov = q_statistics(q)
        np.testing.assert_allclose(mean, ref_mean, atol=1e-14)
        np.testing.assert_allclose(cov, ref_cov, atol=1e-13)


class TestCEta:
    def test_constant_m(self, rng):
        c_q = np.cov(rng.standard_normal((4, 20)))
        np.testing.assert_array_equal(estimate_c_eta(c_q, [np.eye(4)] * 6), c_q)

    def test_telescoping(self, rng):
        ms = [np.cov(rng.standard_normal((3, 10))) for _ in range(8)]
        c_q = np.cov(rng.standard_normal((3, 30)))
        out = estimate_c_eta(c_q, ms)
        np.testing.assert_allclose(out, c_q + (ms[-1] - ms[0]) / 7, atol=1e-12)
        np.testing.assert_array_equal(out, out.T)

    @pytest.mark.slow
    def test_recovery_full_selection(self, small_net, small_params):
        # filter run with the generating covariances: checks the estimator itself
        tr = simulate_trace(small_params, 5000, seed=11)
        est = training_phase(tr, small_net.gram,
                             TrainingConfig(t_l=5000, burn_in=500, gamma0=2.0, c_eta0=0.5))
        assert np.all(np.abs(np.diag(est.c_eta_hat) - 0.5) <= 0.15 * 0.5)


class TestInnovations:
    def test_zero_innovations(self):
        acc = TrainingAccumulator(2)
        m = np.array([[0.3, 0.1], [0.1, 0.2]])
        c_eta = 0.5 * np.eye(2)
        update_innovation_cov(acc, [0, 1], np.zeros(2), m)
        out = finalize_c_nu(acc, c_eta, 0.01)
        np.testing.assert_allclose(out, -0.01 * np.eye(2) - m - c_eta)

    def test_unseen_pair_keeps_prior(self):
        acc = TrainingAccumulator(3)
        update_innovation_cov(acc, [0, 1], np.ones(2), np.zeros((3, 3)))
        prior = np.full((3, 3), 7.0)
        out = finalize_c_nu(acc, np.zeros((3, 3)), 0.0, prior)
        assert out[0, 2] == out[2, 1] == out[2, 2] == 7.0
        assert out[0, 1] == 1.0

    def test_counts_bounded(self, small_params):
        tr = simulate_trace(small_params, 40, selector=4, seed=1)
        acc = TrainingAccumulator(10)
        for t in range(40):
            ids = tr.selection(t)
            update_innovation_cov(acc, ids, np.zeros(ids.size), np.zeros((10, 10)))
        assert acc.counts.max() <= 40
        assert np.array_equal(np.diag(acc.counts), tr.mask.sum(axis=0))

    @pytest.mark.slow
    def test_recovery_partial_selection(self, small_net, small_params):
        tr = simulate_trace(small_params, 5000, selector=7, seed=12)
        est = training_phase(tr, small_net.gram,
                             TrainingConfig(t_l=5000, burn_in=500, gamma0=2.0, c_eta0=0.5))
        acc_counts = (tr.mask[500:, :, None] & tr.mask[500:, None, :]).sum(axis=0)
        well = acc_counts >= 500
        target = small_params.c_nu
        big = well & (np.abs(target) > 0)
        rel = np.abs(est.c_nu_hat[big] - target[big]) / np.abs(target[big])
        assert np.median(rel) <= 0.2
        assert abs(est.gamma_hat - 2.0) <= 0.2 * 2.0


class TestGammaFit:
    def test_exact(self, small_net):
        assert fit_gamma(3 * small_net.gram, small_net.gram) == pytest.approx(3.0)

    def test_orthogonal(self):
        g = np.diag([1.0, 1.0])
        assert fit_gamma(np.array([[1.0, 0.0], [0.0, -1.0]]), g) == 0.0

    def test_perturbed(self, rng, small_net):
        g = small_net.gram
        e = 1e-3 * rng.standard_normal(g.shape)
        direct = np.sum(g * (2 * g + e)) / np.sum(g * g)
        assert fit_gamma(2 * g + e, g) == pytest.approx(direct, rel=1e-12)
        assert abs(fit_gamma(2 * g + e, g) - 2.0) < 1e-3

    def test_zero_gramian(self):
        with pytest.raises(ValueError):
            fit_gamma(np.eye(2), np.zeros((2, 2)))

    @settings(max_examples=50, deadline=None)
    @given(c=st.floats(0.01, 100.0), seed=st.integers(0, 1000))
    def test_scale_equivariance(self, c, seed):
        r = np.random.default_rng(seed)
        a = r.standard_normal((4, 3))
        g = a @ a.T
        c_nu = g + 0.1 * np.eye(4)
        assert fit_gamma(c * c_nu, g) == pytest.approx(c * fit_gamma(c_nu, g), rel=1e-12)


class TestTrainingPhase:
    def test_defaults(self):
        cfg = TrainingConfig()
        assert (cfg.t_l, cfg.burn_in, cfg.gamma0) == (1000, 500, 1.0)

    def test_trace_too_short(self, small_net, small_params):
        tr = simulate_trace(small_params, 100, seed=0)
        with pytest.raises(ValueError, match="too short"):
            training_phase(tr, small_net.gram, TrainingConfig(t_l=200, burn_in=50))

    def test_outputs_well_formed(self, small_net, small_params):
        tr = simulate_trace(small_params, 1000, selector=5, seed=0)
        est = training_phase(tr, small_net.gram)
        assert np.isfinite(est.gamma_hat) and est.gamma_hat >= 0
        np.testing.assert_array_equal(est.c_eta_hat, est.c_eta_hat.T)
        model = est.to_model(small_net.gram, 1e-3)
        assert np.linalg.eigvalsh(model.c_eta).min() >= -1e-12

    @pytest.mark.slow
    def test_error_decreases_with_horizon(self, small_net, small_params):
        medians = []
        for t_l in (500, 2000, 8000):
            errs = []
            for seed in range(20):
                tr = simulate_trace(small_params, t_l, seed=seed)
                est = training_phase(tr, small_net.gram, TrainingConfig(t_l=t_l, burn_in=250))
                errs.append(abs(est.gamma_hat - 2.0) / 2.0)
            medians.append(np.median(errs))
        print("median gamma error by t_L:", medians)
        assert medians[0] >= medians[1] >= medians[2]


@pytest.fixture(scope="module")
def innovations(small_params):
    p = small_params.n_paths
    tr = simulate_trace(small_params, 5500, seed=21)
    state = kkf.initial_state(small_params)
    rows, priors = [], []
    for t in range(tr.horizon):
        y = tr.true_delays[t]
        if t >= 500:
            rows.append(y - state.chi_hat)
            priors.append(small_params.prior_cov(state.m))
        state = kkf.kf_step(state, small_params, np.arange(p), y, check=False)
    return np.array(rows), np.mean(priors, axis=0)


class TestInnovationProperties:
    def test_whiteness(self, innovations):
        iota = innovations[0]
        c = iota - iota.mean(axis=0)
        lag1 = (c[1:] * c[:-1]).sum(axis=0) / (c * c).sum(axis=0)
        assert np.abs(lag1).max() < 0.05

    def test_second_moment_identity(self, innovations, small_params):
        iota, prior = innovations
        emp = iota.T @ iota / iota.shape[0]
        model = prior + small_params.c_nu + small_params.sigma2 * np.eye(small_params.n_paths)
        np.testing.assert_allclose(np.diag(emp), np.diag(model), rtol=0.06)
