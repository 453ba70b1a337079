import numpy as np
import pytest

from delaycarto import kkf
from delaycarto.covmodel import DelayTrace, ModelParams, simulate_trace
from delaycarto.linalg import FactorizationError
from oracles import batch_lmmse, prop1_information_form, prop1_long_form, random_psd


def _random_params(r, p, b=1.0):
    return ModelParams(random_psd(r, p), random_psd(r, p, scale=0.5),
                       float(r.uniform(0.05, 0.5)), damping_b=b)


class TestStep:
    def test_full_information_limit(self):
        p = 3
        params = ModelParams(np.zeros((p, p)), np.zeros((p, p)), 1e-9)
        state = kkf.initial_state(params, chi0=0.0, m0=10.0)
        y = np.array([1.0, -2.0, 3.5])
        new = kkf.kf_step(state, params, [0, 1, 2], y)
        np.testing.assert_allclose(new.chi_hat, y, atol=1e-6)

    def test_scalar_by_hand(self):
        c_nu, c_eta, s2, m, x = 0.7, 0.3, 0.1, 2.0, 1.5
        params = ModelParams(np.array([[c_nu]]), np.array([[c_eta]]), s2)
        y = 4.0
        new = kkf.kf_step(kkf.FilterState(np.array([x]), np.array([[m]])), params, [0], [y])
        prior = m + c_eta
        k = prior / (prior + c_nu + s2)
        assert new.chi_hat[0] == pytest.approx(x + k * (y - x), rel=1e-14)
        assert new.m[0, 0] == pytest.approx((1 - k) * prior, rel=1e-14)

    def test_information_form(self, rng):
        for _ in range(20):
            p = int(rng.integers(2, 7))
            params = _random_params(rng, p)
            m = random_psd(rng, p) + 0.1 * np.eye(p)
            ids = np.sort(rng.choice(p, int(rng.integers(1, p + 1)), replace=False))
            new = kkf.kf_step(kkf.FilterState(np.zeros(p), m), params, ids, np.zeros(ids.size))
            prior = m + params.c_eta
            s = np.eye(p)[ids]
            r = params.c_nu[np.ix_(ids, ids)] + params.sigma2 * np.eye(ids.size)
            info = np.linalg.inv(np.linalg.inv(prior) + s.T @ np.linalg.inv(r) @ s)
            assert np.linalg.norm(new.m - info) <= 1e-8 * np.linalg.norm(info)

    def test_empty_selection_rejected(self, small_params):
        state = kkf.initial_state(small_params)
        with pytest.raises(ValueError, match="predict_only"):
            kkf.kf_step(state, small_params, [], [])

    def test_singular_innovation_names_sigma2(self):
        params = ModelParams(np.zeros((2, 2)), np.zeros((2, 2)), 0.0)
        state = kkf.FilterState(np.zeros(2), np.zeros((2, 2)))
        with pytest.raises(FactorizationError, match="sigma2 = 0"):
            kkf.kf_step(state, params, [0], [1.0])


class TestPredictOnly:
    def test_no_drift(self, small_params):
        params = small_params.replace(c_eta=np.zeros((10, 10)))
        state = kkf.initial_state(params, chi0=1.0)
        new = kkf.predict_only(state, params)
        np.testing.assert_array_equal(new.m, state.m)
        np.testing.assert_array_equal(new.chi_hat, state.chi_hat)
        assert new.slot == 1

    def test_damped(self):
        params = ModelParams(np.zeros((2, 2)), np.eye(2), 0.1, damping_b=0.5)
        new = kkf.predict_only(kkf.FilterState(np.ones(2), np.zeros((2, 2))), params)
        np.testing.assert_array_equal(new.m, np.eye(2))
        np.testing.assert_array_equal(new.chi_hat, 0.5 * np.ones(2))

    def test_multi_step_prediction(self, small_params):
        state = kkf.initial_state(small_params, chi0=np.arange(10.0))
        for _ in range(5):
            state = kkf.predict_only(state, small_params)
        np.testing.assert_array_equal(state.chi_hat, np.arange(10.0))


class TestPredict:
    def test_pure_trend_without_spatial_term(self, rng):
        p = 4
        params = ModelParams(np.zeros((p, p)), np.eye(p), 0.1)
        state, res = kkf.step(kkf.initial_state(params), params, [0, 2], [1.0, 2.0])
        np.testing.assert_array_equal(res.predicted, state.chi_hat[[1, 3]])

    def test_all_measured(self, small_params):
        _, res = kkf.step(kkf.initial_state(small_params), small_params, range(10), np.ones(10))
        assert res.predicted.size == 0 and res.error_cov.shape == (0, 0)

    def test_batch_oracle_p3(self, rng):
        p, t_len = 3, 6
        params = _random_params(rng, p)
        m0 = np.eye(p)
        chi0 = rng.standard_normal(p)
        y = rng.standard_normal((t_len, p))
        mask = rng.random((t_len, p)) < 0.5
        mask[:, 0] = True
        res, _ = kkf.run_filter(params, DelayTrace(y, mask), chi0=chi0, m0=m0)
        ref = batch_lmmse(params.c_nu, params.c_eta, params.sigma2, chi0, m0, y, mask)
        for t, r in enumerate(res):
            np.testing.assert_allclose(r.predicted, ref[t, r.unmeasured], rtol=1e-8, atol=1e-10)

    def test_error_cov_diagonal_floor(self, rng):
        params = _random_params(rng, 5)
        cov = kkf.error_covariance(np.eye(5), params, [1, 3])
        assert np.all(np.diag(cov) >= params.sigma2 - 1e-15)
        assert np.linalg.eigvalsh(cov).min() >= 0


class TestErrorCovariance:
    def test_empty_selection(self, rng):
        params = _random_params(rng, 4)
        m = random_psd(rng, 4)
        cov = kkf.error_covariance(m, params, [])
        expect = params.sigma2 * np.eye(4) + m + params.c_nu + params.c_eta
        np.testing.assert_allclose(cov, expect, rtol=1e-12)

    def test_information_form(self, rng):
        for _ in range(20):
            p = int(rng.integers(2, 7))
            params = _random_params(rng, p)
            m = random_psd(rng, p) + 0.05 * np.eye(p)
            ids = list(np.sort(rng.choice(p, int(rng.integers(1, p)), replace=False)))
            ours = kkf.error_covariance(m, params, ids)
            ref = prop1_information_form(m, params.c_nu, params.c_eta, params.sigma2, ids)
            assert np.linalg.norm(ours - ref) <= 1e-9 * np.linalg.norm(ref)

    def test_long_form(self, rng):
        params = _random_params(rng, 5)
        m = random_psd(rng, 5)
        ours = kkf.error_covariance(m, params, [0, 4])
        ref = prop1_long_form(m, params.c_nu, params.c_eta, params.sigma2, [0, 4])
        assert np.linalg.norm(ours - ref) <= 1e-10 * np.linalg.norm(ref)


class TestRunFilter:
    def test_constant_trace_converges(self):
        p = 4
        # one shared trend, so the measured paths pin down the unmeasured ones
        params = ModelParams(np.zeros((p, p)), 0.01 * np.ones((p, p)), 1e-4)
        y = np.full((60, p), 7.25)
        mask = np.zeros_like(y, dtype=bool)
        mask[:, :2] = True
        res, _ = kkf.run_filter(params, DelayTrace(y, mask), chi0=0.0, m0=100 * np.ones((p, p)))
        assert np.abs(res[49].predicted - 7.25).max() < 1e-6

    def test_all_empty_slots(self):
        params = ModelParams(np.eye(3), np.eye(3), 0.1, damping_b=0.8)
        tr = DelayTrace(np.zeros((4, 3)), np.zeros((4, 3), dtype=bool))
        res, _ = kkf.run_filter(params, tr, chi0=np.ones(3))
        for t, r in enumerate(res, start=1):
            np.testing.assert_allclose(r.predicted, 0.8 ** t * np.ones(3))

    def test_reproducible(self, small_params):
        tr = simulate_trace(small_params, 30, selector=4, seed=0)
        a, _ = kkf.run_filter(small_params, tr)
        b, _ = kkf.run_filter(small_params, tr)
        assert all(np.array_equal(x.predicted, y.predicted) for x, y in zip(a, b))

    def test_dimension_mismatch(self, small_params):
        with pytest.raises(ValueError, match="paths"):
            kkf.run_filter(small_params, DelayTrace(np.zeros((2, 3)), np.ones((2, 3), bool)))

    def test_covariance_stays_psd(self, small_params):
        tr = simulate_trace(small_params, 300, selector=3, seed=4)
        _, state = kkf.run_filter(small_params, tr, check=True)
        assert np.allclose(state.m, state.m.T)

    def test_damped_converges(self, small_params):
        params = small_params.replace(damping_b=0.9)
        state = kkf.initial_state(params)
        ids = [0, 3, 5]
        prev = state.m
        for t in range(500):
            state = kkf.kf_step(state, params, ids, np.zeros(3))
            if np.linalg.norm(state.m - prev) < 1e-10:
                break
            prev = state.m
        assert t < 499


@pytest.fixture(scope="module")
def mc_runs():
    r = np.random.default_rng(7)
    p = 5
    params = ModelParams(random_psd(r, p), random_psd(r, p, scale=0.3), 0.05)
    m_prev = random_psd(r, p, scale=0.5) + 0.1 * np.eye(p)
    chi_prev = np.zeros(p)
    ids = [0, 2]
    rest = [1, 3, 4]
    n = 10_000
    l_m = np.linalg.cholesky(m_prev)
    l_eta = np.linalg.cholesky(params.c_eta)
    l_nu = np.linalg.cholesky(params.c_nu)
    chi_true = chi_prev + r.standard_normal((n, p)) @ l_m.T
    chi = chi_true + r.standard_normal((n, p)) @ l_eta.T
    y = chi + r.standard_normal((n, p)) @ l_nu.T + np.sqrt(params.sigma2) * r.standard_normal((n, p))
    state = kkf.FilterState(chi_prev, m_prev)
    errs = np.empty((n, len(rest)))
    for i in range(n):
        _, res = kkf.step(state, params, ids, y[i, ids])
        errs[i] = y[i, rest] - res.predicted
    return params, m_prev, ids, errs


@pytest.mark.slow
class TestMonteCarlo:
    """Statistical checks on a P = 5 model, 10^4 replications."""

    def test_error_covariance(self, mc_runs):
        params, m_prev, ids, errs = mc_runs
        model = kkf.error_covariance(m_prev, params, ids)
        emp = errs.T @ errs / errs.shape[0]
        np.testing.assert_allclose(np.diag(emp), np.diag(model), rtol=0.05)

    def test_unbiased(self, mc_runs):
        errs = mc_runs[3]
        se = errs.std(axis=0, ddof=1) / np.sqrt(errs.shape[0])
        assert np.all(np.abs(errs.mean(axis=0)) < 3 * se)
