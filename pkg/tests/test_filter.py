import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import solve_ivp

from oracles import conjugate_posterior

from driftlab.control_eval import simulate_original_batch
from driftlab.errors import GridError, ParameterError
from driftlab.filter import (POST_UPDATE, PRE_UPDATE, FilterState, bayes_update, check_covariance_bound,
                             covariance_bound, integrate_riccati, propagate_mean, riccati_rhs, riccati_step,
                             run_filter, stationary_covariance, view_predictive)
from driftlab.market_model import ExpertView, ModelParams, PathBundle, default_params, simulate_bundle
from driftlab.rules import zero_rule


def scalar(kappa=1.0, mu_bar=0.0, sigma_mu=1.0, sigma_R=1.0, Gamma=1.0, lam=0.0, q0=0.1, strict=True):
    return ModelParams(kappa=kappa, mu_bar=mu_bar, sigma_mu=sigma_mu, sigma_R=sigma_R, Gamma=Gamma, lam=lam,
                       theta=0.5, T=1.0, m0=0.0, q0=q0, strict=strict)


def two_asset():
    return ModelParams(kappa=[[1.0, 0.3], [-0.2, 0.7]], mu_bar=[0.1, 0.0], sigma_mu=[[0.4, 0.0], [0.1, 0.3]],
                       sigma_R=[[0.5, 0.1], [0.0, 0.4]], Gamma=[[0.2, 0.05], [0.05, 0.3]], lam=2.0, theta=-1.0,
                       T=1.0, m0=[0.05, 0.0], q0=[[0.1, 0.02], [0.02, 0.05]])


class TestRiccati:
    def test_zero_state(self):
        p = default_params()
        assert np.allclose(riccati_rhs(np.zeros((1, 1)), p), p.Sigma_mu)

    def test_stationary_root(self):
        assert abs(riccati_rhs(np.array([[np.sqrt(2) - 1]]), scalar())[0, 0]) < 1e-15

    def test_pure_decay(self):
        p = scalar(kappa=0.0, sigma_mu=0.0, strict=False)
        assert riccati_rhs(np.eye(1), p)[0, 0] == -1.0

    def test_separable_ode(self):
        p = scalar(kappa=0.0, sigma_mu=0.0, strict=False)
        assert abs(integrate_riccati(1.0, 0.0, 1.0, 1e-3, p)[0, 0] - 0.5) <= 1e-6

    def test_stationary_preserved(self):
        root = np.sqrt(2) - 1
        assert abs(integrate_riccati(root, 0.0, 3.0, 1e-2, scalar())[0, 0] - root) <= 1e-8

    def test_zero_length_interval(self):
        q0 = np.array([[0.37]])
        assert np.array_equal(integrate_riccati(q0, 0.5, 0.5, 0.1, scalar()), q0)

    def test_bad_step(self):
        with pytest.raises(ParameterError):
            integrate_riccati(1.0, 0.0, 1.0, 0.0, scalar())

    def test_stiff_step_substeps(self):
        # a long step from a large covariance triggers sub-stepping; compare with an accurate ODE solve
        p = scalar(kappa=1.0, sigma_mu=0.5, sigma_R=0.2)
        h = 0.05
        ref = solve_ivp(lambda t, q: [0.25 - 2 * q[0] - 25 * q[0] ** 2], (0, h), [2.0], rtol=1e-12, atol=1e-14)
        assert riccati_step(np.array([[2.0]]), h, p)[0, 0] == pytest.approx(ref.y[0, -1], rel=2e-3)

    def test_two_asset_integration_against_ode_solver(self):
        p = two_asset()
        q0 = p.q0

        def f(t, y):
            return riccati_rhs(y.reshape(2, 2), p).ravel()

        ref = solve_ivp(f, (0, 0.8), q0.ravel(), rtol=1e-12, atol=1e-14).y[:, -1].reshape(2, 2)
        assert np.allclose(integrate_riccati(q0, 0.0, 0.8, 1e-3, p), ref, atol=1e-10)

    def test_stationary_covariance_solves_algebraic_equation(self):
        for p in (default_params(), two_asset()):
            q = stationary_covariance(p)
            assert np.max(np.abs(riccati_rhs(q, p))) < 1e-12
            assert np.linalg.eigvalsh(q).min() > 0

    def test_covariance_bound_formula(self):
        p = default_params(q0=0.5)
        assert covariance_bound(p) == pytest.approx(0.75)
        q_star = float(stationary_covariance(default_params())[0, 0])
        assert covariance_bound(default_params(q0=0.01)) == pytest.approx(1.5 * q_star)


class TestMean:
    def test_zero_gain_decay(self):
        p = scalar(kappa=1.0, mu_bar=0.0)
        s = propagate_mean(FilterState(0.0, [1.0], [[0.0]]), [123.0], 0.01, p)
        assert s.M[0] == pytest.approx(0.99, abs=1e-15)

    def test_zero_innovation(self):
        p = scalar(kappa=0.0, sigma_mu=0.0, strict=False)
        M, dt = 0.3, 0.01
        s = propagate_mean(FilterState(0.0, [M], [[1.0]]), [M * dt], dt, p)
        assert s.M[0] == pytest.approx(M, abs=1e-15)

    def test_nonpositive_dt(self):
        with pytest.raises(ParameterError):
            propagate_mean(FilterState(0.0, [0.0], [[0.1]]), [0.0], 0.0, scalar())


class TestUpdate:
    def test_equal_variance_average(self):
        s = bayes_update(FilterState(1.0, [0.0], [[1.0]]), ExpertView(1.0, [2.0]), 1.0)
        assert s.M[0] == pytest.approx(1.0) and s.Q[0, 0] == pytest.approx(0.5)

    def test_certain_filter_ignores_view(self):
        s = bayes_update(FilterState(1.0, [0.4], [[0.0]]), ExpertView(1.0, [2.0]), 1.0)
        assert s.M[0] == 0.4 and s.Q[0, 0] == 0.0

    def test_conjugate_example(self):
        s = bayes_update(FilterState(0.2, [0.1], [[0.3]]), ExpertView(0.2, [-0.2]), 0.5)
        mean, cov = conjugate_posterior(np.array([0.1]), np.array([[0.3]]), np.array([-0.2]), np.array([[0.5]]))
        assert abs(s.M[0] - mean[0]) < 1e-12 and abs(s.Q[0, 0] - cov[0, 0]) < 1e-12

    def test_time_mismatch(self):
        with pytest.raises(GridError):
            bayes_update(FilterState(0.2, [0.1], [[0.3]]), ExpertView(0.3, [0.0]), 0.5)

    @given(d=st.integers(1, 3), data=st.data())
    def test_update_properties(self, d, data):
        A = data.draw(arrays(float, (d, d), elements=st.floats(-1, 1)))
        B = data.draw(arrays(float, (d, d), elements=st.floats(-1, 1)))
        M = data.draw(arrays(float, d, elements=st.floats(-2, 2)))
        Z = data.draw(arrays(float, d, elements=st.floats(-2, 2)))
        Q = A @ A.T
        G = B @ B.T + 0.1 * np.eye(d)
        s = bayes_update(FilterState(0.0, M, Q), ExpertView(0.0, Z), G)
        mean, cov = conjugate_posterior(M, Q, Z, G)
        assert np.allclose(s.M, mean, atol=1e-9) and np.allclose(s.Q, cov, atol=1e-9)
        assert np.array_equal(s.Q, s.Q.T)
        assert np.linalg.eigvalsh(s.Q).min() >= -1e-12
        assert np.trace(s.Q) <= np.trace(Q) + 1e-12

    def test_predictive(self):
        m, c = view_predictive(FilterState(0.0, [0.0], [[0.3]]), 0.5)
        assert m[0] == 0.0 and c[0, 0] == pytest.approx(0.8)
        m, c = view_predictive(FilterState(0.0, [0.2], [[0.0]]), 0.5)
        assert m[0] == 0.2 and c[0, 0] == 0.5


class TestRunFilter:
    def test_no_views_matches_plain_kalman_bucy(self):
        p = default_params(lam=0.0)
        b = simulate_bundle(p, 3, n_steps=300)
        fp = run_filter(b, p.m0, p.q0, p)
        s = FilterState(0.0, p.m0, p.q0)
        dR = np.diff(b.return_path, axis=0)
        for n in range(300):
            s = propagate_mean(s, dR[n], b.grid[n + 1] - b.grid[n], p)
        assert np.all(fp.flag == 0)
        assert np.array_equal(fp.M[-1], s.M) and np.array_equal(fp.Q[-1], s.Q)

    def test_reliable_expert(self):
        p = default_params(Gamma=1e-10)
        b = simulate_bundle(p, 4, n_steps=200, arrival_times=[0.4])
        fp = run_filter(b, p.m0, p.q0, p)
        post = np.nonzero(fp.flag == POST_UPDATE)[0][0]
        assert abs(fp.M[post, 0] - b.views[0].value[0]) < 1e-4

    def test_pre_and_post_rows(self):
        p = default_params(lam=3.0)
        b = simulate_bundle(p, 5, n_steps=200)
        fp = run_filter(b, p.m0, p.q0, p)
        assert np.sum(fp.flag == PRE_UPDATE) == len(b.views) == np.sum(fp.flag == POST_UPDATE)
        t, M, Q = fp.on_grid()
        assert np.array_equal(t, b.grid)
        pre = fp.pre_update()[2]
        assert np.all(Q[b.view_indices()][:, 0, 0] <= pre[:, 0, 0])

    def test_view_off_grid(self):
        p = default_params()
        b = simulate_bundle(p, 5, n_steps=10)
        bad = PathBundle(b.grid, b.dW_R, b.dW_mu, b.drift_path, b.return_path, [ExpertView(0.123456, [0.0])])
        with pytest.raises(GridError):
            run_filter(bad, p.m0, p.q0, p)

    def test_covariance_bound_on_bundles(self):
        for p in (default_params(lam=2.0), default_params(q0=0.0), two_asset()):
            bound = covariance_bound(p)
            for i in range(10):
                fp = run_filter(simulate_bundle(p, 6, i, n_steps=200), p.m0, p.q0, p)
                assert check_covariance_bound(fp, bound) == 0

    def test_csv_columns(self, tmp_path):
        p = two_asset()
        fp = run_filter(simulate_bundle(p, 7, n_steps=20), p.m0, p.q0, p)
        fp.to_csv(tmp_path / "f.csv")
        assert (tmp_path / "f.csv").read_text().splitlines()[0] == "t,M_1,M_2,g_1,g_2,g_3,flag"

    def test_unbiased(self):
        p = default_params()
        out = simulate_original_batch(p, zero_rule(), 10_000, seed=99, n_steps=400, record_idx=[100, 400])
        err = out["rec_M"][..., 0] - out["rec_mu"][..., 0]
        se = err.std(axis=0, ddof=1) / np.sqrt(err.shape[0])
        assert np.all(np.abs(err.mean(axis=0)) <= 3 * se)
