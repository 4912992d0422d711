"""Acceptance criteria, one test per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary lists one
PASS/FAIL line per criterion with the measured numbers.
"""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from oracles import ansatz_log_value, conjugate_posterior, merton_log_value, particle_filter

from driftlab._linalg import row_sum_norm
from driftlab.cli import main as cli_main
from driftlab.control_eval import (estimate_from_logs, lambda_martingale_check, measure_change_identity,
                                   paired_difference, simulate_original_batch)
from driftlab.dpe_solver import default_grid, optimal_rule, rule_table, scheme_tolerance, solve_dpe
from driftlab.filter import (FilterState, bayes_update, covariance_bound, integrate_riccati, run_filter,
                             stationary_covariance)
from driftlab.market_model import ExpertView, ModelParams, default_params, simulate_bundle
from driftlab.regularization_lab import coupled_gaps, eps_optimality, non_increasing, rate_check, reward_gap
from driftlab.rules import constant_rule, myopic_rule, zero_rule
from driftlab.state_space import VecState, default_regularization, regularized_diffusion_matrix, \
    simulate_state_batch

pytestmark = pytest.mark.acceptance

K_LIST = [10.0, 100.0, 1000.0, 10000.0]


def _random_spd(rng, d, singular=False):
    A = rng.standard_normal((d, d))
    if singular and d > 1:
        A[:, 0] = 0.0
    elif singular:
        return np.zeros((1, 1))
    return A @ A.T + (0.0 if singular else 0.05 * np.eye(d))


@pytest.fixture(scope="module")
def quadratic_case():
    p = ModelParams(kappa=0.0, mu_bar=0.0, sigma_mu=0.0, sigma_R=0.5, Gamma=0.16, lam=0.0, theta=0.5, T=1.0,
                    m0=0.1, q0=0.08, strict=False)
    return p, solve_dpe(p, default_grid(p))


@pytest.fixture(scope="module")
def default_solution():
    p = default_params()
    g = default_grid(p)
    value = solve_dpe(p, g)
    return p, g, value, scheme_tolerance(p, g, fine=value)


def test_ac01_conjugate_bayes_oracle(ac_detail):
    rng = np.random.default_rng(101)
    worst = 0.0
    for case in range(100):
        d = 1 + case % 3
        Q = _random_spd(rng, d, singular=(case % 10 == 0))
        G = _random_spd(rng, d)
        M, Z = rng.standard_normal(d), rng.standard_normal(d)
        post = bayes_update(FilterState(0.5, M, Q), ExpertView(0.5, Z), G)
        mean, cov = conjugate_posterior(M, Q, Z, G)
        worst = max(worst, np.max(np.abs(post.M - mean)), np.max(np.abs(post.Q - cov)))
    ac_detail(f"max abs deviation {worst:.2e} over 100 cases (tol 1e-10)")
    assert worst <= 1e-10


def test_ac02_riccati_oracles(ac_detail):
    sep = ModelParams(kappa=0.0, mu_bar=0.0, sigma_mu=0.0, sigma_R=1.0, Gamma=1.0, lam=0.0, theta=0.5, T=1.0,
                      m0=0.0, q0=1.0, strict=False)
    q1 = float(integrate_riccati(1.0, 0.0, 1.0, 1.0 / 2000, sep)[0, 0])
    err_sep = abs(q1 - 0.5)
    stat = ModelParams(kappa=1.0, mu_bar=0.0, sigma_mu=1.0, sigma_R=1.0, Gamma=1.0, lam=0.0, theta=0.5, T=1.0,
                       m0=0.0, q0=np.sqrt(2) - 1)
    root = np.sqrt(2.0) - 1.0
    q_stat = float(integrate_riccati(root, 0.0, 1.0, 1.0 / 2000, stat)[0, 0])
    err_stat = max(abs(q_stat - root), abs(float(stationary_covariance(stat)[0, 0]) - root))
    ac_detail(f"separable error {err_sep:.2e} (tol 1e-6), stationary drift {err_stat:.2e} (tol 1e-8)")
    assert err_sep <= 1e-6
    assert err_stat <= 1e-8


def test_ac03_particle_filter_oracle(ac_detail):
    p = default_params()
    b = simulate_bundle(p, seed=2024, arrival_times=[0.5])
    fp = run_filter(b, p.m0, p.q0, p)
    _, M, _ = fp.on_grid()
    views = [(v.arrival_time, float(v.value[0])) for v in b.views]
    ref = particle_filter(b.grid, np.diff(b.return_path[:, 0]), views, 1.0, 0.1, 0.4, 0.5, 0.16, 0.1, 0.08,
                          100_000, np.random.default_rng(7))
    err = float(np.max(np.abs(M[:, 0] - ref)))
    ac_detail(f"max |M - particle mean| = {err:.4f} (tol 0.05)")
    assert len(b.views) == 1
    assert err <= 0.05


def test_ac04_predictive_view_law(ac_detail):
    p = default_params(lam=2.0)
    out = simulate_original_batch(p, zero_rule(), 6000, seed=404, record_arrivals=True)
    resid = out["arr_resid"][:, 0]
    pred_var = 0.16 + out["arr_cov"][:, 0, 0]
    n = resid.size
    x = resid ** 2 - pred_var
    se = x.std(ddof=1) / np.sqrt(n)
    mean_se = resid.std(ddof=1) / np.sqrt(n)
    ac_detail(f"{n} arrivals: E[(Z-M)^2] - E[Gamma+Q] = {x.mean():.2e} (3 SE = {3 * se:.2e}); "
              f"mean {resid.mean():.2e} (3 SE = {3 * mean_se:.2e})")
    assert n >= 10_000
    assert abs(x.mean()) <= 3 * se
    assert abs(resid.mean()) <= 3 * mean_se


def test_ac05_covariance_bound(ac_detail):
    p = default_params()
    n_steps = 2000
    out = simulate_original_batch(p, zero_rule(), 1000, seed=505, n_steps=n_steps,
                                  record_idx=range(n_steps + 1), record_arrivals=True)
    bound = covariance_bound(p)
    viol = int(np.sum(row_sum_norm(out["rec_Q"]) > bound)) + int(np.sum(row_sum_norm(out["arr_cov"]) > bound))
    ac_detail(f"{viol} violations of |Q| <= C_Q = {bound:.4g} over 1000 bundles x {n_steps} steps")
    assert viol == 0


def test_ac06_mse_consistency(ac_detail):
    p = default_params()
    n_steps = 2000
    probes = list(range(200, n_steps + 1, 200))
    out = simulate_original_batch(p, zero_rule(), 10_000, seed=606, n_steps=n_steps, record_idx=probes)
    err2 = (out["rec_mu"][..., 0] - out["rec_M"][..., 0]) ** 2
    x = err2 - out["rec_Q"][..., 0, 0]
    n = x.shape[0]
    z = x.mean(axis=0) / (x.std(axis=0, ddof=1) / np.sqrt(n))
    ac_detail(f"max |z| over 10 probe times = {np.max(np.abs(z)):.2f} (tol 3)")
    assert np.all(np.abs(z) <= 3)


def test_ac07_martingale_check(ac_detail):
    p = default_params()
    rep = lambda_martingale_check(myopic_rule(p), p, 100_000, seed=707)
    ac_detail(f"E[Lambda_T] = {rep.mean:.5f} +- {rep.std_error:.5f}")
    assert abs(rep.mean - 1.0) <= 3 * rep.std_error


@pytest.mark.parametrize("theta", [0.5, -1.0])
def test_ac08_measure_change_identity(theta, ac_detail):
    p = default_params(theta=theta)
    lines = []
    for rule in (zero_rule(), constant_rule([1.0]), myopic_rule(p)):
        rep = measure_change_identity(rule, p, 8192, seed=808)
        lines.append(f"{rule.kind} {rep.difference:+.2e}/{rep.joint_se:.1e}")
        if rule.kind == "zero":
            assert rep.difference == 0.0
        assert rep.passed, lines[-1]
    ac_detail(f"theta={theta}: " + ", ".join(lines))


def test_ac09_pide_quadratic_oracle(quadratic_case, ac_detail):
    p, value = quadratic_case
    g = value.grid
    jm = np.arange(g.n_m // 4, g.n_m - g.n_m // 4)
    lq = np.arange(g.n_q // 4, g.n_q - g.n_q // 4)
    m = g.m_axis[jm]
    r = 1.0 / 0.25
    table = rule_table(value)
    rel, rule_err = 0.0, 0.0
    for i, t in enumerate(g.t_axis):
        for l in lq:
            q = g.q_axis[l]
            a, C = ansatz_log_value(t, m, q, 0.5, 0.25, 1.0)
            V_ref = np.exp(a + C * m * m)
            rel = max(rel, float(np.max(np.abs(value.values[i, jm, l] - V_ref) / V_ref)))
            pi_ref = 2.0 * r * (m + q * 2.0 * C * m)
            rule_err = max(rule_err, float(np.max(np.abs(table[i, jm, l] - pi_ref))))
    clip_ok = np.allclose(optimal_rule(value).payload["table"][:, jm][:, :, lq], table[:, jm][:, :, lq])
    ac_detail(f"max relative error {rel:.2e} (tol 1e-3), rule error {rule_err:.2e} (tol 1e-2)")
    assert rel <= 1e-3
    assert rule_err <= 1e-2
    assert clip_ok


def test_ac10_full_information_row(quadratic_case, ac_detail):
    p, value = quadratic_case
    g = value.grid
    assert g.q_axis[0] == 0.0
    T, M = np.meshgrid(g.t_axis, g.m_axis, indexing="ij")
    ref = np.exp(merton_log_value(T, M, 0.5, 0.25, 1.0))
    rel = float(np.max(np.abs(value.values[:, :, 0] - ref) / ref))
    ac_detail(f"max relative error on the q=0 row {rel:.2e} (tol 1e-3)")
    assert rel <= 1e-3


def test_ac11_optimality_ordering(default_solution, ac_detail):
    p, g, value, tol = default_solution
    V = float(value.value_at(0.0, 0.1, 0.08))
    n = 16384
    eta_opt = simulate_state_batch(p, optimal_rule(value), n, seed=1111)["v_eta"][0]
    eta_myo = simulate_state_batch(p, myopic_rule(p), n, seed=1111)["v_eta"][0]
    d_opt, d_myo = estimate_from_logs(eta_opt), estimate_from_logs(eta_myo)
    diff, se = paired_difference(np.exp(eta_opt), np.exp(eta_myo))
    ac_detail(f"V={V:.5f}, D(opt)={d_opt.mean:.5f}+-{d_opt.std_error:.1e}, "
              f"D(myopic)={d_myo.mean:.5f}+-{d_myo.std_error:.1e}, paired diff {diff:+.2e}+-{se:.1e}, "
              f"scheme tol {tol:.1e}")
    assert diff >= -3 * se
    assert d_opt.mean <= V + 3 * d_opt.std_error + tol
    assert d_myo.mean <= V + 3 * d_myo.std_error + tol


def test_ac12_regularization_rate(ac_detail):
    p = default_params()
    y0 = VecState.from_mq(p.m0, p.q0)
    gaps = coupled_gaps(myopic_rule(p), y0, K_LIST, 8192, p, seed=1212)
    vals = [e.value for e in gaps]
    ac_detail("gap*k = " + ", ".join(f"{v * k:.3f}" for v, k in zip(vals, K_LIST)))
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert rate_check(K_LIST, vals, factor=10.0)


def test_ac13_reward_and_eps_optimality(default_solution, ac_detail):
    p, g, value, tol = default_solution
    y0 = VecState.from_mq(p.m0, p.q0)
    n = 16384
    rg = reward_gap(myopic_rule(p), y0, K_LIST, n, p, seed=1313)
    eo = eps_optimality(p, g, K_LIST, n, seed=1314, base=value, tol=tol)
    rg_v, rg_se = [e.value for e in rg], [e.std_error for e in rg]
    ac_detail("reward gaps " + ", ".join(f"{v:.1e}+-{s:.0e}" for v, s in zip(rg_v, rg_se))
              + "; eps-opt gaps " + ", ".join(f"{v:.1e}+-{s:.0e}" for v, s in zip(eo.gaps, eo.std_errors))
              + f"; scheme tol {tol:.1e}")
    assert non_increasing(rg_v, rg_se, slack=1.0)
    assert non_increasing(eo.gaps, eo.std_errors, slack=1.0)
    assert rg_v[-1] <= max(3 * rg_se[-1], 2 * tol)
    assert eo.gaps[-1] <= max(3 * eo.std_errors[-1], 2 * tol)


def test_ac14_ellipticity(ac_detail):
    rng = np.random.default_rng(1414)
    worst = np.inf
    for i in range(1000):
        d = 1 + i % 2
        p = default_params() if d == 1 else ModelParams(
            kappa=np.eye(2), mu_bar=[0.1, 0.0], sigma_mu=0.4 * np.eye(2), sigma_R=0.5 * np.eye(2),
            Gamma=0.16 * np.eye(2), lam=1.0, theta=0.5, T=1.0, m0=[0.1, 0.0], q0=0.08 * np.eye(2))
        k = float(10 ** rng.uniform(0, 4))
        cfg = default_regularization(p, k=k)
        A = rng.standard_normal((d, d))
        q = A @ A.T * rng.uniform(0, 0.1)
        y = VecState.from_mq(rng.standard_normal(d), q)
        lmin = np.linalg.eigvalsh(regularized_diffusion_matrix(y, cfg, p)).min()
        worst = min(worst, lmin - 1.0 / (2 * k))
    ac_detail(f"min (lambda_min - 1/(2k)) = {worst:.2e} (tol -1e-12)")
    assert worst >= -1e-12


def test_ac15_determinism(tmp_path, ac_detail):
    cfg = {"grid": {"n_m": 21, "n_q": 6, "n_t": 5},
           "mc": {"n_paths": 300, "n_steps": 100, "n_bundles": 3, "seed": 15},
           "evaluate": {"rules": ["zero", "constant", "myopic", "optimal"], "runs": 2},
           "regularization": {"k_list": [100.0, 1000.0]}}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    commands = ["simulate", "filter", "solve", "evaluate", "regularize"]
    cwd = os.getcwd()
    trees = []
    try:
        for run in ("a", "b"):
            base = tmp_path / run
            base.mkdir()
            os.chdir(base)
            for c in commands:
                assert cli_main([c, "--config", str(cfg_path), "--out", f"out_{c}", "--workers", "1"]) == 0
            trees.append({str(f.relative_to(base)): f.read_bytes() for f in sorted(base.rglob("*")) if f.is_file()})
    finally:
        os.chdir(cwd)
    same = trees[0] == trees[1]
    ac_detail(f"{len(trees[0])} files compared across two runs per command, identical={same}")
    assert len(trees[0]) > 0
    assert same
