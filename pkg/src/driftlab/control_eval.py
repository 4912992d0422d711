"""Monte Carlo evaluation of decision rules.

Two independent routes to the same number:

* ``reward_mc`` simulates the state under the changed measure and averages
  ``exp(eta)``, ``eta`` the integrated running reward.
* ``wealth_utility_mc`` simulates the hidden drift and the returns under the
  original measure, runs the filter online and averages the power utility of
  terminal wealth.

The two agree up to the factor ``x0^theta / theta``.  When both use the same
master seed they share the return noise, arrivals and marks, which makes the
paired difference much less noisy than either estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.special import logsumexp

from ._linalg import sym_sqrt
from .errors import ParameterError, StatisticalValidityError
from .filter import mean_step, mv, riccati_step, update_arrays
from .io import append_csv
from .market_model import DEFAULT_STEPS, ModelParams, ou_transition
from .simulation import Noise, PathModel, run_chunked, run_paths
from .state_space import RegularizationConfig, VecState, running_reward_b, simulate_state_batch

MAX_REJECT = 1e-3
LEDGER_HEADER = ["run_id", "rule_kind", "theta", "lambda", "n_paths", "estimate", "std_error", "seed", "wall_time_s"]


@dataclass
class RewardEstimate:
    mean: float
    std_error: float
    n_paths: int
    eta_samples_summary: dict = field(default_factory=dict)
    n_rejected: int = 0
    log_samples: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "n_paths": self.n_paths,
                "eta_samples_summary": self.eta_samples_summary, "n_rejected": self.n_rejected}


def _summary(x: np.ndarray) -> dict:
    if x.size == 0:
        return {}
    q = np.quantile(x, [0.01, 0.25, 0.5, 0.75, 0.99])
    return {"min": float(x.min()), "q01": float(q[0]), "q25": float(q[1]), "median": float(q[2]),
            "q75": float(q[3]), "q99": float(q[4]), "max": float(x.max())}


def finite_or_raise(x: np.ndarray, limit: float = MAX_REJECT):
    """Drop non-finite samples; raise when more than ``limit`` of them are rejected."""
    ok = np.isfinite(x)
    n_bad = int(x.size - ok.sum())
    if x.size and n_bad > limit * x.size:
        raise StatisticalValidityError(f"{n_bad} of {x.size} samples were non-finite")
    return x[ok], n_bad


def exp_mean(log_x: np.ndarray, scale: float = 1.0):
    """Mean and standard error of ``scale * exp(log_x)`` computed in log space."""
    n = log_x.size
    if n == 0:
        raise StatisticalValidityError("no samples")
    top = float(np.max(log_x))
    mean = scale * float(np.exp(logsumexp(log_x) - np.log(n)))
    if n < 2:
        return mean, float("nan")
    e = np.exp(log_x - top)
    se = abs(scale) * float(np.exp(top) * np.std(e, ddof=1) / np.sqrt(n))
    return mean, se


def estimate_from_logs(log_x: np.ndarray, scale: float = 1.0) -> RewardEstimate:
    x, n_bad = finite_or_raise(np.asarray(log_x, dtype=float))
    mean, se = exp_mean(x, scale)
    return RewardEstimate(mean, se, x.size, _summary(x), n_bad, x)


def paired_difference(a: np.ndarray, b: np.ndarray):
    """Mean of ``a - b`` and its standard error from per-path pairs."""
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    ok = np.isfinite(diff)
    diff = diff[ok]
    if diff.size < 2:
        raise StatisticalValidityError("not enough paired samples")
    return float(np.mean(diff)), float(np.std(diff, ddof=1) / np.sqrt(diff.size))


def original_value(x0: float, theta: float, V0: float) -> float:
    """Value of the power-utility problem recovered from the risk-sensitive value."""
    if x0 <= 0 or V0 <= 0:
        raise ParameterError("x0 and V0 must be positive")
    return x0 ** theta / theta * V0


# ---------------------------------------------------------------- changed measure


def reward_mc(rule, t: float, y0: VecState | None, n_paths: int, params: ModelParams,
              cfg: RegularizationConfig | None = None, seed: int = 0, n_steps: int = DEFAULT_STEPS,
              workers: int = 1) -> RewardEstimate:
    """Estimate ``D(t, y0; rule) = E[exp(eta)]`` under the changed measure."""
    steps = max(1, int(round(n_steps * (params.T - t) / params.T)))
    out = simulate_state_batch(params, rule, n_paths, seed, y0, (cfg,), t, steps, workers=workers)
    return estimate_from_logs(out["v_eta"][0])


# ---------------------------------------------------------------- original measure


class OriginalMeasureModel(PathModel):
    """Hidden drift, returns, online filter and wealth under the original measure.

    Accumulates per path ``log_u = theta log(X_T / x0)``, the log density
    ``log_lam`` of the change of measure and ``eta`` (left-point sums), which
    satisfy ``log_u = eta + log_lam`` step by step.
    """

    state_names = ("mu", "M", "Q", "log_u", "log_lam", "eta")

    def __init__(self, params, rule, n_paths, mu0, record_idx=(), record_arrivals=False):
        self.params = params
        self.rule = rule
        d = params.d
        self.mark_dim = d
        self.noises = [Noise("W_R", params.d1), Noise("W_mu", d, kind="normal")]
        self.mu = np.asarray(mu0, dtype=float).reshape(n_paths, d).copy()
        self.M = np.broadcast_to(params.m0, (n_paths, d)).copy()
        self.Q = np.broadcast_to(params.q0, (n_paths, d, d)).copy()
        self.log_u = np.zeros(n_paths)
        self.log_lam = np.zeros(n_paths)
        self.eta = np.zeros(n_paths)
        self.record_idx = set(int(i) for i in record_idx)
        self.records = []
        self.record_arrivals = record_arrivals
        self.arrival_resid = []
        self.arrival_cov = []
        self._ou_cache = {}

    def _ou(self, h):
        if np.ndim(h):
            return ou_transition(self.params, h)
        key = float(h)
        if key not in self._ou_cache:
            self._ou_cache[key] = ou_transition(self.params, key)
        return self._ou_cache[key]

    def advance(self, idx, t, h, draws):
        params = self.params
        th = params.theta
        mu, M, Q = self.mu[idx], self.M[idx], self.Q[idx]
        hv = h[:, None] if np.ndim(h) else h
        p = self.rule(t, M, Q)
        dR = mu * hv + draws["W_R"] @ params.sigma_R.T
        quad = np.sum(p * mv(params.Sigma_R, p), axis=-1)
        pdR = np.sum(p * dR, axis=-1)
        pM = np.sum(p * M, axis=-1)
        self.log_u[idx] += th * (pdR - 0.5 * quad * h)
        self.log_lam[idx] += th * (pdR - pM * h) - 0.5 * th * th * quad * h
        self.eta[idx] += th * (pM - 0.5 * (1.0 - th) * quad) * h
        self.M[idx] = mean_step(M, Q, dR, hv, params)
        self.Q[idx] = riccati_step(Q, h, params)
        F, S = self._ou(h)
        self.mu[idx] = params.mu_bar + mv(F, mu - params.mu_bar) + mv(S, draws["W_mu"])

    def jump(self, idx, t, marks):
        params = self.params
        Z = self.mu[idx] + mv(params.Gamma_sqrt, marks)
        M, Q = self.M[idx], self.Q[idx]
        if self.record_arrivals:
            self.arrival_resid.append(Z - M)
            self.arrival_cov.append(Q.copy())
        self.M[idx], self.Q[idx] = update_arrays(M, Q, Z, params.Gamma)

    def after_step(self, n):
        if n in self.record_idx:
            self.records.append((self.mu.copy(), self.M.copy(), self.Q.copy()))


def _original_task(n, streams, params, rule, n_steps, record_idx, record_arrivals):
    d = params.d
    mu0 = params.m0_bar + streams["mu0"].standard_normal((n, d)) @ sym_sqrt(params.q0_bar).T
    grid = np.linspace(0.0, params.T, n_steps + 1)
    model = OriginalMeasureModel(params, rule, n, mu0, record_idx, record_arrivals)
    run_paths(model, n, grid, params.lam, streams)
    out = {"log_u": model.log_u, "log_lam": model.log_lam, "eta": model.eta}
    if record_idx:
        out["rec_mu"] = np.stack([r[0] for r in model.records], axis=1)
        out["rec_M"] = np.stack([r[1] for r in model.records], axis=1)
        out["rec_Q"] = np.stack([r[2] for r in model.records], axis=1)
    if record_arrivals:
        out["arr_resid"] = np.concatenate(model.arrival_resid) if model.arrival_resid else np.zeros((0, d))
        out["arr_cov"] = np.concatenate(model.arrival_cov) if model.arrival_cov else np.zeros((0, d, d))
    return out


def simulate_original_batch(params: ModelParams, rule, n_paths: int, seed: int, n_steps: int = DEFAULT_STEPS,
                            record_idx=(), record_arrivals: bool = False, workers: int = 1) -> dict:
    """Run the original-measure engine; see :class:`OriginalMeasureModel`."""
    task = partial(_original_task, params=params, rule=rule, n_steps=n_steps,
                   record_idx=tuple(record_idx), record_arrivals=record_arrivals)
    return run_chunked(task, n_paths, seed, workers)


def wealth_utility_mc(rule, params: ModelParams, n_paths: int, seed: int = 0, n_steps: int = DEFAULT_STEPS,
                      workers: int = 1) -> RewardEstimate:
    """Estimate ``E[U_theta(X_T)]`` with ``U_theta(x) = x^theta / theta``."""
    out = simulate_original_batch(params, rule, n_paths, seed, n_steps, workers=workers)
    scale = params.x0 ** params.theta / params.theta
    return estimate_from_logs(out["log_u"], scale)


@dataclass
class MartingaleReport:
    mean: float
    std_error: float
    n_paths: int
    passed: bool


def lambda_martingale_check(rule, params: ModelParams, n_paths: int, seed: int = 0,
                            n_steps: int = DEFAULT_STEPS, workers: int = 1) -> MartingaleReport:
    """Check ``E[Lambda_T] = 1`` for the density of the change of measure."""
    out = simulate_original_batch(params, rule, n_paths, seed, n_steps, workers=workers)
    est = estimate_from_logs(out["log_lam"])
    passed = abs(est.mean - 1.0) <= 3.0 * est.std_error if est.std_error > 0 else est.mean == 1.0
    return MartingaleReport(est.mean, est.std_error, est.n_paths, bool(passed))


@dataclass
class IdentityReport:
    utility: float
    scaled_reward: float
    difference: float
    joint_se: float
    passed: bool


def measure_change_identity(rule, params: ModelParams, n_paths: int, seed: int = 0,
                            n_steps: int = DEFAULT_STEPS, workers: int = 1) -> IdentityReport:
    """Compare ``E[U(X_T)]`` with ``x0^theta/theta * D(0, y0)`` on common random numbers."""
    scale = params.x0 ** params.theta / params.theta
    orig = simulate_original_batch(params, rule, n_paths, seed, n_steps, workers=workers)
    state = simulate_state_batch(params, rule, n_paths, seed, None, (None,), 0.0, n_steps, workers=workers)
    a = scale * np.exp(orig["log_u"])
    b = scale * np.exp(state["v_eta"][0])
    finite_or_raise(a)
    finite_or_raise(b)
    diff, se = paired_difference(a, b)
    passed = abs(diff) <= 3.0 * se if se > 0 else diff == 0.0
    return IdentityReport(float(np.mean(a)), float(np.mean(b)), diff, se, bool(passed))


def append_ledger(path, run_id: str, rule, params: ModelParams, est: RewardEstimate, seed: int,
                  wall_time: float | None = None) -> None:
    """Append one result row to the CSV ledger (wall time left blank unless given)."""
    row = [run_id, rule.kind, params.theta, params.lam, est.n_paths, est.mean, est.std_error, seed,
           "" if wall_time is None else "%.3f" % wall_time]
    append_csv(path, LEDGER_HEADER, [row])


__all__ = [
    "IdentityReport", "MartingaleReport", "OriginalMeasureModel", "RewardEstimate", "append_ledger",
    "estimate_from_logs", "exp_mean", "lambda_martingale_check", "measure_change_identity",
    "original_value", "paired_difference", "reward_mc", "running_reward_b", "simulate_original_batch",
    "wealth_utility_mc",
]
