"""Experiments on the regularized control problem.

The regularized state adds ``W*/sqrt(k)`` to every coordinate and tapers the
coefficients outside the admissible covariance set.  Regularized and
unregularized states are simulated in lock step on the same return noise,
arrival times and marks (``W*`` is the only extra source), so their paired
differences isolate the effect of the perturbation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .control_eval import estimate_from_logs, finite_or_raise, paired_difference, reward_mc
from .dpe_solver import Grid2D, default_grid, optimal_rule, scheme_tolerance, solve_dpe
from .errors import NumericalError, StatisticalValidityError
from .io import write_csv, write_json
from .market_model import DEFAULT_STEPS, ModelParams
from .state_space import VecState, default_regularization, simulate_state_batch

UNSTABLE_FRACTION = 0.01


@dataclass
class Estimate:
    value: float
    std_error: float

    def as_list(self):
        return [self.value, self.std_error]


def gronwall_bound(k: float, params: ModelParams) -> float:
    """Leading term ``4 d_Y T / k`` of the L2 gap bound (without the exponential factor)."""
    return 4.0 * params.d_Y * params.T / k


def _configs(params, k_list, epsilon=None):
    return [default_regularization(params, k=float(k), epsilon=epsilon) for k in k_list]


def coupled_gaps(rule, y0, k_list, n_paths: int, params: ModelParams, seed: int = 0, epsilon=None,
                 n_steps: int = DEFAULT_STEPS, workers: int = 1, t0: float = 0.0) -> list[Estimate]:
    """MC estimates of ``E[max_t |kY_t - Y_t|^2]`` for every k, all on one shared noise set."""
    cfgs = _configs(params, k_list, epsilon)
    out = simulate_state_batch(params, rule, n_paths, seed, y0, [None, *cfgs], t0, n_steps, workers=workers)
    res = []
    for v in range(1, len(cfgs) + 1):
        g, _ = finite_or_raise(out["v_gap"][v])
        res.append(Estimate(float(np.mean(g)), float(np.std(g, ddof=1) / np.sqrt(g.size))))
    return res


def coupled_gap(rule, y0, k, n_paths: int, params: ModelParams, seed: int = 0, **kw) -> Estimate:
    return coupled_gaps(rule, y0, [k], n_paths, params, seed, **kw)[0]


def reward_gap(rule, y0, k_list, n_paths: int, params: ModelParams, seed: int = 0, epsilon=None,
               n_steps: int = DEFAULT_STEPS, workers: int = 1) -> list[Estimate]:
    """Paired estimates of ``|E exp(k eta) - E exp(eta)|`` with the standard error of the difference."""
    cfgs = _configs(params, k_list, epsilon)
    out = simulate_state_batch(params, rule, n_paths, seed, y0, [None, *cfgs], 0.0, n_steps, workers=workers)
    base = np.exp(out["v_eta"][0])
    res = []
    for v in range(1, len(cfgs) + 1):
        diff, se = paired_difference(np.exp(out["v_eta"][v]), base)
        res.append(Estimate(abs(diff), se))
    return res


@dataclass
class MomentEstimate:
    value: float
    std_error: float
    max_log_sample: float
    unstable: bool


def _moment(eta: np.ndarray, delta: float) -> MomentEstimate:
    x = (1.0 + delta) * eta
    bad = ~np.isfinite(x)
    unstable = bool(bad.mean() > UNSTABLE_FRACTION)
    try:
        est = estimate_from_logs(x[~bad])
    except StatisticalValidityError:
        return MomentEstimate(float("nan"), float("nan"), float("nan"), True)
    return MomentEstimate(est.mean, est.std_error, float(np.max(x[~bad])), unstable)


def exp_moment_diag(rule, y0, delta: float, k, n_paths: int, params: ModelParams, seed: int = 0,
                    epsilon=None, n_steps: int = DEFAULT_STEPS, workers: int = 1) -> MomentEstimate:
    """``E[exp((1 + delta) k eta)]`` in log space, with the largest exponent seen."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    cfg = default_regularization(params, k=float(k), epsilon=epsilon) if k is not None else None
    out = simulate_state_batch(params, rule, n_paths, seed, y0, [cfg], 0.0, n_steps, workers=workers)
    return _moment(out["v_eta"][0], delta)


def exp_moments(rule, y0, delta: float, k_list, n_paths: int, params: ModelParams, seed: int = 0,
                epsilon=None, n_steps: int = DEFAULT_STEPS, workers: int = 1) -> list[MomentEstimate]:
    cfgs = _configs(params, k_list, epsilon)
    out = simulate_state_batch(params, rule, n_paths, seed, y0, cfgs, 0.0, n_steps, workers=workers)
    return [_moment(out["v_eta"][v], delta) for v in range(len(cfgs))]


@dataclass
class EpsOptimality:
    k_values: list
    gaps: list            # |V - D(0, y0; k-rule)| per k
    std_errors: list
    rewards: list         # D(0, y0; k-rule) per k
    values_k: list        # regularized values at (0, y0)
    value: float          # unregularized value at (0, y0)
    scheme_tolerance: float


def eps_optimality(params: ModelParams, grid: Grid2D | None, k_list, n_paths: int, seed: int = 0,
                   n_steps: int = DEFAULT_STEPS, workers: int = 1, base=None, tol=None) -> EpsOptimality:
    """Evaluate optimal rules of the regularized problems on the unregularized dynamics."""
    if grid is None:
        grid = default_grid(params)
    if base is None:
        base = solve_dpe(params, grid)
    if tol is None:
        tol = scheme_tolerance(params, grid, fine=base)
    m0, q0 = float(params.m0[0]), float(params.q0[0, 0])
    V = float(base.value_at(0.0, m0, q0))
    y0 = VecState.from_mq(params.m0, params.q0)
    gaps, ses, rewards, vk = [], [], [], []
    for k in k_list:
        try:
            vg = solve_dpe(params, grid, k=float(k))
        except NumericalError as exc:
            raise NumericalError(f"regularized solve failed for k={k}: {exc}") from exc
        rule = optimal_rule(vg)
        est = reward_mc(rule, 0.0, y0, n_paths, params, None, seed, n_steps, workers)
        gaps.append(abs(V - est.mean))
        ses.append(est.std_error)
        rewards.append(est.mean)
        vk.append(float(vg.value_at(0.0, m0, q0)))
    return EpsOptimality(list(k_list), gaps, ses, rewards, vk, V, tol)


def rate_check(k_values, gaps, factor: float = 10.0) -> bool:
    """``gap(k) k`` stays within ``factor`` of its value at the largest k."""
    k = np.asarray(k_values, dtype=float)
    g = np.asarray(gaps, dtype=float)
    ref = g[np.argmax(k)] * k.max()
    scaled = g * k
    return bool(np.all(scaled <= factor * ref) and np.all(scaled >= ref / factor))


def non_increasing(values, ses, slack: float = 1.0) -> bool:
    """Each value is at most the previous one plus ``slack`` standard errors of the pair."""
    v = np.asarray(values, dtype=float)
    s = np.asarray(ses, dtype=float)
    for i in range(1, v.size):
        if v[i] > v[i - 1] + slack * np.hypot(s[i], s[i - 1]):
            return False
    return True


@dataclass
class ConvergenceReport:
    k_values: list
    l2_gaps: list
    l2_gap_se: list
    reward_gaps: list
    reward_gap_se: list
    exp_moments: list
    exp_moment_se: list
    exp_moment_max_log: list
    eps_opt_gaps: list = field(default_factory=list)
    eps_opt_se: list = field(default_factory=list)
    value_gaps: list = field(default_factory=list)
    gronwall_bounds: list = field(default_factory=list)
    value: float | None = None
    scheme_tolerance: float | None = None
    delta: float = 0.5
    epsilon: float | None = None
    n_paths: int = 0
    seed: int = 0
    rule_kind: str = "myopic"

    def as_dict(self) -> dict:
        return asdict(self)

    def check_finite(self) -> None:
        for key in ("l2_gaps", "reward_gaps", "exp_moments", "eps_opt_gaps"):
            vals = np.asarray(getattr(self, key), dtype=float)
            if vals.size and not np.all(np.isfinite(vals)):
                raise StatisticalValidityError(f"non-finite entries in {key}")

    def to_json(self, path) -> None:
        write_json(path, self.as_dict())

    def to_csv(self, path) -> None:
        rows = []
        metrics = [("l2_gap", self.l2_gaps, self.l2_gap_se), ("reward_gap", self.reward_gaps, self.reward_gap_se),
                   ("exp_moment", self.exp_moments, self.exp_moment_se),
                   ("eps_opt_gap", self.eps_opt_gaps, self.eps_opt_se)]
        for name, est, se in metrics:
            for k, e, s in zip(self.k_values, est, se):
                rows.append([k, name, e, s])
        for k, e in zip(self.k_values, self.value_gaps):
            rows.append([k, "value_gap", e, ""])
        write_csv(path, ["k", "metric", "estimate", "std_error"], rows)


def convergence_report(params: ModelParams, rule, k_list, n_paths: int, seed: int = 0, delta: float = 0.5,
                       epsilon=None, grid: Grid2D | None = None, n_steps: int = DEFAULT_STEPS,
                       workers: int = 1, with_pide: bool = True) -> ConvergenceReport:
    """Run every diagnostic over ``k_list`` and collect the results."""
    y0 = VecState.from_mq(params.m0, params.q0)
    k_list = [float(k) for k in k_list]
    l2 = coupled_gaps(rule, y0, k_list, n_paths, params, seed, epsilon, n_steps, workers)
    rg = reward_gap(rule, y0, k_list, n_paths, params, seed, epsilon, n_steps, workers)
    mom = exp_moments(rule, y0, delta, k_list, n_paths, params, seed, epsilon, n_steps, workers)
    eps = default_regularization(params, epsilon=epsilon).epsilon
    rep = ConvergenceReport(
        k_values=k_list,
        l2_gaps=[e.value for e in l2], l2_gap_se=[e.std_error for e in l2],
        reward_gaps=[e.value for e in rg], reward_gap_se=[e.std_error for e in rg],
        exp_moments=[e.value for e in mom], exp_moment_se=[e.std_error for e in mom],
        exp_moment_max_log=[e.max_log_sample for e in mom],
        gronwall_bounds=[gronwall_bound(k, params) for k in k_list],
        delta=delta, epsilon=eps, n_paths=n_paths, seed=seed, rule_kind=rule.kind,
    )
    if with_pide and params.d == 1:
        res = eps_optimality(params, grid, k_list, n_paths, seed, n_steps, workers)
        rep.eps_opt_gaps = res.gaps
        rep.eps_opt_se = res.std_errors
        rep.value_gaps = [abs(v - res.value) for v in res.values_k]
        rep.value = res.value
        rep.scheme_tolerance = res.scheme_tolerance
    rep.check_finite()
    return rep
