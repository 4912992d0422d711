"""Gaussian filter for the hidden drift given returns and expert views.

Between arrivals the conditional covariance follows the Riccati ODE
``dQ = (Sigma_mu - kappa Q - Q kappa^T - Q Sigma_R^{-1} Q) dt`` and the
conditional mean is driven by the return surprise.  At an arrival the pair is
updated by the conjugate Gaussian formulas with shrinkage ``rho = Gamma (Q + Gamma)^{-1}``.

All matrix helpers accept stacks (leading path axes) so the same code serves
single paths and vectorized Monte Carlo batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._linalg import clip_psd, row_sum_norm, symmetrize
from .errors import ConsistencyError, GridError, NumericalError, ParameterError
from .market_model import ExpertView, ModelParams, PathBundle

SUBSTEP_TRIGGER = 0.1
N_SUBSTEPS = 4
CQ_MARGIN = 1.5


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over stacks; plain multiplication when the matrices are 1x1."""
    if a.shape[-1] == 1 and b.shape[-2] == 1:
        return a * b
    return a @ b


def mv(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Stacked matrix-vector product ``a x``."""
    if a.shape[-1] == 1:
        return a[..., 0] * x
    return (a @ x[..., None])[..., 0]


def riccati_rhs(Q, params: ModelParams) -> np.ndarray:
    """``Sigma_mu - kappa Q - Q kappa^T - Q Sigma_R^{-1} Q`` (works on stacks)."""
    Q = np.asarray(Q, dtype=float)
    kQ = mm(params.kappa, Q)
    return params.Sigma_mu - kQ - np.swapaxes(kQ, -1, -2) - mm(mm(Q, params.Sigma_R_inv), Q)


def _rk4(Q, h, params):
    k1 = riccati_rhs(Q, params)
    k2 = riccati_rhs(Q + 0.5 * h * k1, params)
    k3 = riccati_rhs(Q + 0.5 * h * k2, params)
    k4 = riccati_rhs(Q + h * k3, params)
    return symmetrize(Q + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


def riccati_step(Q, h, params: ModelParams) -> np.ndarray:
    """One RK4 step of length ``h`` (scalar or per-path array), symmetrized.

    Entries whose vector field is large relative to the state
    (``|rhs| h > 0.1 |Q|``) are redone with four sub-steps.
    """
    Q = np.asarray(Q, dtype=float)
    h = np.asarray(h, dtype=float)
    hb = h[..., None, None] if h.ndim else h
    out = _rk4(Q, hb, params)
    stiff = row_sum_norm(riccati_rhs(Q, params)) * h > SUBSTEP_TRIGGER * row_sum_norm(Q)
    if np.any(stiff):
        if Q.ndim == 2:
            q = Q
            for _ in range(N_SUBSTEPS):
                q = _rk4(q, hb / N_SUBSTEPS, params)
            out = q
        else:
            idx = np.nonzero(stiff)
            q = Q[idx]
            hs = (hb[idx] if np.ndim(hb) else hb) / N_SUBSTEPS
            for _ in range(N_SUBSTEPS):
                q = _rk4(q, hs, params)
            out[idx] = q
    return clip_psd(out)


def integrate_riccati(Q0, t0: float, t1: float, step: float, params: ModelParams) -> np.ndarray:
    """Integrate the Riccati ODE from ``t0`` to ``t1`` with steps no longer than ``step``."""
    if step <= 0:
        raise ParameterError("step must be positive")
    if t1 < t0:
        raise ParameterError("t1 must not precede t0")
    Q = np.array(Q0, dtype=float, ndmin=2)
    if t1 == t0:
        return Q
    n = int(np.ceil((t1 - t0) / step - 1e-12))
    h = (t1 - t0) / n
    for _ in range(n):
        Q = riccati_step(Q, h, params)
    return Q


def stationary_covariance(params: ModelParams, tol: float = 1e-14, max_iter: int = 200) -> np.ndarray:
    """Stabilizing root of the algebraic Riccati equation (Newton-Kleinman iteration).

    Starts from ``Sigma_R``, for which ``-kappa - Q Sigma_R^{-1}`` is stable, and
    solves one Lyapunov equation per Newton step.
    """
    q = params.Sigma_R.copy()
    R = params.Sigma_R_inv
    for _ in range(max_iter):
        A = -params.kappa - q @ R
        rhs = -(params.Sigma_mu + q @ R @ q)
        q_new = symmetrize(scipy.linalg.solve_continuous_lyapunov(A, rhs))
        if np.max(np.abs(q_new - q)) <= tol * max(1.0, np.max(np.abs(q_new))):
            return q_new
        q = q_new
    return q


def covariance_bound(params: ModelParams, q_star=None) -> float:
    """Bound C_Q on the row-sum norm of the filter covariance: 1.5 max(|q0|, |q*|)."""
    if q_star is None:
        q_star = stationary_covariance(params)
    return CQ_MARGIN * float(max(row_sum_norm(params.q0), row_sum_norm(q_star)))


@dataclass(frozen=True)
class FilterState:
    t: float
    M: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "M", np.atleast_1d(np.asarray(self.M, dtype=float)))
        object.__setattr__(self, "Q", np.atleast_2d(np.asarray(self.Q, dtype=float)))


def mean_step(M, Q, dR, dt, params: ModelParams):
    """Euler step of the conditional mean (stacked): returns the new mean."""
    return M + mv(params.kappa, params.mu_bar - M) * dt + mv(mm(Q, params.Sigma_R_inv), dR - M * dt)


def propagate_mean(state: FilterState, dR, dt: float, params: ModelParams) -> FilterState:
    """Advance mean and covariance over ``dt`` given the return increment ``dR``."""
    if dt <= 0:
        raise ParameterError("dt must be positive")
    dR = np.atleast_1d(np.asarray(dR, dtype=float))
    M = mean_step(state.M, state.Q, dR, dt, params)
    Q = riccati_step(state.Q, dt, params)
    return FilterState(state.t + dt, M, Q)


def update_arrays(M, Q, Z, Gamma):
    """Conjugate update on stacks: ``rho = Gamma (Q+Gamma)^{-1}``, ``M <- rho M + (I-rho) Z``, ``Q <- rho Q``.

    The mean is formed as ``M + K (Z - M)`` with ``K = I - rho = Q (Q+Gamma)^{-1}``,
    which returns M exactly when Q = 0.
    """
    Gamma = np.asarray(Gamma, dtype=float)
    S = Q + Gamma
    if Q.shape[-1] == 1:
        rho = Gamma / S
        K = Q / S
    else:
        # rho = Gamma S^{-1} = (S^{-1} Gamma)^T since both are symmetric, likewise K
        rho = np.swapaxes(np.linalg.solve(S, np.broadcast_to(Gamma, S.shape)), -1, -2)
        K = np.swapaxes(np.linalg.solve(S, Q), -1, -2)
    M_new = M + mv(K, Z - M)
    Q_new = clip_psd(symmetrize(mm(rho, Q)))
    return M_new, Q_new


def bayes_update(state: FilterState, view: ExpertView, Gamma) -> FilterState:
    """Posterior state after observing ``view`` (a ModelParams may be passed for Gamma)."""
    if isinstance(Gamma, ModelParams):
        Gamma = Gamma.Gamma
    Gamma = np.atleast_2d(np.asarray(Gamma, dtype=float))
    if abs(view.arrival_time - state.t) > 1e-9 * max(1.0, abs(state.t)):
        raise GridError("view time does not match the filter time")
    M, Q = update_arrays(state.M, state.Q, np.asarray(view.value, dtype=float), Gamma)
    return FilterState(state.t, M, Q)


def view_predictive(state: FilterState, Gamma):
    """Conditional law of the next view: ``(M, Gamma + Q)``."""
    if isinstance(Gamma, ModelParams):
        Gamma = Gamma.Gamma
    return state.M.copy(), symmetrize(np.atleast_2d(Gamma) + state.Q)


# flags for filter path rows
REGULAR, PRE_UPDATE, POST_UPDATE = 0, 1, 2


@dataclass
class FilterPath:
    """Filter output; arrivals produce two rows (pre- and post-update) at the same time."""

    t: np.ndarray
    M: np.ndarray
    Q: np.ndarray
    flag: np.ndarray

    def on_grid(self):
        """Rows with one entry per grid point (post-update values at arrivals)."""
        keep = self.flag != PRE_UPDATE
        return self.t[keep], self.M[keep], self.Q[keep]

    def pre_update(self):
        keep = self.flag == PRE_UPDATE
        return self.t[keep], self.M[keep], self.Q[keep]

    def to_csv(self, path) -> None:
        from .io import write_csv
        from .state_space import mat_to_vec

        d = self.M.shape[1]
        g = np.array([mat_to_vec(q) for q in self.Q]).reshape(len(self.t), -1)
        names = [f"g_{i + 1}" for i in range(g.shape[1])]
        header = ["t"] + [f"M_{i + 1}" for i in range(d)] + names + ["flag"]
        write_csv(path, header, [[*r[:-1], int(r[-1])] for r in np.column_stack([self.t, self.M, g, self.flag])])


def run_filter(bundle: PathBundle, m0, q0, params: ModelParams) -> FilterPath:
    """Run the filter along a bundle; views must sit on grid points."""
    grid = bundle.grid
    dR = np.diff(bundle.return_path, axis=0)
    arrivals = {}
    for v in bundle.views:
        i = int(np.searchsorted(grid, v.arrival_time))
        if i >= grid.size or abs(grid[i] - v.arrival_time) > 1e-12 * max(1.0, params.T):
            raise GridError(f"view at t={v.arrival_time} is not a grid point")
        arrivals[i] = v
    d = params.d
    ts, Ms, Qs, flags = [], [], [], []
    M = np.array(m0, dtype=float).reshape(d)
    Q = clip_psd(np.array(q0, dtype=float).reshape(d, d))

    def emit(t, flag):
        ts.append(t)
        Ms.append(M.copy())
        Qs.append(Q.copy())
        flags.append(flag)

    for n in range(grid.size):
        if n > 0:
            h = grid[n] - grid[n - 1]
            M = mean_step(M, Q, dR[n - 1], h, params)
            Q = riccati_step(Q, h, params)
        if n in arrivals:
            emit(grid[n], PRE_UPDATE)
            M, Q = update_arrays(M, Q, arrivals[n].value, params.Gamma)
            emit(grid[n], POST_UPDATE)
        else:
            emit(grid[n], REGULAR)
    return FilterPath(np.array(ts), np.array(Ms), np.array(Qs), np.array(flags, dtype=int))


def check_covariance_bound(path: FilterPath, bound: float) -> int:
    """Number of rows with ``|Q| > bound``."""
    return int(np.sum(row_sum_norm(path.Q) > bound))


def assert_covariance_bound(path: FilterPath, bound: float) -> None:
    n = check_covariance_bound(path, bound)
    if n:
        raise ConsistencyError(f"{n} filter rows exceed the covariance bound {bound}")


__all__ = [
    "FilterPath", "FilterState", "NumericalError", "bayes_update", "covariance_bound",
    "integrate_riccati", "propagate_mean", "riccati_rhs", "riccati_step", "run_filter",
    "stationary_covariance", "update_arrays", "view_predictive",
]
