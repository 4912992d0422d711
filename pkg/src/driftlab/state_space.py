"""Control-problem state y = (m, g) under the changed measure.

``g`` is the lower triangle of the covariance ``q`` stacked row by row
(q11, q21, q22, q31, ...).  Under the changed measure the state follows

    dm = (kappa (mu_bar - m) + theta q p) dt + q Sigma_R^{-1/2} dW_bar + jumps
    dq = (Sigma_mu - kappa q - q kappa^T - q Sigma_R^{-1} q) dt + jumps

where a view arrival with Gaussian mark u moves m by ``q (q+Gamma)^{-1/2} u``
and q by ``-q (q+Gamma)^{-1} q``.  The regularized version multiplies all
coefficients by a taper that vanishes away from the admissible covariance set
and adds ``W*/sqrt(k)`` on every coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np

from ._linalg import row_sum_norm, sym_inv_sqrt, symmetrize
from .errors import ConsistencyError, DimensionError, NumericalError, ParameterError
from .filter import _rk4, covariance_bound, mm, mv, riccati_rhs, riccati_step, stationary_covariance
from .market_model import DEFAULT_STEPS, ModelParams
from .simulation import Noise, PathModel, run_chunked, run_paths

SG_TOL = 1e-6


def vec_index(i: int, j: int) -> int:
    """1-based position of q_ij (j <= i) inside g."""
    if not (1 <= j <= i):
        raise IndexError(f"need 1 <= j <= i, got ({i}, {j})")
    return i * (i - 1) // 2 + j


def _tril(d: int):
    return np.tril_indices(d)


def mat_to_vec(q) -> np.ndarray:
    """Lower triangle of a symmetric matrix (or stack) in row order."""
    q = np.asarray(q, dtype=float)
    if q.ndim < 2 or q.shape[-1] != q.shape[-2]:
        raise DimensionError("q must be square")
    if np.max(np.abs(q - np.swapaxes(q, -1, -2)), initial=0.0) > 1e-10:
        raise ValueError("q is not symmetric")
    r, c = _tril(q.shape[-1])
    return q[..., r, c]


def dim_from_vec(n: int) -> int:
    d = int(round((np.sqrt(8 * n + 1) - 1) / 2))
    if d * (d + 1) // 2 != n:
        raise DimensionError(f"{n} is not a triangular number")
    return d


def vec_to_mat(g) -> np.ndarray:
    """Inverse of :func:`mat_to_vec`; fills both triangles."""
    g = np.asarray(g, dtype=float)
    d = dim_from_vec(g.shape[-1])
    q = np.zeros(g.shape[:-1] + (d, d))
    r, c = _tril(d)
    q[..., r, c] = g
    q[..., c, r] = g
    return q


@dataclass(frozen=True)
class VecState:
    m: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", np.atleast_1d(np.asarray(self.m, dtype=float)))
        object.__setattr__(self, "g", np.atleast_1d(np.asarray(self.g, dtype=float)))
        if self.g.size != self.m.size * (self.m.size + 1) // 2:
            raise DimensionError("g has the wrong length for m")

    @classmethod
    def from_mq(cls, m, q) -> "VecState":
        return cls(m, mat_to_vec(np.atleast_2d(q)))

    @property
    def q(self) -> np.ndarray:
        return vec_to_mat(self.g)

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.m, self.g])


@dataclass(frozen=True)
class RegularizationConfig:
    """Taper width ``epsilon``, perturbation index ``k`` (None: no noise) and radius ``K_G``."""

    epsilon: float
    k: float | None
    K_G: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")
        if self.k is not None and not self.k > 0:
            raise ParameterError("k must be positive")
        if not self.K_G > 0:
            raise ParameterError("K_G must be positive")

    def check(self, params: ModelParams) -> None:
        lam_min = float(np.linalg.eigvalsh(params.Gamma).min())
        if not lam_min > self.epsilon * params.d:
            raise ParameterError("epsilon too large: q + Gamma may become singular near the boundary")

    def with_k(self, k) -> "RegularizationConfig":
        return RegularizationConfig(self.epsilon, k, self.K_G)


def default_epsilon(params: ModelParams) -> float:
    return 0.1 * min(1.0, float(np.linalg.eigvalsh(params.Gamma).min())) / params.d


def default_regularization(params: ModelParams, k=None, epsilon=None) -> RegularizationConfig:
    cfg = RegularizationConfig(default_epsilon(params) if epsilon is None else float(epsilon),
                               k, covariance_bound(params))
    cfg.check(params)
    return cfg


# ---------------------------------------------------------------- coefficients


def distance_to_SG(q, K_G: float) -> np.ndarray:
    """Distance of g = vech(q) to the admissible set (stacked).

    The set is {max|g| <= K_G, q PSD}: the max-norm excess over the ball
    combined with the amount by which q fails to be PSD.
    """
    q = np.asarray(q, dtype=float)
    if q.shape[-1] == 1:
        v = q[..., 0, 0]
        return np.maximum(0.0, np.maximum(np.abs(v) - K_G, -v))
    gmax = np.max(np.abs(q), axis=(-1, -2))
    lmin = np.linalg.eigvalsh(symmetrize(q))[..., 0]
    return np.maximum(0.0, np.maximum(gmax - K_G, -lmin))


def taper(q, cfg: RegularizationConfig) -> np.ndarray:
    """``max(0, 1 - dist/epsilon)``: 1 on the admissible set, 0 outside its epsilon-neighborhood."""
    return np.maximum(0.0, 1.0 - distance_to_SG(q, cfg.K_G) / cfg.epsilon)


def drift_m(m, q, p, params: ModelParams):
    return mv(params.kappa, params.mu_bar - m) + params.theta * mv(q, p)


def jump_sizes(q, u, Gamma):
    """(gamma_M, gamma_Q) for stacked q and marks u."""
    S = q + Gamma
    if q.shape[-1] == 1:
        if np.any(S <= 0):
            raise NumericalError("q + Gamma is not positive definite")
        gM = (q[..., 0] / np.sqrt(S[..., 0])) * u
        gQ = -q * q / S
        return gM, gQ
    w = np.linalg.eigvalsh(S)
    if np.any(w <= 0):
        raise NumericalError("q + Gamma is not positive definite")
    gM = mv(q @ sym_inv_sqrt(S), u)
    gQ = -symmetrize(q @ np.linalg.solve(S, q))
    return gM, gQ


def running_reward_b(m, p, params: ModelParams):
    """``theta (p.m - (1-theta)/2 |sigma_X p|^2)`` (stacked over leading axes)."""
    m = np.asarray(m, dtype=float)
    p = np.asarray(p, dtype=float)
    quad = np.sum(p * mv(params.Sigma_R, p), axis=-1)
    return params.theta * (np.sum(p * m, axis=-1) - 0.5 * (1.0 - params.theta) * quad)


def coeffs(y: VecState, p, params: ModelParams):
    """Drift (d_Y), diffusion (d_Y x d) and jump map u -> (d_Y) of the state SDE.

    The g-drift contains the jump compensation ``lam gamma_Q``, so that it
    describes the SDE driven by the compensated jump measure.
    """
    d = params.d
    q = y.q
    p = np.atleast_1d(np.asarray(p, dtype=float))
    S = q + params.Gamma
    if np.linalg.eigvalsh(S).min() <= 0:
        raise NumericalError("q + Gamma is singular")
    gQ = -symmetrize(q @ np.linalg.solve(S, q))
    aM = drift_m(y.m, q, p, params)
    aQ = riccati_rhs(q, params) + params.lam * gQ
    alpha = np.concatenate([aM, mat_to_vec(symmetrize(aQ))])
    beta = np.zeros((params.d_Y, d))
    beta[:d] = q @ params.Sigma_R_inv_sqrt
    B = q @ sym_inv_sqrt(S)
    gvec = mat_to_vec(gQ)

    def gamma(u):
        return np.concatenate([B @ np.atleast_1d(u), gvec])

    return alpha, beta, gamma


def extended_coeffs(y: VecState, p, cfg: RegularizationConfig, params: ModelParams):
    """Coefficients multiplied by the taper; identically zero outside the epsilon-neighborhood."""
    tau = float(taper(y.q, cfg))
    if tau == 0.0:
        zero = np.zeros(params.d_Y)
        return zero, np.zeros((params.d_Y, params.d)), lambda u: zero.copy()
    alpha, beta, gamma = coeffs(y, p, params)
    return tau * alpha, tau * beta, (lambda u: tau * gamma(u))


def regularized_diffusion_matrix(y: VecState, cfg: RegularizationConfig, params: ModelParams) -> np.ndarray:
    """``beta~ beta~^T + I/(2k)`` for the extended diffusion coefficient."""
    if cfg.k is None:
        raise ParameterError("regularization index k is required")
    _, beta, _ = extended_coeffs(y, np.zeros(params.d), cfg, params)
    return beta @ beta.T + np.eye(params.d_Y) / (2.0 * cfg.k)


# ---------------------------------------------------------------- simulation


class ChangedMeasureModel(PathModel):
    """Lock-step simulation of one or more variants of the state on shared noise.

    ``variants`` is a list of RegularizationConfig or None (unregularized).
    All variants share the arrival times, marks and W_bar; regularized ones
    share W* scaled by their own 1/sqrt(k).  Gaps are measured against
    variant 0.
    """

    state_names = ("v_m", "v_Q", "v_p", "v_b", "v_eta")

    def __init__(self, params, rule, variants, n_paths, m0, q0, t0=0.0, record_idx=(), K_check=None):
        self.params = params
        self.rule = rule
        self.variants = list(variants)
        d = params.d
        self.mark_dim = d
        self.noises = [Noise("W_R", params.d1)]
        if any(c is not None and c.k is not None for c in self.variants):
            self.noises.append(Noise("W_star", params.d_Y))
        V = len(self.variants)
        self.v_m = np.broadcast_to(np.asarray(m0, dtype=float).reshape(d), (V, n_paths, d)).copy()
        self.v_Q = np.broadcast_to(np.asarray(q0, dtype=float).reshape(d, d), (V, n_paths, d, d)).copy()
        self.v_p = np.empty((V, n_paths, d))
        self.v_b = np.empty((V, n_paths))
        self.v_eta = np.zeros((V, n_paths))
        for v in range(V):
            self.v_p[v] = rule(t0, self.v_m[v], self.v_Q[v])
            self.v_b[v] = running_reward_b(self.v_m[v], self.v_p[v], params)
        self.gap = np.zeros((V, n_paths))
        self.K_check = K_check
        self.record_idx = set(int(i) for i in record_idx)
        self.records = []
        self._sig_inv_sqrt = params.Sigma_R_inv_sqrt
        self._map = params.innovation_map
        r, c = _tril(d)
        self._tril = (r, c)

    def _noise_mat(self, w):
        d = self.params.d
        q = np.zeros(w.shape[:-1] + (d, d))
        r, c = self._tril
        q[..., r, c] = w
        q[..., c, r] = w
        return q

    def advance(self, idx, t, h, draws):
        params = self.params
        d = params.d
        dWbar = draws["W_R"] @ self._map.T
        ws = draws.get("W_star")
        hv = h[:, None] if np.ndim(h) else h
        t1 = t + h
        for v, cfg in enumerate(self.variants):
            m = self.v_m[v, idx]
            Q = self.v_Q[v, idx]
            p = self.v_p[v, idx]
            dm = drift_m(m, Q, p, params) * hv + mv(mm(Q, self._sig_inv_sqrt), dWbar)
            if cfg is None:
                Qn = riccati_step(Q, h, params)
                mn = m + dm
                if self.K_check is not None and np.any(row_sum_norm(Qn) > self.K_check * (1 + SG_TOL)):
                    raise ConsistencyError("unregularized covariance state left its admissible set")
            else:
                tau = taper(Q, cfg)
                hb = h[:, None, None] if np.ndim(h) else h
                inc = _rk4(Q, hb, params) - Q
                Qn = Q + tau[:, None, None] * inc
                mn = m + tau[:, None] * dm
                if cfg.k is not None:
                    s = 1.0 / np.sqrt(cfg.k)
                    mn = mn + s * ws[:, :d]
                    Qn = Qn + s * self._noise_mat(ws[:, d:])
            pn = self.rule(t1, mn, Qn)
            bn = running_reward_b(mn, pn, params)
            self.v_eta[v, idx] += 0.5 * (self.v_b[v, idx] + bn) * h
            self.v_m[v, idx] = mn
            self.v_Q[v, idx] = Qn
            self.v_p[v, idx] = pn
            self.v_b[v, idx] = bn

    def jump(self, idx, t, marks):
        params = self.params
        for v, cfg in enumerate(self.variants):
            m = self.v_m[v, idx]
            Q = self.v_Q[v, idx]
            if cfg is None:
                gM, gQ = jump_sizes(Q, marks, params.Gamma)
                mn, Qn = m + gM, Q + gQ
            else:
                tau = taper(Q, cfg)
                Qs = np.where((tau > 0)[:, None, None], Q, 0.0)
                gM, gQ = jump_sizes(Qs, marks, params.Gamma)
                mn = m + tau[:, None] * gM
                Qn = Q + tau[:, None, None] * gQ
            pn = self.rule(t, mn, Qn)
            self.v_m[v, idx] = mn
            self.v_Q[v, idx] = Qn
            self.v_p[v, idx] = pn
            self.v_b[v, idx] = running_reward_b(mn, pn, params)

    def after_step(self, n):
        if n in self.record_idx:
            self.records.append((n, self.v_m.copy(), self.v_Q.copy()))
        for v in range(1, len(self.variants)):
            dm = np.max(np.abs(self.v_m[v] - self.v_m[0]), axis=-1)
            dq = np.max(np.abs(self.v_Q[v] - self.v_Q[0]), axis=(-1, -2))
            self.gap[v] = np.maximum(self.gap[v], np.maximum(dm, dq) ** 2)


def _state_task(n, streams, params, rule, variants, m0, q0, t0, n_steps, record_idx, K_check):
    grid = np.linspace(t0, params.T, n_steps + 1)
    model = ChangedMeasureModel(params, rule, variants, n, m0, q0, t0, record_idx, K_check)
    run_paths(model, n, grid, params.lam, streams)
    out = {"v_eta": model.v_eta, "v_gap": model.gap}
    if record_idx:
        out["v_rec_m"] = np.stack([r[1] for r in model.records], axis=2)
        out["v_rec_Q"] = np.stack([r[2] for r in model.records], axis=2)
    return out


def simulate_state_batch(params: ModelParams, rule, n_paths: int, seed: int, y0: VecState | None = None,
                         variants=(None,), t0: float = 0.0, n_steps: int = DEFAULT_STEPS,
                         record_idx=(), workers: int = 1) -> dict:
    """Simulate ``n_paths`` state paths for every variant on shared noise.

    Returns ``v_eta`` (V, N) integrated running rewards (trapezoid rule),
    ``v_gap`` (V, N) the running max over grid times of the squared max-norm
    distance to variant 0 and, when ``record_idx`` is given, the states at those
    grid indices as ``v_rec_m`` (V, N, R, d) and ``v_rec_Q`` (V, N, R, d, d).
    """
    if y0 is None:
        y0 = VecState.from_mq(params.m0, params.q0)
    q0 = y0.q
    if np.linalg.eigvalsh(q0).min() < -1e-12:
        raise ParameterError("initial covariance state must be PSD")
    q_star = stationary_covariance(params)
    K_check = 1.5 * max(float(row_sum_norm(q0)), float(row_sum_norm(params.q0)), float(row_sum_norm(q_star)))
    for c in variants:
        if c is not None:
            c.check(params)
    task = partial(_state_task, params=params, rule=rule, variants=list(variants), m0=y0.m, q0=q0, t0=t0,
                   n_steps=n_steps, record_idx=tuple(record_idx), K_check=K_check)
    return run_chunked(task, n_paths, seed, workers)


@dataclass
class StatePath:
    t: np.ndarray
    m: np.ndarray
    g: np.ndarray
    eta: np.ndarray


def simulate_state(y0: VecState, rule, params: ModelParams, cfg: RegularizationConfig | None = None,
                   n_paths: int = 1, seed: int = 0, t0: float = 0.0, n_steps: int = DEFAULT_STEPS,
                   workers: int = 1) -> StatePath:
    """State paths under the changed measure recorded at every base grid point."""
    idx = tuple(range(n_steps + 1))
    out = simulate_state_batch(params, rule, n_paths, seed, y0, (cfg,), t0, n_steps, idx, workers)
    m = out["v_rec_m"][0]
    g = mat_to_vec(symmetrize(out["v_rec_Q"][0]))
    return StatePath(np.linspace(t0, params.T, n_steps + 1), m, g, out["v_eta"][0])
