"""Finite-difference solver for the one-asset dynamic programming equation.

With ``L = log V`` and the optimal position substituted back, the equation reads

    0 = L_t + A L_m + abar L_q + s/2 L_mm + c L_m^2 + P + lam (J[L] - 1)

    A    = kappa (mu_bar - m) + theta/(1-theta) q m / Sigma_R
    abar = Sigma_mu - 2 kappa q - q^2 / Sigma_R         (Riccati vector field)
    s    = q^2 / Sigma_R,   c = q^2 / (2 Sigma_R (1-theta))
    P    = theta m^2 / (2 (1-theta) Sigma_R)
    J[L] = E[exp(L(m + q u / sqrt(q+Gamma), q Gamma/(q+Gamma)) - L(m, q))],  u ~ N(0, 1)

with ``L(T) = 0``.  One backward step:

1. transport along the Riccati flow in q (semi-Lagrangian, cubic interpolation);
   the flow maps the box into itself because ``abar(0) >= 0`` and
   ``abar(q_hi) < 0`` once ``q_hi`` exceeds the stationary root;
2. implicit solve of the m-operator (banded, with the L_m^2 term linearized
   around the current iterate), with the potential and jump terms explicit.

Two sweeps with steps ``dt`` and ``dt/2`` are combined by Richardson
extrapolation, which removes the first-order splitting error in time.

The regularized equation multiplies every model coefficient by the taper of
the admissible covariance set and adds ``(L_mm + L_m^2 + L_qq + L_q^2) / (2k)``.
It is solved on a q-range extended beyond the taper band by a few diffusion
lengths, with a third implicit sweep along q and reflecting far ends.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numpy.polynomial.hermite_e import hermegauss

from .errors import GridError, NumericalError, ParameterError
from .filter import covariance_bound, stationary_covariance
from .io import read_csv, read_json, write_csv, write_json
from .market_model import ModelParams
from .rules import DecisionRule, default_clip, interp_grid, myopic_rule  # noqa: F401  (re-export)

GH_ORDER = 11
CFL_SAFETY = 0.4
LOG_FLOOR = np.log(1e-300)
LOG_CEIL = 700.0


@dataclass(frozen=True)
class Grid2D:
    """Uniform (t, m, q) lattice; ``dt`` caps the internal time step."""

    m_lo: float
    m_hi: float
    n_m: int
    q_hi: float
    n_q: int
    n_t: int
    T: float
    dt: float | None = None
    q_lo: float = 0.0

    def __post_init__(self):
        if self.n_m < 5 or self.n_q < 3 or self.n_t < 2:
            raise GridError("grid too small: need n_m >= 5, n_q >= 3, n_t >= 2")
        if not self.m_hi > self.m_lo or not self.q_hi > max(self.q_lo, 0.0) or not self.T > 0:
            raise GridError("empty grid box")
        if self.dt is not None and not self.dt > 0:
            raise GridError("dt must be positive")

    @property
    def m_axis(self) -> np.ndarray:
        return np.linspace(self.m_lo, self.m_hi, self.n_m)

    @property
    def q_axis(self) -> np.ndarray:
        return np.linspace(self.q_lo, self.q_hi, self.n_q)

    @property
    def t_axis(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_t)

    @property
    def dm(self) -> float:
        return (self.m_hi - self.m_lo) / (self.n_m - 1)

    @property
    def dq(self) -> float:
        return (self.q_hi - self.q_lo) / (self.n_q - 1)

    def validate(self, params: ModelParams) -> None:
        if params.d != 1:
            raise ParameterError("the lattice solver handles one asset only")
        q_star = float(stationary_covariance(params)[0, 0])
        q0 = float(params.q0[0, 0])
        if self.q_hi < max(q_star, q0):
            raise GridError(f"q_hi={self.q_hi} below max(q0, q*)={max(q_star, q0)}")
        if abs(self.T - params.T) > 1e-12 * params.T:
            raise GridError("grid horizon differs from the model horizon")
        half = 6.0 * np.sqrt(self.q_hi)
        m0 = float(params.m0[0])
        tol = 1e-9 * max(1.0, half)
        if self.m_lo > m0 - half + tol or self.m_hi < m0 + half - tol:
            raise GridError("m-range must cover m0 +- 6 sqrt(q_hi)")

    def coarsened(self) -> "Grid2D":
        """Half resolution in every direction (used for the scheme tolerance)."""
        return Grid2D(self.m_lo, self.m_hi, (self.n_m - 1) // 2 + 1, self.q_hi, (self.n_q - 1) // 2 + 1,
                      self.n_t, self.T, None if self.dt is None else 2.0 * self.dt, self.q_lo)

    def refined(self) -> "Grid2D":
        return Grid2D(self.m_lo, self.m_hi, 2 * (self.n_m - 1) + 1, self.q_hi, 2 * (self.n_q - 1) + 1,
                      self.n_t, self.T, None if self.dt is None else 0.5 * self.dt, self.q_lo)

    def as_dict(self) -> dict:
        return {"m_lo": self.m_lo, "m_hi": self.m_hi, "n_m": self.n_m, "q_hi": self.q_hi,
                "n_q": self.n_q, "n_t": self.n_t, "T": self.T, "dt": self.dt, "q_lo": self.q_lo}


def default_grid(params: ModelParams, n_m: int = 161, n_q: int = 41, n_t: int = 51, dt: float | None = None,
                 q_factor: float = 1.2, m_width: float = 6.0) -> Grid2D:
    """Box [m0 -+ 6 sqrt(q_hi)] x [0, q_hi] with q_hi = 1.2 max(q0, q*) (capped at C_Q)."""
    q_star = float(stationary_covariance(params)[0, 0])
    q_max = max(float(params.q0[0, 0]), q_star)
    q_hi = q_factor * q_max if q_max > 0 else 1e-3
    q_hi = min(q_hi, covariance_bound(params)) if q_max > 0 else q_hi
    half = m_width * np.sqrt(q_hi)
    m0 = float(params.m0[0])
    return Grid2D(m0 - half, m0 + half, n_m, q_hi, n_q, n_t, params.T, dt)


@dataclass
class ValueGrid:
    """Value function on the lattice: ``values[i, j, l] = V(t_i, m_j, q_l)``."""

    grid: Grid2D
    log_values: np.ndarray
    params: dict
    k: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    def log_value_at(self, t, m, q):
        g = self.grid
        return interp_grid(g.t_axis, g.m_axis, g.q_axis, self.log_values, t, m, q)

    def value_at(self, t, m, q):
        """Value with linear interpolation of log V (exact on the lattice nodes)."""
        return np.exp(self.log_value_at(t, m, q))

    def model(self) -> ModelParams:
        return ModelParams.from_dict(self.params)

    def to_files(self, csv_path, json_path, rule: DecisionRule | None = None) -> None:
        g = self.grid
        T, M, Q = np.meshgrid(g.t_axis, g.m_axis, g.q_axis, indexing="ij")
        pi = np.full(T.shape, np.nan) if rule is None else rule.payload["table"]
        rows = np.column_stack([T.ravel(), M.ravel(), Q.ravel(), self.values.ravel(), self.log_values.ravel(),
                                pi.ravel()])
        write_csv(csv_path, ["t", "m", "q", "V", "log_V", "Pi_star"], rows)
        side = {"grid": g.as_dict(), "params": self.params, "k": self.k, "diagnostics": self.diagnostics}
        if rule is not None:
            side["clip"] = rule.clip
        write_json(json_path, side)

    @classmethod
    def from_files(cls, csv_path, json_path):
        """Reload a persisted grid; returns (ValueGrid, DecisionRule or None)."""
        side = read_json(json_path)
        g = Grid2D(**side["grid"])
        _, rows = read_csv(csv_path)
        shape = (g.n_t, g.n_m, g.n_q)
        vg = cls(g, rows[:, 4].reshape(shape), side["params"], side.get("k"), side.get("diagnostics", {}))
        rule = None
        pi = rows[:, 5].reshape(shape)
        if "clip" in side and np.all(np.isfinite(pi)):
            rule = DecisionRule("grid", 1, float(side["clip"]), {"t_axis": g.t_axis, "m_axis": g.m_axis,
                                                                   "q_axis": g.q_axis, "table": pi})
        return vg, rule


# ---------------------------------------------------------------- jump integral


def gauss_hermite(order: int):
    """Nodes and weights for E[f(u)], u ~ N(0, 1)."""
    if order < 5:
        raise ParameterError("Gauss-Hermite order must be at least 5")
    u, w = hermegauss(order)
    return u, w / np.sqrt(2.0 * np.pi)


class _JumpOperator:
    """Precomputed bilinear interpolation of L at all post-jump points of the lattice.

    ``shift[l]`` scales the mark in the m-jump and ``q_post[l]`` is the
    post-jump covariance for the q-node ``l``.
    """

    def __init__(self, grid: Grid2D, shift: np.ndarray, q_post: np.ndarray, order: int):
        m = grid.m_axis
        u, self.w = gauss_hermite(order)
        m_post = m[None, :, None] + shift[:, None, None] * u[None, None, :]   # (n_q, n_m, n_gh)
        self.out_of_grid = int(np.sum((m_post < grid.m_lo) | (m_post > grid.m_hi)))
        self.n_points = m_post.size
        sm = np.clip((m_post - grid.m_lo) / grid.dm, 0.0, grid.n_m - 1)
        jm = np.minimum(sm.astype(int), grid.n_m - 2)
        wm = sm - jm
        sq = np.clip((q_post - grid.q_lo) / grid.dq, 0.0, grid.n_q - 1)
        lq = np.minimum(sq.astype(int), grid.n_q - 2)
        wq = (sq - lq)[:, None, None]
        lq = np.broadcast_to(lq[:, None, None], jm.shape)
        n_m = grid.n_m
        self.idx = [lq * n_m + jm, lq * n_m + jm + 1, (lq + 1) * n_m + jm, (lq + 1) * n_m + jm + 1]
        self.wts = [(1 - wq) * (1 - wm), (1 - wq) * wm, wq * (1 - wm), wq * wm]

    def __call__(self, L: np.ndarray) -> np.ndarray:
        """``J[L] - 1`` on the (n_q, n_m) lattice."""
        flat = L.ravel()
        base = L[:, :, None]
        acc = 0.0
        for ix, wt in zip(self.idx, self.wts):
            acc = acc + wt * np.exp(flat[ix] - base)
        return np.tensordot(acc, self.w, axes=([2], [0])) - 1.0


def jump_integral(V_slice: np.ndarray, m: float, q: float, params: ModelParams, grid: Grid2D,
                  order: int = GH_ORDER):
    """``E[V(m + q u/sqrt(q+Gamma), q Gamma/(q+Gamma))]`` for a (n_m, n_q) slice of V.

    Post-jump points outside the m-range are evaluated at the nearest edge;
    returns (integral, number of such points).
    """
    Gamma = float(params.Gamma[0, 0])
    u, w = gauss_hermite(order)
    m_post = m + q / np.sqrt(q + Gamma) * u
    q_post = q * Gamma / (q + Gamma)
    n_out = int(np.sum((m_post < grid.m_lo) | (m_post > grid.m_hi)))
    tz = np.zeros(1)
    vals = interp_grid(tz, grid.m_axis, grid.q_axis, V_slice[None], 0.0, m_post, np.full_like(m_post, q_post))
    return float(np.dot(w, vals)), n_out


# ---------------------------------------------------------------- solver


def _diff_bands(n_m: int, dm: float):
    """Stencil coefficients (offsets -2..2) of D1 and D2 per row, one-sided at the ends."""
    D1 = np.zeros((5, n_m))
    D2 = np.zeros((5, n_m))
    # rows index offsets -2,-1,0,1,2 -> 0..4
    D1[1, 1:-1], D1[3, 1:-1] = -0.5 / dm, 0.5 / dm
    D2[1, 1:-1], D2[2, 1:-1], D2[3, 1:-1] = 1 / dm ** 2, -2 / dm ** 2, 1 / dm ** 2
    D1[2, 0], D1[3, 0], D1[4, 0] = -1.5 / dm, 2.0 / dm, -0.5 / dm
    D1[2, -1], D1[1, -1], D1[0, -1] = 1.5 / dm, -2.0 / dm, 0.5 / dm
    D2[2, 0], D2[3, 0], D2[4, 0] = 1 / dm ** 2, -2 / dm ** 2, 1 / dm ** 2
    D2[2, -1], D2[1, -1], D2[0, -1] = 1 / dm ** 2, -2 / dm ** 2, 1 / dm ** 2
    return D1, D2


def _apply_bands(B, L):
    """Apply per-row stencil ``B`` (5, n_m) along the last axis of L."""
    out = B[2] * L
    out[..., 1:] += B[1, 1:] * L[..., :-1]
    out[..., 2:] += B[0, 2:] * L[..., :-2]
    out[..., :-1] += B[3, :-1] * L[..., 1:]
    out[..., :-2] += B[4, :-2] * L[..., 2:]
    return out


def _m_derivative(L, dm):
    D1, _ = _diff_bands(L.shape[-1], dm)
    return _apply_bands(D1, L)


def _banded_from_rows(coef):
    """Convert row stencils (5, n_q, n_m) into solve_banded storage for the stacked system."""
    _, n_q, n_m = coef.shape
    N = n_q * n_m
    ab = np.zeros((5, N))
    rows = coef.reshape(5, N)
    # entry (i, i+o) goes to ab[2 - o, i + o]
    for k, o in enumerate((-2, -1, 0, 1, 2)):
        if o >= 0:
            ab[2 - o, o:] = rows[k, : N - o]
        else:
            ab[2 - o, : N + o] = rows[k, -o:]
    return ab


def _q_sweep(L, dt, dq, k):
    """Implicit step of ``(L_qq + L_q^2)/(2k)`` along q with reflecting ends (L is (n_q, n_m))."""
    n_q, n_m = L.shape
    Lq = np.zeros_like(L)
    Lq[1:-1] = (L[2:] - L[:-2]) / (2 * dq)
    e = 1.0 / (2.0 * k)
    lower = np.zeros((n_q, n_m))
    upper = np.zeros((n_q, n_m))
    diag = np.full((n_q, n_m), 1.0 + dt * e * 2.0 / dq ** 2)
    lower[1:-1] = -dt * e * (1.0 / dq ** 2 - Lq[1:-1] / (2 * dq))
    upper[1:-1] = -dt * e * (1.0 / dq ** 2 + Lq[1:-1] / (2 * dq))
    upper[0] = -dt * e * 2.0 / dq ** 2
    lower[-1] = -dt * e * 2.0 / dq ** 2
    # stack columns (m-major) so each m gives an independent tridiagonal block
    N = n_q * n_m
    ab = np.zeros((3, N))
    lo = lower.T.ravel()
    di = diag.T.ravel()
    up = upper.T.ravel()
    ab[1] = di
    ab[0, 1:] = up[:-1]
    ab[2, :-1] = lo[1:]
    # cut couplings across blocks
    ab[0, np.arange(n_q, N, n_q)] = 0.0
    ab[2, np.arange(n_q - 1, N - 1, n_q)] = 0.0
    sol = scipy.linalg.solve_banded((1, 1), ab, L.T.ravel())
    return sol.reshape(n_m, n_q).T


def _check(L, t, params: ModelParams):
    if not np.all(np.isfinite(L)):
        raise NumericalError(f"non-finite value function at t={t:.6g}; params={params.to_dict()}")
    if np.min(L) < LOG_FLOOR:
        raise NumericalError(f"value function fell below 1e-300 at t={t:.6g}; params={params.to_dict()}")
    if np.max(L) > LOG_CEIL:
        raise NumericalError(f"value function overflow at t={t:.6g}; params={params.to_dict()}")


class _CharacteristicShift:
    """Transport along the Riccati flow in q: ``L(q) <- L(Phi_dt(q))``.

    ``Phi_dt`` is the flow of ``dq/dt = abar(q)`` over one step (RK4 with
    sub-steps); values at the foot points come from 4-point Lagrange
    interpolation in q (3-point on a three-node axis).  The flow maps the
    q-range into itself, so no boundary data is needed.
    """

    def __init__(self, q: np.ndarray, abar, dt: float, n_sub: int = 8):
        dq = q[1] - q[0]
        x = q.copy()
        h = dt / n_sub
        for _ in range(n_sub):
            k1 = abar(x)
            k2 = abar(x + 0.5 * h * k1)
            k3 = abar(x + 0.5 * h * k2)
            k4 = abar(x + h * k3)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        x = np.clip(x, q[0], q[-1])
        self.courant = float(np.max(np.abs(x - q)) / dq)
        n = q.size
        s = min(4, n)            # cubic, or quadratic on a three-node axis
        base = np.clip(np.floor((x - q[0]) / dq).astype(int) - 1, 0, n - s)
        self.idx = base[:, None] + np.arange(s)[None, :]
        nodes = q[self.idx]
        w = np.ones((n, s))
        for a in range(s):
            for b in range(s):
                if a != b:
                    w[:, a] *= (x - nodes[:, b]) / (nodes[:, a] - nodes[:, b])
        self.w = w

    def __call__(self, L):
        return np.einsum("lk,lkm->lm", self.w, L[self.idx])


def _march(params, grid, k, gh_order, dt_cap, abar_fn, A, s, c, P, lam, jump_shift, q_post):
    """Backward sweep with a fixed number of sub-steps per stored slice."""
    slice_len = grid.T / (grid.n_t - 1)
    n_sub = int(np.ceil(slice_len / dt_cap - 1e-9))
    dt = slice_len / n_sub
    if lam * dt > 0.5:
        raise NumericalError(f"jump term too stiff for the explicit step: lam*dt={lam * dt:.3e}")
    shift = _CharacteristicShift(grid.q_axis, abar_fn, dt)
    if shift.courant > 1.0 + 1e-12:
        raise NumericalError(f"CFL violation: characteristic moves {shift.courant:.3f} cells per step "
                             f"(dt={dt:.3e}, dq={grid.dq:.3e})")
    jump = _JumpOperator(grid, jump_shift, q_post, gh_order) if lam > 0 else None
    D1, D2 = _diff_bands(grid.n_m, grid.dm)
    L = np.zeros((grid.n_q, grid.n_m))
    out = np.empty((grid.n_t, grid.n_m, grid.n_q))
    out[-1] = 0.0
    t = grid.T
    for i in range(grid.n_t - 2, -1, -1):
        for _ in range(n_sub):
            L = shift(L)
            expl = P[None, :] if jump is None else P[None, :] + lam * jump(L)
            v = A + c * _apply_bands(D1, L)
            coef = -dt * (0.5 * s[None] * D2[:, None, :] + v[None] * D1[:, None, :])
            coef[2] += 1.0
            rhs = (L + dt * expl).ravel()
            L = scipy.linalg.solve_banded((2, 2), _banded_from_rows(coef), rhs).reshape(grid.n_q, grid.n_m)
            if k is not None:
                L = _q_sweep(L, dt, grid.dq, k)
            t -= dt
            _check(L, t, params)
        out[i] = L.T
    info = {"dt": dt, "n_steps": n_sub * (grid.n_t - 1), "courant": shift.courant,
            "jump_out_of_grid_fraction": (jump.out_of_grid / jump.n_points) if jump else 0.0}
    return out, info


def _extended_grid(params: ModelParams, grid: Grid2D, k: float, epsilon: float | None):
    """q-range for the regularized solve, and the taper of the admissible set as a function of q.

    The range covers the epsilon-band around [0, K_G] plus ``min(3 sqrt(T/k), K_G)``
    on each side, keeps the spacing of ``grid`` and has 0 as a node.
    """
    from .state_space import default_epsilon

    K_G = covariance_bound(params)
    eps = default_epsilon(params) if epsilon is None else float(epsilon)
    if not eps > 0:
        raise ParameterError("epsilon must be positive")
    dq = grid.dq
    w = min(3.0 * np.sqrt(grid.T / k), K_G)
    n_lo = int(np.ceil((eps + w) / dq - 1e-9))
    n_hi = int(np.ceil((K_G + eps + w) / dq - 1e-9))
    ext = Grid2D(grid.m_lo, grid.m_hi, grid.n_m, n_hi * dq, n_lo + n_hi + 1, grid.n_t, grid.T, grid.dt, -n_lo * dq)

    def tau_fn(x):
        dist = np.maximum(0.0, np.maximum(x - K_G, -x))
        return np.maximum(0.0, 1.0 - dist / eps)

    return ext, tau_fn


def solve_dpe(params: ModelParams, grid: Grid2D | None = None, k: float | None = None,
              gh_order: int = GH_ORDER, dt_max: float | None = None, richardson: bool = True,
              epsilon: float | None = None) -> ValueGrid:
    """Solve backward from ``V(T) = 1``; ``k`` adds the regularizing Laplacian.

    For finite ``k`` the returned grid is the extended q-range described in the
    module docstring; ``grid`` only sets the m-range and the spacings.

    With ``richardson=True`` the sweep is run with steps ``dt`` and ``dt/2`` and
    the log values are combined as ``2 L_{dt/2} - L_dt``, cancelling the
    first-order splitting error in time.
    """
    if grid is None:
        grid = default_grid(params)
    grid.validate(params)
    if k is not None and not k > 0:
        raise ParameterError("k must be positive")
    kap = float(params.kappa[0, 0])
    mub = float(params.mu_bar[0])
    Smu = float(params.Sigma_mu[0, 0])
    r = float(params.Sigma_R_inv[0, 0])
    Gam = float(params.Gamma[0, 0])
    th = params.theta
    phi = th / (1.0 - th)
    psi = 1.0 / (1.0 - th)
    if k is not None:
        grid, tau_fn = _extended_grid(params, grid, k, epsilon)
    else:
        def tau_fn(x):
            return np.ones_like(x)
    m, q = grid.m_axis, grid.q_axis
    tau = tau_fn(q)

    def abar_fn(x):
        return tau_fn(x) * (Smu - 2.0 * kap * x - r * x * x)

    A = tau[:, None] * (kap * (mub - m)[None, :] + phi * r * q[:, None] * m[None, :])
    s = (r * (tau * q) ** 2)[:, None] * np.ones((1, grid.n_m))
    c = 0.5 * psi * s
    if k is not None:
        s = s + 1.0 / k
        c = c + 0.5 / k
    P = 0.5 * phi * r * m * m
    live = tau > 0
    qs = np.where(live, q, 0.0)
    jump_shift = np.where(live, tau * qs / np.sqrt(qs + Gam), 0.0)
    q_post = np.where(live, q - tau * qs * qs / (qs + Gam), q)

    amax = float(np.max(np.abs(abar_fn(q))))
    cfl_dt = CFL_SAFETY * grid.dq / amax if amax > 0 else np.inf
    if grid.dt is not None:
        if grid.dt > cfl_dt / CFL_SAFETY * (1 + 1e-12):
            raise NumericalError(f"CFL violation: dt={grid.dt:.3e} exceeds {cfl_dt / CFL_SAFETY:.3e} "
                                 f"(dq={grid.dq:.3e}, max|abar|={amax:.3e})")
        cap = grid.dt
    else:
        cap = min(dt_max if dt_max is not None else grid.T / 2000.0, cfl_dt)
    args = (params, grid, k, gh_order)
    rest = (abar_fn, A, s, c, P, params.lam, jump_shift, q_post)
    coarse, info = _march(*args, cap, *rest)
    if richardson:
        fine, info = _march(*args, 0.5 * (grid.T / (grid.n_t - 1)) / info["n_steps"] * (grid.n_t - 1), *rest)
        out = 2.0 * fine - coarse
        info["richardson"] = True
    else:
        out = coarse
        info["richardson"] = False
    info.update({"cfl_dt": cfl_dt, "gh_order": gh_order})
    out[-1] = 0.0
    return ValueGrid(grid, out, params.to_dict(), k, info)


# ---------------------------------------------------------------- rules


def rule_table(value: ValueGrid) -> np.ndarray:
    """Unclipped optimal positions ``(m + q L_m) / ((1-theta) Sigma_R)`` on the lattice."""
    p = value.model()
    g = value.grid
    if np.min(value.log_values) < LOG_FLOOR:
        raise NumericalError("value below 1e-300: gradient ratio unreliable")
    r = float(p.Sigma_R_inv[0, 0])
    psi = 1.0 / (1.0 - p.theta)
    L = np.swapaxes(value.log_values, 1, 2)                   # (n_t, n_q, n_m)
    Lm = np.swapaxes(_m_derivative(L, g.dm), 1, 2)           # (n_t, n_m, n_q)
    m = g.m_axis[None, :, None]
    q = g.q_axis[None, None, :]
    return psi * r * (m + q * Lm)


def optimal_rule(value: ValueGrid, clip: float | None = None) -> DecisionRule:
    """Grid rule from the solved value function, clipped to ``L = 10 max |myopic|`` by default."""
    g = value.grid
    p = value.model()
    table = rule_table(value)
    if clip is None:
        psi_r = float(p.Sigma_R_inv[0, 0]) / (1.0 - p.theta)
        clip = 10.0 * psi_r * max(abs(g.m_lo), abs(g.m_hi))
    table = np.clip(table, -clip, clip)
    return DecisionRule("grid", 1, float(clip), {"t_axis": g.t_axis, "m_axis": g.m_axis,
                                                 "q_axis": g.q_axis, "table": table})


def drift_risk(value: ValueGrid) -> np.ndarray:
    """Optimal minus myopic position on the lattice."""
    p = value.model()
    g = value.grid
    psi_r = float(p.Sigma_R_inv[0, 0]) / (1.0 - p.theta)
    return rule_table(value) - psi_r * g.m_axis[None, :, None]


def scheme_tolerance(params: ModelParams, grid: Grid2D, k: float | None = None, fine: ValueGrid | None = None,
                     dt_max: float | None = None) -> float:
    """|V_fine(0, y0) - V_coarse(0, y0)| with the coarse grid at half resolution."""
    if fine is None:
        fine = solve_dpe(params, grid, k=k, dt_max=dt_max)
    coarse = solve_dpe(params, grid.coarsened(), k=k, dt_max=None if dt_max is None else 2 * dt_max)
    m0, q0 = float(params.m0[0]), float(params.q0[0, 0])
    return float(abs(fine.value_at(0.0, m0, q0) - coarse.value_at(0.0, m0, q0)))


# ---------------------------------------------------------------- reference solution


def is_quadratic_case(params: ModelParams) -> bool:
    """No views, no mean reversion, constant drift: ``log V`` is quadratic in m."""
    return (params.d == 1 and params.lam == 0 and float(params.kappa[0, 0]) == 0
            and float(params.Sigma_mu[0, 0]) == 0)


def quadratic_reference(params: ModelParams, t_axis, q_axis):
    """Coefficients (a, C) with ``log V(t, m, q) = a + C m^2`` in the quadratic case.

    Along ``q(s) = q / (1 + q (s - t) r)`` the coefficients solve, backward from zero at T,
    ``C' = -(2 phi r q C + 2 psi r q^2 C^2 + phi r / 2)`` and ``a' = -r q^2 C``.
    Returns arrays of shape (n_t, n_q).
    """
    from scipy.integrate import solve_ivp

    if not is_quadratic_case(params):
        raise ParameterError("reference solution needs lam = 0, kappa = 0, sigma_mu = 0 and d = 1")
    r = float(params.Sigma_R_inv[0, 0])
    th = params.theta
    phi, psi = th / (1.0 - th), 1.0 / (1.0 - th)
    T = params.T
    a = np.zeros((len(t_axis), len(q_axis)))
    C = np.zeros_like(a)
    for l, q in enumerate(q_axis):
        def rhs(s, y, t0):
            qs = q / (1.0 + q * (s - t0) * r)
            c = y[1]
            return [-r * qs * qs * c, -(2 * phi * r * qs * c + 2 * psi * r * qs * qs * c * c + 0.5 * phi * r)]

        for i, t in enumerate(t_axis):
            if T - t <= 0:
                continue
            sol = solve_ivp(rhs, (T, t), [0.0, 0.0], args=(t,), rtol=1e-11, atol=1e-13)
            a[i, l], C[i, l] = sol.y[:, -1]
    return a, C


def reference_error(value: ValueGrid) -> dict:
    """Max relative error of V and abs error of the rule on the inner half of the lattice."""
    p = value.model()
    g = value.grid
    jm = slice(g.n_m // 4, g.n_m - g.n_m // 4)
    lq = slice(g.n_q // 4, g.n_q - g.n_q // 4)
    a, C = quadratic_reference(p, g.t_axis, g.q_axis[lq])
    m = g.m_axis[jm]
    L_ref = a[:, None, :] + C[:, None, :] * m[None, :, None] ** 2
    V_ref = np.exp(L_ref)
    V = value.values[:, jm, lq]
    r = float(p.Sigma_R_inv[0, 0])
    psi = 1.0 / (1.0 - p.theta)
    q = g.q_axis[lq][None, None, :]
    pi_ref = psi * r * (m[None, :, None] + q * 2.0 * C[:, None, :] * m[None, :, None])
    pi = rule_table(value)[:, jm, lq]
    return {"max_rel_error": float(np.max(np.abs(V - V_ref) / V_ref)),
            "max_rule_error": float(np.max(np.abs(pi - pi_ref)))}
