"""Market model: hidden Ornstein-Uhlenbeck drift, returns and expert views.

The drift follows ``dmu = kappa (mu_bar - mu) dt + sigma_mu dW^mu``, returns follow
``dR = mu dt + sigma_R dW^R`` and expert views ``Z_k = mu(T_k) + Gamma^{1/2} eps_k``
arrive at the jump times of a Poisson process with intensity ``lam``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg

from ._linalg import sym_inv_sqrt, sym_sqrt, symmetrize
from .errors import DimensionError, ParameterError
from .rng import Streams

DEFAULT_STEPS = 2000


def _as_matrix(x, name: str) -> np.ndarray:
    a = np.atleast_2d(np.asarray(x, dtype=float))
    if a.ndim != 2:
        raise ParameterError(f"{name} must be a matrix")
    return a


def _as_vector(x, name: str) -> np.ndarray:
    a = np.atleast_1d(np.asarray(x, dtype=float))
    if a.ndim != 1:
        raise ParameterError(f"{name} must be a vector")
    return a


def _is_pd(a: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(symmetrize(a))
    except np.linalg.LinAlgError:
        return False
    return bool(np.allclose(a, a.T, atol=1e-12))


def _is_psd(a: np.ndarray, tol: float = 1e-12) -> bool:
    if not np.allclose(a, a.T, atol=1e-12):
        return False
    return bool(np.linalg.eigvalsh(symmetrize(a)).min() >= -tol)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """All market, filter and preference constants.

    Matrices may be passed as scalars for the one-asset case.  ``m0_bar`` and
    ``q0_bar`` describe the unconditional law of the initial drift used when
    simulating; they default to the investor's prior ``(m0, q0)``.

    With ``strict=True`` (the default) the drift must be genuinely mean
    reverting (all eigenvalues of ``kappa`` with positive real part) and
    ``sigma_mu sigma_mu^T`` positive definite.  ``strict=False`` admits the
    degenerate limits ``kappa = 0`` and ``sigma_mu = 0`` used by closed-form
    checks.
    """

    kappa: np.ndarray
    mu_bar: np.ndarray
    sigma_mu: np.ndarray
    sigma_R: np.ndarray
    Gamma: np.ndarray
    lam: float
    theta: float
    T: float
    m0: np.ndarray
    q0: np.ndarray
    x0: float = 1.0
    m0_bar: np.ndarray | None = None
    q0_bar: np.ndarray | None = None
    strict: bool = True

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("kappa", _as_matrix(self.kappa, "kappa"))
        set_("sigma_mu", _as_matrix(self.sigma_mu, "sigma_mu"))
        set_("sigma_R", _as_matrix(self.sigma_R, "sigma_R"))
        set_("Gamma", _as_matrix(self.Gamma, "Gamma"))
        set_("q0", _as_matrix(self.q0, "q0"))
        set_("mu_bar", _as_vector(self.mu_bar, "mu_bar"))
        set_("m0", _as_vector(self.m0, "m0"))
        set_("m0_bar", self.m0.copy() if self.m0_bar is None else _as_vector(self.m0_bar, "m0_bar"))
        set_("q0_bar", self.q0.copy() if self.q0_bar is None else _as_matrix(self.q0_bar, "q0_bar"))
        for k in ("lam", "theta", "T", "x0"):
            set_(k, float(getattr(self, k)))
        self._validate()

    def _validate(self):
        d = self.d
        square = {"kappa": self.kappa, "Gamma": self.Gamma, "q0": self.q0, "q0_bar": self.q0_bar}
        for name, a in square.items():
            if a.shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}, got {a.shape}")
        for name in ("mu_bar", "m0", "m0_bar"):
            if getattr(self, name).shape != (d,):
                raise DimensionError(f"{name} must have length {d}")
        if self.sigma_mu.shape[0] != d or self.sigma_R.shape[0] != d:
            raise DimensionError("sigma_mu and sigma_R must have d rows")
        if self.d1 < d or self.d2 < d:
            raise DimensionError("Brownian dimensions must be at least d")
        if not _is_pd(self.Sigma_R):
            raise ParameterError("sigma_R sigma_R^T must be positive definite")
        if not _is_pd(self.Gamma):
            raise ParameterError("Gamma must be symmetric positive definite")
        if not _is_psd(self.q0) or not _is_psd(self.q0_bar):
            raise ParameterError("q0 and q0_bar must be symmetric positive semi-definite")
        if self.theta == 0.0 or self.theta >= 1.0:
            raise ParameterError("theta must lie in (-inf, 0) U (0, 1)")
        if self.lam < 0:
            raise ParameterError("arrival intensity must be non-negative")
        if self.T <= 0:
            raise ParameterError("horizon T must be positive")
        if self.x0 <= 0:
            raise ParameterError("initial wealth must be positive")
        re = np.linalg.eigvals(self.kappa).real
        if self.strict:
            if re.min() <= 0:
                raise ParameterError("all eigenvalues of kappa must have positive real part")
            if not _is_pd(self.Sigma_mu):
                raise ParameterError("sigma_mu sigma_mu^T must be positive definite")
        else:
            if re.min() < 0:
                raise ParameterError("kappa has eigenvalues with negative real part")

    # dimensions
    @property
    def d(self) -> int:
        return self.mu_bar.shape[0]

    @property
    def d1(self) -> int:
        return self.sigma_R.shape[1]

    @property
    def d2(self) -> int:
        return self.sigma_mu.shape[1]

    @property
    def n_G(self) -> int:
        return self.d * (self.d + 1) // 2

    @property
    def d_Y(self) -> int:
        return self.d * (self.d + 3) // 2

    # derived matrices
    @cached_property
    def Sigma_R(self) -> np.ndarray:
        return symmetrize(self.sigma_R @ self.sigma_R.T)

    @cached_property
    def Sigma_mu(self) -> np.ndarray:
        return symmetrize(self.sigma_mu @ self.sigma_mu.T)

    @cached_property
    def Sigma_R_inv(self) -> np.ndarray:
        return symmetrize(np.linalg.inv(self.Sigma_R))

    @cached_property
    def sigma_X(self) -> np.ndarray:
        return sym_sqrt(self.Sigma_R)

    @cached_property
    def Sigma_R_inv_sqrt(self) -> np.ndarray:
        return sym_inv_sqrt(self.Sigma_R)

    @cached_property
    def Gamma_sqrt(self) -> np.ndarray:
        return sym_sqrt(self.Gamma)

    @cached_property
    def innovation_map(self) -> np.ndarray:
        """``Sigma_R^{-1/2} sigma_R`` (d x d1): maps return noise to the innovation noise."""
        return self.Sigma_R_inv_sqrt @ self.sigma_R

    def replace(self, **changes) -> "ModelParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        if "m0" in changes and "m0_bar" not in changes:
            kw["m0_bar"] = None
        if "q0" in changes and "q0_bar" not in changes:
            kw["q0_bar"] = None
        kw.update(changes)
        return ModelParams(**kw)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        return cls(**data)


def default_params(**overrides) -> ModelParams:
    """The one-asset parameter set used throughout the examples and tests."""
    base = dict(
        kappa=1.0, mu_bar=0.1, sigma_mu=0.4, sigma_R=0.5, Gamma=0.16,
        lam=1.0, theta=0.5, T=1.0, m0=0.1, q0=0.08, x0=1.0,
    )
    base.update(overrides)
    return ModelParams(**base)


@dataclass(frozen=True)
class ExpertView:
    arrival_time: float
    value: np.ndarray


@dataclass
class PathBundle:
    """One simulated scenario on a grid that contains every arrival time.

    ``dW_R`` holds the return-noise Brownian increments per step (n_steps x d1).
    ``dW_mu`` holds the Gaussian noise of the exact drift transition per step
    (n_steps x d); for small steps it is close to ``sigma_mu`` times a Brownian
    increment.
    """

    grid: np.ndarray
    dW_R: np.ndarray
    dW_mu: np.ndarray
    drift_path: np.ndarray
    return_path: np.ndarray
    views: list[ExpertView] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.drift_path.shape[1]

    def view_indices(self) -> list[int]:
        return [int(np.searchsorted(self.grid, v.arrival_time)) for v in self.views]

    def to_csv(self, path: str | Path, views_path: str | Path) -> None:
        from .io import write_csv

        d = self.d
        header = ["t"] + [f"mu_{i + 1}" for i in range(d)] + [f"R_{i + 1}" for i in range(d)]
        rows = np.column_stack([self.grid, self.drift_path, self.return_path])
        write_csv(path, header, rows)
        vheader = ["T_k"] + [f"Z_{i + 1}" for i in range(d)]
        vrows = np.array([[v.arrival_time, *v.value] for v in self.views]).reshape(-1, d + 1)
        write_csv(views_path, vheader, vrows)

    @classmethod
    def from_csv(cls, path: str | Path, views_path: str | Path) -> "PathBundle":
        """Reload the observable parts of a dumped bundle (noise is not persisted)."""
        from .io import read_csv

        header, rows = read_csv(path)
        d = (len(header) - 1) // 2
        grid = rows[:, 0]
        _, vrows = read_csv(views_path)
        views = [ExpertView(float(r[0]), r[1:].copy()) for r in vrows]
        n = len(grid) - 1
        return cls(grid, np.full((n, d), np.nan), np.full((n, d), np.nan),
                   rows[:, 1:1 + d], rows[:, 1 + d:], views)


def simulate_arrivals(lam: float, T: float, rng: np.random.Generator) -> list[float]:
    """Arrival times in (0, T] from cumulative exponential gaps."""
    if lam < 0 or T <= 0:
        raise ParameterError("need lam >= 0 and T > 0")
    out: list[float] = []
    if lam == 0:
        return out
    t = 0.0
    while True:
        t += rng.exponential(1.0 / lam)
        if t > T:
            return out
        out.append(t)


def simulate_arrivals_batch(lam: float, T: float, n_paths: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Vectorized version of :func:`simulate_arrivals` for many paths."""
    if lam < 0 or T <= 0:
        raise ParameterError("need lam >= 0 and T > 0")
    if lam == 0:
        return [np.empty(0) for _ in range(n_paths)]
    mean = lam * T
    width = int(mean + 8.0 * np.sqrt(mean) + 8)
    times = np.cumsum(rng.exponential(1.0 / lam, size=(n_paths, width)), axis=1)
    while np.any(times[:, -1] <= T):
        more = np.cumsum(rng.exponential(1.0 / lam, size=(n_paths, width)), axis=1)
        times = np.hstack([times, times[:, -1:] + more])
    return [row[row <= T] for row in times]


def make_grid(T: float, n_steps: int, arrivals=(), t0: float = 0.0) -> np.ndarray:
    """Uniform grid on [t0, T] with the arrival times spliced in.

    A base point lying within ``1e-12 T`` of an arrival is replaced by the
    arrival, so every arrival is exactly a grid point.
    """
    base = np.linspace(t0, T, n_steps + 1)
    arr = np.asarray(sorted(a for a in arrivals if t0 < a <= T), dtype=float)
    if arr.size == 0:
        return base
    tol = 1e-12 * max(T, 1.0)
    near = np.min(np.abs(base[:, None] - arr[None, :]), axis=1) <= tol
    keep = base[~near]
    grid = np.union1d(keep, arr)
    if grid[0] > t0:
        grid = np.concatenate([[t0], grid])
    return grid


def ou_transition(params: ModelParams, h):
    """Exact one-step law of the drift: ``mu' = mu_bar + F (mu - mu_bar) + S z``.

    Returns ``(F, S)`` with ``S S^T`` the integrated covariance over a step of
    length ``h``; ``h`` may be an array, in which case leading axes are added.
    """
    h = np.asarray(h, dtype=float)
    d = params.d
    if d == 1:
        k = params.kappa[0, 0]
        s = params.Sigma_mu[0, 0]
        F = np.exp(-k * h)
        if k > 0:
            C = s * (-np.expm1(-2.0 * k * h)) / (2.0 * k)
        else:
            C = s * h
        return F[..., None, None], np.sqrt(C)[..., None, None]
    hh = h[..., None, None]
    top = np.concatenate([params.kappa * hh, np.broadcast_to(params.Sigma_mu, hh.shape[:-2] + (d, d)) * hh], axis=-1)
    bot = np.concatenate([np.zeros(hh.shape[:-2] + (d, d)), -params.kappa.T * hh], axis=-1)
    E = scipy.linalg.expm(np.concatenate([top, bot], axis=-2))
    F = np.swapaxes(E[..., d:, d:], -1, -2)
    C = symmetrize(F @ E[..., :d, d:])
    return F, sym_sqrt(C, tol=1e-10)


def _check_stable(params: ModelParams) -> None:
    if np.linalg.eigvals(params.kappa).real.min() < 0:
        raise ParameterError("kappa is not stable")


def simulate_drift(params: ModelParams, grid, rng: np.random.Generator, mu0=None, return_noise: bool = False):
    """Exact OU drift path on ``grid``; ``mu0`` is drawn from N(m0_bar, q0_bar) if omitted."""
    _check_stable(params)
    grid = np.asarray(grid, dtype=float)
    d = params.d
    if mu0 is None:
        mu0 = params.m0_bar + sym_sqrt(params.q0_bar) @ rng.standard_normal(d)
    mu0 = _as_vector(mu0, "mu0")
    h = np.diff(grid)
    z = rng.standard_normal((h.size, d))
    F, S = ou_transition(params, h)
    noise = np.einsum("nij,nj->ni", S, z) if h.size else np.zeros((0, d))
    path = np.empty((grid.size, d))
    path[0] = mu0
    for n in range(h.size):
        path[n + 1] = params.mu_bar + F[n] @ (path[n] - params.mu_bar) + noise[n]
    return (path, noise) if return_noise else path


def simulate_returns(params: ModelParams, drift_path, dW_R, grid) -> np.ndarray:
    """Euler returns ``R_{n+1} = R_n + mu_n h_n + sigma_R dW^R_n`` with ``R_0 = 0``."""
    grid = np.asarray(grid, dtype=float)
    drift_path = np.asarray(drift_path, dtype=float).reshape(grid.size, -1) if grid.size else np.zeros((0, params.d))
    dW_R = np.asarray(dW_R, dtype=float).reshape(-1, params.d1) if np.size(dW_R) else np.zeros((0, params.d1))
    if drift_path.shape[0] != grid.size or dW_R.shape[0] != max(grid.size - 1, 0):
        raise DimensionError("drift path, increments and grid do not match")
    h = np.diff(grid)
    if h.size == 0:
        return np.zeros((1, params.d))
    dR = drift_path[:-1] * h[:, None] + dW_R @ params.sigma_R.T
    return np.vstack([np.zeros((1, params.d)), np.cumsum(dR, axis=0)])


def generate_view(mu_at_arrival, Gamma, rng: np.random.Generator) -> np.ndarray:
    """Expert view ``Z = mu + Gamma^{1/2} eps``."""
    Gamma = _as_matrix(Gamma, "Gamma")
    if not _is_pd(Gamma):
        raise ParameterError("Gamma must be symmetric positive definite")
    mu = _as_vector(mu_at_arrival, "mu")
    return mu + sym_sqrt(Gamma) @ rng.standard_normal(mu.size)


def simulate_bundle(params: ModelParams, seed: int, counter: int = 0, n_steps: int = DEFAULT_STEPS,
                    arrival_times=None, mu0=None) -> PathBundle:
    """Generate one scenario; identical ``(params, seed, counter)`` give identical bundles."""
    st = Streams(seed, counter)
    if arrival_times is None:
        arrivals = simulate_arrivals(params.lam, params.T, st["arrivals"])
    else:
        arrivals = sorted(float(a) for a in arrival_times)
    grid = make_grid(params.T, n_steps, arrivals)
    d = params.d
    if mu0 is None:
        mu0 = params.m0_bar + sym_sqrt(params.q0_bar) @ st["mu0"].standard_normal(d)
    drift, noise = simulate_drift(params, grid, st["W_mu"], mu0=mu0, return_noise=True)
    h = np.diff(grid)
    dW_R = st["W_R"].standard_normal((h.size, params.d1)) * np.sqrt(h)[:, None]
    R = simulate_returns(params, drift, dW_R, grid)
    views = []
    for a in arrivals:
        i = int(np.searchsorted(grid, a))
        eps = st["marks"].standard_normal(d)
        views.append(ExpertView(float(grid[i]), drift[i] + params.Gamma_sqrt @ eps))
    return PathBundle(grid, dW_R, noise, drift, R, views)
