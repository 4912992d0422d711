"""Decision rules: maps (t, m, q) -> fraction of wealth in the risky assets.

Every rule carries a hard clip bound ``L`` on the max norm of its output.
Rules accept single states (m: (d,), q: (d, d)) or stacks
(m: (N, d), q: (N, d, d)); ``t`` may be a scalar or one time per path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._linalg import row_sum_norm
from .errors import ParameterError
from .market_model import ModelParams

KINDS = ("zero", "constant", "myopic", "grid")


def _axis_weights(axis: np.ndarray, x: np.ndarray):
    """Index and weight for linear interpolation on a uniform axis, clamped at the ends."""
    n = axis.size
    if n == 1:
        return np.zeros(x.shape, dtype=int), np.zeros(x.shape)
    dx = (axis[-1] - axis[0]) / (n - 1)
    s = np.clip((x - axis[0]) / dx, 0.0, n - 1)
    i = np.minimum(s.astype(int), n - 2)
    return i, s - i


def interp_grid(t_axis, m_axis, q_axis, table, t, m, q) -> np.ndarray:
    """Linear in t, bilinear in (m, q), constant extrapolation outside the box."""
    t = np.broadcast_to(np.asarray(t, dtype=float), np.shape(m))
    it, wt = _axis_weights(t_axis, t)
    im, wm = _axis_weights(m_axis, np.asarray(m, dtype=float))
    iq, wq = _axis_weights(q_axis, np.asarray(q, dtype=float))
    out = 0.0
    for dt_, ft in ((0, 1.0 - wt), (1, wt)):
        ti = np.minimum(it + dt_, t_axis.size - 1)
        for dm_, fm in ((0, 1.0 - wm), (1, wm)):
            mi = np.minimum(im + dm_, m_axis.size - 1)
            for dq_, fq in ((0, 1.0 - wq), (1, wq)):
                qi = np.minimum(iq + dq_, q_axis.size - 1)
                out = out + ft * fm * fq * table[ti, mi, qi]
    return out


@dataclass
class DecisionRule:
    """A clipped decision rule.

    kind ``zero``: always 0.  ``constant``: ``payload['value']``.
    ``myopic``: ``payload['A'] @ m`` with ``A = Sigma_R^{-1} / (1 - theta)``.
    ``grid`` (one asset): table over (t, m, q) axes, interpolated.
    """

    kind: str
    d: int
    clip: float
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown rule kind {self.kind!r}")
        if not self.clip > 0:
            raise ParameterError("clip bound must be positive")

    def __call__(self, t, m, q) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(m)
        if self.kind == "constant":
            p = np.broadcast_to(self.payload["value"], m.shape).copy()
        elif self.kind == "myopic":
            A = self.payload["A"]
            p = m * A[0, 0] if self.d == 1 else m @ A.T
        else:
            q = np.asarray(q, dtype=float)
            p = interp_grid(self.payload["t_axis"], self.payload["m_axis"], self.payload["q_axis"],
                            self.payload["table"], t, m[..., 0], q[..., 0, 0])[..., None]
        return np.clip(p, -self.clip, self.clip)

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"

    def describe(self) -> dict:
        out = {"kind": self.kind, "d": self.d, "clip": self.clip}
        if self.kind == "constant":
            out["value"] = np.asarray(self.payload["value"]).tolist()
        return out


def default_clip(params: ModelParams, q_hi: float | None = None) -> float:
    """10 times the largest myopic position over m0 +- 6 sqrt(q_hi)."""
    if q_hi is None:
        from .filter import covariance_bound

        q_hi = covariance_bound(params)
    A = params.Sigma_R_inv / (1.0 - params.theta)
    m_max = np.max(np.abs(params.m0)) + 6.0 * np.sqrt(q_hi)
    return float(10.0 * row_sum_norm(A) * m_max)


def zero_rule(d: int = 1) -> DecisionRule:
    return DecisionRule("zero", d, clip=1.0)


def constant_rule(value, clip: float | None = None) -> DecisionRule:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    if clip is None:
        clip = max(1.0, 10.0 * float(np.max(np.abs(value))))
    return DecisionRule("constant", value.size, clip, {"value": value})


def myopic_rule(params: ModelParams, clip: float | None = None) -> DecisionRule:
    """Full-information rule ``Sigma_R^{-1} m / (1 - theta)``."""
    A = params.Sigma_R_inv / (1.0 - params.theta)
    return DecisionRule("myopic", params.d, default_clip(params) if clip is None else clip, {"A": A})
