"""Fluid model of the two-stage queue: demand buffers feeding a shared service queue.

Each user class ``i`` keeps a demand buffer ``x_i`` fed by arrivals ``K_i``,
drained by price-driven dropout ``f_i(p) x_i`` and by admission ``alpha x_i``.
Admitted users join the service queue ``q``, served at the saturating rate
``mu(q)``.  The admission rate is itself a state driven by ``nu``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class ClassParams:
    """Dropout coefficients of one user class: ``f(p) = clip(r1*p + r2, 0, 1)``."""

    r1: float = 0.0
    r2: float = 0.0

    def __post_init__(self):
        if not (self.r1 >= 0 and self.r2 >= 0):
            raise ValueError(f"class coefficients must be >= 0, got r1={self.r1}, r2={self.r2}")


@dataclass(frozen=True)
class SystemParams:
    mu_star: float = 5.0
    q_c: float = 10.0
    q_max: float = 15.0
    p_min: float = 0.0
    p_max: float = 10.0
    nu_max: float = 10.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    theta_d: float = 0.4
    T_d: float = 0.1
    T_I: float = 10.0
    dt: float = 0.01

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (self.mu_star > 0, "mu_star must be > 0"),
            (self.q_c > 0, "q_c must be > 0"),
            (self.q_max > 0, "q_max must be > 0"),
            (self.p_min < self.p_max, "p_min must be < p_max"),
            (self.p_min >= 0, "p_min must be >= 0"),
            (self.nu_max >= 0, "nu_max must be >= 0"),
            (self.lambda1 > 0, "lambda1 must be > 0"),
            (self.lambda2 > 0, "lambda2 must be > 0"),
            (0 <= self.theta_d <= 1, "theta_d out of [0,1]"),
            (0 < self.dt <= self.T_d, "dt must satisfy 0 < dt <= T_d"),
            (self.T_I >= self.T_d, "T_I must be >= T_d"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def steps_per_window(self) -> int:
        return int(round(self.T_d / self.dt))


@dataclass
class HiddenState:
    """Ground-truth state: per-class demand queues, service queue, admission rate.

    Also used to carry time derivatives of those same components.
    """

    x: np.ndarray
    q: float = 0.0
    alpha: float = 1.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)

    @property
    def z(self) -> float:
        return float(np.sum(self.x))

    def proportions(self) -> np.ndarray:
        """Class proportions ``x_i / z``; uniform when the buffers are empty."""
        z = self.z
        if z <= 0:
            return np.full(self.x.shape, 1.0 / len(self.x))
        return self.x / z

    def copy(self) -> "HiddenState":
        return HiddenState(self.x.copy(), self.q, self.alpha)


@dataclass(frozen=True)
class Observation:
    """What the controller sees at a decision epoch."""

    z: float
    q: float
    alpha: float
    K: float
    d: float
    p_applied: float
    t: float = 0.0


@dataclass(frozen=True)
class Control:
    p: float
    nu: float = 0.0


def dropout_rate(c: ClassParams, p: float) -> float:
    return min(max(c.r1 * p + c.r2, 0.0), 1.0)


def dropout_rates(classes: Sequence[ClassParams], p: float) -> np.ndarray:
    """Vector of ``f_i(p)`` over classes."""
    return np.array([dropout_rate(c, p) for c in classes])


def coefficient_arrays(classes: Sequence[ClassParams]) -> tuple[np.ndarray, np.ndarray]:
    r1 = np.array([c.r1 for c in classes], dtype=float)
    r2 = np.array([c.r2 for c in classes], dtype=float)
    return r1, r2


def service_rate(sp: SystemParams, q: float) -> float:
    if q <= 0:
        return 0.0
    if q <= sp.q_c:
        return sp.mu_star / sp.q_c * q
    return sp.mu_star


def service_rate_slope(sp: SystemParams, q: float) -> float:
    # the kink q == q_c takes the saturated-side slope
    if q < sp.q_c:
        return sp.mu_star / sp.q_c
    return 0.0


def hidden_derivative(
    s: HiddenState,
    ctrl: Control,
    arrivals: Sequence[float],
    sp: SystemParams,
    classes: Sequence[ClassParams],
) -> HiddenState:
    """Time derivative of the hidden state under constant controls."""
    K = np.asarray(arrivals, dtype=float)
    if not (len(K) == len(classes) == len(s.x)):
        raise ValueError(
            f"dimension mismatch: {len(K)} arrival rates, {len(classes)} classes, {len(s.x)} queues"
        )
    f = dropout_rates(classes, ctrl.p)
    dx = K - f * s.x - s.alpha * s.x
    dq = s.alpha * s.z - service_rate(sp, s.q)
    return HiddenState(dx, dq, ctrl.nu)


def aggregate_derivative(
    z: float,
    alpha: float,
    w: Sequence[float],
    ctrl: Control,
    K: float,
    classes: Sequence[ClassParams],
) -> float:
    """Rate of change of the aggregate demand queue given class proportions ``w``."""
    w = check_simplex(w)
    if len(w) != len(classes):
        raise ValueError(f"dimension mismatch: {len(w)} proportions, {len(classes)} classes")
    fbar = float(dropout_rates(classes, ctrl.p) @ w)
    return K - z * fbar - alpha * z


def check_simplex(w: Sequence[float], tol: float = SIMPLEX_TOL) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if np.any(w < -tol) or abs(w.sum() - 1.0) > tol:
        raise ValueError(f"proportion vector {w} is not on the unit simplex")
    return w
