"""Integral high-order barrier for the service-queue capacity ``b = q_max - q``.

The admission rate is promoted to a state (``alpha' = nu``) so that both the
price and ``nu`` appear after two differentiations of ``b``.  The resulting
margin ``eta1`` is affine in ``(p, nu)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fairflow.model import (
    ClassParams,
    Control,
    HiddenState,
    SystemParams,
    check_simplex,
    coefficient_arrays,
    dropout_rates,
    hidden_derivative,
    service_rate,
    service_rate_slope,
)


@dataclass(frozen=True)
class ExtendedState:
    q: float
    z: float
    alpha: float


@dataclass(frozen=True)
class LieBundle:
    Lfb: float
    Lf2b: float
    LgpLfb: float
    LgnuLfb: float
    b: float


def lie_bundle(
    s: ExtendedState,
    w: Sequence[float],
    K: float,
    sp: SystemParams,
    classes: Sequence[ClassParams],
) -> LieBundle:
    w = check_simplex(w)
    r1, r2 = coefficient_arrays(classes)
    wr1 = float(w @ r1)
    wr2 = float(w @ r2)
    mu = service_rate(sp, s.q)
    inflow = s.alpha * s.z
    return LieBundle(
        Lfb=-inflow + mu,
        Lf2b=(inflow - mu) * service_rate_slope(sp, s.q) - s.alpha * (K - s.z * wr2 - inflow),
        LgpLfb=inflow * wr1,
        LgnuLfb=-s.z,
        b=sp.q_max - s.q,
    )


def eta1(
    s: ExtendedState,
    ctrl: Control,
    w: Sequence[float],
    K: float,
    sp: SystemParams,
    classes: Sequence[ClassParams],
) -> float:
    """Capacity margin; ``eta1 >= 0`` keeps ``q <= q_max`` forward invariant."""
    lb = lie_bundle(s, w, K, sp, classes)
    # first-order input terms vanish: p and nu do not enter b' directly
    psi1 = lb.Lfb + sp.lambda1 * lb.b
    return lb.Lf2b + lb.LgpLfb * ctrl.p + lb.LgnuLfb * ctrl.nu + sp.lambda2 * psi1


def eta2(I_next: float, theta_d: float) -> float:
    return theta_d - I_next


def _extended_rhs(q, z, a, nu, K, fbar, sp):
    return a * z - service_rate(sp, q), K - fbar * z - a * z, nu


def predict_state(
    s: ExtendedState,
    ctrl: Control,
    w: Sequence[float],
    K: float,
    sp: SystemParams,
    classes: Sequence[ClassParams],
    horizon: float,
    r_start: float | None = None,
) -> tuple[ExtendedState, float]:
    """Integrate the aggregate model over ``horizon`` with ``w`` and controls frozen.

    Returns the end state and the trapezoidal time-average of the dropout
    ratio ``fbar * z / K`` on the step grid.  ``r_start`` replaces the ratio
    at the initial instant, e.g. with the last value actually recorded.
    """
    if horizon <= 0:
        raise ValueError("horizon must be > 0")
    w = check_simplex(w)
    fbar = float(dropout_rates(classes, ctrl.p) @ w)
    nu = ctrl.nu
    q, z, a = s.q, s.z, s.alpha

    def ratio(z_):
        return fbar * z_ / K if K > 0 else 0.0

    r_prev = ratio(z) if r_start is None else r_start
    area = 0.0
    elapsed = 0.0
    n = max(1, math.ceil(horizon / sp.dt - 1e-9))
    for k in range(n):
        h = min(sp.dt, horizon - elapsed) if k == n - 1 else sp.dt
        k1 = _extended_rhs(q, z, a, nu, K, fbar, sp)
        k2 = _extended_rhs(q + 0.5 * h * k1[0], z + 0.5 * h * k1[1], a + 0.5 * h * k1[2], nu, K, fbar, sp)
        k3 = _extended_rhs(q + 0.5 * h * k2[0], z + 0.5 * h * k2[1], a + 0.5 * h * k2[2], nu, K, fbar, sp)
        k4 = _extended_rhs(q + h * k3[0], z + h * k3[1], a + h * k3[2], nu, K, fbar, sp)
        q = max(q + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]), 0.0)
        z = max(z + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]), 0.0)
        a = min(max(a + h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]), 0.0), 1.0)
        elapsed += h
        r_now = ratio(z)
        area += 0.5 * h * (r_prev + r_now)
        r_prev = r_now
    return ExtendedState(q, z, a), area / elapsed


def rk4_hidden(
    s: HiddenState,
    ctrl: Control,
    arrivals: Sequence[float],
    sp: SystemParams,
    classes: Sequence[ClassParams],
    h: float,
) -> HiddenState:
    """One clamped RK4 step of the per-class model, built on ``hidden_derivative``."""

    def shifted(base, k, c):
        return HiddenState(base.x + c * k.x, base.q + c * k.q, base.alpha + c * k.alpha)

    k1 = hidden_derivative(s, ctrl, arrivals, sp, classes)
    k2 = hidden_derivative(shifted(s, k1, 0.5 * h), ctrl, arrivals, sp, classes)
    k3 = hidden_derivative(shifted(s, k2, 0.5 * h), ctrl, arrivals, sp, classes)
    k4 = hidden_derivative(shifted(s, k3, h), ctrl, arrivals, sp, classes)
    x = np.maximum(s.x + h / 6.0 * (k1.x + 2 * k2.x + 2 * k3.x + k4.x), 0.0)
    q = max(s.q + h / 6.0 * (k1.q + 2 * k2.q + 2 * k3.q + k4.q), 0.0)
    alpha = min(max(s.alpha + h * ctrl.nu, 0.0), 1.0)
    return HiddenState(x, q, alpha)


def predict_classes(
    s: HiddenState,
    ctrl: Control,
    arrivals: Sequence[float],
    sp: SystemParams,
    classes: Sequence[ClassParams],
    steps: int | None = None,
) -> list[HiddenState]:
    """Per-class prediction over one decision window; one state per step end.

    Used with hypothesised initial class contents and arrival split, since
    the controller never sees the real ones.
    """
    steps = sp.steps_per_window if steps is None else steps
    out = []
    for _ in range(steps):
        s = rk4_hidden(s, ctrl, arrivals, sp, classes, sp.dt)
        out.append(s)
    return out


def predicted_index_path(window, t_now: float, sp: SystemParams, ratios: Sequence[float], r_start: float) -> np.ndarray:
    """Index at each step end within the next window for a predicted ratio sequence.

    ``ratios[j]`` is the predicted ratio at ``t_now + (j+1)*dt``; the segment
    from ``t_now`` blends with ``r_start`` exactly as the recorder would.
    """
    out = np.empty(len(ratios))
    origin = window.origin if window.origin is not None else t_now
    area = 0.0
    r_prev = r_start
    for j, r in enumerate(ratios):
        t = t_now + (j + 1) * sp.dt
        area += 0.5 * sp.dt * (r_prev + r)
        r_prev = r
        lo = max(origin, t - sp.T_I)
        hist = window.integral(lo, t_now) if len(window) else 0.0
        out[j] = (hist + area) / (t - lo)
    return out
