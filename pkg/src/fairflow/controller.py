"""Receding-horizon pricing/admission policies.

``robust_fair_decide`` searches a fixed ``(p, nu)`` grid for the revenue
maximiser whose worst-case capacity and fairness margins are nonnegative.
``surge_decide`` is the monotone congestion-pricing baseline.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fairflow._kernels import capacity_margins, fairness_grid, first_feasible
from fairflow.metrics import FairnessWindow
from fairflow.model import ClassParams, Observation, SystemParams, coefficient_arrays, dropout_rates
from fairflow.robust import ConsistencySet, vertices

POLICIES = ("robust_fair", "surge")


@dataclass(frozen=True)
class ControllerConfig:
    p_grid_size: int = 101
    nu_grid_size: int = 21
    policy: str = "robust_fair"
    b1: float = -0.129
    b2: float = -0.967
    b3: float = -0.096
    # "end": p * alpha * z at the end of the window; "start": at the decision epoch
    objective: str = "end"
    # "path": fairness checked at every step of the window; "endpoint": only at its end
    fairness_check: str = "path"

    def __post_init__(self):
        if self.p_grid_size < 2 or self.nu_grid_size < 2:
            raise ValueError("grid sizes must be >= 2")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if not all(math.isfinite(b) for b in (self.b1, self.b2, self.b3)):
            raise ValueError("surge coefficients must be finite")
        if self.objective not in ("end", "start"):
            raise ValueError("objective must be 'end' or 'start'")
        if self.fairness_check not in ("path", "endpoint"):
            raise ValueError("fairness_check must be 'path' or 'endpoint'")


@dataclass(frozen=True)
class Decision:
    p: float
    nu: float
    alpha_applied: float
    feasible: bool
    eta1_star: float = math.nan
    eta2_star: float = math.nan
    objective: float = math.nan


@dataclass
class GridEvaluation:
    """Flattened grid: one entry per ``(p, nu)`` candidate, in grid order."""

    p: np.ndarray
    nu: np.ndarray
    eta1: np.ndarray
    eta2: np.ndarray
    J: np.ndarray
    alpha_plus: np.ndarray

    @property
    def feasible(self) -> np.ndarray:
        return (self.eta1 >= 0) & (self.eta2 >= 0)

    def decision(self, idx: int, feasible: bool) -> Decision:
        return Decision(
            p=float(self.p[idx]),
            nu=float(self.nu[idx]),
            alpha_applied=float(self.alpha_plus[idx]),
            feasible=feasible,
            eta1_star=float(self.eta1[idx]),
            eta2_star=float(self.eta2[idx]),
            objective=float(self.J[idx]),
        )


def price_grid(sp: SystemParams, cfg: ControllerConfig) -> np.ndarray:
    return np.linspace(sp.p_min, sp.p_max, cfg.p_grid_size)


def nu_grid(sp: SystemParams, cfg: ControllerConfig) -> np.ndarray:
    return np.linspace(-sp.nu_max, sp.nu_max, cfg.nu_grid_size)


def _window_terms(window: FairnessWindow, t_now: float, sp: SystemParams, n: int):
    """History integral and normaliser for the index at each step of the next window."""
    hist = np.zeros(n)
    norm = np.empty(n)
    origin = window.origin if window.origin is not None else t_now
    for j in range(n):
        t = t_now + (j + 1) * sp.dt
        lo = max(origin, t - sp.T_I)
        if len(window) and lo < t_now:
            hist[j] = window.integral(lo, t_now)
        norm[j] = t - lo
    return hist, norm


@dataclass
class _Grid:
    """Per-epoch inputs shared by the fairness and capacity kernels."""

    obs: Observation
    K: float
    prices: np.ndarray
    nus: np.ndarray
    F: np.ndarray
    W: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    sp: SystemParams
    tie_order: np.ndarray

    def capacity(self, flat: np.ndarray) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.int64)
        ip = flat // len(self.nus)
        sp = self.sp
        return capacity_margins(
            ip, self.prices[ip], self.nus[flat % len(self.nus)],
            float(self.obs.q), float(self.obs.z), float(self.obs.alpha), self.K,
            self.F, self.W, self.r1, self.r2,
            sp.mu_star, sp.q_c, sp.q_max, sp.lambda1, sp.lambda2, sp.dt, sp.steps_per_window,
        )


@lru_cache(maxsize=64)
def _static(sp: SystemParams, cfg: ControllerConfig, classes: tuple[ClassParams, ...]):
    """Grid arrays that depend only on the configuration (treated as read-only)."""
    n = sp.steps_per_window
    if abs(n * sp.dt - sp.T_d) > 1e-9 * sp.T_d:
        raise ValueError("T_d must be an integer multiple of dt")
    prices = price_grid(sp, cfg)
    nus = nu_grid(sp, cfg)
    r1, r2 = coefficient_arrays(classes)
    F = np.clip(np.outer(prices, r1) + r2, 0.0, 1.0)
    P, V = np.meshgrid(prices, nus, indexing="ij")
    P, V = P.ravel(), V.ravel()
    tie_order = np.lexsort((V, np.abs(V), P))
    return prices, nus, r1, r2, F, P, V, tie_order


def _prepare(obs, window, K_est, sp, classes, cfg, mixes):
    n = sp.steps_per_window
    prices, nus, r1, r2, F, P, V, tie_order = _static(sp, cfg, tuple(classes))
    W = np.ascontiguousarray(mixes, dtype=float).reshape(len(mixes), len(classes))
    hist, norm = _window_terms(window, obs.t, sp, n)
    e2, J, ap = fairness_grid(
        float(obs.z), float(obs.alpha), float(K_est), prices, nus, F, W, W.mean(axis=0),
        sp.theta_d, sp.T_d, sp.dt, n, hist, norm,
        cfg.objective == "end", cfg.fairness_check == "path",
    )
    grid = _Grid(obs, float(K_est), prices, nus, F, W, r1, r2, sp, tie_order)
    ev = GridEvaluation(P, V, np.full(P.size, np.nan), e2.ravel(), J.ravel(), ap.ravel())
    return grid, ev


def evaluate(
    obs: Observation,
    window: FairnessWindow,
    K_est: float,
    sp: SystemParams,
    classes: Sequence[ClassParams],
    cfg: ControllerConfig,
    mixes: Sequence[np.ndarray],
) -> GridEvaluation:
    """Margins and objective of every grid candidate, worst case over ``mixes``.

    Each scenario pairs one mix (initial class contents ``z * w``) with all of
    ``K_est`` arriving in a single class.  The objective is predicted under
    the mean of ``mixes`` with arrivals split the same way.
    """
    grid, ev = _prepare(obs, window, K_est, sp, classes, cfg, mixes)
    ev.eta1 = grid.capacity(np.arange(ev.p.size))
    return ev


def _preference(ev: GridEvaluation) -> np.ndarray:
    # primary key last: max J, then lower p, then lower |nu|, then lower nu
    return np.lexsort((ev.nu, np.abs(ev.nu), ev.p, -ev.J))


def select(ev: GridEvaluation) -> Decision:
    feas = ev.feasible
    if not feas.any():
        return fallback(ev)
    idx = np.flatnonzero(feas)
    order = np.lexsort((ev.nu[idx], np.abs(ev.nu[idx]), ev.p[idx], -ev.J[idx]))
    return ev.decision(int(idx[order[0]]), feasible=True)


def fallback(ev: GridEvaluation) -> Decision:
    """Least-violating candidate when nothing on the grid is feasible."""
    violation = np.maximum(np.maximum(-ev.eta1, -ev.eta2), 0.0)
    order = np.lexsort((ev.nu, np.abs(ev.nu), ev.p, -ev.eta1, violation))
    return ev.decision(int(order[0]), feasible=False)


def search(
    obs: Observation,
    window: FairnessWindow,
    K_est: float,
    sp: SystemParams,
    classes: Sequence[ClassParams],
    cfg: ControllerConfig,
    mixes: Sequence[np.ndarray],
) -> Decision:
    """Same answer as ``select(evaluate(...))`` with the capacity margin computed lazily.

    Candidates that pass the fairness check are visited in preference order
    and the first one with a nonnegative capacity margin wins.
    """
    grid, ev = _prepare(obs, window, K_est, sp, classes, cfg, mixes)
    idx, e1 = first_feasible(
        grid.tie_order, ev.J, ev.eta2, grid.prices, grid.nus,
        float(obs.q), float(obs.z), float(obs.alpha), grid.K, grid.F, grid.W, grid.r1, grid.r2,
        sp.mu_star, sp.q_c, sp.q_max, sp.lambda1, sp.lambda2, sp.dt, sp.steps_per_window,
    )
    if idx >= 0:
        ev.eta1[idx] = e1
        return ev.decision(int(idx), feasible=True)
    ev.eta1 = grid.capacity(np.arange(ev.p.size))
    return fallback(ev)


def robust_fair_decide(
    obs: Observation,
    window: FairnessWindow,
    K_est: float,
    sp: SystemParams,
    classes: Sequence[ClassParams],
    cfg: ControllerConfig = ControllerConfig(),
) -> Decision:
    """Revenue-maximising grid point whose worst-case margins are nonnegative.

    Raises ``EmptyConsistencySet`` when the observation admits no class mix.
    """
    cs = ConsistencySet(obs.z, obs.d, obs.p_applied, tuple(classes))
    return search(obs, window, K_est, sp, classes, cfg, vertices(cs))


def nominal_decide(
    obs: Observation,
    window: FairnessWindow,
    K_est: float,
    sp: SystemParams,
    classes: Sequence[ClassParams],
    w: Sequence[float],
    cfg: ControllerConfig = ControllerConfig(),
) -> Decision:
    """Same search with the class mix taken as known."""
    return search(obs, window, K_est, sp, classes, cfg, [np.asarray(w, dtype=float)])


def surge_targets(rho: float, sp: SystemParams, cfg: ControllerConfig) -> tuple[float, float]:
    """Baseline price and admission target at normalised congestion ``rho``."""
    # Horner form keeps the endpoints exact (alpha hits 0.0 at rho = 1)
    p = min(max(1.0 + 9.0 * rho * rho * (3.0 - 2.0 * rho), sp.p_min), sp.p_max)
    alpha = 1.0 + rho * (cfg.b1 + rho * (cfg.b2 - cfg.b3 * rho))
    return p, min(max(alpha, 0.0), 1.0)


def surge_decide(obs: Observation, sp: SystemParams, cfg: ControllerConfig = ControllerConfig()) -> Decision:
    """Congestion pricing baseline; steers ``alpha`` toward its target within one window."""
    rho = min(1.0, obs.q / sp.q_max)
    p, alpha_target = surge_targets(rho, sp, cfg)
    nu = min(max((alpha_target - obs.alpha) / sp.T_d, -sp.nu_max), sp.nu_max)
    alpha_applied = min(max(obs.alpha + nu * sp.T_d, 0.0), 1.0)
    return Decision(p=p, nu=nu, alpha_applied=alpha_applied, feasible=True)
