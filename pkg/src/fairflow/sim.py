"""Closed-loop scenario engine and the preset scenario catalogue."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from fairflow._kernels import integrate_window
from fairflow.controller import ControllerConfig, Decision, robust_fair_decide, surge_decide
from fairflow.metrics import FairnessWindow, RevenueAccumulator
from fairflow.model import ClassParams, Control, HiddenState, Observation, SystemParams, dropout_rates, service_rate
from fairflow.robust import ConsistencySet, EmptyConsistencySet, state_bounds

log = logging.getLogger(__name__)

PROFILE_KINDS = ("constant", "clipped_gaussian", "piecewise")


@dataclass(frozen=True)
class DemandProfile:
    """Arrival-rate process of one class.

    ``piecewise`` interpolates ``breakpoints`` linearly (held flat outside
    them) and adds clipped Gaussian noise of standard deviation ``std``.
    """

    kind: str = "constant"
    mean: float = 0.0
    std: float = 0.0
    breakpoints: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ValueError(f"profile kind must be one of {PROFILE_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "breakpoints", tuple((float(t), float(m)) for t, m in self.breakpoints))
        if self.mean < 0 or self.std < 0:
            raise ValueError("profile mean and std must be >= 0")
        if self.kind == "piecewise":
            if not self.breakpoints:
                raise ValueError("piecewise profile needs breakpoints")
            times = [t for t, _ in self.breakpoints]
            if times != sorted(times):
                raise ValueError("breakpoints must be time-sorted")
            if any(m < 0 for _, m in self.breakpoints):
                raise ValueError("breakpoint means must be >= 0")

    def mean_at(self, t: float) -> float:
        if self.kind != "piecewise":
            return self.mean
        times, means = zip(*self.breakpoints)
        return float(np.interp(t, times, means))


def sample_arrivals(profile: DemandProfile, t: float, rng: np.random.Generator) -> float:
    if profile.kind == "constant":
        return profile.mean
    m = profile.mean_at(t)
    if profile.std == 0:
        return m
    return max(0.0, float(rng.normal(m, profile.std)))


@dataclass(frozen=True)
class Scenario:
    classes: tuple[ClassParams, ...]
    profiles: tuple[DemandProfile, ...]
    sp: SystemParams = SystemParams()
    cfg: ControllerConfig = ControllerConfig()
    t_end: float = 250.0
    seed: int = 0
    initial: HiddenState | None = None
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "profiles", tuple(self.profiles))
        if len(self.classes) == 0:
            raise ValueError("at least one class is required")
        if len(self.profiles) != len(self.classes):
            raise ValueError(f"{len(self.profiles)} profiles for {len(self.classes)} classes")
        if not self.t_end > 0:
            raise ValueError("t_end must be > 0")
        if abs(self.n_epochs * self.sp.T_d - self.t_end) > 1e-9 * self.t_end:
            raise ValueError("t_end must be an integer multiple of T_d")
        n = self.sp.steps_per_window
        if abs(n * self.sp.dt - self.sp.T_d) > 1e-9 * self.sp.T_d:
            raise ValueError("T_d must be an integer multiple of dt")
        if self.initial is not None:
            s = self.initial
            if len(s.x) != len(self.classes):
                raise ValueError("initial state has wrong number of classes")
            if np.any(s.x < 0) or s.q < 0 or not 0 <= s.alpha <= 1:
                raise ValueError("initial state violates x >= 0, q >= 0, 0 <= alpha <= 1")

    @property
    def n_epochs(self) -> int:
        return int(round(self.t_end / self.sp.T_d))

    @property
    def initial_state(self) -> HiddenState:
        if self.initial is not None:
            return self.initial.copy()
        return HiddenState(np.zeros(len(self.classes)), 0.0, 1.0)

    def with_policy(self, policy: str) -> "Scenario":
        return replace(self, cfg=replace(self.cfg, policy=policy))


@dataclass
class TraceRow:
    t: float
    K: tuple[float, ...]
    x: tuple[float, ...]
    z: float
    q: float
    alpha: float
    p: float
    nu: float
    mu: float
    d: float
    I: float
    revenue_rate: float
    revenue: float
    eta1_star: float
    eta2_star: float
    feasible: bool
    x_lo: tuple[float, ...] | None = None
    x_hi: tuple[float, ...] | None = None
    x_est: tuple[float, ...] | None = None


class SimulationFault(RuntimeError):
    """A run aborted early; ``trace`` holds the rows produced so far."""

    def __init__(self, message: str, trace: list[TraceRow]):
        super().__init__(message)
        self.trace = trace


@dataclass
class EpochInfo:
    """Everything known at a decision epoch, for observers."""

    k: int
    obs: Observation
    truth: HiddenState
    arrivals: np.ndarray
    window: FairnessWindow
    decision: Decision
    cs: ConsistencySet


def integrate_step(
    s: HiddenState,
    ctrl: Control,
    arrivals: Sequence[float],
    sp: SystemParams,
    classes: Sequence[ClassParams],
    dt: float,
) -> HiddenState:
    """One RK4 step of the per-class dynamics, clamped to the valid region."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    f = dropout_rates(classes, ctrl.p)
    xs, qs, alphas = integrate_window(
        np.asarray(s.x, dtype=float), float(s.q), float(s.alpha), np.asarray(arrivals, dtype=float),
        f, float(ctrl.nu), sp.mu_star, sp.q_c, dt, 1,
    )
    return HiddenState(xs[0], float(qs[0]), float(alphas[0]))


def observe(s: HiddenState, arrivals: np.ndarray, p_applied: float, classes, t: float) -> Observation:
    """Aggregate sensor view of the hidden state."""
    d = float(dropout_rates(classes, p_applied) @ s.x)
    return Observation(z=s.z, q=s.q, alpha=s.alpha, K=float(np.sum(arrivals)), d=d, p_applied=p_applied, t=t)


def run(
    scn: Scenario,
    on_epoch: Callable[[EpochInfo], None] | None = None,
) -> list[TraceRow]:
    """Simulate ``scn`` under ``scn.cfg.policy`` and return one row per integration step.

    Arrival rates are drawn once per decision epoch and held over the
    window, so the arrival rate the controller observes is the one in force.
    """
    sp, classes, cfg = scn.sp, scn.classes, scn.cfg
    rng = np.random.default_rng(scn.seed)
    n = sp.steps_per_window
    s = scn.initial_state
    window = FairnessWindow(sp.T_I)
    revenue = RevenueAccumulator()
    p_prev = sp.p_min
    trace: list[TraceRow] = []
    track_bounds = len(classes) > 2

    for k in range(scn.n_epochs):
        t_k = k * n * sp.dt
        arrivals = np.array([sample_arrivals(pr, t_k, rng) for pr in scn.profiles])
        obs = observe(s, arrivals, p_prev, classes, t_k)
        cs = ConsistencySet(obs.z, obs.d, obs.p_applied, classes)
        try:
            if cfg.policy == "surge":
                dec = surge_decide(obs, sp, cfg)
            else:
                dec = robust_fair_decide(obs, window, obs.K, sp, classes, cfg)
            bounds = state_bounds(cs) if track_bounds else None
        except EmptyConsistencySet as exc:
            raise SimulationFault(f"controller fault at t={t_k:g}: {exc}", trace) from exc
        # the new price and arrival rate take effect at t_k: record the jump
        window.record_sample(t_k, float(dropout_rates(classes, dec.p) @ s.x), obs.K)
        if on_epoch is not None:
            on_epoch(EpochInfo(k, obs, s.copy(), arrivals, window, dec, cs))
        bound_cols = {}
        if bounds is not None:
            bound_cols = dict(x_lo=tuple(bounds.lo), x_hi=tuple(bounds.hi), x_est=tuple(bounds.mean))
        if k == 0:
            trace.append(_row(0.0, arrivals, s, dec, obs.d, window.unfairness_index(0.0), revenue, sp, bound_cols))

        f = dropout_rates(classes, dec.p)
        xs, qs, alphas = integrate_window(s.x, s.q, s.alpha, arrivals, f, dec.nu, sp.mu_star, sp.q_c, sp.dt, n)
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(qs))):
            raise SimulationFault(f"non-finite state in window starting t={t_k:g}", trace)
        K = obs.K
        K_cols = tuple(arrivals.tolist())
        extra = (dec.p, dec.nu, dec.eta1_star, dec.eta2_star, dec.feasible)
        columns = zip(xs.tolist(), xs.sum(axis=1).tolist(), qs.tolist(), alphas.tolist(), (xs @ f).tolist())
        for j, (x, z, q, a, d) in enumerate(columns):
            t = (k * n + j + 1) * sp.dt
            window.record_sample(t, d, K)
            revenue.step(dec.p, a, z, sp.dt)
            trace.append(_fast_row(t, K_cols, x, z, q, a, d, window.unfairness_index(t), revenue, sp, extra, bound_cols))
        s = HiddenState(xs[-1].copy(), float(qs[-1]), float(alphas[-1]))
        p_prev = dec.p
    return trace


def _fast_row(t, K, x, z, q, a, d, I, revenue, sp, extra, bound_cols) -> TraceRow:
    p, nu, e1, e2, feasible = extra
    return TraceRow(
        t, K, tuple(x), z, q, a, p, nu, service_rate(sp, q), d, I,
        revenue.last_rate, revenue.total, e1, e2, feasible, **bound_cols,
    )


def _row(t, arrivals, s, dec, d, I, revenue, sp, bound_cols) -> TraceRow:
    return TraceRow(
        t=t,
        K=tuple(float(a) for a in arrivals),
        x=tuple(float(v) for v in s.x),
        z=s.z,
        q=s.q,
        alpha=s.alpha,
        p=dec.p,
        nu=dec.nu,
        mu=service_rate(sp, s.q),
        d=d,
        I=I,
        revenue_rate=revenue.last_rate,
        revenue=revenue.total,
        eta1_star=dec.eta1_star,
        eta2_star=dec.eta2_star,
        feasible=dec.feasible,
        **bound_cols,
    )


# ---------------------------------------------------------------- presets

TWO_CLASSES = (ClassParams(0.05, 0.0), ClassParams(0.0, 0.0))
THREE_CLASSES = (ClassParams(0.05, 0.0), ClassParams(0.02, 0.0), ClassParams(0.0, 0.0))
NOISE_CV = 0.5


@dataclass(frozen=True)
class Sweep:
    """Scenarios differing in one parameter."""

    name: str
    param: str
    values: tuple[float, ...]
    scenarios: tuple[Scenario, ...] = field(repr=False)

    def __iter__(self):
        return iter(zip(self.values, self.scenarios))

    def __len__(self):
        return len(self.scenarios)

    def __getitem__(self, i):
        return self.scenarios[i]


def gaussian(mean: float, cv: float = NOISE_CV) -> DemandProfile:
    return DemandProfile("clipped_gaussian", mean=mean, std=cv * mean)


def piecewise(points, std: float) -> DemandProfile:
    return DemandProfile("piecewise", mean=points[0][1], std=std, breakpoints=tuple(points))


def _two_group(name, k1, k2, t_end=250.0, sp=SystemParams(), seed=0) -> Scenario:
    return Scenario(TWO_CLASSES, (gaussian(k1), gaussian(k2)), sp=sp, t_end=t_end, seed=seed, name=name)


def presets() -> dict[str, Scenario | Sweep]:
    sp = SystemParams()
    light = _two_group("light", 4.0, 2.0)
    heavy = _two_group("heavy", 7.0, 4.0)
    dynamic = Scenario(
        TWO_CLASSES,
        (
            piecewise([(0, 4), (60, 4), (61, 7), (180, 7), (181, 4)], std=NOISE_CV * 4),
            piecewise([(0, 2), (60, 2), (61, 8), (100, 8), (140, 2)], std=NOISE_CV * 2),
        ),
        name="dynamic",
    )
    thetas = (0.2, 0.4, 0.6)
    theta_sweep = Sweep(
        "theta_sweep", "theta_d", thetas,
        tuple(replace(heavy, sp=replace(sp, theta_d=th), name=f"theta_sweep[theta_d={th}]") for th in thetas),
    )
    k1s = tuple(float(k) for k in range(3, 11))
    k1_sweep = Sweep(
        "k1_sweep", "K1", k1s,
        tuple(_two_group(f"k1_sweep[K1={k:g}]", k, 2.0, t_end=100.0) for k in k1s),
    )
    three_group = Scenario(
        THREE_CLASSES,
        (
            gaussian(3.0),
            piecewise([(0, 1), (60, 1), (61, 4), (200, 4), (220, 1)], std=NOISE_CV * 1),
            piecewise([(0, 1), (150, 1), (151, 4), (200, 4), (220, 1)], std=NOISE_CV * 1),
        ),
        name="three_group",
    )
    return {
        "light": light,
        "heavy": heavy,
        "dynamic": dynamic,
        "theta_sweep": theta_sweep,
        "k1_sweep": k1_sweep,
        "three_group": three_group,
    }
