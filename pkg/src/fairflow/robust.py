"""Worst-case margins over the class mixes consistent with aggregate sensors.

With only ``z`` and the aggregate dropout ``d`` observed, the class proportions
``w`` are known to lie in the polytope

    { w >= 0, sum(w) = 1, sum_i f_i(p_applied) w_i = d / z }.

Two equality rows mean every vertex has at most two nonzero entries, so the
vertex set comes from solving the 2x2 systems for every pair of classes.
Margins that are affine in ``w`` attain their minimum at a vertex.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from fairflow.cbf import ExtendedState, eta1, predict_classes, predict_state, predicted_index_path
from fairflow.metrics import FairnessWindow
from fairflow.model import ClassParams, Control, HiddenState, SystemParams, dropout_rates

FEAS_TOL = 1e-9


class EmptyConsistencySet(ValueError):
    """No class mix reproduces the observed aggregate dropout."""


@dataclass(frozen=True)
class ConsistencySet:
    z: float
    d: float
    p_applied: float
    classes: tuple[ClassParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def rates(self) -> np.ndarray:
        return dropout_rates(self.classes, self.p_applied)

    def residuals(self, w: Sequence[float]) -> tuple[float, float, float]:
        """(simplex-sum, dropout-consistency, most negative entry) residuals for ``w``."""
        w = np.asarray(w, dtype=float)
        return (
            abs(w.sum() - 1.0),
            abs(float(self.rates @ w) * self.z - self.d),
            max(0.0, -float(w.min())),
        )

    def contains(self, w: Sequence[float], tol: float = FEAS_TOL) -> bool:
        return max(self.residuals(w)) <= tol * max(1.0, self.z)


@dataclass(frozen=True)
class StateBounds:
    lo: np.ndarray
    hi: np.ndarray
    mean: np.ndarray


def vertices(cs: ConsistencySet) -> list[np.ndarray]:
    f = cs.rates
    n = len(f)
    if cs.z <= 0:
        if cs.d > FEAS_TOL:
            raise EmptyConsistencySet(f"dropout {cs.d} observed with an empty demand queue")
        return [np.eye(n)[i] for i in range(n)]
    c = cs.d / cs.z
    tol = FEAS_TOL * max(1.0, float(np.max(f)))
    if c < f.min() - tol or c > f.max() + tol:
        raise EmptyConsistencySet(
            f"observed dropout ratio d/z={c:.6g} outside [{f.min():.6g}, {f.max():.6g}]"
        )
    c = min(max(c, float(f.min())), float(f.max()))

    found: list[np.ndarray] = []

    def add(w):
        for v in found:
            if np.max(np.abs(v - w)) <= 1e-12:
                return
        found.append(w)

    for i in range(n):
        if abs(f[i] - c) <= tol:
            add(np.eye(n)[i])
    for i, j in combinations(range(n), 2):
        gap = f[i] - f[j]
        if abs(gap) <= tol:
            continue
        wi = (c - f[j]) / gap
        if -FEAS_TOL <= wi <= 1 + FEAS_TOL:
            w = np.zeros(n)
            w[i] = min(max(wi, 0.0), 1.0)
            w[j] = 1.0 - w[i]
            add(w)
    if not found:
        raise EmptyConsistencySet(f"no vertex found for d/z={c:.6g}")
    return found


def scenarios(cs: ConsistencySet, K: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Extreme (initial mix, arrival split) pairs: every vertex with all arrivals in one class."""
    n = len(cs.classes)
    return [(w, K * np.eye(n)[m]) for w in vertices(cs) for m in range(n)]


def worst_case_eta1(
    s: ExtendedState,
    ctrl: Control,
    cs: ConsistencySet,
    K: float,
    sp: SystemParams,
    classes: Sequence[ClassParams],
    horizon: float | None = None,
    model: str = "aggregate",
) -> float:
    """Minimum of ``eta1`` over the consistency set.

    ``model="aggregate"`` propagates each vertex mix ``horizon`` (default
    ``T_d``) ahead with the mix frozen; ``horizon=0`` evaluates in place.
    ``model="classes"`` propagates the class queues of every vertex over one
    window under every single-class arrival split and evaluates the margin
    with the predicted end-of-window mix.
    """
    horizon = sp.T_d if horizon is None else horizon
    worst = np.inf
    if model == "classes":
        for w, arrivals in scenarios(cs, K):
            end = predict_classes(HiddenState(cs.z * w, s.q, s.alpha), ctrl, arrivals, sp, classes)[-1]
            w_end = end.x / end.z if end.z > 0 else w
            margin = eta1(ExtendedState(end.q, end.z, end.alpha), ctrl, w_end, K, sp, classes)
            worst = min(worst, margin)
        return float(worst)
    for w in vertices(cs):
        x = predict_state(s, ctrl, w, K, sp, classes, horizon)[0] if horizon > 0 else s
        worst = min(worst, eta1(x, ctrl, w, K, sp, classes))
    return float(worst)


def worst_case_eta2(
    window: FairnessWindow,
    s: ExtendedState,
    ctrl: Control,
    cs: ConsistencySet,
    K: float,
    sp: SystemParams,
    classes: Sequence[ClassParams],
    t_now: float,
    horizon: float | None = None,
    path: bool = False,
    model: str = "aggregate",
) -> float:
    """Minimum fairness margin ``theta_d - I`` over the consistency set.

    ``horizon=0`` takes the instantaneous ratio at the current state as the
    ratio for the next window.  ``path=True`` checks the predicted index at
    every integration step of the window rather than only at its end.
    ``model`` selects the prediction as in ``worst_case_eta1``.
    """
    horizon = sp.T_d if horizon is None else horizon
    f = dropout_rates(classes, ctrl.p)
    worst = np.inf
    if model == "classes":
        for w, arrivals in scenarios(cs, K):
            start = HiddenState(cs.z * w, s.q, s.alpha)
            states = [start] + predict_classes(start, ctrl, arrivals, sp, classes)
            ratios = [float(f @ st.x) / K if K > 0 else 0.0 for st in states]
            index = _index_from_path(window, t_now, sp, ratios, path)
            worst = min(worst, sp.theta_d - index)
        return float(worst)
    for w in vertices(cs):
        if horizon <= 0:
            ratio = float(f @ w) * s.z / K if K > 0 else 0.0
            index = window.predict_index(t_now, sp.T_d, ratio)
        elif path:
            ratios = _ratio_path(s, ctrl, w, K, sp, classes)
            index = _index_from_path(window, t_now, sp, ratios, path)
        else:
            ratio = predict_state(s, ctrl, w, K, sp, classes, horizon)[1]
            index = window.predict_index(t_now, horizon, ratio)
        worst = min(worst, sp.theta_d - index)
    return float(worst)


def _index_from_path(window, t_now, sp, ratios, path) -> float:
    """``ratios`` holds the value at ``t_now`` followed by one per step."""
    indices = predicted_index_path(window, t_now, sp, ratios[1:], ratios[0])
    return float(np.max(indices)) if path else float(indices[-1])


def _ratio_path(s, ctrl, w, K, sp, classes) -> list[float]:
    fbar = float(dropout_rates(classes, ctrl.p) @ w)
    out = [fbar * s.z / K if K > 0 else 0.0]
    x = s
    for _ in range(sp.steps_per_window):
        x = predict_state(x, ctrl, w, K, sp, classes, sp.dt)[0]
        out.append(fbar * x.z / K if K > 0 else 0.0)
    return out


def state_bounds(cs: ConsistencySet) -> StateBounds:
    """Per-class demand-queue intervals spanned by the consistency set."""
    V = np.array(vertices(cs))
    if cs.z <= 0:
        zeros = np.zeros(V.shape[1])
        return StateBounds(zeros, zeros.copy(), zeros.copy())
    return StateBounds(cs.z * V.min(axis=0), cs.z * V.max(axis=0), cs.z * V.mean(axis=0))
