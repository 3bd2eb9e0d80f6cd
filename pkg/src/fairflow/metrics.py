"""Sliding-window unfairness index and revenue accounting."""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass


class FairnessWindow:
    """Time-ordered train of dropout/arrival ratios over the last ``horizon`` time units.

    The unfairness index at ``t`` is the trapezoidal average of the ratio over
    ``[max(t0, t - horizon), t]`` where ``t0`` is the first timestamp ever
    recorded.  Before a full window has elapsed the average is taken over the
    elapsed time only.  Past the last sample the ratio is held constant.

    A sample at the same timestamp as the previous one records a jump: the
    ratio switches there (a price change alters dropout instantly) and the
    segment that follows starts from the new value.

    Cumulative integrals are kept from ``t0`` and never rebased, so dropping
    old samples cannot change any value computed inside the window.
    """

    def __init__(self, horizon: float = 10.0):
        if horizon <= 0:
            raise ValueError("horizon must be > 0")
        self.horizon = float(horizon)
        self.origin: float | None = None
        self._t: list[float] = []
        self._r: list[float] = []
        self._cum: list[float] = []
        self._start = 0

    def __len__(self):
        return len(self._t) - self._start

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self._t[self._start:], self._r[self._start:]))

    @property
    def last_time(self) -> float | None:
        return self._t[-1] if self._t else None

    @property
    def last_ratio(self) -> float:
        return self._r[-1] if self._r else 0.0

    def record_sample(self, t: float, dropout_rate: float, K: float) -> "FairnessWindow":
        """Append the ratio ``dropout_rate / K`` at time ``t`` (0 when ``K == 0``).

        ``t`` equal to the last timestamp records a jump to the new ratio.
        """
        if self._t and t < self._t[-1]:
            raise ValueError(f"timestamp {t} precedes last sample {self._t[-1]}")
        if dropout_rate < 0 or K < 0:
            raise ValueError("dropout rate and arrival rate must be >= 0")
        ratio = dropout_rate / K if K > 0 else 0.0
        if not self._t:
            self.origin = float(t)
            self._cum.append(0.0)
        else:
            dt = t - self._t[-1]
            self._cum.append(self._cum[-1] + 0.5 * dt * (self._r[-1] + ratio))
        self._t.append(float(t))
        self._r.append(ratio)
        self._evict(t)
        return self

    def _evict(self, t: float):
        # keep one anchor sample at or before the left edge for interpolation
        edge = t - self.horizon
        while self._start + 1 < len(self._t) and self._t[self._start + 1] <= edge:
            self._start += 1
        if self._start > 4096 and self._start > len(self._t) // 2:
            del self._t[: self._start], self._r[: self._start], self._cum[: self._start]
            self._start = 0

    def _cumulative(self, x: float) -> float:
        t, r = self._t, self._r
        k = bisect_right(t, x, lo=self._start) - 1
        if k < self._start:
            raise ValueError(f"time {x} precedes the retained window (starts at {t[self._start]})")
        if k == len(t) - 1:
            return self._cum[k] + (x - t[k]) * r[k]
        frac = (x - t[k]) / (t[k + 1] - t[k])
        rx = r[k] + frac * (r[k + 1] - r[k])
        return self._cum[k] + 0.5 * (x - t[k]) * (r[k] + rx)

    def integral(self, a: float, b: float) -> float:
        """Integral of the ratio over ``[a, b]``."""
        if b <= a:
            return 0.0
        return self._cumulative(b) - self._cumulative(a)

    def unfairness_index(self, t: float) -> float:
        if not self._t:
            return 0.0
        if t < self.origin:
            raise ValueError(f"query time {t} precedes first sample {self.origin}")
        lo = max(self.origin, t - self.horizon)
        span = t - lo
        if span <= 0:
            return self._r[self._start]
        return self.integral(lo, t) / span

    def predict_index(self, t_now: float, T_d: float, predicted_ratio: float) -> float:
        """Index at ``t_now + T_d`` if the ratio equals ``predicted_ratio`` on ``(t_now, t_now + T_d]``."""
        origin = self.origin if self.origin is not None else t_now
        t_end = t_now + T_d
        lo = max(origin, t_end - self.horizon)
        span = t_end - lo
        if span <= 0:
            return predicted_ratio
        history = self.integral(lo, t_now) if self._t else 0.0
        return (history + min(T_d, span) * predicted_ratio) / span


@dataclass
class RevenueAccumulator:
    total: float = 0.0
    last_rate: float = 0.0

    def step(self, p: float, alpha: float, z: float, dt: float) -> "RevenueAccumulator":
        if dt <= 0:
            raise ValueError("dt must be > 0")
        self.last_rate = p * alpha * z
        self.total += self.last_rate * dt
        return self


def revenue_step(acc: RevenueAccumulator, p: float, alpha: float, z: float, dt: float) -> RevenueAccumulator:
    return acc.step(p, alpha, z, dt)
