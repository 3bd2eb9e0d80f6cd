"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured values and
its runtime, then asserts the criterion and the runtime budget.
"""

import time
from dataclasses import replace
from itertools import combinations

import numpy as np
import pytest

from fairflow.cbf import ExtendedState, eta1, lie_bundle, predict_classes, predicted_index_path
from fairflow.controller import ControllerConfig, nominal_decide, robust_fair_decide, surge_targets
from fairflow.metrics import FairnessWindow
from fairflow.model import ClassParams, Control, HiddenState, Observation, SystemParams, dropout_rates
from fairflow.robust import ConsistencySet, vertices, worst_case_eta1, worst_case_eta2
from fairflow.sim import DemandProfile, Scenario, integrate_step, presets, run


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, elapsed, budget):
        ok = bool(ok) and elapsed <= budget
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail} [{elapsed:.1f}s / {budget:g}s]")
        assert ok, detail

    return emit


def peak(rows, attr):
    return max(getattr(r, attr) for r in rows)


# ---------------------------------------------------------------- 1


def random_scenario(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 4))
    classes = tuple(ClassParams(float(rng.uniform(0, 0.1)), float(rng.uniform(0, 0.05))) for _ in range(n))
    profiles = tuple(DemandProfile("clipped_gaussian", float(m), 0.5 * float(m)) for m in rng.uniform(0.5, 5, n))
    q_c = float(rng.uniform(5, 12))
    sp = SystemParams(
        theta_d=float(rng.uniform(0.2, 0.8)), mu_star=float(rng.uniform(3, 8)),
        q_c=q_c, q_max=q_c * float(rng.uniform(1.2, 2)),
    )
    init = HiddenState(rng.uniform(0, 5, n), float(rng.uniform(0, 0.5) * sp.q_max), float(rng.uniform(0, 1)))
    return Scenario(classes, profiles, sp=sp, t_end=20.0, seed=seed, initial=init)


def test_criterion_1_forward_invariance(report):
    start = time.perf_counter()
    checked, worst_q, worst_I, seed = 0, -np.inf, -np.inf, 0
    while checked < 20 and seed < 40:
        scn = random_scenario(seed)
        seed += 1
        rows = run(scn)
        if not all(r.feasible for r in rows):
            continue
        checked += 1
        sp = scn.sp
        worst_q = max(worst_q, peak(rows, "q") - (sp.q_max + 1e-3 * sp.q_max))
        worst_I = max(worst_I, peak(rows, "I") - (sp.theta_d + 1e-6))
    elapsed = time.perf_counter() - start
    ok = checked >= 20 and worst_q <= 0 and worst_I <= 0
    report(1, ok, f"{checked} all-feasible scenarios of {seed}; max q excess {worst_q:.3g}, "
                  f"max I excess {worst_I:.3g}", elapsed, 60)


# ---------------------------------------------------------------- 2


def test_criterion_2_heavy_contrast(report):
    start = time.perf_counter()
    heavy = presets()["heavy"]
    robust = run(heavy)
    surge = run(heavy.with_policy("surge"))
    elapsed = time.perf_counter() - start
    th = heavy.sp.theta_d
    ok = peak(surge, "I") > th and peak(robust, "I") <= th
    report(2, ok, f"surge peak I {peak(surge, 'I'):.4f}, robust peak I {peak(robust, 'I'):.6f}, "
                  f"theta_d {th}", elapsed, 10)


# ---------------------------------------------------------------- 3


def test_criterion_3_light_revenue(report):
    start = time.perf_counter()
    light = presets()["light"]
    revenue = {"robust_fair": [], "surge": []}
    worst = {"robust_fair": 0.0, "surge": 0.0}
    for seed in range(5):
        for policy in revenue:
            rows = run(replace(light, seed=seed).with_policy(policy))
            revenue[policy].append(rows[-1].revenue)
            worst[policy] = max(worst[policy], peak(rows, "I"))
    elapsed = time.perf_counter() - start
    th = light.sp.theta_d
    mean = {k: float(np.mean(v)) for k, v in revenue.items()}
    ok = worst["robust_fair"] <= th and worst["surge"] <= th and mean["robust_fair"] >= mean["surge"]
    report(3, ok, f"mean revenue robust {mean['robust_fair']:.1f} vs surge {mean['surge']:.1f}; "
                  f"peak I robust {worst['robust_fair']:.6f}, surge {worst['surge']:.4f} (theta_d {th})",
           elapsed, 30)


# ---------------------------------------------------------------- 4


def test_criterion_4_theta_monotonicity(report):
    start = time.perf_counter()
    revenue, excess = [], []
    for theta, scn in presets()["theta_sweep"]:
        rows = run(scn)
        revenue.append(rows[-1].revenue)
        excess.append(peak(rows, "I") - theta)
    elapsed = time.perf_counter() - start
    ok = all(a <= b for a, b in zip(revenue, revenue[1:])) and max(excess) <= 1e-6
    report(4, ok, f"robust revenue {[round(r, 1) for r in revenue]}, max I excess {max(excess):.3g}",
           elapsed, 30)


# ---------------------------------------------------------------- 5


def test_criterion_5_non_monotone_pricing(report):
    start = time.perf_counter()
    robust, surge = {}, {}
    for k1, scn in presets()["k1_sweep"]:
        robust[k1] = float(np.mean([r.p for r in run(scn)]))
        surge[k1] = float(np.mean([r.p for r in run(scn.with_policy("surge"))]))
    elapsed = time.perf_counter() - start
    s = list(surge.values())
    ok = robust[10.0] < robust[6.0] and all(a <= b for a, b in zip(s, s[1:]))
    report(5, ok, f"robust mean price K1=6 {robust[6.0]:.3f}, K1=10 {robust[10.0]:.3f}; "
                  f"surge {[round(v, 3) for v in s]}", elapsed, 60)


# ---------------------------------------------------------------- 6


def class_margins(s, ctrl, x0, arrivals, K, window, t, sp, classes):
    """Predicted capacity and path fairness margins from explicit class contents."""
    start = HiddenState(np.asarray(x0, float), s.q, s.alpha)
    states = [start] + predict_classes(start, ctrl, arrivals, sp, classes)
    end = states[-1]
    w_end = end.x / end.z if end.z > 0 else np.full(len(classes), 1 / len(classes))
    m1 = eta1(ExtendedState(end.q, end.z, end.alpha), ctrl, w_end, K, sp, classes)
    f = dropout_rates(classes, ctrl.p)
    ratios = [float(f @ x.x) / K if K > 0 else 0.0 for x in states]
    m2 = sp.theta_d - max(predicted_index_path(window, t, sp, ratios[1:], ratios[0]))
    return m1, m2


def test_criterion_6_three_group(report):
    start = time.perf_counter()
    scn = presets()["three_group"]
    sp, classes = scn.sp, scn.classes
    rng = np.random.default_rng(0)
    stats = dict(residual=0.0, plain=-np.inf, full=-np.inf, dense=-np.inf, epochs=0)

    def check(e):
        obs, truth = e.obs, e.truth
        if obs.z <= 0:
            return
        w = truth.x / truth.z
        stats["residual"] = max(stats["residual"], *e.cs.residuals(w))
        if e.k % 10:
            return
        stats["epochs"] += 1
        s = ExtendedState(obs.q, obs.z, obs.alpha)
        ctrl = Control(e.decision.p, e.decision.nu)
        K, t = obs.K, obs.t
        # no-prediction margins: affine in w, so the vertex minimum is exact
        ratio = float(dropout_rates(classes, ctrl.p) @ truth.x) / K if K > 0 else 0.0
        true2 = sp.theta_d - e.window.predict_index(t, sp.T_d, ratio)
        gaps = [
            worst_case_eta1(s, ctrl, e.cs, K, sp, classes, horizon=0) - eta1(s, ctrl, w, K, sp, classes),
            worst_case_eta2(e.window, s, ctrl, e.cs, K, sp, classes, t, horizon=0) - true2,
        ]
        stats["plain"] = max(stats["plain"], *gaps)
        if e.k % 50:
            return
        # full prediction: worst case against the truth and a dense sample of the set
        w1 = worst_case_eta1(s, ctrl, e.cs, K, sp, classes, model="classes")
        w2 = worst_case_eta2(e.window, s, ctrl, e.cs, K, sp, classes, t, path=True, model="classes")
        m1, m2 = class_margins(s, ctrl, truth.x, e.arrivals, K, e.window, t, sp, classes)
        stats["full"] = max(stats["full"], w1 - m1, w2 - m2)
        V = np.array(vertices(e.cs))
        mixes = rng.dirichlet(np.ones(len(V)), 40) @ V
        splits = rng.dirichlet(np.ones(len(classes)), 40)
        for mix, split in zip(mixes, splits):
            d1, d2 = class_margins(s, ctrl, obs.z * mix, K * split, K, e.window, t, sp, classes)
            stats["dense"] = max(stats["dense"], w1 - d1, w2 - d2)

    robust = run(scn, on_epoch=check)
    surge = run(scn.with_policy("surge"))
    elapsed = time.perf_counter() - start
    th = sp.theta_d
    ok = (
        stats["residual"] <= 1e-9
        and stats["plain"] <= 1e-9
        and stats["full"] <= 1e-6
        and stats["dense"] <= 1e-6
        and peak(robust, "I") <= th
        and peak(surge, "I") > th
    )
    report(6, ok, f"membership residual {stats['residual']:.2g}; worst-minus-true no-prediction "
                  f"{stats['plain']:.2g}, full {stats['full']:.2g}, dense {stats['dense']:.2g} "
                  f"over {stats['epochs']} epochs; peak I robust {peak(robust, 'I'):.6f}, "
                  f"surge {peak(surge, 'I'):.4f}", elapsed, 30)


# ---------------------------------------------------------------- 7


def polytope_grid(f, c, points=10_000):
    """Dense grid of exactly feasible points of {w >= 0, sum w = 1, f.w = c}.

    For every coordinate pair (a, b) the other coordinates run over a simplex
    lattice and (w_a, w_b) solve the two equality rows; points with a negative
    entry are dropped.
    """
    n = len(f)
    pairs = [(a, b) for a, b in combinations(range(n), 2) if f[a] != f[b]]
    per = max(2, points // max(1, len(pairs)))
    out = []
    for a, b in pairs:
        rest = [i for i in range(n) if i not in (a, b)]
        if rest:
            m = 1
            while _lattice_size(len(rest), m + 1) <= per:
                m += 1
            L = _lattice(len(rest), m)
        else:
            L = np.zeros((1, 0))
        s = L.sum(axis=1)
        rhs = c - L @ f[rest]
        wa = (rhs - f[b] * (1 - s)) / (f[a] - f[b])
        wb = 1 - s - wa
        W = np.zeros((len(L), n))
        W[:, rest], W[:, a], W[:, b] = L, wa, wb
        out.append(W[(wa >= 0) & (wb >= 0)])
    return np.vstack(out)


def _lattice_size(k, m):
    from math import comb

    return comb(m + k, k)


def _lattice(k, m):
    """All k-vectors with entries j/m, j >= 0, summing to at most 1."""
    grids = np.stack(np.meshgrid(*([np.arange(m + 1)] * k), indexing="ij"), -1).reshape(-1, k)
    return grids[grids.sum(axis=1) <= m] / m


def test_criterion_7_lp_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst, sizes = 0.0, []
    for _ in range(100):
        n = int(rng.integers(2, 6))
        classes = tuple(ClassParams(float(rng.uniform(0, 0.1)), float(rng.uniform(0, 0.05))) for _ in range(n))
        x = rng.uniform(0, 10, n)
        p = float(rng.uniform(0, 10))
        cs = ConsistencySet(float(x.sum()), float(dropout_rates(classes, p) @ x), p, classes)
        g, g0 = rng.normal(size=n), float(rng.normal())
        vertex_min = min(g0 + g @ w for w in vertices(cs))
        G = polytope_grid(cs.rates, cs.d / cs.z)
        sizes.append(len(G))
        worst = max(worst, abs(vertex_min - float(np.min(g0 + G @ g))))
    elapsed = time.perf_counter() - start
    report(7, worst <= 1e-4, f"max |vertex min - grid min| {worst:.3g} over 100 sets "
                             f"(grid sizes {min(sizes)}-{max(sizes)})", elapsed, 10)


# ---------------------------------------------------------------- 8


def test_criterion_8_formula_exactness(report):
    start = time.perf_counter()
    sp, cfg = SystemParams(), ControllerConfig()
    surge = [surge_targets(r, sp, cfg) for r in (0.0, 0.5, 1.0)]
    surge_ok = surge == [(1.0, 1.0), (5.5, 0.70575), (10.0, 0.0)]
    lb = lie_bundle(ExtendedState(5, 20, 0.5), [0.5, 0.5], 6, sp, (ClassParams(0.05, 0), ClassParams(0, 0)))
    bundle = (lb.Lfb, lb.Lf2b, lb.LgpLfb, lb.LgnuLfb, lb.b)
    bundle_ok = bundle == (-7.5, 5.75, 0.5, -20, 10)

    rng = np.random.default_rng(8)
    window_err = 0.0
    for _ in range(50):
        horizon = float(rng.uniform(1, 20))
        w, samples, t = FairnessWindow(horizon), [], 0.0
        for _ in range(int(rng.integers(1, 80))):
            t = t if samples and rng.uniform() < 0.2 else t + float(rng.uniform(0.001, 2))
            r = float(rng.uniform(0, 3))
            w.record_sample(t, r, 1.0)
            samples.append((t, r))
        q = t + float(rng.uniform(0, 1))
        window_err = max(window_err, abs(w.unfairness_index(q) - _brute_index(samples, q, horizon)))
    elapsed = time.perf_counter() - start
    ok = surge_ok and bundle_ok and window_err <= 1e-9
    report(8, ok, f"surge {surge}; Lie bundle {bundle} (expected (-7.5, 5.75, 0.5, -20, 10)); "
                  f"window error {window_err:.2g}", elapsed, 10)


def _brute_index(samples, t, horizon, fine=20_000):
    """Riemann re-integration of the piecewise-linear ratio train."""
    ts = np.array([s[0] for s in samples])
    rs = np.array([s[1] for s in samples])
    lo = max(ts[0], t - horizon)
    if t <= lo:
        return rs[-1]
    total = 0.0
    for k in range(len(ts) - 1):
        a, b = max(ts[k], lo), min(ts[k + 1], t)
        if b <= a:
            continue
        # midpoint rule is exact for linear pieces
        mids = a + (np.arange(fine) + 0.5) * (b - a) / fine
        total += np.interp(mids, ts[k:k + 2], rs[k:k + 2]).sum() * (b - a) / fine
    if t > ts[-1]:
        total += (t - max(ts[-1], lo)) * rs[-1]
    return total / (t - lo)


# ---------------------------------------------------------------- 9


def test_criterion_9_lie_finite_differences(report):
    start = time.perf_counter()
    light = replace(presets()["light"], t_end=30.0)
    epochs = []
    run(light, on_epoch=lambda e: epochs.append(e.truth) if e.truth.q < 6 else None)
    rng = np.random.default_rng(9)
    sp, classes = light.sp, light.classes
    ratios, errors = [], []
    for s0 in [epochs[i] for i in rng.choice(len(epochs), 10, replace=False)]:
        s0 = HiddenState(s0.x, s0.q, 0.5)
        ctrl = Control(float(rng.uniform(0, 10)), float(rng.uniform(-1, 1)))
        K = rng.uniform(1, 5, len(classes))
        step, n = 1e-3, 80
        traj = [s0]
        for _ in range(2 * n):
            traj.append(integrate_step(traj[-1], ctrl, K, sp, classes, step))
        mid = traj[n]
        lb = lie_bundle(ExtendedState(mid.q, mid.z, mid.alpha), mid.x / mid.z, float(K.sum()), sp, classes)
        exact = lb.Lf2b + lb.LgpLfb * ctrl.p + lb.LgnuLfb * ctrl.nu
        err = []
        for k in (n // 2, n // 4):
            h = k * step
            b = [sp.q_max - traj[n + j].q for j in (-k, 0, k)]
            err.append(abs((b[0] - 2 * b[1] + b[2]) / h**2 - exact))
        errors.append(err)
        ratios.append(err[0] / err[1])
    elapsed = time.perf_counter() - start
    ok = min(ratios) >= 3.5
    report(9, ok, f"error shrink on halving h: min {min(ratios):.2f}, max {max(ratios):.2f}; "
                  f"largest error {max(e[0] for e in errors):.2g}", elapsed, 10)


# ---------------------------------------------------------------- 10


def test_criterion_10_two_group_coincidence(report):
    start = time.perf_counter()
    rng = np.random.default_rng(10)
    mismatches, done = [], 0
    while done < 50:
        sp = SystemParams(theta_d=float(rng.uniform(0.2, 0.6)))
        classes = tuple(ClassParams(float(rng.uniform(0, 0.1)), float(rng.uniform(0, 0.05))) for _ in range(2))
        x = rng.uniform(0.1, 8, 2)
        p_applied = float(rng.uniform(0, 10))
        f = dropout_rates(classes, p_applied)
        if abs(f[0] - f[1]) < 1e-6:
            continue
        done += 1
        obs = Observation(
            z=float(x.sum()), q=float(rng.uniform(0, 15)), alpha=float(rng.uniform(0, 1)),
            K=float(rng.uniform(0.5, 12)), d=float(f @ x), p_applied=p_applied, t=5.0,
        )
        window, t = FairnessWindow(sp.T_I), 0.0
        level = sp.theta_d * float(rng.uniform(0.3, 1.1))
        for _ in range(500):
            window.record_sample(t, float(rng.uniform(0, 2 * level)), 1.0)
            t = round(t + sp.dt, 10)
        a = robust_fair_decide(obs, window, obs.K, sp, classes)
        b = nominal_decide(obs, window, obs.K, sp, classes, x / x.sum())
        same = (a.p, a.nu, a.feasible) == (b.p, b.nu, b.feasible) and np.allclose(
            [a.eta1_star, a.eta2_star], [b.eta1_star, b.eta2_star], atol=1e-9, rtol=0
        )
        if not same:
            mismatches.append((a, b))
    elapsed = time.perf_counter() - start
    report(10, not mismatches, f"{50 - len(mismatches)}/50 instances identical", elapsed, 10)
