"""Compiled inner loops for the controller and the simulator.

The controller kernels mirror ``cbf.predict_classes`` / ``cbf.eta1`` and the
index-path bookkeeping in ``cbf.predicted_index_path`` operation for
operation; the Python versions are the reference they are tested against.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _mu(q, mu_star, q_c):
    # RK4 stages may probe q < 0, where nothing is served
    if q <= 0.0:
        return 0.0
    if q <= q_c:
        return mu_star / q_c * q
    return mu_star


@njit(cache=True)
def _mu_slope(q, mu_star, q_c):
    if q < q_c:
        return mu_star / q_c
    return 0.0


@njit(cache=True)
def _rk4_linear(x, k, f, a0, a_mid, a_end, h):
    """One RK4 step of ``x' = k - (f + alpha(t)) x`` with stage admission rates."""
    k1 = k - (f + a0) * x
    x2 = x + 0.5 * h * k1
    k2 = k - (f + a_mid) * x2
    x3 = x + 0.5 * h * k2
    k3 = k - (f + a_mid) * x3
    x4 = x + h * k3
    k4 = k - (f + a_end) * x4
    return max(x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), 0.0)


@njit(cache=True)
def _rk4_row(src, dst, k, f, a0, a_mid, a_end, h):
    for ip in range(src.shape[0]):
        dst[ip] = _rk4_linear(src[ip], k, f[ip], a0, a_mid, a_end, h)


@njit(cache=True)
def fairness_grid(
    z0, a0, K, prices, nus, F, W, wbar,
    theta_d, T_d, dt, n, hist, norm, objective_at_end, path_check,
):
    """Worst-case fairness margin, objective and end-of-window ``alpha`` per grid point.

    Class queues obey linear ODEs for fixed ``(p, nu)``, so each class gets a
    unit response to its initial content (``phi``) and to a unit arrival rate
    (``psi``).  Every scenario ``(vertex v, all arrivals to class m)`` is then a
    linear combination of those responses.  The ratio at the decision instant
    is taken under the new price, since dropout responds to it immediately.

    Loops run with the price index innermost so they vectorise.
    """
    n_p = prices.shape[0]
    n_nu = nus.shape[0]
    n_v, N = W.shape
    eta2_w = np.empty((n_p, n_nu))
    J = np.empty((n_p, n_nu))
    alpha_plus = np.empty((n_p, n_nu))
    FT = np.ascontiguousarray(F.T)
    phi = np.empty((N, n, n_p))
    psi = np.empty((N, n, n_p))
    area_v = np.empty((n_v, n, n_p))
    area_m = np.empty((N, n, n_p))
    r_prev = np.empty(n_p)
    r_now = np.empty(n_p)
    worst = np.empty(n_p)
    peak = np.empty(n_p)
    a_start = np.empty(n)
    a_mid = np.empty(n)
    a_stop = np.empty(n)
    inv_K = 1.0 / K if K > 0 else 0.0
    half = 0.5 * dt
    j0 = 0 if path_check else n - 1
    for k in range(n_nu):
        nu = nus[k]
        a = a0
        for j in range(n):
            a_start[j] = a
            a_mid[j] = a + 0.5 * dt * nu
            a_stop[j] = a + dt * nu
            a = min(max(a + dt * nu, 0.0), 1.0)
        a_final = a
        for i in range(N):
            f_col = FT[i]
            for ip in range(n_p):
                phi[i, 0, ip] = _rk4_linear(1.0, 0.0, f_col[ip], a_start[0], a_mid[0], a_stop[0], dt)
                psi[i, 0, ip] = _rk4_linear(0.0, 1.0, f_col[ip], a_start[0], a_mid[0], a_stop[0], dt)
            for j in range(1, n):
                _rk4_row(phi[i, j - 1], phi[i, j], 0.0, f_col, a_start[j], a_mid[j], a_stop[j], dt)
                _rk4_row(psi[i, j - 1], psi[i, j], 1.0, f_col, a_start[j], a_mid[j], a_stop[j], dt)
        # dropout-ratio areas split into the initial-content part (per vertex)
        # and the arrival part (per receiving class); scenarios add them
        for v in range(n_v):
            for ip in range(n_p):
                r_prev[ip] = 0.0
            for i in range(N):
                c = z0 * W[v, i] * inv_K
                for ip in range(n_p):
                    r_prev[ip] += FT[i, ip] * c
            for j in range(n):
                for ip in range(n_p):
                    r_now[ip] = 0.0
                for i in range(N):
                    c = z0 * W[v, i] * inv_K
                    for ip in range(n_p):
                        r_now[ip] += FT[i, ip] * c * phi[i, j, ip]
                for ip in range(n_p):
                    base = area_v[v, j - 1, ip] if j > 0 else 0.0
                    area_v[v, j, ip] = base + half * (r_prev[ip] + r_now[ip])
                    r_prev[ip] = r_now[ip]
        for m in range(N):
            for ip in range(n_p):
                r_prev[ip] = 0.0
            for j in range(n):
                for ip in range(n_p):
                    r = FT[m, ip] * K * psi[m, j, ip] * inv_K
                    base = area_m[m, j - 1, ip] if j > 0 else 0.0
                    area_m[m, j, ip] = base + half * (r_prev[ip] + r)
                    r_prev[ip] = r
        for ip in range(n_p):
            worst[ip] = np.inf
        for v in range(n_v):
            for m in range(N):
                for ip in range(n_p):
                    peak[ip] = -np.inf
                for j in range(j0, n):
                    for ip in range(n_p):
                        idx = (hist[j] + area_v[v, j, ip] + area_m[m, j, ip]) / norm[j]
                        peak[ip] = max(peak[ip], idx)
                for ip in range(n_p):
                    worst[ip] = min(worst[ip], theta_d - peak[ip])
        for ip in range(n_p):
            eta2_w[ip, k] = worst[ip]
            z_nom = 0.0
            for i in range(N):
                z_nom += wbar[i] * (z0 * phi[i, n - 1, ip] + K * psi[i, n - 1, ip])
            alpha_plus[ip, k] = a_final
            if objective_at_end:
                J[ip, k] = T_d * prices[ip] * a_final * z_nom
            else:
                J[ip, k] = T_d * prices[ip] * a0 * z0
    return eta2_w, J, alpha_plus


@njit(cache=True)
def integrate_window(x0, q0, a0, K, f, nu, mu_star, q_c, dt, n):
    """RK4 on the per-class model for ``n`` steps with clamping after each step.

    Returns the state after every step: ``xs[n, N]``, ``qs[n]``, ``alphas[n]``.
    """
    N = x0.shape[0]
    xs = np.empty((n, N))
    qs = np.empty(n)
    alphas = np.empty(n)
    x = x0.copy()
    q = q0
    a = a0
    k1x = np.empty(N)
    k2x = np.empty(N)
    k3x = np.empty(N)
    k4x = np.empty(N)
    xt = np.empty(N)
    for j in range(n):
        h = dt
        a2 = a + 0.5 * h * nu
        a4 = a + h * nu
        z = 0.0
        for i in range(N):
            k1x[i] = K[i] - (f[i] + a) * x[i]
            z += x[i]
        k1q = a * z - _mu(q, mu_star, q_c)
        q2 = q + 0.5 * h * k1q
        z = 0.0
        for i in range(N):
            xt[i] = x[i] + 0.5 * h * k1x[i]
            z += xt[i]
        for i in range(N):
            k2x[i] = K[i] - (f[i] + a2) * xt[i]
        k2q = a2 * z - _mu(q2, mu_star, q_c)
        q3 = q + 0.5 * h * k2q
        z = 0.0
        for i in range(N):
            xt[i] = x[i] + 0.5 * h * k2x[i]
            z += xt[i]
        for i in range(N):
            k3x[i] = K[i] - (f[i] + a2) * xt[i]
        k3q = a2 * z - _mu(q3, mu_star, q_c)
        q4 = q + h * k3q
        z = 0.0
        for i in range(N):
            xt[i] = x[i] + h * k3x[i]
            z += xt[i]
        for i in range(N):
            k4x[i] = K[i] - (f[i] + a4) * xt[i]
        k4q = a4 * z - _mu(q4, mu_star, q_c)
        for i in range(N):
            x[i] = max(x[i] + h / 6.0 * (k1x[i] + 2 * k2x[i] + 2 * k3x[i] + k4x[i]), 0.0)
        q = max(q + h / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q), 0.0)
        a = min(max(a + h * nu, 0.0), 1.0)
        for i in range(N):
            xs[j, i] = x[i]
        qs[j] = q
        alphas[j] = a
    return xs, qs, alphas


@njit(cache=True)
def _window_end(x, q, a, K, f, nu, mu_star, q_c, dt, n, k1x, k2x, k3x, xt):
    """Allocation-free variant of ``integrate_window``: advances ``x`` in place, returns ``(q, a)``."""
    N = x.shape[0]
    for _ in range(n):
        h = dt
        a2 = a + 0.5 * h * nu
        a4 = a + h * nu
        z = 0.0
        for i in range(N):
            k1x[i] = K[i] - (f[i] + a) * x[i]
            z += x[i]
        k1q = a * z - _mu(q, mu_star, q_c)
        z = 0.0
        for i in range(N):
            xt[i] = x[i] + 0.5 * h * k1x[i]
            z += xt[i]
        q2 = q + 0.5 * h * k1q
        for i in range(N):
            k2x[i] = K[i] - (f[i] + a2) * xt[i]
        k2q = a2 * z - _mu(q2, mu_star, q_c)
        z = 0.0
        for i in range(N):
            xt[i] = x[i] + 0.5 * h * k2x[i]
            z += xt[i]
        q3 = q + 0.5 * h * k2q
        for i in range(N):
            k3x[i] = K[i] - (f[i] + a2) * xt[i]
        k3q = a2 * z - _mu(q3, mu_star, q_c)
        z = 0.0
        for i in range(N):
            xt[i] = x[i] + h * k3x[i]
            z += xt[i]
        q4 = q + h * k3q
        k4q = a4 * z - _mu(q4, mu_star, q_c)
        for i in range(N):
            k4 = K[i] - (f[i] + a4) * xt[i]
            x[i] = max(x[i] + h / 6.0 * (k1x[i] + 2 * k2x[i] + 2 * k3x[i] + k4), 0.0)
        q = max(q + h / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q), 0.0)
        a = min(max(a + h * nu, 0.0), 1.0)
    return q, a


@njit(cache=True)
def _capacity_one(
    ip, p, nu, q0, z0, a0, K, F, W, r1, r2,
    mu_star, q_c, q_max, lambda1, lambda2, dt, n, x, Ks, k1x, k2x, k3x, xt, give_up,
):
    """Worst ``eta1`` over scenarios; returns early once it drops below ``give_up``."""
    n_v, N = W.shape
    worst = np.inf
    f = F[ip]
    for v in range(n_v):
        for m in range(N):
            for i in range(N):
                x[i] = z0 * W[v, i]
                Ks[i] = 0.0
            Ks[m] = K
            q, a = _window_end(x, q0, a0, Ks, f, nu, mu_star, q_c, dt, n, k1x, k2x, k3x, xt)
            z = 0.0
            for i in range(N):
                z += x[i]
            wr1 = 0.0
            wr2 = 0.0
            for i in range(N):
                wi = x[i] / z if z > 0 else W[v, i]
                wr1 += wi * r1[i]
                wr2 += wi * r2[i]
            mu = _mu(q, mu_star, q_c)
            inflow = a * z
            Lfb = -inflow + mu
            Lf2b = (inflow - mu) * _mu_slope(q, mu_star, q_c) - a * (K - z * wr2 - inflow)
            m1 = Lf2b + inflow * wr1 * p + (-z) * nu + lambda2 * (Lfb + lambda1 * (q_max - q))
            if m1 < worst:
                worst = m1
                if worst < give_up:
                    return worst
    return worst


@njit(cache=True)
def capacity_margins(
    cand_ip, cand_price, cand_nu, q0, z0, a0, K, F, W, r1, r2,
    mu_star, q_c, q_max, lambda1, lambda2, dt, n,
):
    """Worst-case ``eta1`` at the predicted end-of-window state for each candidate.

    Scenarios are (vertex mix, all arrivals to one class); the margin uses the
    predicted end-of-window class mix.
    """
    N = W.shape[1]
    out = np.empty(cand_ip.shape[0])
    x, Ks, k1x, k2x, k3x, xt = np.empty(N), np.empty(N), np.empty(N), np.empty(N), np.empty(N), np.empty(N)
    for c in range(cand_ip.shape[0]):
        out[c] = _capacity_one(
            cand_ip[c], cand_price[c], cand_nu[c], q0, z0, a0, K, F, W, r1, r2,
            mu_star, q_c, q_max, lambda1, lambda2, dt, n, x, Ks, k1x, k2x, k3x, xt, -np.inf,
        )
    return out


@njit(cache=True)
def first_feasible(
    static_order, J, eta2, prices, nus, q0, z0, a0, K, F, W, r1, r2,
    mu_star, q_c, q_max, lambda1, lambda2, dt, n,
):
    """Best candidate (max ``J``, ties by ``static_order``) with both margins >= 0.

    Candidates are flat indices ``ip * len(nus) + k``.  Returns ``(index, eta1)``
    or ``(-1, nan)`` when none qualifies.
    """
    N = W.shape[1]
    n_nu = nus.shape[0]
    x, Ks, k1x, k2x, k3x, xt = np.empty(N), np.empty(N), np.empty(N), np.empty(N), np.empty(N), np.empty(N)
    keys = np.empty(static_order.shape[0])
    for r in range(static_order.shape[0]):
        keys[r] = -J[static_order[r]]
    order = static_order[np.argsort(keys, kind="mergesort")]
    for r in range(order.shape[0]):
        c = order[r]
        if not eta2[c] >= 0:
            continue
        ip = c // n_nu
        e1 = _capacity_one(
            ip, prices[ip], nus[c % n_nu], q0, z0, a0, K, F, W, r1, r2,
            mu_star, q_c, q_max, lambda1, lambda2, dt, n, x, Ks, k1x, k2x, k3x, xt, 0.0,
        )
        if e1 >= 0:
            return c, e1
    return -1, np.nan
