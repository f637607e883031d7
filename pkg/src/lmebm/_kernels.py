"""Compiled EM-IS loop.

Mirrors ``estimation.run_m_step`` / ``estimation.em_is`` step for step on the
pair-feature table; the numpy code in ``estimation`` is the reference and the
tests compare the two trajectories.
"""

import math

import numpy as np
from numba import njit

# termination codes
CONVERGED = 0
ITERATION_CAP = 1
STALLED = 2
BRACKET_FAILED = 3


@njit(cache=True)
def _lse(a):
    top = -np.inf
    for v in a:
        if v > top:
            top = v
    if not np.isfinite(top):
        return top
    s = 0.0
    for v in a:
        s += math.exp(v - top)
    return math.log(s) + top


@njit(cache=True)
def _enumerate(features, lam, log_p):
    e = features @ lam
    log_z = _lse(e)
    for s in range(e.size):
        log_p[s] = e[s] - log_z
    return log_z


@njit(cache=True)
def _e_step(features, log_p, empirical, n_obs, n_hidden_states, vv_mask, vv_targets, eta):
    """Fill ``eta`` with the completed-data targets and return the log-likelihood."""
    q = np.zeros(log_p.size)
    ll = 0.0
    col = np.empty(n_hidden_states)
    for y in range(n_obs):
        for z in range(n_hidden_states):
            col[z] = log_p[y + n_obs * z]
        lpy = _lse(col)
        w = empirical[y]
        if w > 0:
            ll += w * lpy
            for z in range(n_hidden_states):
                q[y + n_obs * z] = w * math.exp(col[z] - lpy)
    t = features.T @ q
    for i in range(eta.size):
        if vv_mask[i]:
            eta[i] = vv_targets[i]
        else:
            eta[i] = min(max(t[i], 0.0), 1.0)
    return ll


@njit(cache=True)
def _entropy(log_p):
    h = 0.0
    for v in log_p:
        p = math.exp(v)
        if p > 0:
            h -= p * v
    return h


@njit(cache=True)
def _h_and_slope(lm, pair_counts, gamma, log_eta):
    k = lm.size
    z = np.empty(k)
    for n in range(k):
        z[n] = lm[n] + gamma * pair_counts[n]
    lg = _lse(z)
    slope = 0.0
    for n in range(k):
        if np.isfinite(z[n]):
            slope += math.exp(z[n] - lg) * pair_counts[n]
    return lg - log_eta, slope


@njit(cache=True)
def _solve_root(lm, pair_counts, log_eta, start, factor, max_expansions, root_tol, newton):
    """Returns (gamma, ok)."""
    lo = -start
    hi = start
    h_lo, _ = _h_and_slope(lm, pair_counts, lo, log_eta)
    h_hi, _ = _h_and_slope(lm, pair_counts, hi, log_eta)
    step = start
    for _ in range(max_expansions):
        need_lo = not (h_lo <= 0)
        need_hi = not (h_hi >= 0)
        if not (need_lo or need_hi):
            break
        step *= factor
        if need_lo:
            lo -= step
            h_lo, _ = _h_and_slope(lm, pair_counts, lo, log_eta)
        if need_hi:
            hi += step
            h_hi, _ = _h_and_slope(lm, pair_counts, hi, log_eta)
    if not (h_lo <= 0 and h_hi >= 0):
        return 0.0, False
    x = min(max(0.0, lo), hi)
    for _ in range(400):
        hx, slope = _h_and_slope(lm, pair_counts, x, log_eta)
        if hx < 0:
            lo = x
        elif hx > 0:
            hi = x
        if newton:
            cand = x - hx / slope
            new = cand if (cand > lo and cand < hi) else 0.5 * (lo + hi)
        else:
            new = 0.5 * (lo + hi)
        delta = abs(new - x)
        x = new
        if delta <= root_tol or hx == 0 or hi - lo <= root_tol:
            break
    return x, True


@njit(cache=True)
def _m_step(features, counts, pair_counts, lam, log_p, eta, inner_steps, clamp,
            start, factor, max_expansions, root_tol, newton, saturated):
    """S parallel scaling rounds in place on ``lam``/``log_p``; returns (log_z, ok, bad_feature)."""
    n_feat = lam.size
    m1 = pair_counts.size
    log_z = 0.0
    gamma = np.empty(n_feat)
    onehot = np.zeros((log_p.size, m1))
    for _ in range(inner_steps):
        onehot[:, :] = 0.0
        for s in range(log_p.size):
            onehot[s, counts[s]] = math.exp(log_p[s])
        mass = features.T @ onehot
        for i in range(n_feat):
            t = eta[i]
            if t <= 0.0:
                gamma[i] = -clamp - lam[i]
                saturated[i] = True
            elif t >= 1.0:
                gamma[i] = clamp - lam[i]
                saturated[i] = True
            else:
                lm = np.empty(m1)
                for n in range(m1):
                    lm[n] = math.log(mass[i, n]) if mass[i, n] > 0 else -np.inf
                g, ok = _solve_root(lm, pair_counts, math.log(t), start, factor,
                                    max_expansions, root_tol, newton)
                if not ok:
                    return log_z, False, i
                gamma[i] = g
        for i in range(n_feat):
            lam[i] = min(max(lam[i] + gamma[i], -clamp), clamp)
        log_z = _enumerate(features, lam, log_p)
    return log_z, True, -1


@njit(cache=True)
def em_is_loop(features, counts, pair_counts, lam0, empirical, n_obs, n_hidden_states,
               vv_mask, vv_targets, inner_steps, max_iter, tol, feas_tol, clamp,
               start, factor, max_expansions, root_tol, newton, patience):
    n_feat = lam0.size
    lam = lam0.copy()
    log_p = np.empty(features.shape[0])
    eta = np.empty(n_feat)
    saturated = np.zeros(n_feat, dtype=np.bool_)
    rows = np.zeros((max_iter + 1, 4))  # ll, entropy, residual, q

    log_z = _enumerate(features, lam, log_p)
    ll = _e_step(features, log_p, empirical, n_obs, n_hidden_states, vv_mask, vv_targets, eta)
    expect = features.T @ np.exp(log_p)
    rows[0, 0] = ll
    rows[0, 1] = _entropy(log_p)
    rows[0, 2] = np.max(np.abs(expect - eta)) if n_feat else 0.0
    rows[0, 3] = -log_z + np.dot(lam, eta)
    flat = 0
    for it in range(1, max_iter + 1):
        log_z, ok, bad = _m_step(features, counts, pair_counts, lam, log_p, eta, inner_steps,
                                 clamp, start, factor, max_expansions, root_tol, newton,
                                 saturated)
        if not ok:
            return lam, rows[:it], BRACKET_FAILED, saturated, bad
        q = -log_z + np.dot(lam, eta)
        new_ll = _e_step(features, log_p, empirical, n_obs, n_hidden_states, vv_mask,
                         vv_targets, eta)
        expect = features.T @ np.exp(log_p)
        resid = np.max(np.abs(expect - eta)) if n_feat else 0.0
        rows[it, 0] = new_ll
        rows[it, 1] = _entropy(log_p)
        rows[it, 2] = resid
        rows[it, 3] = q
        small = abs(new_ll - ll) < tol
        ll = new_ll
        if small and resid <= feas_tol:
            return lam, rows[: it + 1], CONVERGED, saturated, -1
        flat = flat + 1 if small else 0
        if flat >= patience:
            return lam, rows[: it + 1], STALLED, saturated, -1
    return lam, rows, ITERATION_CAP, saturated, -1
