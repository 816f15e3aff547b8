"""Hot numerical kernels: backward induction and stopping-rule enumeration.

Each kernel exists twice: a scalar-loop version compiled with numba when
available, and a vectorised numpy version used as fallback (or forced via
MFRBSDE_PURE_NUMPY=1).  Both accumulate expectations in the same order (jump
branches in mark order, then the stay branch) so results agree to rounding.

The flat layout: nodes of all steps live in one array, step i occupying
[offs[i], offs[i+1]); child index arrays hold flat indices, -1 marking a
pruned zero-probability branch.  Driver coefficients arrive packed as

    cpar = [const, coef_y, coef_sin_y, coef_mean, coef_u, coef_jump_exp,
            lam, coef_alpha]

together with per-step intensity rows, alpha values and frozen law means.
"""

from __future__ import annotations

import math

import numpy as np

from ._backend import USE_NUMBA, njit


@njit(cache=True)
def _family_scalar(cpar, phi_row, alpha_i, law_mean_i, y, u_row):
    val = (
        cpar[0]
        + cpar[1] * y
        + cpar[2] * math.sin(y)
        + cpar[3] * law_mean_i
        + cpar[7] * alpha_i
    )
    acc = 0.0
    for e in range(u_row.shape[0]):
        acc += u_row[e] * phi_row[e]
    val += cpar[4] * acc
    if cpar[5] != 0.0:
        lam = cpar[6]
        pen = 0.0
        for e in range(u_row.shape[0]):
            z = lam * u_row[e]
            pen += (math.exp(z) - 1.0 - z) * phi_row[e]
        val += cpar[5] / lam * pen
    return val


@njit(cache=True)
def _implicit_scalar(expect, u_row, cpar, phi_row, alpha_i, law_mean_i, da, max_iter, tol_abs, tol_rel):
    """Solve y = expect + da * f(y, u) by damped fixed-point iteration.

    Returns (y, residual, iterations, converged).  Damping halves the step
    whenever the residual changes sign between consecutive iterations.
    """
    yk = expect
    res_prev = 0.0
    for it in range(1, max_iter + 1):
        fv = _family_scalar(cpar, phi_row, alpha_i, law_mean_i, yk, u_row)
        target = expect + da * fv
        res = target - yk
        if abs(res) <= tol_abs + tol_rel * abs(yk):
            fv2 = _family_scalar(cpar, phi_row, alpha_i, law_mean_i, target, u_row)
            return target, abs(expect + da * fv2 - target), it, True
        if it > 1 and res * res_prev < 0.0:
            yk = yk + 0.5 * res
        else:
            yk = target
        res_prev = res
    fv = _family_scalar(cpar, phi_row, alpha_i, law_mean_i, yk, u_row)
    return yk, abs(expect + da * fv - yk), max_iter, False


@njit(cache=True)
def backward_sweep_numba(
    offs,
    cs_g,
    cj_g,
    p_stay,
    p_jump,
    dA,
    phi,
    alpha_seq,
    law_mean,
    cpar,
    obs_flat,
    has_obs,
    terminal_vals,
    step_lo,
    step_hi,
    max_iter,
    tol_abs,
    tol_rel,
):
    n_steps = dA.shape[0]
    m = p_jump.shape[1]
    total = offs[n_steps + 1]
    y = np.zeros(total)
    u = np.zeros((total, m))
    dk = np.zeros(total)
    t0 = offs[step_hi]
    for k in range(terminal_vals.shape[0]):
        y[t0 + k] = terminal_vals[k]
    worst_resid = 0.0
    worst_iters = 0
    fail_node = -1
    for i in range(step_hi - 1, step_lo - 1, -1):
        da = dA[i]
        al = alpha_seq[i]
        lm = law_mean[i]
        for g in range(offs[i], offs[i + 1]):
            cs = cs_g[g]
            vs = y[cs]
            expect = 0.0
            for e in range(m):
                c = cj_g[g, e]
                if c >= 0:
                    ve = y[c]
                    u[g, e] = ve - vs
                    expect += p_jump[i, e] * ve
                else:
                    u[g, e] = 0.0
            expect += p_stay[i] * vs
            yk, resid, iters, ok = _implicit_scalar(
                expect, u[g], cpar, phi[i], al, lm, da, max_iter, tol_abs, tol_rel
            )
            if resid > worst_resid:
                worst_resid = resid
            if iters > worst_iters:
                worst_iters = iters
            if not ok:
                fail_node = g
            if has_obs[i] == 1:
                h = obs_flat[g]
                ynew = max(yk, h)
                dk[g] = ynew - yk
                y[g] = ynew
            else:
                y[g] = yk
    return y, u, dk, worst_resid, worst_iters, fail_node


def _family_vec(cpar, phi_row, alpha_i, law_mean_i, y, u_mat):
    val = (
        cpar[0]
        + cpar[1] * y
        + cpar[2] * np.sin(y)
        + cpar[3] * law_mean_i
        + cpar[7] * alpha_i
    )
    acc = np.zeros_like(y)
    for e in range(u_mat.shape[1]):
        acc += u_mat[:, e] * phi_row[e]
    val = val + cpar[4] * acc
    if cpar[5] != 0.0:
        lam = cpar[6]
        pen = np.zeros_like(y)
        for e in range(u_mat.shape[1]):
            z = lam * u_mat[:, e]
            pen += (np.exp(z) - 1.0 - z) * phi_row[e]
        val = val + cpar[5] / lam * pen
    return val


def _implicit_vec(expect, u_mat, cpar, phi_row, alpha_i, law_mean_i, da, max_iter, tol_abs, tol_rel):
    """Vectorised counterpart of _implicit_scalar over a batch of nodes."""
    yk = expect.copy()
    res_prev = np.zeros_like(yk)
    converged = False
    for it in range(1, max_iter + 1):
        fv = _family_vec(cpar, phi_row, alpha_i, law_mean_i, yk, u_mat)
        target = expect + da * fv
        res = target - yk
        done = np.abs(res) <= tol_abs + tol_rel * np.abs(yk)
        if bool(np.all(done)):
            yk = target
            converged = True
            break
        osc = (res * res_prev < 0.0) if it > 1 else np.zeros_like(done)
        yk = np.where(osc, yk + 0.5 * res, target)
        res_prev = res
    fv = _family_vec(cpar, phi_row, alpha_i, law_mean_i, yk, u_mat)
    resid = np.abs(expect + da * fv - yk)
    return yk, resid, it, converged


def backward_sweep_numpy(
    offs,
    cs_g,
    cj_g,
    p_stay,
    p_jump,
    dA,
    phi,
    alpha_seq,
    law_mean,
    cpar,
    obs_flat,
    has_obs,
    terminal_vals,
    step_lo,
    step_hi,
    max_iter,
    tol_abs,
    tol_rel,
):
    n_steps = dA.shape[0]
    m = p_jump.shape[1]
    total = offs[n_steps + 1]
    y = np.zeros(total)
    u = np.zeros((total, m))
    dk = np.zeros(total)
    y[offs[step_hi] : offs[step_hi + 1]] = terminal_vals
    worst_resid = 0.0
    worst_iters = 0
    fail_node = -1
    for i in range(step_hi - 1, step_lo - 1, -1):
        sl = slice(offs[i], offs[i + 1])
        cs = cs_g[sl]
        vs = y[cs]
        expect = np.zeros(offs[i + 1] - offs[i])
        for e in range(m):
            c = cj_g[sl, e]
            mask = c >= 0
            ve = np.where(mask, y[c], 0.0)
            u[sl, e] = np.where(mask, ve - vs, 0.0)
            expect += p_jump[i, e] * ve
        expect += p_stay[i] * vs
        yk, resid, iters, ok = _implicit_vec(
            expect, u[sl], cpar, phi[i], alpha_seq[i], law_mean[i], dA[i],
            max_iter, tol_abs, tol_rel,
        )
        step_worst = float(np.max(resid)) if resid.size else 0.0
        if step_worst > worst_resid:
            worst_resid = step_worst
        if iters > worst_iters:
            worst_iters = iters
        if not ok:
            fail_node = int(offs[i] + np.argmax(resid))
        if has_obs[i] == 1:
            h = obs_flat[sl]
            ynew = np.maximum(yk, h)
            dk[sl] = ynew - yk
            y[sl] = ynew
        else:
            y[sl] = yk
    return y, u, dk, worst_resid, worst_iters, fail_node


def backward_sweep(*args):
    if USE_NUMBA:
        return backward_sweep_numba(*args)
    return backward_sweep_numpy(*args)


# ---------------------------------------------------------------------------
# brute-force stopping-rule enumeration


@njit(cache=True)
def snell_enumerate_numba(
    offs,
    cs_g,
    cj_g,
    p_stay,
    p_jump,
    dA,
    phi,
    alpha_seq,
    law_mean,
    cpar,
    rules_per_node,
    obs_flat,
    terminal_vals,
    total_rules,
    max_iter,
    tol_abs,
    tol_rel,
):
    """Evaluate every stopping rule of the lattice.

    A rule index is decoded in mixed radix: 0 means "stop here"; r >= 1
    splits r - 1 across the children (stay branch first, then marks in
    order), each child receiving a sub-rule index modulo its own rule count.
    Returns the per-node running maximum of the rule values, which after the
    full enumeration is the brute-force optimal-stopping value at each node.
    """
    n_steps = dA.shape[0]
    m = p_jump.shape[1]
    total = offs[n_steps + 1]
    best = np.full(total, -np.inf)
    rem = np.empty(total, np.int64)
    stopped = np.zeros(total, np.uint8)
    val = np.zeros(total)
    fail = -1
    for r in range(total_rules):
        for g in range(total):
            rem[g] = -1
        rem[0] = r
        for i in range(n_steps + 1):
            for g in range(offs[i], offs[i + 1]):
                if rem[g] < 0:
                    continue
                if i == n_steps or rem[g] == 0:
                    stopped[g] = 1
                    continue
                stopped[g] = 0
                rp = rem[g] - 1
                c = cs_g[g]
                rem[c] = rp % rules_per_node[c]
                rp //= rules_per_node[c]
                for e in range(m):
                    c2 = cj_g[g, e]
                    if c2 >= 0:
                        rem[c2] = rp % rules_per_node[c2]
                        rp //= rules_per_node[c2]
        for i in range(n_steps, -1, -1):
            for g in range(offs[i], offs[i + 1]):
                if rem[g] < 0:
                    continue
                if i == n_steps:
                    v = terminal_vals[g - offs[n_steps]]
                elif stopped[g] == 1:
                    v = obs_flat[g]
                else:
                    cs = cs_g[g]
                    vs = val[cs]
                    expect = 0.0
                    u_row = np.zeros(m)
                    for e in range(m):
                        c2 = cj_g[g, e]
                        if c2 >= 0:
                            ve = val[c2]
                            u_row[e] = ve - vs
                            expect += p_jump[i, e] * ve
                    expect += p_stay[i] * vs
                    v, _, _, ok = _implicit_scalar(
                        expect, u_row, cpar, phi[i], alpha_seq[i], law_mean[i],
                        dA[i], max_iter, tol_abs, tol_rel,
                    )
                    if not ok:
                        fail = g
                val[g] = v
                if v > best[g]:
                    best[g] = v
    return best, fail


def snell_enumerate_numpy(
    offs,
    cs_g,
    cj_g,
    p_stay,
    p_jump,
    dA,
    phi,
    alpha_seq,
    law_mean,
    cpar,
    rules_per_node,
    obs_flat,
    terminal_vals,
    total_rules,
    max_iter,
    tol_abs,
    tol_rel,
    batch: int = 2048,
):
    """Vectorised enumeration: rules are processed in batches, with the
    decode and backward pass running elementwise across the batch."""
    n_steps = dA.shape[0]
    m = p_jump.shape[1]
    total = offs[n_steps + 1]
    best = np.full(total, -np.inf)
    fail = -1
    for start in range(0, total_rules, batch):
        rules = np.arange(start, min(start + batch, total_rules), dtype=np.int64)
        b = rules.size
        rem = np.full((b, total), -1, dtype=np.int64)
        stopped = np.zeros((b, total), dtype=bool)
        val = np.zeros((b, total))
        rem[:, 0] = rules
        for i in range(n_steps + 1):
            for g in range(offs[i], offs[i + 1]):
                reached = rem[:, g] >= 0
                if not reached.any():
                    continue
                if i == n_steps:
                    stopped[reached, g] = True
                    continue
                stop_here = reached & (rem[:, g] == 0)
                stopped[:, g] = stop_here
                cont = reached & ~stop_here
                if not cont.any():
                    continue
                rp = rem[cont, g] - 1
                c = cs_g[g]
                rem[cont, c] = rp % rules_per_node[c]
                rp //= rules_per_node[c]
                for e in range(m):
                    c2 = cj_g[g, e]
                    if c2 >= 0:
                        rem[cont, c2] = rp % rules_per_node[c2]
                        rp //= rules_per_node[c2]
        val[:, offs[n_steps] : total] = terminal_vals[None, :]
        for i in range(n_steps - 1, -1, -1):
            for g in range(offs[i], offs[i + 1]):
                reached = rem[:, g] >= 0
                if not reached.any():
                    continue
                stop_here = stopped[:, g] & reached
                val[stop_here, g] = obs_flat[g]
                cont = reached & ~stopped[:, g]
                if cont.any():
                    cs = cs_g[g]
                    vs = val[cont, cs]
                    expect = np.zeros(int(cont.sum()))
                    u_mat = np.zeros((expect.size, m))
                    for e in range(m):
                        c2 = cj_g[g, e]
                        if c2 >= 0:
                            ve = val[cont, c2]
                            u_mat[:, e] = ve - vs
                            expect += p_jump[i, e] * ve
                    expect += p_stay[i] * vs
                    yk, resid, _, ok = _implicit_vec(
                        expect, u_mat, cpar, phi[i], alpha_seq[i], law_mean[i],
                        dA[i], max_iter, tol_abs, tol_rel,
                    )
                    if not ok:
                        fail = g
                    val[cont, g] = yk
        reached_any = rem >= 0
        masked = np.where(reached_any, val, -np.inf)
        best = np.maximum(best, masked.max(axis=0))
    return best, fail


def snell_enumerate(*args):
    if USE_NUMBA:
        return snell_enumerate_numba(*args)
    return snell_enumerate_numpy(*args)
