"""Backward solvers on scenario lattices.

The discrete equation at step i, given the values Y_{i+1} at the children,
reads

    U_i(e) = Y_{i+1}(jump e) - Y_{i+1}(no jump)
    Y_i    = E_i[Y_{i+1}] + dA_i * f(t_i, Y_i, U_i, mu_i)

which is explicit in U and implicit in Y; the scalar fixed point is solved
by damped iteration.  This choice makes the discrete martingale
representation exact: Y_{i+1} = E_i[Y_{i+1}] + sum_e U_i(e) q_i(e) with
q_i(e) = 1{jump e} - phi_i(e) dA_i holds branch by branch, by algebra.

Reflection against a barrier and the mean-field coupling are layered on top
(see reflected_solver and meanfield); this module provides the plain solver,
single steps, nonlinear stopped evaluations, and the stability gap check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._backend import backend_name
from .drivers import DriverSpec, eval_driver, terminal_values
from .errors import SolverError, ValidationError
from .laws import EmpiricalLaw
from .mpp_model import ScenarioLattice

TOL_ABS = 1e-15
TOL_REL = 1e-15
RESIDUAL_CONTRACT = 1e-12
DEFAULT_MAX_ITER = 200


def flat_arrays(lattice: ScenarioLattice):
    """Flat node layout for the kernels; cached on the lattice."""
    cached = getattr(lattice, "_flat", None)
    if cached is not None:
        return cached
    n, m = lattice.n_steps, lattice.n_marks
    offs = np.zeros(n + 2, dtype=np.int64)
    offs[1:] = np.cumsum(lattice.n_nodes)
    total = int(offs[-1])
    cs_g = np.full(total, -1, dtype=np.int64)
    cj_g = np.full((total, m), -1, dtype=np.int64)
    for i in range(n):
        sl = slice(offs[i], offs[i + 1])
        cs_g[sl] = lattice.child_stay[i] + offs[i + 1]
        for e in range(m):
            col = lattice.child_jump[i][:, e]
            cj_g[sl, e] = np.where(col >= 0, col + offs[i + 1], -1)
    lattice._flat = (offs, cs_g, cj_g)
    return lattice._flat


def _split_steps(lattice, flat):
    offs = flat_arrays(lattice)[0]
    return [flat[offs[i] : offs[i + 1]] for i in range(lattice.n_steps + 1)]


def law_means(lattice, frozen_laws, needs_law: bool) -> np.ndarray:
    n = lattice.n_steps
    if frozen_laws is None:
        if needs_law:
            raise ValidationError("driver reads the marginal law but no frozen laws were given")
        return np.zeros(n)
    if len(frozen_laws) != n:
        raise ValidationError(f"expected {n} per-step laws, got {len(frozen_laws)}")
    return np.array([0.0 if law is None else law.mean() for law in frozen_laws])


@dataclass(eq=False)
class LatticeSolution:
    """Solution arrays on a lattice: y per step, u per non-terminal step
    (one column per mark), and solver diagnostics."""

    lattice: ScenarioLattice
    y: list
    u: list
    driver: DriverSpec
    frozen_laws: list | None
    diagnostics: dict = field(default_factory=dict)

    def y0(self) -> float:
        return float(self.y[0][0])

    def martingale_residual(self) -> float:
        """Worst violation of the branchwise martingale identity
        Y_{i+1}(branch) - E_i[Y_{i+1}] = sum_e U_i(e) (1{branch e} - phi dA)."""
        lat = self.lattice
        worst = 0.0
        for i in range(lat.n_steps):
            pj = lat.p_jump[i]
            comp_term = self.u[i] @ pj
            vs = self.y[i + 1][lat.child_stay[i]]
            expect = np.zeros(lat.n_nodes[i])
            for e in range(lat.n_marks):
                c = lat.child_jump[i][:, e]
                ve = np.where(c >= 0, self.y[i + 1][c], 0.0)
                expect += pj[e] * ve
            expect += lat.p_stay[i] * vs
            stay_res = np.abs(vs - expect - (-comp_term))
            worst = max(worst, float(np.max(stay_res, initial=0.0)))
            for e in range(lat.n_marks):
                c = lat.child_jump[i][:, e]
                ok = c >= 0
                if not ok.any():
                    continue
                ve = self.y[i + 1][c[ok]]
                res = np.abs(ve - expect[ok] - (self.u[i][ok, e] - comp_term[ok]))
                worst = max(worst, float(np.max(res, initial=0.0)))
        return worst


def _check_step_size(lattice, driver: DriverSpec):
    if driver.regime == "lipschitz" and driver.lip_full:
        da = lattice.comp.dA
        load = driver.lip_full * da
        i = int(np.argmax(load))
        if load[i] > 0.5:
            raise SolverError(
                f"grid too coarse for the implicit step: lip_full * dA = {load[i]!r} "
                f"> 1/2 at step {i}; refine the grid"
            )


def _solve_kernel(lattice, driver, xi, frozen_laws, obstacle_values, max_iter, step_lo, step_hi):
    offs, cs_g, cj_g = flat_arrays(lattice)
    n = lattice.n_steps
    total = int(offs[-1])
    lm = law_means(lattice, frozen_laws, driver.reads_law)
    obs_flat = np.zeros(total)
    has_obs = np.zeros(n, dtype=np.uint8)
    if obstacle_values is not None:
        for i in range(step_lo, step_hi):
            vals = obstacle_values[i]
            if vals is None:
                continue
            vals = np.asarray(vals, dtype=np.float64)
            if vals.shape != (lattice.n_nodes[i],):
                raise ValidationError(
                    f"obstacle at step {i} has shape {vals.shape}, expected ({lattice.n_nodes[i]},)"
                )
            obs_flat[offs[i] : offs[i + 1]] = vals
            has_obs[i] = 1
    y_flat, u_flat, dk_flat, worst_resid, worst_iters, fail_node = _kernels.backward_sweep(
        offs,
        cs_g,
        cj_g,
        lattice.p_stay,
        lattice.p_jump,
        lattice.comp.dA,
        lattice.comp.phi,
        driver.alpha_sequence(n),
        lm,
        driver.pack(),
        obs_flat,
        has_obs,
        np.asarray(xi, dtype=np.float64),
        step_lo,
        step_hi,
        max_iter,
        TOL_ABS,
        TOL_REL,
    )
    return y_flat, u_flat, dk_flat, worst_resid, worst_iters, fail_node


def _implicit_python(expect, u_row, evalf, da, max_iter):
    yk = expect
    res_prev = 0.0
    for it in range(1, max_iter + 1):
        target = expect + da * evalf(yk)
        res = target - yk
        if abs(res) <= TOL_ABS + TOL_REL * abs(yk):
            return target, abs(expect + da * evalf(target) - target), it, True
        if it > 1 and res * res_prev < 0.0:
            yk = yk + 0.5 * res
        else:
            yk = target
        res_prev = res
    return yk, abs(expect + da * evalf(yk) - yk), max_iter, False


def _solve_generic(lattice, driver, xi, frozen_laws, obstacle_values, max_iter, step_lo, step_hi):
    """Per-node Python path for drivers given as arbitrary callables."""
    n, m = lattice.n_steps, lattice.n_marks
    comp = lattice.comp
    y = [np.zeros(c) for c in lattice.n_nodes]
    u = [np.zeros((lattice.n_nodes[i], m)) for i in range(n)]
    dk = [np.zeros(c) for c in lattice.n_nodes[:-1]]
    y[step_hi][:] = xi
    worst_resid, worst_iters, fail = 0.0, 0, None
    for i in range(step_hi - 1, step_lo - 1, -1):
        da = float(comp.dA[i])
        law = frozen_laws[i] if frozen_laws is not None else None
        h_vals = None
        if obstacle_values is not None and obstacle_values[i] is not None:
            h_vals = np.asarray(obstacle_values[i], dtype=np.float64)
        for j in range(lattice.n_nodes[i]):
            vs = y[i + 1][lattice.child_stay[i][j]]
            expect = 0.0
            for e in range(m):
                c = lattice.child_jump[i][j, e]
                if c >= 0:
                    ve = y[i + 1][c]
                    u[i][j, e] = ve - vs
                    expect += lattice.p_jump[i, e] * ve
            expect += lattice.p_stay[i] * vs
            u_row = u[i][j]

            def evalf(val, _i=i, _u=u_row, _law=law):
                return eval_driver(driver, comp, _i, val, _u, _law)

            yk, resid, iters, ok = _implicit_python(expect, u_row, evalf, da, max_iter)
            worst_resid = max(worst_resid, resid)
            worst_iters = max(worst_iters, iters)
            if not ok:
                fail = (i, j, resid)
            if h_vals is not None:
                ynew = max(yk, h_vals[j])
                dk[i][j] = ynew - yk
                y[i][j] = ynew
            else:
                y[i][j] = yk
    return y, u, dk, worst_resid, worst_iters, fail


def solve_lattice(
    lattice: ScenarioLattice,
    driver: DriverSpec,
    terminal,
    frozen_laws=None,
    obstacle_values=None,
    max_iter: int = DEFAULT_MAX_ITER,
    step_lo: int = 0,
    step_hi: int | None = None,
):
    """Shared backward induction; obstacle_values enables reflection.

    The sweep runs over steps [step_lo, step_hi) with the terminal data
    imposed at step_hi, which lets the mean-field iteration solve horizon
    windows through the exact code path used for full solves.  Returns
    (y_steps, u_steps, dk_steps, diagnostics); entries outside the window
    are zero.
    """
    if step_hi is None:
        step_hi = lattice.n_steps
    if not 0 <= step_lo < step_hi <= lattice.n_steps:
        raise ValidationError(f"bad step window [{step_lo}, {step_hi})")
    if step_hi == lattice.n_steps:
        xi = terminal_values(terminal, lattice)
    else:
        xi = np.asarray(terminal, dtype=np.float64)
        if xi.shape != (lattice.n_nodes[step_hi],):
            raise ValidationError(
                f"window terminal values have shape {xi.shape}, "
                f"expected ({lattice.n_nodes[step_hi]},)"
            )
    _check_step_size(lattice, driver)
    if driver.is_parametric:
        y_flat, u_flat, dk_flat, worst_resid, worst_iters, fail_node = _solve_kernel(
            lattice, driver, xi, frozen_laws, obstacle_values, max_iter, step_lo, step_hi
        )
        if fail_node >= 0:
            raise SolverError(
                f"implicit step did not converge within {max_iter} iterations "
                f"(flat node {fail_node}, residual {worst_resid!r})"
            )
        y = _split_steps(lattice, y_flat)
        u = _split_steps(lattice, u_flat)[:-1]
        dk = _split_steps(lattice, dk_flat)[:-1]
    else:
        y, u, dk, worst_resid, worst_iters, fail = _solve_generic(
            lattice, driver, xi, frozen_laws, obstacle_values, max_iter, step_lo, step_hi
        )
        if fail is not None:
            raise SolverError(
                f"implicit step did not converge within {max_iter} iterations "
                f"at step {fail[0]} node {fail[1]} (residual {fail[2]!r})"
            )
    if worst_resid > RESIDUAL_CONTRACT:
        raise SolverError(
            f"fixed-point residual {worst_resid!r} exceeds the contract {RESIDUAL_CONTRACT}"
        )
    diagnostics = {
        "backend": backend_name() if driver.is_parametric else "generic",
        "max_residual": float(worst_resid),
        "max_fixed_point_iterations": int(worst_iters),
    }
    return y, u, dk, diagnostics


def solve_bsde(
    lattice: ScenarioLattice,
    driver: DriverSpec,
    terminal,
    frozen_laws=None,
    max_iter: int = DEFAULT_MAX_ITER,
) -> LatticeSolution:
    """Backward solution of the plain (unreflected) equation."""
    y, u, _, diagnostics = solve_lattice(
        lattice, driver, terminal, frozen_laws, None, max_iter
    )
    return LatticeSolution(
        lattice=lattice, y=y, u=u, driver=driver, frozen_laws=frozen_laws,
        diagnostics=diagnostics,
    )


def backward_step(
    lattice: ScenarioLattice,
    step: int,
    next_values,
    driver: DriverSpec,
    law: EmpiricalLaw | None = None,
    max_iter: int = DEFAULT_MAX_ITER,
):
    """One implicit backward step: values at step+1 in, (y, u) at step out."""
    i = step
    next_values = np.asarray(next_values, dtype=np.float64)
    if next_values.shape != (lattice.n_nodes[i + 1],):
        raise ValidationError(
            f"next_values has shape {next_values.shape}, expected ({lattice.n_nodes[i + 1]},)"
        )
    m = lattice.n_marks
    comp = lattice.comp
    vs = next_values[lattice.child_stay[i]]
    expect = np.zeros(lattice.n_nodes[i])
    u = np.zeros((lattice.n_nodes[i], m))
    for e in range(m):
        c = lattice.child_jump[i][:, e]
        mask = c >= 0
        ve = np.where(mask, next_values[c], 0.0)
        u[:, e] = np.where(mask, ve - vs, 0.0)
        expect += lattice.p_jump[i, e] * ve
    expect += lattice.p_stay[i] * vs
    da = float(comp.dA[i])
    if driver.regime == "lipschitz" and driver.lip_full and driver.lip_full * da > 0.5:
        raise SolverError(
            f"grid too coarse for the implicit step: lip_full * dA = {driver.lip_full * da!r} "
            f"> 1/2 at step {i}; refine the grid"
        )
    if driver.is_parametric:
        lm = law.mean() if law is not None else 0.0
        if driver.reads_law and law is None:
            raise ValidationError("driver reads the marginal law but no law was given")
        y, resid, _, ok = _kernels._implicit_vec(
            expect, u, driver.pack(), comp.phi[i], driver.alpha_at(i), lm, da,
            max_iter, TOL_ABS, TOL_REL,
        )
        if not ok:
            raise SolverError(
                f"implicit step did not converge at step {i} (worst residual {float(np.max(resid))!r})"
            )
        return y, u
    y = np.zeros(lattice.n_nodes[i])
    for j in range(lattice.n_nodes[i]):
        u_row = u[j]

        def evalf(val, _u=u_row):
            return eval_driver(driver, comp, i, val, _u, law)

        yk, resid, _, ok = _implicit_python(float(expect[j]), u_row, evalf, da, max_iter)
        if not ok:
            raise SolverError(f"implicit step did not converge at step {i} node {j}")
        y[j] = yk
    return y, u


def conditional_expectation(lattice: ScenarioLattice, terminal) -> list:
    """Exact nested conditional expectations of a terminal quantity."""
    xi = terminal_values(terminal, lattice)
    out = [None] * (lattice.n_steps + 1)
    out[lattice.n_steps] = xi.copy()
    for i in range(lattice.n_steps - 1, -1, -1):
        nxt = out[i + 1]
        vs = nxt[lattice.child_stay[i]]
        expect = np.zeros(lattice.n_nodes[i])
        for e in range(lattice.n_marks):
            c = lattice.child_jump[i][:, e]
            ve = np.where(c >= 0, nxt[c], 0.0)
            expect += lattice.p_jump[i, e] * ve
        expect += lattice.p_stay[i] * vs
        out[i] = expect
    return out


# ---------------------------------------------------------------------------
# nonlinear stopped evaluation


def g_expectation(
    lattice: ScenarioLattice,
    driver: DriverSpec,
    stop_mask,
    payoff,
    from_step: int = 0,
    frozen_laws=None,
    max_iter: int = DEFAULT_MAX_ITER,
) -> np.ndarray:
    """Driver-discounted value of a stopped payoff.

    stop_mask marks, per step, the nodes where the rule stops; payoff gives
    node-indexed values read at the marked nodes.  The rule must cross every
    path from step ``from_step`` exactly once; otherwise a ValidationError
    names the first offending node.
    """
    n = lattice.n_steps
    if not 0 <= from_step <= n:
        raise ValidationError(f"from_step {from_step} outside [0, {n}]")
    mask = []
    for i in range(n + 1):
        arr = np.asarray(stop_mask[i], dtype=bool)
        if arr.shape != (lattice.n_nodes[i],):
            raise ValidationError(f"stop mask at step {i} has the wrong shape")
        mask.append(arr)
    for i in range(from_step):
        if mask[i].any():
            raise ValidationError(
                f"rule marks a node at step {i}, before the start step {from_step}"
            )
    alive = [np.zeros(c, dtype=bool) for c in lattice.n_nodes]
    alive[from_step][:] = True
    for i in range(from_step, n):
        carrier = alive[i] & ~mask[i]
        alive[i + 1][lattice.child_stay[i][carrier]] = True
        for e in range(lattice.n_marks):
            c = lattice.child_jump[i][carrier, e]
            alive[i + 1][c[c >= 0]] = True
    for i in range(from_step, n + 1):
        stray = mask[i] & ~alive[i]
        if stray.any():
            raise ValidationError(
                f"rule stops again at step {i} node {int(np.flatnonzero(stray)[0])} "
                "after an earlier stop on the same path"
            )
    unstopped = alive[n] & ~mask[n]
    if unstopped.any():
        raise ValidationError(
            f"rule never stops along the path through terminal node "
            f"{int(np.flatnonzero(unstopped)[0])}"
        )
    vals = np.zeros(lattice.n_nodes[n])
    pay_n = np.asarray(payoff[n], dtype=np.float64)
    vals[mask[n]] = pay_n[mask[n]]
    for i in range(n - 1, from_step - 1, -1):
        y, _ = backward_step(
            lattice, i, vals, driver,
            law=frozen_laws[i] if frozen_laws is not None else None,
            max_iter=max_iter,
        )
        if mask[i].any():
            pay_i = np.asarray(payoff[i], dtype=np.float64)
            y[mask[i]] = pay_i[mask[i]]
        vals = y
    return vals


# ---------------------------------------------------------------------------
# stability gap check


@dataclass(frozen=True)
class GapReport:
    ok: bool
    worst_slack: float
    witness: tuple
    checked: int

    def __bool__(self) -> bool:
        return self.ok


def _path_power_expectation(lattice, step_weights, q: float):
    """Per-node conditional expectation of (sum of path weights from the node
    on)^q, computed by exact path enumeration."""
    n = lattice.n_steps
    nodes, probs = lattice.enumerate_paths()
    count = nodes.shape[0]
    suffix = np.zeros((count, n + 1))
    for i in range(n - 1, -1, -1):
        suffix[:, i] = suffix[:, i + 1] + step_weights[i][nodes[:, i]]
    out = []
    for i in range(n + 1):
        acc = np.zeros(lattice.n_nodes[i])
        np.add.at(acc, nodes[:, i], probs * suffix[:, i] ** q)
        reach = lattice.reach[i]
        out.append(np.where(reach > 0, acc / np.where(reach > 0, reach, 1.0), 0.0))
    return out


def apriori_gap_check(
    sol1: LatticeSolution,
    sol2: LatticeSolution,
    eta: float,
    beta: float,
    p: float = 2.0,
    tol: float = 1e-10,
) -> GapReport:
    """Exact-tree check of the weighted stability bound between two solutions.

    With C the larger declared Lipschitz constant, admissibility requires
    eta <= 1/C^2 and 2*beta >= 2/eta + 2*C; inadmissible pairs are rejected.
    The driver difference is evaluated along the second solution, and the
    bound is checked at every node with positive reach probability:

        |e^{beta A_t} (Y^1 - Y^2)_t|^p
            <= 2^{p/2-1} ( E_t |e^{beta A_T} (xi^1 - xi^2)|^p
                 + eta^{p/2} E_t [ ( sum_{s>=t} e^{2 beta A_s}
                                     (f^1 - f^2)^2(s) dA_s )^{p/2} ] ) + tol
    """
    lat = sol1.lattice
    if sol2.lattice is not lat:
        raise ValidationError("both solutions must live on the same lattice")
    if p < 1:
        raise ValidationError("p must be at least 1")
    d1, d2 = sol1.driver, sol2.driver
    if d1.lip_full is None or d2.lip_full is None:
        raise ValidationError("the stability bound needs Lipschitz drivers")
    c_lip = max(d1.lip_full, d2.lip_full)
    if eta <= 0:
        raise ValidationError("eta must be positive")
    if c_lip > 0 and eta > 1.0 / c_lip**2:
        raise ValidationError(
            f"inadmissible pair: eta = {eta!r} exceeds 1/C^2 = {1.0 / c_lip**2!r}"
        )
    if 2 * beta < 2.0 / eta + 2 * c_lip:
        raise ValidationError(
            f"clock weight too small: need 2*beta >= 2/eta + 2*C = {2.0 / eta + 2 * c_lip!r}"
        )
    n = lattice_steps = lat.n_steps
    comp = lat.comp
    clock = comp.clock
    dA = comp.dA
    xi_bar = sol1.y[n] - sol2.y[n]
    term1 = conditional_expectation(lat, np.abs(np.exp(beta * clock[n]) * xi_bar) ** p)
    fbar = []
    for i in range(lattice_steps):
        law = sol2.frozen_laws[i] if sol2.frozen_laws is not None else None
        row = np.zeros(lat.n_nodes[i])
        for j in range(lat.n_nodes[i]):
            y2 = float(sol2.y[i][j])
            u2 = sol2.u[i][j]
            row[j] = eval_driver(d1, comp, i, y2, u2, law) - eval_driver(
                d2, comp, i, y2, u2, law
            )
        fbar.append(row)
    weights = [np.exp(2 * beta * clock[i]) * fbar[i] ** 2 * dA[i] for i in range(n)]
    if p == 2.0:
        term2 = [None] * (n + 1)
        term2[n] = np.zeros(lat.n_nodes[n])
        for i in range(n - 1, -1, -1):
            nxt = term2[i + 1]
            vs = nxt[lat.child_stay[i]]
            expect = np.zeros(lat.n_nodes[i])
            for e in range(lat.n_marks):
                c = lat.child_jump[i][:, e]
                ve = np.where(c >= 0, nxt[c], 0.0)
                expect += lat.p_jump[i, e] * ve
            expect += lat.p_stay[i] * vs
            term2[i] = expect + weights[i]
    else:
        term2 = _path_power_expectation(lat, weights, p / 2.0)
    factor = 2.0 ** (p / 2.0 - 1.0)
    worst_slack = math.inf
    witness = (-1, -1)
    ok = True
    checked = 0
    for i in range(n + 1):
        ybar = sol1.y[i] - sol2.y[i]
        lhs = np.abs(np.exp(beta * clock[i]) * ybar) ** p
        rhs = factor * (term1[i] + eta ** (p / 2.0) * term2[i])
        mask = lat.reach[i] > 0
        slack = rhs[mask] - lhs[mask]
        checked += int(mask.sum())
        if slack.size:
            k = int(np.argmin(slack))
            if slack[k] < worst_slack:
                worst_slack = float(slack[k])
                witness = (i, int(np.flatnonzero(mask)[k]))
            if slack[k] < -tol:
                ok = False
    return GapReport(ok=ok, worst_slack=worst_slack, witness=witness, checked=checked)


# ---------------------------------------------------------------------------
# exponential growth check for quadratic drivers


def exp_growth_check(solution: LatticeSolution, p: float = 1.0) -> dict:
    """Check the exponential bound on |Y_0| for quadratic-regime drivers.

    The continuous-time bound is an equality-free estimate
    exp(p lam |Y_0|) <= E[exp(p lam e^{beta A_T} |xi| + p lam I)] with
    I = integral of e^{beta A} alpha dA; discretisation is absorbed by a
    multiplicative allowance of 10 * max dA.
    """
    lat = solution.lattice
    driver = solution.driver
    comp = lat.comp
    n = lat.n_steps
    lam, beta = driver.lam, driver.lip_y_mu
    alpha_seq = driver.alpha_sequence(n)
    integral = float(np.sum(np.exp(beta * comp.clock[:-1]) * alpha_seq * comp.dA))
    xi = solution.y[n]
    exponent = p * lam * (np.exp(beta * comp.clock[n]) * np.abs(xi) + integral)
    lhs_exp = p * lam * abs(solution.y0())
    if float(np.max(exponent, initial=0.0)) > 700.0 or lhs_exp > 700.0:
        raise SolverError(
            "exponential overflow in the growth check; use a smaller p or lambda"
        )
    rhs = float(np.sum(lat.reach[n] * np.exp(exponent)))
    lhs = math.exp(lhs_exp)
    allowance = 10.0 * float(np.max(comp.dA))
    return {
        "lhs": lhs,
        "rhs": rhs,
        "allowance": allowance,
        "ok": lhs <= rhs * (1.0 + allowance),
    }
