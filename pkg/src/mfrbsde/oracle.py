"""Reference solvers implemented directly from the defining equations.

Everything here is deliberately written against the mathematical definitions
rather than the production machinery: scalar recursion over tree nodes,
bracketing bisection for the implicit step instead of fixed-point iteration,
and plain damped sweeps for the mean-field coupling.  Only domain types
(models, lattices, laws, specs) are shared with the solvers, so agreement
between the two code paths is a genuine cross-check.

Everything is exhaustively exact and therefore restricted to small trees:
at most 12 steps and 3 marks.
"""

from __future__ import annotations

import math

import numpy as np

from .drivers import DriverSpec, ObstacleSpec, terminal_values
from .errors import GuardError, SolverError, ValidationError
from .laws import node_law
from .mpp_model import ScenarioLattice

ORACLE_MAX_STEPS = 12
ORACLE_MAX_MARKS = 3
_BISECT_STEPS = 200


def _guard(lattice: ScenarioLattice):
    if lattice.n_steps > ORACLE_MAX_STEPS or lattice.n_marks > ORACLE_MAX_MARKS:
        raise GuardError(
            f"oracle guard: {lattice.n_steps} steps / {lattice.n_marks} marks exceeds "
            f"{ORACLE_MAX_STEPS} steps / {ORACLE_MAX_MARKS} marks"
        )


def _driver_value(driver: DriverSpec, comp, step: int, y: float, u_row, law) -> float:
    """Driver evaluation written out from the declared fields."""
    if driver.custom is not None:
        return float(driver.custom(step, float(y), np.asarray(u_row, dtype=np.float64), law))
    mean = law.mean() if (law is not None and driver.coef_mean != 0.0) else 0.0
    if driver.coef_mean != 0.0 and law is None:
        raise ValidationError(f"driver {driver.name!r} needs a law argument")
    val = (
        driver.const
        + driver.coef_y * y
        + driver.coef_sin_y * math.sin(y)
        + driver.coef_mean * mean
        + driver.coef_alpha * driver.alpha_at(step)
    )
    phi_row = comp.phi[step]
    lin = 0.0
    for e in range(comp.n_marks):
        lin += u_row[e] * phi_row[e]
    val += driver.coef_u * lin
    if driver.coef_jump_exp != 0.0:
        lam = driver.lam
        pen = 0.0
        for e in range(comp.n_marks):
            z = lam * u_row[e]
            pen += (math.exp(z) - 1.0 - z) * phi_row[e]
        val += driver.coef_jump_exp / lam * pen
    return val


def _bisect_implicit(expect: float, u_row, driver, comp, step: int, da: float, law) -> float:
    """Solve y = expect + da * f(y) by bracketing bisection.

    The residual y - expect - da * f(y) is strictly increasing whenever
    da * |df/dy| < 1, which the step-size precondition guarantees, so a sign
    change brackets the unique root.
    """

    def resid(yv: float) -> float:
        return yv - expect - da * _driver_value(driver, comp, step, yv, u_row, law)

    r0 = resid(expect)
    if r0 == 0.0:
        return expect
    width = max(1e-8, 2.0 * abs(r0))
    lo, hi = expect - width, expect + width
    for _ in range(200):
        if resid(lo) <= 0.0 <= resid(hi):
            break
        width *= 2.0
        lo, hi = expect - width, expect + width
    else:
        raise SolverError(f"oracle could not bracket the implicit step at step {step}")
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if resid(mid) <= 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def exact_tree_solve(
    lattice: ScenarioLattice,
    driver: DriverSpec,
    terminal,
    obstacle_values=None,
    frozen_laws=None,
) -> dict:
    """Exact backward recursion over the whole tree.

    Returns {"y": per-step value arrays, "dk": per-step reflection pushes}.
    obstacle_values (optional) are precomputed per-node barrier levels for
    steps 0..n-1; the recursion then reflects exactly like the definition:
    candidate from the implicit step, then the maximum with the barrier.
    """
    _guard(lattice)
    comp = lattice.comp
    n, m = lattice.n_steps, lattice.n_marks
    xi = terminal_values(terminal, lattice)
    y = [None] * (n + 1)
    dk = [np.zeros(lattice.n_nodes[i]) for i in range(n)]
    y[n] = np.asarray(xi, dtype=np.float64).copy()
    for i in range(n - 1, -1, -1):
        law = frozen_laws[i] if frozen_laws is not None else None
        da = float(comp.dA[i])
        vals = np.empty(lattice.n_nodes[i])
        h_row = None
        if obstacle_values is not None and obstacle_values[i] is not None:
            h_row = np.asarray(obstacle_values[i], dtype=np.float64)
        for j in range(lattice.n_nodes[i]):
            vs = float(y[i + 1][lattice.child_stay[i][j]])
            u_row = np.zeros(m)
            expect = 0.0
            for e in range(m):
                c = lattice.child_jump[i][j, e]
                if c >= 0:
                    ve = float(y[i + 1][c])
                    u_row[e] = ve - vs
                    expect += float(lattice.p_jump[i, e]) * ve
            expect += float(lattice.p_stay[i]) * vs
            cand = _bisect_implicit(expect, u_row, driver, comp, i, da, law)
            if h_row is not None:
                level = float(h_row[j])
                if level > cand:
                    dk[i][j] = level - cand
                    cand = level
            vals[j] = cand
        y[i] = vals
    return {"y": y, "dk": dk}


def exact_meanfield_fixed_point(
    lattice: ScenarioLattice,
    driver: DriverSpec,
    obstacle: ObstacleSpec | None,
    terminal,
    damping: float = 0.3,
    tol: float = 1e-12,
    max_sweeps: int = 500,
) -> dict:
    """Mean-field fixed point by damped direct iteration.

    Every sweep recomputes the per-step marginal laws from the current
    candidate, evaluates the barrier at the candidate, and re-solves the
    whole tree exactly; the candidate is then mixed with the sweep output
    using the damping weight on the old iterate.
    """
    _guard(lattice)
    if not 0.0 <= damping < 1.0:
        raise ValidationError("damping must lie in [0, 1)")
    n = lattice.n_steps
    xi = terminal_values(terminal, lattice)
    current = _plain_expectations(lattice, xi)
    history = []
    for sweep in range(1, max_sweeps + 1):
        laws = [node_law(lattice, current[i], i) for i in range(n)]
        obstacle_rows = None
        if obstacle is not None:
            obstacle_rows = []
            for i in range(n):
                mu = laws[i]
                obstacle_rows.append(
                    np.array(
                        [obstacle.eval(i, float(v), mu) for v in current[i]]
                    )
                )
        result = exact_tree_solve(lattice, driver, xi, obstacle_rows, laws)
        gap = 0.0
        fresh = result["y"]
        for i in range(n + 1):
            gap = max(gap, float(np.max(np.abs(fresh[i] - current[i]), initial=0.0)))
        history.append(gap)
        if damping == 0.0:
            current = [fresh[i].copy() for i in range(n + 1)]
        else:
            current = [
                (1.0 - damping) * fresh[i] + damping * current[i] for i in range(n + 1)
            ]
        if gap <= tol:
            return {
                "y": current,
                "dk": result["dk"],
                "laws": laws,
                "sweeps": sweep,
                "gaps": history,
            }
    raise SolverError(
        f"mean-field direct iteration did not reach {tol} in {max_sweeps} sweeps "
        f"(last gap {history[-1]!r})"
    )


def _plain_expectations(lattice: ScenarioLattice, xi) -> list:
    """Nested conditional expectations of xi, written out directly."""
    n = lattice.n_steps
    out = [None] * (n + 1)
    out[n] = np.asarray(xi, dtype=np.float64).copy()
    for i in range(n - 1, -1, -1):
        vals = np.empty(lattice.n_nodes[i])
        for j in range(lattice.n_nodes[i]):
            acc = 0.0
            for e in range(lattice.n_marks):
                c = lattice.child_jump[i][j, e]
                if c >= 0:
                    acc += float(lattice.p_jump[i, e]) * float(out[i + 1][c])
            acc += float(lattice.p_stay[i]) * float(out[i + 1][lattice.child_stay[i][j]])
            vals[j] = acc
        out[i] = vals
    return out
