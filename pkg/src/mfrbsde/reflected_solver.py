"""Reflected backward solutions and the brute-force stopping oracle.

Reflection happens inside the backward induction: at each non-terminal step
the unreflected candidate y-hat from the implicit step is pushed up to the
barrier, Y_i = max(y-hat, h_i), and the push dK_i = (h_i - y-hat)^+ is
recorded.  The compensator K is the running sum of pushes along each path,
so K_0 = 0, K is nondecreasing, and the flat-off identity
sum_i (Y_i - h_i) dK_i = 0 holds path by path by construction.

The independent cross-check is `snell_value_bruteforce`: enumerate every
stopping rule of the lattice, evaluate each by the driver-discounted stopped
value, and take per-node maxima.  Rule counts explode super-exponentially,
so the routine is guarded both by step/mark limits and by a hard cap on the
number of rules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .bsde_solver import (
    DEFAULT_MAX_ITER,
    TOL_ABS,
    TOL_REL,
    LatticeSolution,
    flat_arrays,
    law_means,
    solve_lattice,
)
from .drivers import DriverSpec, terminal_values
from .errors import GuardError, SolverError, ValidationError
from .mpp_model import ScenarioLattice

SNELL_MAX_STEPS = 9
SNELL_MAX_MARKS = 2
SNELL_MAX_RULES = 1_000_000


@dataclass(eq=False)
class ReflectedSolution:
    """Reflected solution: the base arrays plus the reflection compensator.

    dk holds the per-step pushes; k the cumulative compensator, with
    k[i][node] the total push strictly before step i along the node's path
    (so k[0] = 0 and the terminal entries are the total K_T per path).
    """

    base: LatticeSolution
    obstacle_values: list
    dk: list
    k: list

    @property
    def lattice(self):
        return self.base.lattice

    @property
    def y(self):
        return self.base.y

    @property
    def u(self):
        return self.base.u

    def y0(self) -> float:
        return self.base.y0()

    def flat_off_residual(self) -> float:
        """Max over paths of |sum_i (Y_i - h_i) dK_i|; zero by construction,
        recomputed here from the stored arrays."""
        lat = self.lattice
        nodes, _ = lat.enumerate_paths()
        acc = np.zeros(nodes.shape[0])
        for i in range(lat.n_steps):
            h = self.obstacle_values[i]
            if h is None:
                continue
            h = np.asarray(h, dtype=np.float64)
            idx = nodes[:, i]
            acc += (self.y[i][idx] - h[idx]) * self.dk[i][idx]
        return float(np.max(np.abs(acc), initial=0.0))


def _normalise_obstacle(lattice, obstacle_values, xi):
    n = lattice.n_steps
    if obstacle_values is None:
        raise ValidationError("reflected solve needs obstacle values (use solve_bsde for none)")
    if len(obstacle_values) not in (n, n + 1):
        raise ValidationError(
            f"obstacle values must cover {n} steps (optionally plus the terminal), "
            f"got {len(obstacle_values)} entries"
        )
    out = []
    for i in range(n):
        vals = obstacle_values[i]
        if vals is None:
            out.append(None)
            continue
        vals = np.asarray(vals, dtype=np.float64)
        if vals.shape != (lattice.n_nodes[i],):
            raise ValidationError(
                f"obstacle at step {i} has shape {vals.shape}, expected ({lattice.n_nodes[i]},)"
            )
        out.append(vals)
    if len(obstacle_values) == n + 1 and obstacle_values[n] is not None:
        h_term = np.asarray(obstacle_values[n], dtype=np.float64)
        if h_term.shape != (lattice.n_nodes[n],):
            raise ValidationError("terminal obstacle row has the wrong shape")
        gap = h_term - xi
        j = int(np.argmax(gap))
        if gap[j] > 0:
            raise ValidationError(
                f"terminal values violate the barrier at node {j}: "
                f"xi = {xi[j]!r} < h = {h_term[j]!r}"
            )
    return out


def solve_reflected(
    lattice: ScenarioLattice,
    driver: DriverSpec,
    obstacle_values,
    terminal,
    frozen_laws=None,
    max_iter: int = DEFAULT_MAX_ITER,
) -> ReflectedSolution:
    """Backward solution reflected on precomputed per-node barrier values."""
    xi = terminal_values(terminal, lattice)
    obs = _normalise_obstacle(lattice, obstacle_values, xi)
    y, u, dk, diagnostics = solve_lattice(
        lattice, driver, xi, frozen_laws, obs, max_iter
    )
    n = lattice.n_steps
    k = [np.zeros(c) for c in lattice.n_nodes]
    for i in range(n):
        par = lattice.parent[i + 1]
        k[i + 1] = k[i][par] + dk[i][par]
    base = LatticeSolution(
        lattice=lattice, y=y, u=u, driver=driver, frozen_laws=frozen_laws,
        diagnostics=diagnostics,
    )
    return ReflectedSolution(base=base, obstacle_values=obs, dk=dk, k=k)


def flat_off_residual(solution: ReflectedSolution) -> float:
    return solution.flat_off_residual()


# ---------------------------------------------------------------------------
# brute-force optimal stopping


def count_stopping_rules(lattice: ScenarioLattice) -> int:
    """Exact number of stopping rules, computed in unbounded integers."""
    n = lattice.n_steps
    counts = [np.ones(lattice.n_nodes[n], dtype=object)]
    for i in range(n - 1, -1, -1):
        below = counts[-1]
        here = np.empty(lattice.n_nodes[i], dtype=object)
        for j in range(lattice.n_nodes[i]):
            prod = below[lattice.child_stay[i][j]]
            for e in range(lattice.n_marks):
                c = lattice.child_jump[i][j, e]
                if c >= 0:
                    prod = prod * below[c]
            here[j] = 1 + prod
        counts.append(here)
    counts.reverse()
    lattice._rule_counts = counts
    return int(counts[0][0])


def snell_value_bruteforce(
    lattice: ScenarioLattice,
    driver: DriverSpec,
    obstacle_values,
    terminal,
    frozen_laws=None,
    max_rules: int = SNELL_MAX_RULES,
    max_iter: int = DEFAULT_MAX_ITER,
) -> list:
    """Optimal-stopping value at every node by exhaustive rule enumeration.

    Rules stop either at a non-terminal node (collecting the barrier value)
    or at the terminal (collecting xi); continuation regions are discounted
    through the driver exactly as in the backward solver.  Guarded by step,
    mark and rule-count limits; above the guard the exact backward recursion
    (solve_reflected) is the intended path.
    """
    n, m = lattice.n_steps, lattice.n_marks
    if n > SNELL_MAX_STEPS or m > SNELL_MAX_MARKS:
        raise GuardError(
            f"enumeration guard: {n} steps / {m} marks exceeds "
            f"{SNELL_MAX_STEPS} steps / {SNELL_MAX_MARKS} marks; "
            "use the backward recursion (solve_reflected) instead"
        )
    total_rules = count_stopping_rules(lattice)
    if total_rules > max_rules:
        raise GuardError(
            f"enumeration guard: {total_rules} stopping rules exceed the cap "
            f"{max_rules}; use the backward recursion (solve_reflected) instead"
        )
    xi = terminal_values(terminal, lattice)
    obs = _normalise_obstacle(lattice, obstacle_values, xi)
    for i in range(n):
        if obs[i] is None:
            raise ValidationError(
                f"brute-force stopping needs finite barrier values at every step "
                f"(missing at step {i})"
            )
    if not driver.is_parametric:
        raise ValidationError("brute-force stopping supports the parametric driver family")
    offs, cs_g, cj_g = flat_arrays(lattice)
    total = int(offs[-1])
    obs_flat = np.zeros(total)
    for i in range(n):
        obs_flat[offs[i] : offs[i + 1]] = obs[i]
    rules_flat = np.empty(total, dtype=np.int64)
    per_step_counts = lattice._rule_counts
    for i in range(n + 1):
        rules_flat[offs[i] : offs[i + 1]] = np.array(
            [int(x) for x in per_step_counts[i]], dtype=np.int64
        )
    lm = law_means(lattice, frozen_laws, driver.reads_law)
    best, fail = _kernels.snell_enumerate(
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
        rules_flat,
        obs_flat,
        xi,
        total_rules,
        max_iter,
        TOL_ABS,
        TOL_REL,
    )
    if fail >= 0:
        raise SolverError(f"implicit step failed during enumeration at flat node {fail}")
    return [best[offs[i] : offs[i + 1]].copy() for i in range(n + 1)]
