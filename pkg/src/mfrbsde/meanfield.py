"""Mean-field coupling: admissibility, contraction estimates, Picard engine.

The iteration freezes the per-step marginal laws and the barrier at the
previous iterate, solves the resulting reflected equation, and repeats.  In
the Lipschitz regime the horizon is split into windows small enough that the
predicted contraction constant drops below 1 and the windows are solved last
to first, stitching terminal data at the seams.  In the quadratic regime the
whole horizon is iterated at once and exponential moment monitors are
recorded per iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bsde_solver import DEFAULT_MAX_ITER, LatticeSolution, solve_lattice
from .drivers import (
    DriverSpec,
    ObstacleSpec,
    terminal_consistency,
    terminal_values,
)
from .errors import SolverError, ValidationError
from .laws import dirac, node_law, wasserstein
from .mpp_model import ScenarioLattice
from .reflected_solver import ReflectedSolution

MAX_WINDOWS = 2**16


@dataclass(frozen=True)
class MeanFieldParams:
    """Constants governing the mean-field iteration.

    eta and beta weight the stability estimate, gamma1/gamma2 bound the
    barrier sensitivity in state and law, cf is the driver's full Lipschitz
    constant (required in the lipschitz regime), p the moment order.
    """

    eta: float
    beta: float
    gamma1: float
    gamma2: float
    p: float = 2.0
    cf: float | None = None
    theta_grid: tuple = (0.5, 0.9, 0.99)
    tol_fixed_point: float = 1e-10
    max_picard: int = 200
    regime: str = "lipschitz"

    def __post_init__(self):
        if self.regime not in ("lipschitz", "quadratic"):
            raise ValidationError(f"unknown regime {self.regime!r}")
        if self.eta <= 0 or self.beta < 0:
            raise ValidationError("eta must be positive and beta nonnegative")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValidationError("gamma bounds must be nonnegative")
        if self.p < 1:
            raise ValidationError("p must be at least 1")
        if self.tol_fixed_point <= 0 or self.max_picard < 1:
            raise ValidationError("bad iteration controls")
        for th in self.theta_grid:
            if not 0.0 < th < 1.0:
                raise ValidationError(f"theta {th} outside (0, 1)")
        if self.regime == "lipschitz":
            if self.cf is None:
                raise ValidationError("lipschitz regime requires the driver constant cf")
            if self.p < 2:
                raise ValidationError("the windowed contraction estimate needs p >= 2")
            if self.cf > 0 and self.eta > 1.0 / self.cf**2:
                raise ValidationError(
                    f"eta = {self.eta!r} exceeds 1/cf^2 = {1.0 / self.cf**2!r}"
                )
            if 2 * self.beta < 2.0 / self.eta + 2 * self.cf:
                raise ValidationError(
                    f"beta too small: need 2*beta >= 2/eta + 2*cf = "
                    f"{2.0 / self.eta + 2 * self.cf!r}"
                )


@dataclass(frozen=True)
class AdmissibilityReport:
    """Both smallness conditions, evaluated and labelled.

    headline is the clock-free condition gamma1^p + gamma2^p < 2^(1-p); the
    working condition additionally weighs gamma2 by the terminal clock
    moment and is the one the windowed contraction estimate actually needs.
    For the quadratic regime the gate is 4 (gamma1 + gamma2) < 1.
    """

    regime: str
    headline_value: float
    headline_bound: float
    headline: bool
    working_value: float | None
    working_bound: float
    working: bool | None
    quadratic_value: float
    quadratic: bool

    def __bool__(self) -> bool:
        if self.regime == "quadratic":
            return self.quadratic
        if self.working is not None:
            return self.working
        return self.headline


def admissibility(params: MeanFieldParams, clock=None) -> AdmissibilityReport:
    p, g1, g2 = params.p, params.gamma1, params.gamma2
    headline_value = g1**p + g2**p
    headline_bound = 2.0 ** (1.0 - p)
    working_value = None
    working = None
    working_bound = 2.0 ** (2.0 - 1.5 * p)
    if clock is not None:
        a_T = float(np.asarray(clock)[-1])
        working_value = g1**p + g2**p * math.exp(p * params.beta * a_T)
        working = working_value < working_bound
    quadratic_value = 4.0 * (g1 + g2)
    return AdmissibilityReport(
        regime=params.regime,
        headline_value=headline_value,
        headline_bound=headline_bound,
        headline=headline_value < headline_bound,
        working_value=working_value,
        working_bound=working_bound,
        working=working,
        quadratic_value=quadratic_value,
        quadratic=quadratic_value < 1.0,
    )


def contraction_constant(params: MeanFieldParams, clock, window) -> float:
    """Predicted Picard contraction factor on one horizon window.

    window = (a, b) in step indices.  The estimate combines the driver term,
    weighted by the clock mass of the window, with the window-independent
    law-coupling term:

        2^(p/2-1) eta^(p/2) cf^p (A_b - A_a)^((p-2)/p) sum_{i=a}^{b-1} e^{p beta A_i} dA_i
        + 2^(p/2-1) 2^(p-1) (gamma1^p + gamma2^p e^{p beta A_T})
    """
    if params.cf is None:
        raise ValidationError("contraction estimate needs the driver constant cf")
    clock = np.asarray(clock, dtype=np.float64)
    a, b = window
    n = clock.size - 1
    if not 0 <= a < b <= n:
        raise ValidationError(f"bad window {window} for a {n}-step clock")
    p, beta = params.p, params.beta
    dA = np.diff(clock)
    pref = 2.0 ** (p / 2.0 - 1.0)
    win_sum = float(np.sum(np.exp(p * beta * clock[a:b]) * dA[a:b]))
    span = float(clock[b] - clock[a])
    driver_term = pref * params.eta ** (p / 2.0) * params.cf**p * span ** ((p - 2.0) / p) * win_sum
    law_term = (
        pref
        * 2.0 ** (p - 1.0)
        * (params.gamma1**p + params.gamma2**p * math.exp(p * beta * clock[-1]))
    )
    return driver_term + law_term


def split_horizon(params: MeanFieldParams, clock) -> list:
    """Smallest tried power-of-two window count with every window's
    contraction constant below 1; windows are contiguous step ranges."""
    clock = np.asarray(clock, dtype=np.float64)
    n = clock.size - 1
    pref = 2.0 ** (params.p / 2.0 - 1.0)
    law_term = (
        pref
        * 2.0 ** (params.p - 1.0)
        * (params.gamma1**params.p + params.gamma2**params.p * math.exp(params.p * params.beta * clock[-1]))
    )
    if law_term >= 1.0:
        raise ValidationError(
            f"constants too large: the law-coupling term alone is {law_term!r} >= 1, "
            "no horizon split can contract"
        )
    k = 1
    while True:
        n_w = min(k, n)
        bounds = np.unique(np.linspace(0, n, n_w + 1).round().astype(int))
        windows = [(int(bounds[i]), int(bounds[i + 1])) for i in range(bounds.size - 1)]
        alphas = [contraction_constant(params, clock, w) for w in windows]
        if max(alphas) < 1.0:
            return windows
        if n_w == n:
            raise ValidationError(
                "no grid-aligned horizon split achieves contraction below 1; "
                f"worst single-step constant is {max(alphas)!r}"
            )
        if k >= MAX_WINDOWS:
            raise ValidationError(f"would need more than {MAX_WINDOWS} windows")
        k *= 2


# ---------------------------------------------------------------------------
# theta gaps


@dataclass(eq=False)
class ThetaGap:
    """Interpolation gaps between two value processes at parameter theta."""

    theta: float
    delta: list
    delta_tilde: list
    combined: list

    def identity_residual(self, y1, y2) -> float:
        """Worst violation of Y1 - Y2 = (1 - theta) (delta_theta - Y2)."""
        worst = 0.0
        for i in range(len(self.delta)):
            res = np.abs((y1[i] - y2[i]) - (1.0 - self.theta) * (self.delta[i] - y2[i]))
            worst = max(worst, float(np.max(res, initial=0.0)))
        return worst


def _value_steps(sol):
    return sol.y if hasattr(sol, "y") else sol


def theta_gap(sol1, sol2, theta: float) -> ThetaGap:
    """delta = (Y1 - theta Y2)/(1-theta), its mirror image, and |.|+|.|."""
    if not 0.0 < theta < 1.0:
        raise ValidationError(f"theta must lie strictly inside (0, 1), got {theta}")
    y1 = _value_steps(sol1)
    y2 = _value_steps(sol2)
    if len(y1) != len(y2):
        raise ValidationError("value processes cover different step ranges")
    scale = 1.0 / (1.0 - theta)
    delta, delta_tilde, combined = [], [], []
    for a, b in zip(y1, y2):
        d = (a - theta * b) * scale
        dt = (b - theta * a) * scale
        delta.append(d)
        delta_tilde.append(dt)
        combined.append(np.abs(d) + np.abs(dt))
    return ThetaGap(theta=theta, delta=delta, delta_tilde=delta_tilde, combined=combined)


# ---------------------------------------------------------------------------
# moment diagnostics


def moment_diagnostics(solution, params: MeanFieldParams, rate: float = 1.0) -> dict:
    """Exponential and power moments of a solution over exact path weights.

    Returns E[exp(p * rate * sup_t |Y_t|)], E[(sum |U|^2 phi dA)^{p/2}] and
    E[|K_T|^p]; overflow in the exponential is rejected with advice to lower
    p or the rate.
    """
    lat = solution.lattice
    p = params.p
    n = lat.n_steps
    nodes, probs = lat.enumerate_paths()
    sup_y = np.zeros(nodes.shape[0])
    y = solution.y
    for i in range(n + 1):
        sup_y = np.maximum(sup_y, np.abs(y[i][nodes[:, i]]))
    exponent = p * rate * sup_y
    if float(np.max(exponent, initial=0.0)) > 700.0:
        raise SolverError(
            "exponential overflow in the moment diagnostic; lower p or the rate"
        )
    u_quad = np.zeros(nodes.shape[0])
    comp = lat.comp
    for i in range(n):
        row = np.zeros(lat.n_nodes[i])
        for e in range(lat.n_marks):
            row += solution.u[i][:, e] ** 2 * comp.phi[i, e]
        u_quad += row[nodes[:, i]] * comp.dA[i]
    if isinstance(solution, ReflectedSolution):
        k_term = solution.k[n][nodes[:, n]]
    else:
        k_term = np.zeros(nodes.shape[0])
    return {
        "exp_sup": float(np.sum(probs * np.exp(exponent))),
        "u_integral": float(np.sum(probs * u_quad ** (p / 2.0))),
        "k_terminal": float(np.sum(probs * np.abs(k_term) ** p)),
    }


# ---------------------------------------------------------------------------
# the Picard engine


@dataclass(eq=False)
class IterationRecord:
    iteration: int
    sup_gap: float
    law_gap: float
    ratio: float
    moments: dict | None = None


@dataclass(eq=False)
class WindowRecord:
    lo: int
    hi: int
    alpha: float | None
    converged: bool
    records: list = field(default_factory=list)
    iterates: list = field(default_factory=list)


@dataclass(eq=False)
class IterationReport:
    regime: str
    windows: list

    @property
    def converged(self) -> bool:
        return all(w.converged for w in self.windows)

    @property
    def total_iterations(self) -> int:
        return sum(len(w.records) for w in self.windows)

    def max_ratio(self, from_iteration: int = 3) -> float:
        worst = 0.0
        for w in self.windows:
            for r in w.records:
                if r.iteration >= from_iteration and math.isfinite(r.ratio):
                    worst = max(worst, r.ratio)
        return worst

    def contraction_ok(self, slack: float = 0.05, from_iteration: int = 3) -> bool:
        """Measured gap ratios stay within the predicted constants."""
        for w in self.windows:
            if w.alpha is None:
                continue
            for r in w.records:
                if r.iteration >= from_iteration and math.isfinite(r.ratio):
                    if r.ratio > w.alpha + slack:
                        return False
        return True

    def to_rows(self) -> list:
        rows = []
        for w in self.windows:
            for r in w.records:
                rows.append(
                    (
                        w.lo,
                        w.hi,
                        r.iteration,
                        r.sup_gap,
                        r.law_gap,
                        r.ratio,
                        w.alpha if w.alpha is not None else float("nan"),
                    )
                )
        return rows

    def summary(self) -> str:
        lines = [f"regime: {self.regime}; windows: {len(self.windows)}"]
        for w in self.windows:
            tail = w.records[-1] if w.records else None
            alpha_txt = f"{w.alpha:.6f}" if w.alpha is not None else "n/a"
            gap_txt = f"{tail.sup_gap:.3e}" if tail else "n/a"
            lines.append(
                f"  window [{w.lo}, {w.hi}): alpha {alpha_txt}, "
                f"{len(w.records)} iterations, last gap {gap_txt}, "
                f"{'converged' if w.converged else 'NOT converged'}"
            )
        return "\n".join(lines)


def _window_expectation(lattice, a, b, term_vals):
    out = {b: np.asarray(term_vals, dtype=np.float64)}
    for i in range(b - 1, a - 1, -1):
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


def _obstacle_row(obstacle: ObstacleSpec, step: int, y_vals, mu) -> np.ndarray:
    if obstacle.custom is None:
        mean = mu.mean() if obstacle.coef_mean != 0.0 else 0.0
        return obstacle.const + obstacle.coef_y * y_vals + obstacle.coef_mean * mean
    return np.array([obstacle.eval(step, float(v), mu) for v in y_vals])


def picard_solve(
    lattice: ScenarioLattice,
    driver: DriverSpec,
    obstacle: ObstacleSpec | None,
    terminal,
    params: MeanFieldParams,
    init: str = "expectation",
    keep_iterates: bool = False,
    max_iter: int = DEFAULT_MAX_ITER,
):
    """Solve the mean-field (reflected) equation by Picard iteration.

    Returns (solution, report).  init chooses the starting iterate:
    "expectation" uses nested conditional expectations of the terminal data,
    "zero_clipped" the zero process pushed up to the barrier evaluated at
    zero.  keep_iterates stores per-iteration value snapshots in the report
    (used by the theta-gap diagnostics).
    """
    if params.regime != driver.regime:
        raise ValidationError(
            f"params regime {params.regime!r} does not match driver regime {driver.regime!r}"
        )
    if init not in ("expectation", "zero_clipped"):
        raise ValidationError(f"unknown init {init!r}")
    comp = lattice.comp
    n = lattice.n_steps
    xi = terminal_values(terminal, lattice)
    if obstacle is not None:
        consistency = terminal_consistency(xi, obstacle, lattice)
        if not consistency.ok:
            raise ValidationError(
                f"terminal values violate the barrier at node {consistency.witness_node} "
                f"by {consistency.worst_violation!r}"
            )
    adm = admissibility(params, comp.clock)
    if not adm:
        raise ValidationError(
            f"inadmissible constants for the {params.regime} regime: "
            f"headline {adm.headline_value!r} vs {adm.headline_bound!r}, "
            f"working {adm.working_value!r} vs {adm.working_bound!r}, "
            f"quadratic {adm.quadratic_value!r} vs 1"
        )
    if params.regime == "lipschitz":
        windows = split_horizon(params, comp.clock)
        alphas = [contraction_constant(params, comp.clock, w) for w in windows]
    else:
        windows = [(0, n)]
        alphas = [None]

    y_full = [None] * (n + 1)
    u_full = [None] * n
    dk_full = [None] * n
    law_full = [None] * n
    obs_full = [None] * n
    y_full[n] = xi
    term_vals = xi
    window_records = []
    for (a, b), alpha in zip(reversed(windows), reversed(alphas)):
        if init == "expectation":
            y_prev = _window_expectation(lattice, a, b, term_vals)
        else:
            y_prev = {b: np.asarray(term_vals, dtype=np.float64)}
            for i in range(a, b):
                if obstacle is None:
                    y_prev[i] = np.zeros(lattice.n_nodes[i])
                else:
                    level = obstacle.eval(i, 0.0, dirac(0.0))
                    y_prev[i] = np.full(lattice.n_nodes[i], max(0.0, level))
        record = WindowRecord(lo=a, hi=b, alpha=alpha, converged=False)
        prev_gap = None
        last = None
        for m in range(1, params.max_picard + 1):
            laws = {i: node_law(lattice, y_prev[i], i) for i in range(a, b)}
            frozen = [laws.get(i) for i in range(n)]
            obs_rows = None
            if obstacle is not None:
                obs_rows = [None] * n
                for i in range(a, b):
                    obs_rows[i] = _obstacle_row(obstacle, i, y_prev[i], laws[i])
            y_steps, u_steps, dk_steps, diag = solve_lattice(
                lattice,
                driver,
                term_vals,
                frozen if driver.reads_law else None,
                obs_rows,
                max_iter,
                step_lo=a,
                step_hi=b,
            )
            gap = 0.0
            law_gap = 0.0
            for i in range(a, b):
                gap = max(gap, float(np.max(np.abs(y_steps[i] - y_prev[i]), initial=0.0)))
                law_gap = max(
                    law_gap,
                    wasserstein(node_law(lattice, y_steps[i], i), laws[i], params.p),
                )
            ratio = gap / prev_gap if (prev_gap is not None and prev_gap > 0.0) else float("nan")
            moments = None
            if params.regime == "quadratic":
                snapshot = _assemble_partial(
                    lattice, driver, y_steps, u_steps, dk_steps, frozen, obs_rows, xi, diag
                )
                moments = moment_diagnostics(snapshot, params)
            record.records.append(
                IterationRecord(iteration=m, sup_gap=gap, law_gap=law_gap, ratio=ratio, moments=moments)
            )
            if keep_iterates:
                record.iterates.append({i: y_steps[i].copy() for i in range(a, b)})
            for i in range(a, b):
                y_prev[i] = y_steps[i]
            last = (y_steps, u_steps, dk_steps, frozen, obs_rows, diag)
            if gap <= params.tol_fixed_point:
                record.converged = True
                break
            prev_gap = gap
        if not record.converged:
            gaps = [r.sup_gap for r in record.records]
            raise SolverError(
                f"Picard iteration on window [{a}, {b}) did not reach "
                f"{params.tol_fixed_point} within {params.max_picard} iterations; "
                f"gap history tail {gaps[-5:]!r}"
            )
        window_records.append(record)
        y_steps, u_steps, dk_steps, frozen, obs_rows, diag = last
        for i in range(a, b):
            y_full[i] = y_steps[i]
            u_full[i] = u_steps[i]
            dk_full[i] = dk_steps[i]
            law_full[i] = frozen[i]
            obs_full[i] = obs_rows[i] if obs_rows is not None else None
        term_vals = y_steps[a]
    k = [np.zeros(c) for c in lattice.n_nodes]
    for i in range(n):
        par = lattice.parent[i + 1]
        k[i + 1] = k[i][par] + dk_full[i][par]
    base = LatticeSolution(
        lattice=lattice,
        y=y_full,
        u=u_full,
        driver=driver,
        frozen_laws=law_full,
        diagnostics={"windows": len(windows)},
    )
    solution = ReflectedSolution(base=base, obstacle_values=obs_full, dk=dk_full, k=k)
    report = IterationReport(regime=params.regime, windows=window_records)
    return solution, report


def _assemble_partial(lattice, driver, y_steps, u_steps, dk_steps, frozen, obs_rows, xi, diag):
    """Wrap an in-progress window sweep (covering the whole horizon in the
    quadratic regime) as a ReflectedSolution for the moment monitors."""
    n = lattice.n_steps
    y = list(y_steps)
    y[n] = xi
    k = [np.zeros(c) for c in lattice.n_nodes]
    for i in range(n):
        par = lattice.parent[i + 1]
        k[i + 1] = k[i][par] + dk_steps[i][par]
    base = LatticeSolution(
        lattice=lattice, y=y, u=u_steps, driver=driver, frozen_laws=frozen,
        diagnostics=dict(diag),
    )
    obs = obs_rows if obs_rows is not None else [None] * n
    return ReflectedSolution(base=base, obstacle_values=obs, dk=dk_steps, k=k)
