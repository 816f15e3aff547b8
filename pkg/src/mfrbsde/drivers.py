"""Driver, obstacle and terminal-condition specifications.

Drivers f(t, y, u, mu) are declared together with their structural constants
(Lipschitz bounds, growth envelope data, regime) rather than having constants
estimated from samples; probe routines verify the declarations.  The bundled
family is parametric,

    f = const + coef_y * y + coef_sin_y * sin(y) + coef_mean * mean(mu)
        + coef_u * sum_e u(e) phi_t(e)
        + coef_jump_exp * (1/lam) * j_lam(t, u)
        + coef_alpha * alpha_t,

which covers every regime exercised here and compiles to flat coefficient
arrays for the numerical kernels.  Arbitrary Python callables are accepted
too; they run on the generic (non-kernel) solver path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import SolverError, ValidationError
from .laws import EmpiricalLaw, dirac, wasserstein
from .mpp_model import CompensatorModel

EXP_ARG_LIMIT = 700.0

LIPSCHITZ = "lipschitz"
QUADRATIC = "quadratic"


def j_lambda(comp: CompensatorModel, step: int, u, lam: float) -> float:
    """Exponential jump penalty sum_e (e^{lam u(e)} - 1 - lam u(e)) phi_step(e).

    Nonnegative and convex in u; it is the natural growth gauge for drivers
    with exponential-quadratic behaviour in u.
    """
    if lam <= 0:
        raise ValidationError(f"lambda must be positive, got {lam}")
    u_arr = _u_array(comp, u)
    phi_row = comp.phi[step]
    total = 0.0
    for e in range(comp.n_marks):
        z = lam * u_arr[e]
        if z > EXP_ARG_LIMIT:
            raise SolverError(
                f"exponential overflow in jump penalty at mark index {e} "
                f"(lam*u = {z!r}); rescale u or lambda"
            )
        total += (math.exp(z) - 1.0 - z) * phi_row[e]
    return total


def _u_array(comp: CompensatorModel, u) -> np.ndarray:
    if isinstance(u, dict):
        out = np.zeros(comp.n_marks)
        for mark, val in u.items():
            out[comp.mark_space.index(mark)] = float(val)
        return out
    arr = np.asarray(u, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(comp.n_marks, float(arr))
    if arr.shape != (comp.n_marks,):
        raise ValidationError(f"u must have one entry per mark, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class DriverSpec:
    """A driver with declared structural constants.

    lip_y_mu bounds the sensitivity in (y, mu); lip_full additionally covers
    u (in the intensity-weighted norm) and is required in the lipschitz
    regime.  alpha is the nonnegative envelope sequence (scalar or one value
    per step).  A custom callable f(step, y, u_array, law) overrides the
    parametric formula.
    """

    name: str
    const: float = 0.0
    coef_y: float = 0.0
    coef_sin_y: float = 0.0
    coef_mean: float = 0.0
    coef_u: float = 0.0
    coef_jump_exp: float = 0.0
    lam: float = 1.0
    coef_alpha: float = 0.0
    alpha: float | np.ndarray = 0.0
    lip_y_mu: float = 0.0
    lip_full: float | None = None
    convex_in_u: bool = True
    regime: str = LIPSCHITZ
    custom: Callable | None = None

    def __post_init__(self):
        if self.regime not in (LIPSCHITZ, QUADRATIC):
            raise ValidationError(f"unknown regime {self.regime!r}")
        if self.lam <= 0:
            raise ValidationError("lambda must be positive")
        if self.regime == LIPSCHITZ:
            if self.custom is None and self.coef_jump_exp != 0.0:
                raise ValidationError(
                    "the exponential jump term is not Lipschitz in u; declare the "
                    "quadratic regime for it"
                )
            if self.lip_full is None:
                raise ValidationError("lipschitz regime requires a declared lip_full")
        alpha = self.alpha
        if isinstance(alpha, np.ndarray):
            if np.any(alpha < 0) or not np.all(np.isfinite(alpha)):
                raise ValidationError("alpha sequence must be finite and nonnegative")
            alpha = alpha.copy()
            alpha.flags.writeable = False
            object.__setattr__(self, "alpha", alpha)
        elif alpha < 0:
            raise ValidationError("alpha must be nonnegative")

    @property
    def is_parametric(self) -> bool:
        return self.custom is None

    @property
    def reads_law(self) -> bool:
        return self.custom is not None or self.coef_mean != 0.0

    def alpha_at(self, step: int) -> float:
        if isinstance(self.alpha, np.ndarray):
            return float(self.alpha[step])
        return float(self.alpha)

    def alpha_sequence(self, n_steps: int) -> np.ndarray:
        if isinstance(self.alpha, np.ndarray):
            if self.alpha.size != n_steps:
                raise ValidationError(
                    f"alpha sequence has {self.alpha.size} entries for {n_steps} steps"
                )
            return self.alpha.astype(np.float64)
        return np.full(n_steps, float(self.alpha))

    def pack(self) -> np.ndarray:
        """Coefficient vector consumed by the numerical kernels."""
        return np.array(
            [
                self.const,
                self.coef_y,
                self.coef_sin_y,
                self.coef_mean,
                self.coef_u,
                self.coef_jump_exp,
                self.lam,
                self.coef_alpha,
            ],
            dtype=np.float64,
        )


def eval_driver(
    spec: DriverSpec,
    comp: CompensatorModel,
    step: int,
    y: float,
    u,
    mu: EmpiricalLaw | None = None,
) -> float:
    """Scalar driver evaluation; rejects non-finite results naming the inputs."""
    u_arr = _u_array(comp, u)
    if spec.custom is not None:
        val = float(spec.custom(step, float(y), u_arr, mu))
    else:
        mean = 0.0
        if spec.coef_mean != 0.0:
            if mu is None:
                raise ValidationError(f"driver {spec.name!r} needs a law argument")
            mean = mu.mean()
        val = (
            spec.const
            + spec.coef_y * y
            + spec.coef_sin_y * math.sin(y)
            + spec.coef_mean * mean
            + spec.coef_alpha * spec.alpha_at(step)
        )
        phi_row = comp.phi[step]
        acc = 0.0
        for e in range(comp.n_marks):
            acc += u_arr[e] * phi_row[e]
        val += spec.coef_u * acc
        if spec.coef_jump_exp != 0.0:
            val += spec.coef_jump_exp / spec.lam * j_lambda(comp, step, u_arr, spec.lam)
    if not math.isfinite(val):
        raise ValidationError(
            f"driver {spec.name!r} returned non-finite value at step {step}, "
            f"y={y!r}, u={u_arr.tolist()!r}"
        )
    return val


def declared_lipschitz(spec: DriverSpec, comp: CompensatorModel) -> float:
    """Valid full Lipschitz constant of a parametric driver for this model.

    The u part is measured in the step norm ||u||_t = (sum_e u(e)^2 phi_t(e))^{1/2},
    so the linear term coef_u * sum u(e) phi_t(e) contributes
    |coef_u| * max_t (sum_e phi_t(e))^{1/2} by Cauchy-Schwarz.
    """
    if not spec.is_parametric:
        raise ValidationError("declared_lipschitz only applies to the parametric family")
    if spec.coef_jump_exp != 0.0:
        raise ValidationError("the exponential jump term has no global Lipschitz bound")
    beta = abs(spec.coef_y) + abs(spec.coef_sin_y)
    u_bound = abs(spec.coef_u) * float(np.sqrt(np.max(np.sum(comp.phi, axis=1), initial=0.0)))
    return max(beta, abs(spec.coef_mean), u_bound)


# ---------------------------------------------------------------------------
# bundled drivers


def zero_driver() -> DriverSpec:
    return DriverSpec(name="zero", lip_y_mu=0.0, lip_full=0.0)


def linear_driver(a: float) -> DriverSpec:
    """f = a * y."""
    return DriverSpec(name="linear", coef_y=a, lip_y_mu=abs(a), lip_full=abs(a))


def discount_driver(beta: float) -> DriverSpec:
    """f = -beta * y, the deterministic discounting driver."""
    return DriverSpec(name="discount", coef_y=-beta, lip_y_mu=abs(beta), lip_full=abs(beta))


def mean_driver(b: float) -> DriverSpec:
    """f = b * mean(mu), the simplest mean-field coupling."""
    return DriverSpec(name="mean", coef_mean=b, lip_y_mu=abs(b), lip_full=abs(b))


def linear_mean_driver(
    a: float,
    b: float,
    c_u: float = 0.0,
    comp: CompensatorModel | None = None,
    sin_amp: float = 0.0,
) -> DriverSpec:
    """f = a*y + sin_amp*sin(y) + b*mean(mu) + c_u * sum_e u(e) phi_t(e)."""
    spec = DriverSpec(
        name="linear_mean",
        coef_y=a,
        coef_sin_y=sin_amp,
        coef_mean=b,
        coef_u=c_u,
        lip_y_mu=abs(a) + abs(sin_amp),
        lip_full=0.0,
    )
    if comp is not None:
        spec = replace(spec, lip_full=declared_lipschitz(spec, comp))
    else:
        if c_u != 0.0:
            raise ValidationError("a u coefficient needs the model to bound lip_full")
        spec = replace(spec, lip_full=max(abs(a) + abs(sin_amp), abs(b)))
    return spec


def jump_exp_driver(
    lam: float,
    coef: float = 1.0,
    coef_y: float = 0.0,
    coef_mean: float = 0.0,
    alpha: float | np.ndarray = 0.0,
    coef_alpha: float = 0.0,
) -> DriverSpec:
    """Quadratic-regime driver built on the exponential jump penalty.

    With coef in [0, 1] and the remaining coefficients inside the declared
    envelope constants, it sits inside the growth envelope by construction.
    """
    if not 0.0 <= coef <= 1.0:
        raise ValidationError("jump penalty coefficient must lie in [0, 1]")
    return DriverSpec(
        name="jump_exp",
        coef_jump_exp=coef,
        coef_y=coef_y,
        coef_mean=coef_mean,
        lam=lam,
        alpha=alpha,
        coef_alpha=coef_alpha,
        lip_y_mu=max(abs(coef_y), abs(coef_mean)),
        lip_full=None,
        regime=QUADRATIC,
    )


def custom_driver(
    fn: Callable,
    lip_y_mu: float,
    lip_full: float | None,
    regime: str = LIPSCHITZ,
    convex_in_u: bool = True,
    name: str = "custom",
) -> DriverSpec:
    return DriverSpec(
        name=name,
        lip_y_mu=lip_y_mu,
        lip_full=lip_full,
        regime=regime,
        convex_in_u=convex_in_u,
        custom=fn,
    )


# ---------------------------------------------------------------------------
# envelope / probe checks


@dataclass(frozen=True)
class ProbeReport:
    """Outcome of a probe sweep; violations carry witnesses."""

    ok: bool
    checked: int
    violations: tuple

    def __bool__(self) -> bool:
        return self.ok


def _default_probe_laws() -> list[EmpiricalLaw]:
    return [
        dirac(0.0),
        dirac(1.0),
        EmpiricalLaw(np.array([-1.0, 1.0]), np.array([0.5, 0.5])),
    ]


def envelope_check(
    spec: DriverSpec,
    comp: CompensatorModel,
    y_grid=None,
    u_grid=None,
    laws=None,
    tol: float = 1e-12,
    max_report: int = 10,
) -> ProbeReport:
    """Verify the declared growth envelope on a probe grid.

    The envelope with data (alpha, beta, lambda) is

        -alpha_t - beta(|y| + W_1(mu, delta_0)) - (1/lambda) j_lambda(t, -u)
            <= f(t, y, u, mu) <=
        alpha_t + beta(|y| + W_1(mu, delta_0)) + (1/lambda) j_lambda(t, u).

    Violations are reported with full witnesses (step, y, u, law index,
    value, bounds).
    """
    if y_grid is None:
        y_grid = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    if u_grid is None:
        u_grid = [np.full(comp.n_marks, v) for v in (-1.0, -0.25, 0.0, 0.25, 1.0)]
    if laws is None:
        laws = _default_probe_laws()
    beta = spec.lip_y_mu
    violations = []
    checked = 0
    for step in range(comp.n_steps):
        a_t = spec.alpha_at(step)
        for y in y_grid:
            for u in u_grid:
                up = j_lambda(comp, step, u, spec.lam) / spec.lam
                down = j_lambda(comp, step, -np.asarray(u), spec.lam) / spec.lam
                for k, mu in enumerate(laws):
                    w = wasserstein(mu, dirac(0.0), 1.0)
                    hi = a_t + beta * (abs(y) + w) + up
                    lo = -a_t - beta * (abs(y) + w) - down
                    val = eval_driver(spec, comp, step, float(y), u, mu)
                    checked += 1
                    if val > hi + tol or val < lo - tol:
                        if len(violations) < max_report:
                            violations.append(
                                (step, float(y), np.asarray(u).tolist(), k, val, lo, hi)
                            )
    return ProbeReport(ok=not violations, checked=checked, violations=tuple(violations))


def convexity_check(
    spec: DriverSpec,
    comp: CompensatorModel,
    u_pairs=None,
    tol: float = 1e-10,
) -> ProbeReport:
    """Midpoint probe of the declared convexity of f in u."""
    rng = np.random.default_rng(20240817)
    if u_pairs is None:
        u_pairs = [
            (rng.uniform(-1.5, 1.5, comp.n_marks), rng.uniform(-1.5, 1.5, comp.n_marks))
            for _ in range(32)
        ]
    mu = dirac(0.0)
    violations = []
    checked = 0
    for step in range(comp.n_steps):
        for u1, u2 in u_pairs:
            mid = 0.5 * (u1 + u2)
            f1 = eval_driver(spec, comp, step, 0.0, u1, mu)
            f2 = eval_driver(spec, comp, step, 0.0, u2, mu)
            fm = eval_driver(spec, comp, step, 0.0, mid, mu)
            checked += 1
            if fm > 0.5 * (f1 + f2) + tol:
                if len(violations) < 10:
                    violations.append((step, u1.tolist(), u2.tolist(), fm, 0.5 * (f1 + f2)))
    return ProbeReport(ok=not violations, checked=checked, violations=tuple(violations))


def lipschitz_check(
    spec: DriverSpec,
    comp: CompensatorModel,
    pairs: int = 64,
    seed: int = 7,
    tol: float = 1e-10,
) -> ProbeReport:
    """Verify the declared full Lipschitz constant on random probe pairs."""
    if spec.lip_full is None:
        raise ValidationError("driver declares no full Lipschitz constant")
    rng = np.random.default_rng(seed)
    law_pool = _default_probe_laws()
    violations = []
    checked = 0
    for _ in range(pairs):
        step = int(rng.integers(comp.n_steps))
        y1, y2 = rng.uniform(-3, 3, 2)
        u1 = rng.uniform(-2, 2, comp.n_marks)
        u2 = rng.uniform(-2, 2, comp.n_marks)
        m1, m2 = rng.integers(len(law_pool), size=2)
        mu1, mu2 = law_pool[m1], law_pool[m2]
        f1 = eval_driver(spec, comp, step, y1, u1, mu1)
        f2 = eval_driver(spec, comp, step, y2, u2, mu2)
        phi_row = comp.phi[step]
        du = float(np.sqrt(np.sum((u1 - u2) ** 2 * phi_row)))
        budget = spec.lip_full * (abs(y1 - y2) + du + wasserstein(mu1, mu2, 1.0))
        checked += 1
        if abs(f1 - f2) > budget + tol:
            if len(violations) < 10:
                violations.append((step, y1, y2, u1.tolist(), u2.tolist(), abs(f1 - f2), budget))
    return ProbeReport(ok=not violations, checked=checked, violations=tuple(violations))


# ---------------------------------------------------------------------------
# obstacles


@dataclass(frozen=True)
class ObstacleSpec:
    """Barrier h(t, y, mu) with declared sensitivity bounds gamma1 (in y)
    and gamma2 (in mu, against the order-1 Wasserstein distance)."""

    name: str
    const: float = 0.0
    coef_y: float = 0.0
    coef_mean: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    custom: Callable | None = None

    def eval(self, step: int, y: float, mu: EmpiricalLaw | None) -> float:
        if self.custom is not None:
            return float(self.custom(step, float(y), mu))
        mean = 0.0
        if self.coef_mean != 0.0:
            if mu is None:
                raise ValidationError(f"obstacle {self.name!r} needs a law argument")
            mean = mu.mean()
        return self.const + self.coef_y * y + self.coef_mean * mean

    @property
    def reads_state(self) -> bool:
        return self.custom is not None or self.coef_y != 0.0 or self.coef_mean != 0.0


def constant_obstacle(level: float) -> ObstacleSpec:
    return ObstacleSpec(name="constant", const=level)


def affine_obstacle(const: float, coef_y: float, coef_mean: float) -> ObstacleSpec:
    return ObstacleSpec(
        name="affine",
        const=const,
        coef_y=coef_y,
        coef_mean=coef_mean,
        gamma1=abs(coef_y),
        gamma2=abs(coef_mean),
    )


# ---------------------------------------------------------------------------
# terminal conditions


@dataclass(frozen=True, eq=False)
class TerminalSpec:
    """Terminal payoff as a functional of the branch history.

    Bundled kinds: "constant" (offset), "scaled_count" (scale * N_T + offset),
    "mark_weighted" (sum of per-mark weights over events + offset).  A custom
    callable receives the lattice and returns terminal node values; an
    explicit array is accepted as well.
    """

    name: str
    scale: float = 1.0
    offset: float = 0.0
    weights: tuple = ()
    custom: Callable | None = None
    array: np.ndarray | None = None

    def values(self, lattice) -> np.ndarray:
        n = lattice.n_steps
        count = lattice.n_nodes[n]
        if self.array is not None:
            arr = np.asarray(self.array, dtype=np.float64)
            if arr.shape != (count,):
                raise ValidationError(
                    f"terminal array has shape {arr.shape}, expected ({count},)"
                )
            return arr.copy()
        if self.custom is not None:
            arr = np.asarray(self.custom(lattice), dtype=np.float64)
            if arr.shape != (count,):
                raise ValidationError("custom terminal returned wrong shape")
            return arr
        if self.name == "constant":
            return np.full(count, self.offset)
        if self.name == "scaled_count":
            return self.scale * lattice.jump_count[n].astype(np.float64) + self.offset
        if self.name == "mark_weighted":
            lookup = dict(self.weights)
            marks = lattice.comp.mark_space.marks
            w = np.array([float(lookup.get(m, 0.0)) for m in marks])
            nodes, _ = lattice.enumerate_paths()
            out = np.full(count, self.offset)
            for i in range(n):
                lab = lattice.branch[i + 1][nodes[:, i + 1]]
                jumped = lab >= 0
                out[jumped] += w[lab[jumped]]
            return out
        raise ValidationError(f"unknown terminal kind {self.name!r}")


def constant_terminal(x: float) -> TerminalSpec:
    return TerminalSpec(name="constant", offset=x)


def count_terminal(scale: float = 1.0, offset: float = 0.0) -> TerminalSpec:
    return TerminalSpec(name="scaled_count", scale=scale, offset=offset)


def mark_weighted_terminal(weights: dict, offset: float = 0.0) -> TerminalSpec:
    return TerminalSpec(name="mark_weighted", weights=tuple(sorted(weights.items())), offset=offset)


def array_terminal(values) -> TerminalSpec:
    return TerminalSpec(name="array", array=np.asarray(values, dtype=np.float64))


def terminal_values(terminal, lattice) -> np.ndarray:
    """Normalise a TerminalSpec or raw array to terminal node values."""
    if isinstance(terminal, TerminalSpec):
        return terminal.values(lattice)
    arr = np.asarray(terminal, dtype=np.float64)
    count = lattice.n_nodes[lattice.n_steps]
    if arr.shape != (count,):
        raise ValidationError(f"terminal values have shape {arr.shape}, expected ({count},)")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("terminal values must be finite")
    return arr.copy()


@dataclass(frozen=True)
class ConsistencyReport:
    ok: bool
    worst_violation: float
    witness_node: int

    def __bool__(self) -> bool:
        return self.ok


def terminal_consistency(
    terminal,
    obstacle: ObstacleSpec | None,
    lattice,
    tol: float = 0.0,
) -> ConsistencyReport:
    """Check xi >= h(T, xi, law(xi)) at every terminal node.

    The law argument of the barrier is the reach-weighted law of xi itself,
    matching how the barrier couples to the terminal state.
    """
    from .laws import node_law

    xi = terminal_values(terminal, lattice)
    if obstacle is None:
        return ConsistencyReport(True, 0.0, -1)
    n = lattice.n_steps
    mu = node_law(lattice, xi, n)
    worst = 0.0
    witness = -1
    for k in range(xi.size):
        gap = obstacle.eval(n, float(xi[k]), mu) - xi[k]
        if gap > worst:
            worst = float(gap)
            witness = k
    return ConsistencyReport(worst <= tol, worst, witness)
