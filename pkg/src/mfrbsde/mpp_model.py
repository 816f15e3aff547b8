"""Marked point process models, scenario lattices, and simulation.

A model is a finite mark space, a time grid on [0, T], a nondecreasing clock
A evaluated on the grid, and nonnegative intensities phi_i(e) per step and
mark.  The induced one-jump-per-step branching gives, at step i, probability
phi_i(e) * dA_i to a jump with mark e and the remainder to "no jump".

Two consumers share this data: an exact scenario lattice (the non-recombining
tree of all branch histories, with reach probabilities) and a Monte Carlo
simulator producing marked point patterns.  Jump branches with probability
exactly zero are pruned from the lattice, so a model with phi identically
zero yields a single-path lattice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ModelError, ValidationError

DEFAULT_NODE_CAP = 10**6
_SIM_CHUNK = 4096


def _fmt(x: float) -> str:
    """Shortest decimal that round-trips the float exactly."""
    return repr(float(x))


@dataclass(frozen=True)
class MarkSpace:
    """Ordered finite set of mark identifiers."""

    marks: tuple[str, ...]

    def __post_init__(self):
        marks = tuple(str(m) for m in self.marks)
        if not marks:
            raise ModelError("mark space must contain at least one mark")
        if len(set(marks)) != len(marks):
            raise ModelError("mark identifiers must be distinct")
        for m in marks:
            if not m or any(c.isspace() for c in m):
                raise ModelError(f"mark identifier {m!r} must be non-empty without whitespace")
        object.__setattr__(self, "marks", marks)

    @property
    def size(self) -> int:
        return len(self.marks)

    def index(self, mark: str) -> int:
        try:
            return self.marks.index(mark)
        except ValueError:
            raise ModelError(f"unknown mark {mark!r}") from None


@dataclass(frozen=True, eq=False)
class CompensatorModel:
    """Grid-aligned compensator data: clock increments and jump intensities.

    grid is strictly increasing from 0 to the horizon; clock is nondecreasing
    with A(0) = 0; phi has one row per step and one column per mark.  Each
    step must be feasible: sum_e phi_i(e) * dA_i <= 1.
    """

    mark_space: MarkSpace
    grid: np.ndarray
    clock: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        clock = np.asarray(self.clock, dtype=np.float64)
        phi = np.atleast_2d(np.asarray(self.phi, dtype=np.float64))
        if grid.ndim != 1 or grid.size < 2:
            raise ModelError("grid needs at least two points")
        if grid[0] != 0.0:
            raise ModelError("grid must start at 0")
        if not np.all(np.diff(grid) > 0):
            raise ModelError("grid must be strictly increasing")
        if clock.shape != grid.shape:
            raise ModelError("clock must be evaluated at every grid point")
        if clock[0] != 0.0:
            raise ModelError("clock must start at 0")
        if not np.all(np.diff(clock) >= 0):
            raise ModelError("clock must be nondecreasing")
        if not np.all(np.isfinite(clock)):
            raise ModelError("clock values must be finite")
        n = grid.size - 1
        if phi.shape != (n, self.mark_space.size):
            raise ModelError(
                f"phi must have shape ({n}, {self.mark_space.size}), got {phi.shape}"
            )
        if not np.all(np.isfinite(phi)) or np.any(phi < 0):
            raise ModelError("intensities must be finite and nonnegative")
        dA = np.diff(clock)
        load = _rowsum(phi * dA[:, None])
        for i in range(n):
            if load[i] > 1.0:
                raise ModelError(
                    f"step {i} infeasible: sum_e phi_i(e) dA_i = {load[i]!r} exceeds 1"
                )
        grid, clock, phi = grid.copy(), clock.copy(), phi.copy()
        for arr in (grid, clock, phi):
            arr.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "clock", clock)
        object.__setattr__(self, "phi", phi)

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def n_steps(self) -> int:
        return self.grid.size - 1

    @property
    def n_marks(self) -> int:
        return self.mark_space.size

    @property
    def dA(self) -> np.ndarray:
        return np.diff(self.clock)

    def jump_probs(self) -> np.ndarray:
        """Per-step branch probabilities phi_i(e) * dA_i, shape (n_steps, n_marks)."""
        return self.phi * self.dA[:, None]

    def stay_probs(self) -> np.ndarray:
        return 1.0 - _rowsum(self.jump_probs())


def _rowsum(mat: np.ndarray) -> np.ndarray:
    """Row sums accumulated left to right so results match scalar loops bit for bit."""
    out = np.zeros(mat.shape[0])
    for e in range(mat.shape[1]):
        out += mat[:, e]
    return out


@dataclass(frozen=True, eq=False)
class MarkedPointPattern:
    """One realisation: event times (strictly increasing), marks, and the
    grid step each event occurred in.  Events are stamped at step end."""

    times: np.ndarray
    marks: tuple[str, ...]
    step_indices: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        steps = np.asarray(self.step_indices, dtype=np.int64)
        marks = tuple(self.marks)
        if times.ndim != 1 or times.size != len(marks) or steps.shape != times.shape:
            raise ModelError("pattern needs parallel times, marks and step indices")
        if times.size and not np.all(np.diff(times) > 0):
            raise ModelError("event times must be strictly increasing")
        times, steps = times.copy(), steps.copy()
        times.flags.writeable = False
        steps.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "step_indices", steps)

    def __len__(self) -> int:
        return self.times.size


@dataclass(eq=False)
class ScenarioLattice:
    """Non-recombining tree of branch histories with reach probabilities.

    Nodes at step i are indexed 0..n_nodes[i]-1.  parent[i][k] and
    branch[i][k] (label -1 for "no jump", else the mark index) describe how
    node k at step i was produced; child_stay[i][j] and child_jump[i][j, e]
    give the children of node j at step i (-1 where the jump branch was
    pruned because its probability is exactly zero).
    """

    comp: CompensatorModel
    n_nodes: list[int]
    parent: list[np.ndarray]
    branch: list[np.ndarray]
    child_stay: list[np.ndarray]
    child_jump: list[np.ndarray]
    reach: list[np.ndarray]
    jump_count: list[np.ndarray]
    p_jump: np.ndarray
    p_stay: np.ndarray
    max_nodes: int
    total_nodes: int = field(init=False)

    def __post_init__(self):
        self.total_nodes = int(sum(self.n_nodes))

    @property
    def n_steps(self) -> int:
        return self.comp.n_steps

    @property
    def n_marks(self) -> int:
        return self.comp.n_marks

    def path_labels(self, step: int, node: int) -> np.ndarray:
        """Branch labels along the path from the root to (step, node)."""
        labels = np.empty(step, dtype=np.int16)
        k = node
        for i in range(step, 0, -1):
            labels[i - 1] = self.branch[i][k]
            k = self.parent[i][k]
        return labels

    def enumerate_paths(self) -> tuple[np.ndarray, np.ndarray]:
        """All root-to-terminal paths.

        Returns (nodes, probs): nodes has one row per path and one column per
        step holding the node index visited; probs are the terminal reach
        probabilities.  Paths and terminal nodes are in bijection because the
        tree never recombines.
        """
        n = self.n_steps
        count = self.n_nodes[n]
        nodes = np.empty((count, n + 1), dtype=np.int64)
        nodes[:, n] = np.arange(count)
        for i in range(n, 0, -1):
            nodes[:, i - 1] = self.parent[i][nodes[:, i]]
        return nodes, self.reach[n].copy()


def build_lattice(
    comp: CompensatorModel,
    grid: np.ndarray | None = None,
    max_nodes: int = DEFAULT_NODE_CAP,
) -> ScenarioLattice:
    """Expand the model into its exact scenario lattice.

    grid, when given, must coincide with the model's own grid (intensities
    and clock are aligned to it).  Raises ModelError when the tree would
    exceed max_nodes.
    """
    if grid is not None:
        grid = np.asarray(grid, dtype=np.float64)
        if grid.shape != comp.grid.shape or not np.array_equal(grid, comp.grid):
            raise ModelError("grid does not match the model grid")
    n, m = comp.n_steps, comp.n_marks
    p_jump = comp.jump_probs()
    p_stay = comp.stay_probs()

    active = [np.flatnonzero(p_jump[i] > 0.0) for i in range(n)]
    counts = [1]
    for i in range(n):
        counts.append(counts[-1] * (1 + active[i].size))
        if sum(counts) > max_nodes:
            raise ModelError(
                f"lattice needs more than {max_nodes} nodes by step {i + 1}; "
                "raise max_nodes or coarsen the model"
            )

    parent: list[np.ndarray] = [np.empty(0, dtype=np.int64)]
    branch: list[np.ndarray] = [np.empty(0, dtype=np.int16)]
    child_stay: list[np.ndarray] = []
    child_jump: list[np.ndarray] = []
    reach: list[np.ndarray] = [np.ones(1)]
    jump_count: list[np.ndarray] = [np.zeros(1, dtype=np.int64)]

    for i in range(n):
        width = 1 + active[i].size
        n_i, n_next = counts[i], counts[i + 1]
        idx = np.arange(n_i, dtype=np.int64)
        stay = idx * width
        jump = np.full((n_i, m), -1, dtype=np.int64)
        for rank, e in enumerate(active[i]):
            jump[:, e] = stay + 1 + rank
        child_stay.append(stay)
        child_jump.append(jump)

        par = np.empty(n_next, dtype=np.int64)
        lab = np.empty(n_next, dtype=np.int16)
        rp = np.empty(n_next)
        jc = np.empty(n_next, dtype=np.int64)
        par[stay] = idx
        lab[stay] = -1
        rp[stay] = reach[i] * p_stay[i]
        jc[stay] = jump_count[i]
        for rank, e in enumerate(active[i]):
            cols = stay + 1 + rank
            par[cols] = idx
            lab[cols] = e
            rp[cols] = reach[i] * p_jump[i, e]
            jc[cols] = jump_count[i] + 1
        parent.append(par)
        branch.append(lab)
        reach.append(rp)
        jump_count.append(jc)

    return ScenarioLattice(
        comp=comp,
        n_nodes=counts,
        parent=parent,
        branch=branch,
        child_stay=child_stay,
        child_jump=child_jump,
        reach=reach,
        jump_count=jump_count,
        p_jump=p_jump,
        p_stay=p_stay,
        max_nodes=max_nodes,
    )


# ---------------------------------------------------------------------------
# model constructors


def make_model(
    marks,
    horizon: float,
    steps: int,
    phi,
    clock: str | None = "linear",
    clock_scale: float = 1.0,
    clock_power: float = 2.0,
    clock_values=None,
) -> CompensatorModel:
    """Convenience constructor from plain scalars and lists.

    phi may be a scalar (single mark, constant in time), a per-mark list of
    constants, or a full (steps, marks) table.  clock is "linear"
    (A_t = clock_scale * t), "power" (A_t = clock_scale * T * (t/T)^clock_power),
    or "explicit" with clock_values of length steps + 1.
    """
    space = MarkSpace(tuple(marks) if not isinstance(marks, str) else (marks,))
    if horizon <= 0:
        raise ModelError("horizon must be positive")
    if steps < 1:
        raise ModelError("need at least one step")
    grid = np.linspace(0.0, float(horizon), int(steps) + 1)
    phi_arr = np.asarray(phi, dtype=np.float64)
    if phi_arr.ndim == 0:
        phi_arr = np.full((steps, space.size), float(phi_arr))
    elif phi_arr.ndim == 1:
        if phi_arr.size != space.size:
            raise ModelError("per-mark phi list must have one entry per mark")
        phi_arr = np.tile(phi_arr, (steps, 1))
    if clock == "linear":
        values = clock_scale * grid
    elif clock == "power":
        values = clock_scale * horizon * (grid / horizon) ** clock_power
    elif clock == "explicit":
        if clock_values is None:
            raise ModelError("explicit clock requires clock_values")
        values = np.asarray(clock_values, dtype=np.float64)
    else:
        raise ModelError(f"unknown clock kind {clock!r}")
    return CompensatorModel(space, grid, values, phi_arr)


def poisson_model(rate: float, horizon: float, steps: int, mark: str = "a") -> CompensatorModel:
    """Single-mark model with A_t = t and constant intensity."""
    return make_model((mark,), horizon, steps, float(rate))


# ---------------------------------------------------------------------------
# simulation


def simulate_branch_matrix(comp: CompensatorModel, count: int, seed: int) -> np.ndarray:
    """Simulate branch outcomes for `count` paths: entry (k, i) is -1 for no
    jump at step i, else the mark index.

    Results are bit-for-bit reproducible for a given (count, seed) and do not
    depend on how work is chunked internally: chunk c draws from
    default_rng([seed, c]).
    """
    if count < 1:
        raise ModelError("path count must be positive")
    n, m = comp.n_steps, comp.n_marks
    cum = np.cumsum(comp.jump_probs(), axis=1)
    out = np.empty((count, n), dtype=np.int16)
    for chunk_idx, start in enumerate(range(0, count, _SIM_CHUNK)):
        stop = min(start + _SIM_CHUNK, count)
        rng = np.random.default_rng([seed, chunk_idx])
        u = rng.random((stop - start, n))
        for i in range(n):
            pick = np.searchsorted(cum[i], u[:, i], side="right")
            out[start:stop, i] = np.where(pick < m, pick, -1)
    return out


def simulate_patterns(
    comp: CompensatorModel,
    count: int,
    seed: int,
    grid: np.ndarray | None = None,
) -> list[MarkedPointPattern]:
    """Draw `count` marked point patterns; events are stamped at step end."""
    if grid is not None:
        grid = np.asarray(grid, dtype=np.float64)
        if grid.shape != comp.grid.shape or not np.array_equal(grid, comp.grid):
            raise ModelError("grid does not match the model grid")
    branches = simulate_branch_matrix(comp, count, seed)
    marks = comp.mark_space.marks
    end_times = comp.grid[1:]
    patterns = []
    for row in branches:
        steps = np.flatnonzero(row >= 0)
        patterns.append(
            MarkedPointPattern(
                times=end_times[steps],
                marks=tuple(marks[row[i]] for i in steps),
                step_indices=steps,
            )
        )
    return patterns


# ---------------------------------------------------------------------------
# compensated integrals


def integrand_matrix(comp: CompensatorModel, C) -> np.ndarray:
    """Normalise an integrand to a (n_steps, n_marks) array.

    C may already be such an array, a scalar, or a callable
    (step index, mark identifier) -> real.
    """
    n, m = comp.n_steps, comp.n_marks
    if callable(C):
        out = np.empty((n, m))
        for i in range(n):
            for e, mark in enumerate(comp.mark_space.marks):
                out[i, e] = float(C(i, mark))
        return out
    arr = np.asarray(C, dtype=np.float64)
    if arr.ndim == 0:
        return np.full((n, m), float(arr))
    if arr.shape != (n, m):
        raise ModelError(f"integrand must have shape ({n}, {m}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError("integrand must be finite")
    return arr.copy()


def compensated_integral(
    pattern: MarkedPointPattern,
    comp: CompensatorModel,
    C,
    grid: np.ndarray | None = None,
) -> float:
    """Integral of C against the compensated jump measure along one pattern:
    the sum of C over realised events minus the full compensator mass."""
    if grid is not None:
        grid = np.asarray(grid, dtype=np.float64)
        if not np.array_equal(grid, comp.grid):
            raise ModelError("grid does not match the model grid")
    mat = integrand_matrix(comp, C)
    total = float(np.sum(mat * comp.jump_probs()))
    gain = 0.0
    for i, mark in zip(pattern.step_indices, pattern.marks):
        gain += mat[int(i), comp.mark_space.index(mark)]
    return gain - total


def compensator_residual(
    comp: CompensatorModel,
    C,
    paths: int,
    seed: int,
) -> tuple[float, float]:
    """Monte Carlo estimate (mean, standard error) of the compensated
    integral of C; the true value is 0, so the estimate is a residual."""
    if paths < 2:
        raise ModelError("need at least 2 paths for a standard error")
    mat = integrand_matrix(comp, C)
    total = float(np.sum(mat * comp.jump_probs()))
    branches = simulate_branch_matrix(comp, paths, seed)
    padded = np.concatenate([mat, np.zeros((comp.n_steps, 1))], axis=1)
    per_step = padded[np.arange(comp.n_steps)[None, :], branches]
    residuals = per_step.sum(axis=1) - total
    estimate = float(np.mean(residuals))
    stderr = float(np.std(residuals, ddof=1) / np.sqrt(paths))
    return estimate, stderr


def lattice_compensated_expectation(lattice: ScenarioLattice, C) -> float:
    """Exhaustively weighted lattice expectation of the compensated integral
    of C.  The branch probabilities are the compensator, so this is 0 up to
    float rounding for every bounded integrand."""
    comp = lattice.comp
    mat = integrand_matrix(comp, C)
    total = float(np.sum(mat * comp.jump_probs()))
    gain = 0.0
    for i in range(comp.n_steps):
        lab = lattice.branch[i + 1]
        rp = lattice.reach[i + 1]
        for e in range(comp.n_marks):
            mass = float(np.sum(rp[lab == e]))
            gain += mat[i, e] * mass
    return gain - total


# ---------------------------------------------------------------------------
# line-oriented serialisation


def lattice_to_text(lattice: ScenarioLattice) -> str:
    """Serialise a lattice to a line-oriented text block.

    The header restates the model; one record per non-root node states
    parent, branch label and reach probability.  Floats use shortest
    round-trip decimals, so loading reproduces the lattice exactly.
    """
    comp = lattice.comp
    lines = ["mfrbsde-lattice 1"]
    lines.append("marks " + " ".join(comp.mark_space.marks))
    lines.append("grid " + " ".join(_fmt(x) for x in comp.grid))
    lines.append("clock " + " ".join(_fmt(x) for x in comp.clock))
    for i in range(comp.n_steps):
        lines.append(f"phi {i} " + " ".join(_fmt(x) for x in comp.phi[i]))
    lines.append(f"max-nodes {lattice.max_nodes}")
    lines.append("nodes-per-step " + " ".join(str(c) for c in lattice.n_nodes))
    for i in range(1, comp.n_steps + 1):
        par, lab, rp = lattice.parent[i], lattice.branch[i], lattice.reach[i]
        for k in range(lattice.n_nodes[i]):
            lines.append(f"node {i} {k} {par[k]} {lab[k]} {_fmt(rp[k])}")
    return "\n".join(lines) + "\n"


def lattice_from_text(text: str) -> ScenarioLattice:
    """Rebuild a lattice from ``lattice_to_text`` output, verifying every
    node record against the reconstruction."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "mfrbsde-lattice 1":
        raise ModelError("not a lattice serialisation (bad or missing header)")
    marks: tuple[str, ...] | None = None
    grid = clock = None
    phi_rows: dict[int, np.ndarray] = {}
    max_nodes = DEFAULT_NODE_CAP
    node_lines = []
    counts: list[int] | None = None
    for ln in lines[1:]:
        parts = ln.split()
        key = parts[0]
        if key == "marks":
            marks = tuple(parts[1:])
        elif key == "grid":
            grid = np.array([float(x) for x in parts[1:]])
        elif key == "clock":
            clock = np.array([float(x) for x in parts[1:]])
        elif key == "phi":
            phi_rows[int(parts[1])] = np.array([float(x) for x in parts[2:]])
        elif key == "max-nodes":
            max_nodes = int(parts[1])
        elif key == "nodes-per-step":
            counts = [int(x) for x in parts[1:]]
        elif key == "node":
            node_lines.append(parts)
        else:
            raise ModelError(f"unknown record {key!r} in lattice serialisation")
    if marks is None or grid is None or clock is None or counts is None:
        raise ModelError("lattice serialisation is missing header records")
    n = grid.size - 1
    phi = np.vstack([phi_rows[i] for i in range(n)])
    comp = CompensatorModel(MarkSpace(marks), grid, clock, phi)
    lattice = build_lattice(comp, max_nodes=max_nodes)
    if lattice.n_nodes != counts:
        raise ModelError("node counts in serialisation do not match the model")
    expected = sum(counts[1:])
    if len(node_lines) != expected:
        raise ModelError(f"expected {expected} node records, found {len(node_lines)}")
    for parts in node_lines:
        i, k, par, lab = int(parts[1]), int(parts[2]), int(parts[3]), int(parts[4])
        rp = float(parts[5])
        if (
            lattice.parent[i][k] != par
            or lattice.branch[i][k] != lab
            or lattice.reach[i][k] != rp
        ):
            raise ModelError(f"node record for step {i} node {k} does not match the model")
    return lattice


def patterns_to_text(patterns: list[MarkedPointPattern], mark_space: MarkSpace) -> str:
    """Serialise patterns, one record per event."""
    lines = ["mfrbsde-patterns 1"]
    lines.append("marks " + " ".join(mark_space.marks))
    lines.append(f"count {len(patterns)}")
    for k, pat in enumerate(patterns):
        lines.append(f"pattern {k} {len(pat)}")
        for t, mark, i in zip(pat.times, pat.marks, pat.step_indices):
            lines.append(f"event {_fmt(t)} {mark} {int(i)}")
    return "\n".join(lines) + "\n"


def patterns_from_text(text: str) -> tuple[list[MarkedPointPattern], MarkSpace]:
    """Inverse of ``patterns_to_text``; round-trips losslessly."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "mfrbsde-patterns 1":
        raise ModelError("not a pattern serialisation (bad or missing header)")
    if not lines[1].startswith("marks "):
        raise ModelError("pattern serialisation is missing the mark record")
    space = MarkSpace(tuple(lines[1].split()[1:]))
    count = int(lines[2].split()[1])
    patterns: list[MarkedPointPattern] = []
    pos = 3
    for k in range(count):
        head = lines[pos].split()
        if head[0] != "pattern" or int(head[1]) != k:
            raise ModelError(f"expected record for pattern {k}")
        n_ev = int(head[2])
        pos += 1
        times, marks, steps = [], [], []
        for _ in range(n_ev):
            ev = lines[pos].split()
            if ev[0] != "event":
                raise ModelError("malformed event record")
            times.append(float(ev[1]))
            marks.append(ev[2])
            steps.append(int(ev[3]))
            pos += 1
        patterns.append(MarkedPointPattern(np.array(times), tuple(marks), np.array(steps, dtype=np.int64)))
    if pos != len(lines):
        raise ModelError("trailing records after the declared pattern count")
    return patterns, space
