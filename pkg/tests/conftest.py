"""Shared random-instance generators for the test suite.

Instances drawn here are sized to fit the exhaustive oracle (at most
12 steps / 3 marks) and to respect the implicit-step precondition
lip_full * dA <= 1/2: clock increments stay below 0.3 and per-step
intensity row sums below 2.5, which keeps every generated driver's
lip_full * max dA under 0.25.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from mfrbsde import (
    CompensatorModel,
    DriverSpec,
    MarkSpace,
    build_lattice,
    declared_lipschitz,
)

MARK_POOL = ("a", "b", "c")
PHI_ROWSUM_CAP = 2.5


def random_model(rng, max_steps=8, max_marks=2, max_load=0.8, allow_flat=True):
    """Feasible compensator model with varied grid, clock and intensities.

    allow_flat occasionally zeroes one clock increment so that degenerate
    (zero-probability-jump) steps stay exercised.
    """
    steps = int(rng.integers(2, max_steps + 1))
    marks = int(rng.integers(1, max_marks + 1))
    horizon = float(rng.uniform(0.4, 1.5))
    grid = np.linspace(0.0, horizon, steps + 1)
    incr = rng.uniform(0.03, 0.3, steps)
    if allow_flat and rng.random() < 0.2:
        incr[int(rng.integers(steps))] = 0.0
    clock = np.concatenate(([0.0], np.cumsum(incr)))
    phi = rng.uniform(0.0, 1.4, (steps, marks))
    if marks > 1 and rng.random() < 0.15:
        phi[:, int(rng.integers(marks))] = 0.0
    rowsum = phi.sum(axis=1)
    over = rowsum > PHI_ROWSUM_CAP
    if over.any():
        phi[over] *= (PHI_ROWSUM_CAP / rowsum[over])[:, None]
    load = float(np.max(phi.sum(axis=1) * np.diff(clock), initial=0.0))
    if load > max_load:
        phi = phi * (max_load / load)
    return CompensatorModel(MarkSpace(MARK_POOL[:marks]), grid, clock, phi)


def random_lattice(rng, **kwargs):
    return build_lattice(random_model(rng, **kwargs))


def random_plain_driver(rng, comp) -> DriverSpec:
    """Parametric Lipschitz driver that never reads the marginal law."""
    coef_y = float(rng.uniform(-0.4, 0.4))
    coef_sin = float(rng.uniform(-0.15, 0.15))
    coef_u = float(rng.uniform(-0.5, 0.5))
    spec = DriverSpec(
        name="probe",
        const=float(rng.uniform(-0.3, 0.3)),
        coef_y=coef_y,
        coef_sin_y=coef_sin,
        coef_u=coef_u,
        alpha=float(rng.uniform(0.0, 0.4)),
        coef_alpha=float(rng.uniform(0.0, 1.0)) if rng.random() < 0.5 else 0.0,
        lip_y_mu=abs(coef_y) + abs(coef_sin),
        lip_full=0.0,
    )
    return replace(spec, lip_full=declared_lipschitz(spec, comp))


def random_obstacle_rows(rng, lattice, lo=-0.9, hi=0.5):
    """Arbitrary per-node barrier levels for steps 0..n-1."""
    return [rng.uniform(lo, hi, lattice.n_nodes[i]) for i in range(lattice.n_steps)]


def random_terminal(rng, lattice, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, lattice.n_nodes[lattice.n_steps])


def random_monotone_pair(rng):
    """Instance pair (lattice, f1 >= f2, xi1 >= xi2) for the comparison check.

    The per-step load is capped at 0.4 so that every child weight in the
    one-step map stays positive: the stay weight is bounded below by
    1 - (1 + |coef_u|) * load >= 1 - 1.5 * 0.4 > 0.
    """
    comp = random_model(rng, max_load=0.4)
    lattice = build_lattice(comp)
    d2 = random_plain_driver(rng, comp)
    shift = float(rng.uniform(0.0, 0.5))
    d1 = replace(d2, const=d2.const + shift)
    xi2 = random_terminal(rng, lattice)
    xi1 = xi2 + rng.uniform(0.0, 0.8, xi2.size)
    return lattice, d1, d2, xi1, xi2


def max_node_error(y_a, y_b) -> float:
    return max(
        float(np.max(np.abs(a - b), initial=0.0)) for a, b in zip(y_a, y_b)
    )
