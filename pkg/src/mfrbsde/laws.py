"""Finite empirical laws and exact Wasserstein distances on the real line.

Laws here are weighted atom lists.  Because everything lives on R, the
p-Wasserstein distance has a closed form: couple the two quantile functions
on a merged partition of the cumulative weights.  That is exact (up to float
rounding), so it doubles as the reference metric for the mean-field solvers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

WEIGHT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class EmpiricalLaw:
    """A finitely supported probability law on the real line.

    values and weights are parallel 1-d arrays; weights are nonnegative and
    sum to 1 within WEIGHT_TOL.  Atoms may repeat; ``canonical`` merges them.
    """

    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if values.ndim != 1 or weights.ndim != 1 or values.size != weights.size:
            raise ValidationError("law atoms need matching 1-d value/weight arrays")
        if values.size == 0:
            raise ValidationError("law needs at least one atom")
        if not np.all(np.isfinite(values)):
            raise ValidationError("law values must be finite")
        if np.any(weights < 0):
            raise ValidationError("law weights must be nonnegative")
        total = float(np.sum(weights))
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValidationError(f"law weights sum to {total!r}, expected 1 within {WEIGHT_TOL}")
        values = values.copy()
        weights = weights.copy()
        values.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self) -> int:
        return self.values.size

    def mean(self) -> float:
        return float(np.sum(self.weights * self.values))

    def abs_moment_root(self, p: float) -> float:
        """(E |X|^p)^(1/p); this equals the p-Wasserstein distance to a unit mass at 0."""
        return float(np.sum(self.weights * np.abs(self.values) ** p) ** (1.0 / p))

    def canonical(self) -> "EmpiricalLaw":
        """Value-sorted copy with exactly equal atoms merged."""
        uniq, inverse = np.unique(self.values, return_inverse=True)
        merged = np.zeros(uniq.size)
        np.add.at(merged, inverse, self.weights)
        return EmpiricalLaw(uniq, merged)


def dirac(x: float) -> EmpiricalLaw:
    return EmpiricalLaw(np.array([float(x)]), np.array([1.0]))


def node_law(lattice, node_values, step: int) -> EmpiricalLaw:
    """Reach-probability-weighted law of a node-indexed quantity at one step.

    Exactly equal node values are merged into one atom.  The lattice argument
    only needs a ``reach`` attribute (list of per-step weight arrays).
    """
    values = np.asarray(node_values, dtype=np.float64)
    weights = np.asarray(lattice.reach[step], dtype=np.float64)
    if values.shape != weights.shape:
        raise ValidationError(
            f"step {step} has {weights.size} nodes but {values.size} values were given"
        )
    uniq, inverse = np.unique(values, return_inverse=True)
    merged = np.zeros(uniq.size)
    np.add.at(merged, inverse, weights)
    return EmpiricalLaw(uniq, merged)


def wasserstein(mu: EmpiricalLaw, nu: EmpiricalLaw, p: float = 1.0) -> float:
    """Exact order-p Wasserstein distance between two laws on the line.

    Both quantile functions are piecewise constant, so integrating
    |F_mu^{-1} - F_nu^{-1}|^p over a merged partition of cumulative weights
    gives the distance without any optimisation.
    """
    if p < 1.0:
        raise ValidationError(f"wasserstein order must satisfy p >= 1, got {p}")
    order_a = np.argsort(mu.values, kind="stable")
    order_b = np.argsort(nu.values, kind="stable")
    xa, ca = mu.values[order_a], np.cumsum(mu.weights[order_a])
    xb, cb = nu.values[order_b], np.cumsum(nu.weights[order_b])
    top = min(ca[-1], cb[-1])
    edges = np.union1d(ca, cb)
    edges = edges[edges <= top]
    if edges.size == 0 or edges[-1] < top:
        edges = np.append(edges, top)
    lo = np.concatenate(([0.0], edges[:-1]))
    seg = edges - lo
    mid = lo + 0.5 * seg
    ia = np.minimum(np.searchsorted(ca, mid, side="left"), xa.size - 1)
    ib = np.minimum(np.searchsorted(cb, mid, side="left"), xb.size - 1)
    diff = np.abs(xa[ia] - xb[ib])
    seg = np.where(seg > 0.0, seg, 0.0)
    if p == 1.0:
        return float(np.sum(diff * seg))
    return float(np.sum(diff**p * seg) ** (1.0 / p))
