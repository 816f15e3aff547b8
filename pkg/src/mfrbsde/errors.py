"""Exception types shared across the package.

Every error raised on purpose derives from MfrbsdeError so callers (and the
command line driver) can map failures onto exit codes without string matching.
"""

from __future__ import annotations


class MfrbsdeError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ModelError(MfrbsdeError):
    """Invalid model data: bad clock, infeasible intensities, node cap, ..."""


class ValidationError(MfrbsdeError):
    """A declared property failed a check (envelope, consistency, admissibility)."""


class SolverError(MfrbsdeError):
    """Numerical failure inside a solver (non-convergence, overflow)."""


class GuardError(MfrbsdeError):
    """A brute-force routine was asked to run above its enumeration guard."""


class ConfigError(MfrbsdeError):
    """Experiment configuration could not be parsed or contains unknown keys."""
