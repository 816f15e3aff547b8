"""Batch experiment runner.

Experiments are described by a TOML file with sections [model], [driver],
[obstacle], [terminal], [params] and [run]; parsing is strict, so unknown
keys are rejected with their full key path ("params.gamma3").  Subcommands
map one to one onto the library surface: lattice, solve, reflect, picard,
validate, oracle-check, refine, and run (which executes the operation list
from the config).  Every invocation writes a manifest next to its outputs,
even on failure, and reruns with the same config and seed are byte-identical.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 validation
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib as _toml
except ModuleNotFoundError:
    import tomli as _toml

from . import __version__
from ._backend import USE_NUMBA, backend_name
from .bsde_solver import solve_bsde
from .drivers import (
    DriverSpec,
    ObstacleSpec,
    affine_obstacle,
    constant_obstacle,
    constant_terminal,
    convexity_check,
    count_terminal,
    discount_driver,
    envelope_check,
    jump_exp_driver,
    linear_driver,
    linear_mean_driver,
    lipschitz_check,
    mark_weighted_terminal,
    mean_driver,
    terminal_consistency,
    terminal_values,
    zero_driver,
)
from .errors import ConfigError, MfrbsdeError, SolverError, ValidationError
from .io import (
    write_check_csv,
    write_iterations_csv,
    write_moments_csv,
    write_refine_csv,
    write_solution_csv,
)
from .meanfield import MeanFieldParams, picard_solve
from .mpp_model import (
    build_lattice,
    compensator_residual,
    lattice_compensated_expectation,
    lattice_to_text,
    make_model,
)
from .oracle import exact_meanfield_fixed_point, exact_tree_solve
from .reflected_solver import solve_reflected

_DRIVER_KEYS = {
    "zero": set(),
    "linear": {"a"},
    "discount": {"beta"},
    "mean": {"b"},
    "linear_mean": {"a", "b", "c_u", "sin_amp"},
    "jump_exp": {"lam", "coef", "coef_y", "coef_mean", "alpha", "coef_alpha"},
}

_OBSTACLE_KEYS = {
    "none": set(),
    "constant": {"level"},
    "affine": {"const", "coef_y", "coef_mean"},
}

_TERMINAL_KEYS = {
    "constant": {"value"},
    "count": {"scale", "offset"},
    "mark_weighted": {"weights", "offset"},
}

_SCHEMA = {
    "model": {
        "marks", "horizon", "steps", "phi", "clock", "clock_scale",
        "clock_power", "clock_values", "max_nodes",
    },
    "driver": {"name"} | set().union(*_DRIVER_KEYS.values()),
    "obstacle": {"name"} | set().union(*_OBSTACLE_KEYS.values()),
    "terminal": {"name"} | set().union(*_TERMINAL_KEYS.values()),
    "params": {
        "p", "eta", "beta", "gamma1", "gamma2", "cf", "regime", "theta_grid",
        "tol_fixed_point", "max_picard", "init",
    },
    "run": {"operations", "seed", "out", "paths", "refine_steps", "oracle_tol"},
}

OPERATIONS = ("lattice", "solve", "reflect", "picard", "validate", "oracle-check", "refine")


def load_config(path) -> dict:
    """Parse and strictly validate a TOML experiment config."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = _toml.loads(raw.decode("utf-8"))
    except (_toml.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from None
    for section, body in cfg.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a table")
        for key in body:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
    if "model" not in cfg:
        raise ConfigError("the model section is required")
    return cfg


def _num(body: dict, section: str, key: str, default=None) -> float:
    if key not in body:
        if default is None:
            raise ConfigError(f"{section}.{key} is required")
        return float(default)
    val = body[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{section}.{key} must be a number")
    return float(val)


def _int(body: dict, section: str, key: str, default=None) -> int:
    if key not in body:
        if default is None:
            raise ConfigError(f"{section}.{key} is required")
        return int(default)
    val = body[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"{section}.{key} must be an integer")
    return val


def _restrict(section: str, body: dict, name: str, allowed: set):
    extra = sorted(set(body) - {"name"} - allowed)
    if extra:
        raise ConfigError(f"{section}.{extra[0]} is not valid for {section} {name!r}")


def build_model(cfg: dict):
    body = cfg["model"]
    marks = body.get("marks")
    if not isinstance(marks, list) or not all(isinstance(m, str) for m in marks):
        raise ConfigError("model.marks must be a list of mark names")
    phi = body.get("phi")
    if phi is None:
        raise ConfigError("model.phi is required")
    kwargs = {}
    clock = body.get("clock", "linear")
    if clock not in ("linear", "power", "explicit"):
        raise ConfigError(f"model.clock must be linear, power or explicit, got {clock!r}")
    if "clock_values" in body:
        kwargs["clock_values"] = np.asarray(body["clock_values"], dtype=np.float64)
    comp = make_model(
        marks,
        _num(body, "model", "horizon"),
        _int(body, "model", "steps"),
        phi,
        clock=clock,
        clock_scale=_num(body, "model", "clock_scale", 1.0),
        clock_power=_num(body, "model", "clock_power", 2.0),
        **kwargs,
    )
    max_nodes = _int(body, "model", "max_nodes", 10**6)
    return comp, build_lattice(comp, max_nodes=max_nodes)


def build_driver(cfg: dict, comp) -> DriverSpec:
    if "driver" not in cfg:
        raise ConfigError("the driver section is required for this operation")
    body = cfg["driver"]
    name = body.get("name")
    if name is None:
        raise ConfigError("driver.name is required")
    if name not in _DRIVER_KEYS:
        raise ConfigError(f"driver.name: unknown driver {name!r}")
    _restrict("driver", body, name, _DRIVER_KEYS[name])
    if name == "zero":
        return zero_driver()
    if name == "linear":
        return linear_driver(_num(body, "driver", "a"))
    if name == "discount":
        return discount_driver(_num(body, "driver", "beta"))
    if name == "mean":
        return mean_driver(_num(body, "driver", "b"))
    if name == "linear_mean":
        return linear_mean_driver(
            _num(body, "driver", "a", 0.0),
            _num(body, "driver", "b", 0.0),
            c_u=_num(body, "driver", "c_u", 0.0),
            comp=comp,
            sin_amp=_num(body, "driver", "sin_amp", 0.0),
        )
    alpha = body.get("alpha", 0.0)
    if isinstance(alpha, list):
        alpha = np.asarray(alpha, dtype=np.float64)
    else:
        alpha = _num(body, "driver", "alpha", 0.0)
    return jump_exp_driver(
        _num(body, "driver", "lam", 1.0),
        coef=_num(body, "driver", "coef", 1.0),
        coef_y=_num(body, "driver", "coef_y", 0.0),
        coef_mean=_num(body, "driver", "coef_mean", 0.0),
        alpha=alpha,
        coef_alpha=_num(body, "driver", "coef_alpha", 0.0),
    )


def build_obstacle(cfg: dict) -> ObstacleSpec | None:
    body = cfg.get("obstacle")
    if body is None:
        return None
    name = body.get("name")
    if name is None:
        raise ConfigError("obstacle.name is required")
    if name not in _OBSTACLE_KEYS:
        raise ConfigError(f"obstacle.name: unknown obstacle {name!r}")
    _restrict("obstacle", body, name, _OBSTACLE_KEYS[name])
    if name == "none":
        return None
    if name == "constant":
        return constant_obstacle(_num(body, "obstacle", "level"))
    return affine_obstacle(
        _num(body, "obstacle", "const", 0.0),
        _num(body, "obstacle", "coef_y", 0.0),
        _num(body, "obstacle", "coef_mean", 0.0),
    )


def build_terminal(cfg: dict):
    if "terminal" not in cfg:
        raise ConfigError("the terminal section is required for this operation")
    body = cfg["terminal"]
    name = body.get("name")
    if name is None:
        raise ConfigError("terminal.name is required")
    if name not in _TERMINAL_KEYS:
        raise ConfigError(f"terminal.name: unknown terminal {name!r}")
    _restrict("terminal", body, name, _TERMINAL_KEYS[name])
    if name == "constant":
        return constant_terminal(_num(body, "terminal", "value"))
    if name == "count":
        return count_terminal(
            _num(body, "terminal", "scale", 1.0), _num(body, "terminal", "offset", 0.0)
        )
    weights = body.get("weights")
    if not isinstance(weights, dict):
        raise ConfigError("terminal.weights must be a table of mark -> weight")
    return mark_weighted_terminal(
        {str(k): float(v) for k, v in weights.items()},
        offset=_num(body, "terminal", "offset", 0.0),
    )


def build_params(cfg: dict) -> MeanFieldParams:
    if "params" not in cfg:
        raise ConfigError("the params section is required for this operation")
    body = cfg["params"]
    regime = body.get("regime", "lipschitz")
    theta = body.get("theta_grid", [0.5, 0.9, 0.99])
    if not isinstance(theta, list):
        raise ConfigError("params.theta_grid must be a list")
    cf = _num(body, "params", "cf", -1.0)
    return MeanFieldParams(
        eta=_num(body, "params", "eta"),
        beta=_num(body, "params", "beta"),
        gamma1=_num(body, "params", "gamma1"),
        gamma2=_num(body, "params", "gamma2"),
        p=_num(body, "params", "p", 2.0),
        cf=None if cf < 0 else cf,
        theta_grid=tuple(float(t) for t in theta),
        tol_fixed_point=_num(body, "params", "tol_fixed_point", 1e-10),
        max_picard=_int(body, "params", "max_picard", 200),
        regime=regime,
    )


# ---------------------------------------------------------------------------
# operations


class _Context:
    """Lazily built experiment state shared by the operations."""

    def __init__(self, cfg, seed, out_dir, verbose):
        self.cfg = cfg
        self.seed = seed
        self.out = out_dir
        self.verbose = verbose
        self.outputs = []
        self.comp, self.lattice = build_model(cfg)
        self._driver = None
        self._obstacle = None
        self._terminal = None
        self._params = None

    @property
    def driver(self):
        if self._driver is None:
            self._driver = build_driver(self.cfg, self.comp)
        return self._driver

    @property
    def obstacle(self):
        if self._obstacle is None:
            self._obstacle = build_obstacle(self.cfg)
        return self._obstacle

    @property
    def terminal(self):
        if self._terminal is None:
            self._terminal = build_terminal(self.cfg)
        return self._terminal

    @property
    def params(self):
        if self._params is None:
            self._params = build_params(self.cfg)
        return self._params

    def run_section(self) -> dict:
        return self.cfg.get("run", {})

    def emit(self, filename: str) -> Path:
        self.outputs.append(filename)
        return self.out / filename

    def log(self, message: str):
        if self.verbose:
            print(message)


def _constant_obstacle_rows(ctx):
    obstacle = ctx.obstacle
    if obstacle is None:
        raise ValidationError("the reflect operation needs an obstacle section")
    if obstacle.reads_state:
        raise ValidationError(
            "the obstacle depends on the state or its law; use the picard operation"
        )
    lat = ctx.lattice
    return [
        np.full(lat.n_nodes[i], obstacle.eval(i, 0.0, None))
        for i in range(lat.n_steps)
    ]


def _op_lattice(ctx: _Context):
    path = ctx.emit("lattice.txt")
    path.write_text(lattice_to_text(ctx.lattice), encoding="utf-8")
    ctx.log(f"lattice: {ctx.lattice.total_nodes} nodes -> {path.name}")


def _op_solve(ctx: _Context):
    sol = solve_bsde(ctx.lattice, ctx.driver, ctx.terminal)
    write_solution_csv(ctx.emit("solution.csv"), sol)
    ctx.log(f"solve: y0 = {sol.y0()!r}")


def _op_reflect(ctx: _Context):
    sol = solve_reflected(
        ctx.lattice, ctx.driver, _constant_obstacle_rows(ctx), ctx.terminal
    )
    write_solution_csv(ctx.emit("reflected.csv"), sol)
    ctx.log(f"reflect: y0 = {sol.y0()!r}")


def _op_picard(ctx: _Context):
    init = ctx.cfg.get("params", {}).get("init", "expectation")
    sol, report = picard_solve(
        ctx.lattice, ctx.driver, ctx.obstacle, ctx.terminal, ctx.params, init=init
    )
    write_solution_csv(ctx.emit("picard_solution.csv"), sol)
    write_iterations_csv(ctx.emit("iterations.csv"), report)
    if ctx.params.regime == "quadratic":
        write_moments_csv(ctx.emit("moments.csv"), report)
    ctx.log("picard:\n" + report.summary())


def _op_validate(ctx: _Context):
    run = ctx.run_section()
    paths = _int(run, "run", "paths", 20000)
    rows = []
    comp, lat = ctx.comp, ctx.lattice
    load = float(np.max(np.sum(comp.phi, axis=1) * comp.dA, initial=0.0))
    rows.append(("model_feasible", True, load, "max step load sum_e phi dA"))
    driver = ctx.driver
    env = envelope_check(driver, comp)
    rows.append(("envelope", bool(env), float(env.checked), "probe points"))
    if driver.regime == "lipschitz":
        lip = lipschitz_check(driver, comp)
        rows.append(("lipschitz", bool(lip), float(lip.checked), "probe pairs"))
    if driver.convex_in_u:
        conv = convexity_check(driver, comp)
        rows.append(("convexity", bool(conv), float(conv.checked), "midpoint probes"))
    if ctx.obstacle is not None:
        cons = terminal_consistency(terminal_values(ctx.terminal, lat), ctx.obstacle, lat)
        rows.append(
            ("terminal_consistency", bool(cons), cons.worst_violation, "worst barrier excess")
        )
    exact = lattice_compensated_expectation(lat, 1.0)
    rows.append(("compensated_exact", abs(exact) <= 1e-12, exact, "exhaustive residual"))
    mean, stderr = compensator_residual(comp, 1.0, paths, ctx.seed)
    rows.append(
        ("compensator_mc", abs(mean) <= 4.0 * stderr, mean, f"stderr {stderr!r} on {paths} paths")
    )
    write_check_csv(ctx.emit("validate.csv"), "validate", rows)
    bad = [r[0] for r in rows if not r[1]]
    if bad:
        raise ValidationError(f"validation probes failed: {', '.join(bad)}")
    ctx.log(f"validate: {len(rows)} probes ok")


def _op_oracle_check(ctx: _Context):
    run = ctx.run_section()
    tol = _num(run, "run", "oracle_tol", 1e-8)
    lat = ctx.lattice
    driver = ctx.driver
    obstacle = ctx.obstacle
    rows = []
    coupled = driver.reads_law or (obstacle is not None and obstacle.reads_state)
    if not coupled:
        exact = exact_tree_solve(lat, driver, ctx.terminal)
        sol = solve_bsde(lat, driver, ctx.terminal)
        err = max(
            float(np.max(np.abs(sol.y[i] - exact["y"][i]), initial=0.0))
            for i in range(lat.n_steps + 1)
        )
        rows.append(("plain_vs_exact", err <= 1e-12, err, "max node error"))
        if obstacle is not None:
            obs_rows = _constant_obstacle_rows(ctx)
            exact_r = exact_tree_solve(lat, driver, ctx.terminal, obstacle_values=obs_rows)
            sol_r = solve_reflected(lat, driver, obs_rows, ctx.terminal)
            err_r = max(
                float(np.max(np.abs(sol_r.y[i] - exact_r["y"][i]), initial=0.0))
                for i in range(lat.n_steps + 1)
            )
            rows.append(("reflected_vs_exact", err_r <= 1e-12, err_r, "max node error"))
    if "params" in ctx.cfg:
        fixed = exact_meanfield_fixed_point(lat, driver, obstacle, ctx.terminal)
        sol_m, report = picard_solve(lat, driver, obstacle, ctx.terminal, ctx.params)
        err_m = max(
            float(np.max(np.abs(sol_m.y[i] - fixed["y"][i]), initial=0.0))
            for i in range(lat.n_steps + 1)
        )
        rows.append(
            ("picard_vs_exact", err_m <= tol, err_m, f"{report.total_iterations} iterations")
        )
    if not rows:
        raise ValidationError("nothing to compare: coupled data and no params section")
    write_check_csv(ctx.emit("oracle.csv"), "oracle", rows)
    bad = [r[0] for r in rows if not r[1]]
    if bad:
        raise SolverError(f"oracle comparison failed: {', '.join(bad)}")
    ctx.log(f"oracle-check: {len(rows)} comparisons ok")


def _op_refine(ctx: _Context):
    run = ctx.run_section()
    steps_list = run.get("refine_steps", [8, 16, 32, 64, 128, 256])
    if not isinstance(steps_list, list) or not all(
        isinstance(s, int) and s >= 1 for s in steps_list
    ):
        raise ConfigError("run.refine_steps must be a list of positive integers")
    body = ctx.cfg["model"]
    phi = body.get("phi")
    if isinstance(phi, list) and phi and isinstance(phi[0], list):
        raise ValidationError("refine needs a time-constant phi table")
    if "clock_values" in body:
        raise ValidationError("refine cannot rebuild an explicit clock sequence")
    if ctx.driver.reads_law:
        raise ValidationError("refine runs the plain solver; the driver must not read the law")
    term_body = ctx.cfg.get("terminal", {})
    results = []
    for steps in steps_list:
        cfg_n = dict(ctx.cfg)
        cfg_n["model"] = dict(body)
        cfg_n["model"]["steps"] = steps
        comp_n, lat_n = build_model(cfg_n)
        driver_n = build_driver(cfg_n, comp_n)
        terminal_n = build_terminal(cfg_n)
        sol = solve_bsde(lat_n, driver_n, terminal_n)
        results.append((steps, sol.y0(), float(comp_n.clock[-1])))
    if ctx.cfg["driver"].get("name") == "discount" and term_body.get("name") == "constant":
        beta = _num(ctx.cfg["driver"], "driver", "beta")
        x = _num(term_body, "terminal", "value")
        reference = {steps: x * np.exp(-beta * a_T) for steps, _, a_T in results}
    else:
        finest = results[-1][1]
        reference = {steps: finest for steps, _, _ in results}
    rows = [
        (steps, y0, reference[steps], abs(y0 - reference[steps]))
        for steps, y0, _ in results
    ]
    write_refine_csv(ctx.emit("refine.csv"), rows)
    ctx.log(f"refine: {len(rows)} grid levels")


_OPS = {
    "lattice": _op_lattice,
    "solve": _op_solve,
    "reflect": _op_reflect,
    "picard": _op_picard,
    "validate": _op_validate,
    "oracle-check": _op_oracle_check,
    "refine": _op_refine,
}


# ---------------------------------------------------------------------------
# runner


def run_experiment(config_path, operations=None, out_dir=None, seed=None, threads=None, verbose=0) -> Path:
    """Execute operations from a config; returns the output directory.

    The manifest (config digest, seed, versions, backend, status, outputs) is
    written even when an operation fails; no timestamps appear anywhere, so a
    rerun with identical config and seed is byte-identical.
    """
    config_path = Path(config_path)
    cfg = load_config(config_path)
    run = cfg.get("run", {})
    for key in run:
        if key not in _SCHEMA["run"]:
            raise ConfigError(f"unknown key run.{key}")
    if operations is None:
        operations = run.get("operations")
        if operations is None:
            raise ConfigError("run.operations is required by the run subcommand")
    if not isinstance(operations, (list, tuple)) or not operations:
        raise ConfigError("run.operations must be a non-empty list")
    for op in operations:
        if op not in _OPS:
            raise ConfigError(f"unknown operation {op!r} (choose from {', '.join(OPERATIONS)})")
    if seed is None:
        seed = _int(run, "run", "seed", 0)
    if threads is not None and USE_NUMBA:
        import numba

        try:
            numba.set_num_threads(max(1, min(int(threads), numba.get_num_threads())))
        except ValueError:
            pass
    out = Path(out_dir) if out_dir is not None else Path(run.get("out", "mfrbsde_out"))
    out.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256(config_path.read_bytes()).hexdigest()
    status, error = "ok", None
    ctx = None
    try:
        ctx = _Context(cfg, seed, out, verbose)
        for op in operations:
            _OPS[op](ctx)
    except MfrbsdeError as exc:
        status, error = "error", f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest = {
            "format": "mfrbsde-manifest 1",
            "operations": list(operations),
            "config_name": config_path.name,
            "config_sha256": digest,
            "seed": int(seed),
            "backend": backend_name(),
            "versions": _versions(),
            "status": status,
            "error": error,
            "outputs": ctx.outputs if ctx is not None else [],
        }
        with open(out / "manifest.json", "w", encoding="utf-8") as handle:
            json.dump(manifest, handle, indent=2, sort_keys=True)
            handle.write("\n")
    return out


def _versions() -> dict:
    versions = {
        "mfrbsde": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    if USE_NUMBA:
        import numba

        versions["numba"] = numba.__version__
    return versions


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfrbsde",
        description="scenario-lattice solvers for mean-field reflected equations "
        "driven by marked point processes",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in OPERATIONS + ("run",):
        p = sub.add_parser(name, help=f"{name} operation" if name != "run" else "run the config's operation list")
        p.add_argument("--config", required=True, help="path to the TOML experiment config")
        p.add_argument("--out", default=None, help="output directory (overrides run.out)")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--threads", type=int, default=None, help="cap on kernel threads")
        p.add_argument("-v", "--verbose", action="count", default=0)
    args = parser.parse_args(argv)
    operations = None if args.command == "run" else [args.command]
    try:
        run_experiment(
            args.config,
            operations=operations,
            out_dir=args.out,
            seed=args.seed,
            threads=args.threads,
            verbose=args.verbose,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except MfrbsdeError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
