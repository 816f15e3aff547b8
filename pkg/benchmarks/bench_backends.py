"""Timing comparison of the compiled and pure-numpy kernels.

Runs the backward sweep on a large lattice and the stopping-rule enumeration
on a small one, through both backends, and prints a table with timings and
the cross-backend output difference.  When the compiled backend is disabled
(MFRBSDE_PURE_NUMPY=1 or numba missing) only the numpy rows are produced,
since the "numba" functions would then just be slow Python loops.

Usage: python benchmarks/bench_backends.py [--steps 16] [--repeat 3]
"""

import argparse
import time

import numpy as np

from mfrbsde import _kernels
from mfrbsde._backend import USE_NUMBA, backend_name
from mfrbsde.bsde_solver import TOL_ABS, TOL_REL, flat_arrays
from mfrbsde.drivers import count_terminal, linear_mean_driver, terminal_values
from mfrbsde.mpp_model import build_lattice, make_model, poisson_model
from mfrbsde.reflected_solver import count_stopping_rules


def _sweep_args(lattice, driver, obstacle_level=None):
    offs, cs_g, cj_g = flat_arrays(lattice)
    n = lattice.n_steps
    total = int(offs[-1])
    obs_flat = np.zeros(total)
    has_obs = np.zeros(n, dtype=np.uint8)
    if obstacle_level is not None:
        obs_flat[:] = obstacle_level
        has_obs[:] = 1
    xi = terminal_values(count_terminal(0.3), lattice)
    return (
        offs,
        cs_g,
        cj_g,
        lattice.p_stay,
        lattice.p_jump,
        lattice.comp.dA,
        lattice.comp.phi,
        driver.alpha_sequence(n),
        np.zeros(n),
        driver.pack(),
        obs_flat,
        has_obs,
        xi,
        0,
        n,
        200,
        TOL_ABS,
        TOL_REL,
    )


def _time(fn, args, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=16, help="sweep lattice depth")
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    comp = poisson_model(0.6, 1.0, args.steps)
    lattice = build_lattice(comp)
    driver = linear_mean_driver(0.2, 0.0, c_u=0.1, comp=comp, sin_amp=0.1)
    sweep_args = _sweep_args(lattice, driver, obstacle_level=-0.1)
    print(f"active backend: {backend_name()}")
    print(f"sweep lattice: {args.steps} steps, {lattice.total_nodes} nodes")

    rows = []
    t_np, out_np = _time(_kernels.backward_sweep_numpy, sweep_args, args.repeat)
    rows.append(("wide_sweep", "numpy", t_np, 0.0))
    if USE_NUMBA:
        _kernels.backward_sweep_numba(*sweep_args)
        t_nb, out_nb = _time(_kernels.backward_sweep_numba, sweep_args, args.repeat)
        diff = float(np.max(np.abs(out_nb[0] - out_np[0])))
        rows.append(("wide_sweep", "numba", t_nb, diff))

    # deep, thin lattice: zero intensity collapses the tree to one path, so
    # the per-step batches are tiny and interpreter overhead dominates the
    # numpy path; this is the fine-grid shape the windowed iteration produces
    comp_d = make_model(["a"], 1.0, 4096, 0.0)
    lat_d = build_lattice(comp_d)
    driver_d = linear_mean_driver(0.2, 0.0, comp=comp_d, sin_amp=0.1)
    deep_args = _sweep_args(lat_d, driver_d)
    print(f"deep lattice: {lat_d.n_steps} steps, {lat_d.total_nodes} nodes")
    t_np, out_np = _time(_kernels.backward_sweep_numpy, deep_args, args.repeat)
    rows.append(("deep_sweep", "numpy", t_np, 0.0))
    if USE_NUMBA:
        _kernels.backward_sweep_numba(*deep_args)
        t_nb, out_nb = _time(_kernels.backward_sweep_numba, deep_args, args.repeat)
        diff = float(np.max(np.abs(out_nb[0] - out_np[0])))
        rows.append(("deep_sweep", "numba", t_nb, diff))

    comp_s = poisson_model(0.6, 1.0, 4)
    lat_s = build_lattice(comp_s)
    total_rules = count_stopping_rules(lat_s)
    offs, cs_g, cj_g = flat_arrays(lat_s)
    rules_flat = np.zeros(int(offs[-1]), dtype=np.int64)
    for i in range(lat_s.n_steps + 1):
        rules_flat[offs[i] : offs[i + 1]] = np.asarray(
            [int(c) for c in lat_s._rule_counts[i]], dtype=np.int64
        )
    xi_s = terminal_values(count_terminal(0.3), lat_s)
    snell_args = (
        offs,
        cs_g,
        cj_g,
        lat_s.p_stay,
        lat_s.p_jump,
        comp_s.dA,
        comp_s.phi,
        driver.alpha_sequence(lat_s.n_steps),
        np.zeros(lat_s.n_steps),
        linear_mean_driver(0.2, 0.0, comp=comp_s).pack(),
        rules_flat,
        np.full(int(offs[-1]), -0.1),
        xi_s,
        total_rules,
        200,
        TOL_ABS,
        TOL_REL,
    )
    print(f"snell lattice: {lat_s.n_steps} steps, {total_rules} rules")
    t_np, out_np = _time(_kernels.snell_enumerate_numpy, snell_args, args.repeat)
    rows.append(("snell_enumerate", "numpy", t_np, 0.0))
    if USE_NUMBA:
        _kernels.snell_enumerate_numba(*snell_args)
        t_nb, out_nb = _time(_kernels.snell_enumerate_numba, snell_args, args.repeat)
        diff = float(np.max(np.abs(out_nb[0] - out_np[0])))
        rows.append(("snell_enumerate", "numba", t_nb, diff))

    print()
    print(f"{'kernel':<18} {'backend':<8} {'best time (s)':>14} {'max |diff|':>12}")
    base = {}
    for kernel, backend, t, diff in rows:
        base.setdefault(kernel, t)
        speed = base[kernel] / t if t > 0 else float("inf")
        print(f"{kernel:<18} {backend:<8} {t:>14.6f} {diff:>12.3e}  ({speed:.1f}x vs numpy)")


if __name__ == "__main__":
    main()
