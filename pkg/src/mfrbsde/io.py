"""CSV export of solutions and iteration reports.

Each file starts with a versioned comment line ("# mfrbsde-csv v1 <kind>")
followed by a plain header row.  Floats are written with repr so that files
round-trip bit-exactly and reruns of the same configuration are
byte-identical.
"""

from __future__ import annotations

import csv
import math

from .reflected_solver import ReflectedSolution

FORMAT_TAG = "mfrbsde-csv v1"


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _open_writer(handle, kind: str, header):
    handle.write(f"# {FORMAT_TAG} {kind}\n")
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(header)
    return writer


def write_solution_csv(path, solution) -> None:
    """Node table of a plain or reflected solution.

    Columns: step, node, parent, branch (-1 for the no-jump branch), reach,
    y, one u column per mark, and for reflected solutions the barrier, the
    one-step push dk and the running K.
    """
    lat = solution.lattice
    marks = lat.comp.mark_space.marks
    reflected = isinstance(solution, ReflectedSolution)
    header = ["step", "node", "parent", "branch", "reach", "y"]
    header += [f"u_{m}" for m in marks]
    if reflected:
        header += ["h", "dk", "k"]
    kind = "reflected" if reflected else "solution"
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _open_writer(handle, kind, header)
        for i in range(lat.n_steps + 1):
            y_i = solution.y[i]
            u_i = solution.u[i] if i < lat.n_steps else None
            if reflected:
                h_i = solution.obstacle_values[i] if i < lat.n_steps else None
                dk_i = solution.dk[i] if i < lat.n_steps else None
                k_i = solution.k[i]
            for j in range(lat.n_nodes[i]):
                row = [
                    i,
                    j,
                    int(lat.parent[i][j]) if i > 0 else -1,
                    int(lat.branch[i][j]) if i > 0 else -1,
                    _fmt(float(lat.reach[i][j])),
                    _fmt(float(y_i[j])),
                ]
                for e in range(len(marks)):
                    row.append(_fmt(float(u_i[j, e])) if u_i is not None else _fmt(0.0))
                if reflected:
                    h_val = float(h_i[j]) if h_i is not None else -math.inf
                    row.append(_fmt(h_val))
                    row.append(_fmt(float(dk_i[j])) if dk_i is not None else _fmt(0.0))
                    row.append(_fmt(float(k_i[j])))
                writer.writerow(row)


def write_iterations_csv(path, report) -> None:
    """Per-iteration Picard records: gaps, ratios and the predicted alpha."""
    header = ["window_lo", "window_hi", "iteration", "sup_gap", "law_gap", "ratio", "alpha"]
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _open_writer(handle, "iterations", header)
        for lo, hi, it, gap, law_gap, ratio, alpha in report.to_rows():
            writer.writerow(
                [lo, hi, it, _fmt(float(gap)), _fmt(float(law_gap)), _fmt(float(ratio)), _fmt(float(alpha))]
            )


def write_moments_csv(path, report) -> None:
    """Per-iteration exponential moment monitors (quadratic regime)."""
    header = ["window_lo", "window_hi", "iteration", "exp_sup", "u_integral", "k_terminal"]
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _open_writer(handle, "moments", header)
        for w in report.windows:
            for r in w.records:
                if r.moments is None:
                    continue
                writer.writerow(
                    [
                        w.lo,
                        w.hi,
                        r.iteration,
                        _fmt(r.moments["exp_sup"]),
                        _fmt(r.moments["u_integral"]),
                        _fmt(r.moments["k_terminal"]),
                    ]
                )


def write_check_csv(path, kind: str, rows) -> None:
    """Probe or comparison outcomes: (check, ok, value, detail) per row."""
    header = ["check", "ok", "value", "detail"]
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _open_writer(handle, kind, header)
        for check, ok, value, detail in rows:
            writer.writerow([check, int(bool(ok)), _fmt(float(value)), detail])


def write_refine_csv(path, rows) -> None:
    """Grid refinement study rows: (n_steps, y0, reference, abs_error)."""
    header = ["n_steps", "y0", "reference", "abs_error"]
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _open_writer(handle, "refine", header)
        for n_steps, y0, ref, err in rows:
            writer.writerow([n_steps, _fmt(float(y0)), _fmt(float(ref)), _fmt(float(err))])
