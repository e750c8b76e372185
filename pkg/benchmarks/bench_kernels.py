"""Compiled versus numpy projection kernels.

Times the forward projection, its adjoint and a full log-posterior
evaluation (value, and value plus gradient) on synthetic scenarios for each
available backend, and checks that both backends agree.

    python benchmarks/bench_kernels.py [--repeat 5] [--regions 6 12]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from hivepi import kernels
from hivepi.engine import project, project_adjoint
from hivepi.synthetic import ScenarioSpec, synthesize


def best_time(fn, repeat: int) -> float:
    """Minimum per-call seconds over ``repeat`` timed batches."""
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def bench_scenario(region_count: int, repeat: int):
    sc, _, obs = synthesize(ScenarioSpec(region_count=region_count))
    x = sc.truth.pack()
    rows = {}
    ref = None
    for backend in ("python", "compiled"):
        if backend == "compiled" and kernels.compiled is None:
            continue
        post = sc.posterior(obs, backend=backend)
        coef = post.coefficients(x)
        traj = project(coef, sc.model, backend)
        g_states = np.ones_like(traj.states)
        g_lam = np.ones_like(traj.lam)
        rows[backend] = {
            "forward": best_time(lambda: project(coef, sc.model, backend), repeat),
            "adjoint": best_time(lambda: project_adjoint(traj, coef, sc.model, g_states, g_lam, backend), repeat),
            "log_posterior": best_time(lambda: post.log_posterior(x), repeat),
            "value_and_grad": best_time(lambda: post.value_and_grad(x), repeat),
        }
        if ref is None:
            ref = traj.states
        else:
            rel = float(np.max(np.abs(traj.states - ref) / np.maximum(np.abs(ref), 1.0)))
            rows[backend]["max_rel_diff"] = rel
    return sc.model.grid.size, rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--regions", type=int, nargs="+", default=[6, 12])
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        print("compiled kernel not built; timing the numpy fallback only")
    for n in args.regions:
        T, rows = bench_scenario(n, args.repeat)
        print(f"\n{n} regions, {T} grid points (microseconds per call)")
        print(f"{'operation':16s}" + "".join(f"{b:>12s}" for b in rows) + ("   speedup" if len(rows) == 2 else ""))
        for op in ("forward", "adjoint", "log_posterior", "value_and_grad"):
            vals = [rows[b][op] for b in rows]
            line = f"{op:16s}" + "".join(f"{v * 1e6:12.1f}" for v in vals)
            if len(vals) == 2:
                line += f"{vals[0] / vals[1]:9.1f}x"
            print(line)
        if "compiled" in rows and "max_rel_diff" in rows["compiled"]:
            print(f"max relative state difference between backends: {rows['compiled']['max_rel_diff']:.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
