"""Global sensitivity of the Ishigami function, fanned out to a local worker.

Builds a Saltelli design, dispatches every run over HTTP, then compares the
estimated Sobol indices with their closed-form values.

    python demos/01_sobol_ishigami.py [N] [workdir]
"""

from __future__ import annotations

import math
import sys
import tempfile
from pathlib import Path

from sensfan.analysis import output_table, plot_result, sobol_indices
from sensfan.campaign import Campaign, ParameterSpec, Uniform
from sensfan.executor import ExecutorConfig, run
from sensfan.models import BuiltInModel
from sensfan.sampling import saltelli_design
from sensfan.worker import serve


def closed_form(a: float = 7.0, b: float = 0.1) -> dict[str, tuple[float, float]]:
    v1 = (1 + b * math.pi**4 / 5) ** 2 / 2
    v2 = a**2 / 8
    v13 = 8 * b**2 * math.pi**8 / 225
    v = v1 + v2 + v13
    return {"x1": (v1 / v, (v1 + v13) / v), "x2": (v2 / v, v2 / v), "x3": (0.0, v13 / v)}


def main() -> None:
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 2048
    workdir = Path(sys.argv[2]) if len(sys.argv) > 2 else Path(tempfile.mkdtemp()) / "ishigami"
    names = ["x1", "x2", "x3"]
    specs = [ParameterSpec(p, Uniform(-math.pi, math.pi)) for p in names]
    samples, design = saltelli_design(specs, names, n)
    print(f"Saltelli design: N={n}, d=3 -> {len(samples)} runs")

    camp = Campaign.create("ishigami", specs, workdir)
    camp.add_samples(samples)
    with serve(BuiltInModel("ishigami")) as srv:
        summary = run(None, ExecutorConfig(srv.url, max_load=64), camp)
    print(f"dispatched {summary.completed}/{summary.total} in {summary.wall_time_ms / 1000:.2f} s")

    result = sobol_indices(design, camp.load_results())
    camp.close()
    print(output_table(result).to_text())

    exact = closed_form()
    print("\nparameter   S exact   ST exact")
    for p in names:
        print(f"{p:>9}  {exact[p][0]:8.4f}  {exact[p][1]:9.4f}")
    plot_result(result, workdir / "sobol.svg")
    print(f"\nbar chart written to {workdir / 'sobol.svg'}")


if __name__ == "__main__":
    main()
