"""Local derivatives and collocation moments.

Central differences recover the coefficients of a linear model, and a
Gauss-Hermite grid integrates x**2 under a standard normal exactly.

    python demos/04_local_and_collocation.py
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from sensfan.analysis import local_sensitivity, output_table, quadrature_moments
from sensfan.campaign import Campaign, Normal, ParameterSpec, Uniform
from sensfan.executor import ExecutorConfig, run
from sensfan.models import BuiltInModel, FunctionModel
from sensfan.sampling import perturbation_design, stochastic_collocation
from sensfan.worker import serve


def main() -> None:
    root = Path(tempfile.mkdtemp())
    names = ["x1", "x2", "x3"]
    specs = [ParameterSpec(p, Uniform(-10, 10)) for p in names]
    samples, design = perturbation_design(specs, {"x1": 1.0, "x2": 2.0, "x3": 3.0}, names, 0.01)
    camp = Campaign.create("lsa", specs, root / "lsa")
    camp.add_samples(samples)
    with serve(BuiltInModel("linear", {"coefficients": [2.0, 3.0, 5.0]})) as srv:
        run(None, ExecutorConfig(srv.url), camp)
    print("linear model y = 2 x1 + 3 x2 + 5 x3, central differences:")
    print(output_table(local_sensitivity(design, camp.load_results())).to_text(digits=10))
    camp.close()

    nspec = [ParameterSpec("z", Normal(0.0, 1.0))]
    with serve(FunctionModel(lambda d: d["z"] ** 2)) as srv:
        for order in (2, 4):
            qd = stochastic_collocation(nspec, ["z"], order)
            camp = Campaign.create(f"sc{order}", nspec, root / f"sc{order}")
            camp.add_samples(qd.nodes)
            run(None, ExecutorConfig(srv.url), camp)
            m = quadrature_moments(qd, camp.load_results())
            camp.close()
            print(f"\nz ~ N(0,1), y = z**2, {len(qd.nodes)} nodes: mean {m.mean['y']:.12f} (exact 1), variance {m.variance['y']:.12f} (exact 2)")


if __name__ == "__main__":
    main()
