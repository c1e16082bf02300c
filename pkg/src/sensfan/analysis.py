"""Sensitivity measures computed from completed runs.

* Sobol' first-order and total indices from a Saltelli design, with
  bootstrap confidence intervals.
* Central-difference derivatives from a one-at-a-time perturbation design.
* Mean and variance from a stochastic-collocation (quadrature) design.

Runs are matched to design slots by ``run_id``, never by position.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .campaign import RunRecord
from .sampling import PerturbationDesign, QuadratureDesign, SaltelliDesign


class MissingRun(KeyError):
    pass


def _outputs_by_id(results: Iterable[RunRecord]) -> dict[int, dict[str, float]]:
    return {r.run_id: r.outputs for r in results if r.outputs is not None}


def _output_names(by_id: dict[int, dict[str, float]], ids: Sequence[int]) -> list[str]:
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise MissingRun(f"{len(missing)} design runs have no result (first: {missing[:5]})")
    return sorted(by_id[ids[0]]) if ids else []


# --------------------------------------------------------------------------
# Sobol' indices
# --------------------------------------------------------------------------


@dataclass
class OutputSobol:
    """Indices for one output. ``degenerate`` marks zero output variance, in
    which case the index dicts are empty."""

    output: str
    parameters: tuple[str, ...]
    first: dict[str, float]
    total: dict[str, float]
    first_ci: dict[str, float]
    total_ci: dict[str, float]
    variance: float
    n: int
    degenerate: bool = False


@dataclass
class SobolResult:
    outputs: dict[str, OutputSobol] = field(default_factory=dict)

    def __getitem__(self, name: str) -> OutputSobol:
        return self.outputs[name]


def _estimate(fa: np.ndarray, fb: np.ndarray, fab: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """First-order (Saltelli 2010) and total (Jansen) estimators.

    ``fa`` and ``fb`` have shape (..., N); ``fab`` has shape (..., d, N).
    """
    var = np.var(np.concatenate([fa, fb], axis=-1), axis=-1, ddof=1)
    s = np.mean(fb[..., None, :] * (fab - fa[..., None, :]), axis=-1) / var[..., None]
    st = 0.5 * np.mean((fa[..., None, :] - fab) ** 2, axis=-1) / var[..., None]
    return s, st, var


def sobol_indices(
    design: SaltelliDesign,
    results: Iterable[RunRecord],
    bootstrap_n: int = 100,
    *,
    confidence: float = 0.95,
    seed: int | None = 0,
) -> SobolResult:
    by_id = _outputs_by_id(results)
    n, d = design.base_count, design.dimension
    ids = np.arange(design.start_id, design.start_id + design.total_runs).reshape(n, d + 2)
    names = _output_names(by_id, list(ids.ravel()))
    rng = np.random.default_rng(seed)
    alpha = (1 - confidence) / 2
    out = SobolResult()
    for name in names:
        y = np.array([[by_id[int(i)][name] for i in row] for row in ids])  # (N, d+2)
        fa, fb, fab = y[:, 0], y[:, d + 1], y[:, 1 : d + 1].T
        params = design.varied_names
        if np.ptp(np.concatenate([fa, fb])) == 0:
            out.outputs[name] = OutputSobol(name, params, {}, {}, {}, {}, 0.0, n, degenerate=True)
            continue
        s, st, var = _estimate(fa, fb, fab)
        s_ci = st_ci = np.full(d, math.nan)
        if bootstrap_n > 0:
            idx = rng.integers(0, n, size=(bootstrap_n, n))
            with np.errstate(divide="ignore", invalid="ignore"):
                bs, bst, _ = _estimate(fa[idx], fb[idx], fab[:, idx].transpose(1, 0, 2))
            s_ci = (np.nanquantile(bs, 1 - alpha, axis=0) - np.nanquantile(bs, alpha, axis=0)) / 2
            st_ci = (np.nanquantile(bst, 1 - alpha, axis=0) - np.nanquantile(bst, alpha, axis=0)) / 2
        out.outputs[name] = OutputSobol(
            name,
            params,
            dict(zip(params, map(float, s))),
            dict(zip(params, map(float, st))),
            dict(zip(params, map(float, s_ci))),
            dict(zip(params, map(float, st_ci))),
            float(var),
            n,
        )
    return out


# --------------------------------------------------------------------------
# Local sensitivity
# --------------------------------------------------------------------------


@dataclass
class LocalSensitivityResult:
    derivatives: dict[str, dict[str, float]]
    steps: dict[str, float]


def local_sensitivity(design: PerturbationDesign, results: Iterable[RunRecord]) -> LocalSensitivityResult:
    by_id = _outputs_by_id(results)
    ids = list(range(design.start_id, design.start_id + design.total_runs))
    names = _output_names(by_id, ids)
    deriv: dict[str, dict[str, float]] = {}
    for name in names:
        deriv[name] = {}
        for i, p in enumerate(design.varied_names):
            plus = by_id[design.run_id(("plus", i))][name]
            minus = by_id[design.run_id(("minus", i))][name]
            deriv[name][p] = (plus - minus) / (2 * design.steps[p])
    return LocalSensitivityResult(deriv, dict(design.steps))


# --------------------------------------------------------------------------
# Quadrature moments
# --------------------------------------------------------------------------


@dataclass
class MomentResult:
    mean: dict[str, float]
    variance: dict[str, float]


def quadrature_moments(design: QuadratureDesign, results: Iterable[RunRecord]) -> MomentResult:
    by_id = _outputs_by_id(results)
    ids = [s.run_id for s in design.nodes]
    names = _output_names(by_id, ids)
    w = np.asarray(design.weights)
    mean, variance = {}, {}
    for name in names:
        f = np.array([by_id[i][name] for i in ids])
        m = float(np.dot(w, f))
        v = float(np.dot(w, f * f) - m * m)
        if v < -1e-12 * max(1.0, m * m):
            raise ArithmeticError(f"negative variance {v} for output {name!r}; are the weights valid?")
        mean[name], variance[name] = m, max(v, 0.0)
    return MomentResult(mean, variance)


# --------------------------------------------------------------------------
# Tables
# --------------------------------------------------------------------------


@dataclass
class Table:
    header: list[str]
    rows: list[list]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for row in self.rows:
            w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> Table:
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        rows = []
        for raw in reader:
            row = []
            for v in raw:
                try:
                    row.append(float(v))
                except ValueError:
                    row.append(v if v != "" else None)
            rows.append(row)
        return cls(header, rows)

    def to_text(self, digits: int = 4) -> str:
        def fmt(v):
            if isinstance(v, float):
                return "nan" if math.isnan(v) else f"{v:.{digits}f}"
            return "-" if v is None else str(v)

        cells = [self.header] + [[fmt(v) for v in row] for row in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.header))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def output_table(result: SobolResult | LocalSensitivityResult | MomentResult) -> Table:
    """Tabulate a result, rows ordered by output then parameter name."""
    if isinstance(result, SobolResult):
        header = ["output", "parameter", "S", "S_conf", "ST", "ST_conf"]
        rows = []
        for oname in sorted(result.outputs):
            o = result.outputs[oname]
            for p in sorted(o.parameters):
                if o.degenerate:
                    rows.append([oname, p, None, None, None, None])
                else:
                    rows.append([oname, p, o.first[p], o.first_ci[p], o.total[p], o.total_ci[p]])
        return Table(header, rows)
    if isinstance(result, LocalSensitivityResult):
        header = ["output", "parameter", "derivative", "step"]
        rows = [
            [oname, p, result.derivatives[oname][p], result.steps[p]]
            for oname in sorted(result.derivatives)
            for p in sorted(result.derivatives[oname])
        ]
        return Table(header, rows)
    if isinstance(result, MomentResult):
        header = ["output", "mean", "variance", "std"]
        rows = [[o, result.mean[o], result.variance[o], math.sqrt(result.variance[o])] for o in sorted(result.mean)]
        return Table(header, rows)
    raise TypeError(f"cannot tabulate {type(result).__name__}")


def plot_result(result, path) -> None:
    """Bar chart of the result, one panel per output, written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    table = output_table(result)
    if isinstance(result, SobolResult):
        outputs = sorted(result.outputs)
    elif isinstance(result, LocalSensitivityResult):
        outputs = sorted(result.derivatives)
    else:
        outputs = ["moments"]
    fig, axes = plt.subplots(max(len(outputs), 1), 1, figsize=(6, 2.5 * max(len(outputs), 1)), squeeze=False)
    for ax, oname in zip(axes[:, 0], outputs):
        if isinstance(result, SobolResult):
            rows = [r for r in table.rows if r[0] == oname and r[2] is not None]
            x = np.arange(len(rows))
            ax.bar(x - 0.2, [r[2] for r in rows], 0.4, yerr=[r[3] for r in rows], label="S")
            ax.bar(x + 0.2, [r[4] for r in rows], 0.4, yerr=[r[5] for r in rows], label="ST")
            ax.set_xticks(x, [r[1] for r in rows])
            ax.legend()
        elif isinstance(result, LocalSensitivityResult):
            rows = [r for r in table.rows if r[0] == oname]
            ax.bar([r[1] for r in rows], [r[2] for r in rows])
        else:
            ax.bar([r[0] for r in table.rows], [r[1] for r in table.rows], yerr=[r[3] for r in table.rows])
        ax.set_title(oname)
    fig.tight_layout()
    # fixed id salt and no date keep the SVG byte-stable across runs
    with plt.rc_context({"svg.hashsalt": "sensfan"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
