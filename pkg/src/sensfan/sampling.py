"""Sample generators and the designs that bind run ids to estimator slots."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .campaign import Normal, ParameterSpec, Sample, Uniform
from .sobol import max_dimension, sobol_points

# Acklam's rational approximation to the standard normal quantile.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def norm_ppf(p: float) -> float:
    """Inverse standard normal CDF, accurate to ~1e-15 on (0, 1).

    Rational approximation followed by one Newton step on ``Phi(x) - p``.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    elif p <= 1 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
            ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    # Newton step; the upper tail uses the complementary CDF to avoid cancellation
    pdf = math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    if p > 0.5:
        err = (1 - p) - 0.5 * math.erfc(x / math.sqrt(2))
        x -= err / pdf
    else:
        err = 0.5 * math.erfc(-x / math.sqrt(2)) - p
        x -= err / pdf
    return x


def transform_point(u: Sequence[float], specs: Sequence[ParameterSpec]) -> np.ndarray:
    """Map a point of the unit cube onto the parameter distributions."""
    u = np.asarray(u, dtype=float)
    if u.shape != (len(specs),):
        raise ValueError(f"point has {u.size} coordinates for {len(specs)} parameters")
    return transform_points(u[None, :], specs)[0]


def transform_points(u: np.ndarray, specs: Sequence[ParameterSpec]) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim != 2 or u.shape[1] != len(specs):
        raise ValueError(f"expected an (n, {len(specs)}) array, got shape {u.shape}")
    if np.any((u < 0) | (u >= 1)) or not np.all(np.isfinite(u)):
        raise ValueError("unit-cube coordinates must lie in [0, 1)")
    out = np.empty_like(u)
    for i, spec in enumerate(specs):
        dist = spec.distribution
        if isinstance(dist, Uniform):
            out[:, i] = dist.lo + u[:, i] * (dist.hi - dist.lo)
        else:
            if np.any(u[:, i] == 0):
                raise ValueError(f"u = 0 maps to -inf for normal parameter {spec.name!r}")
            out[:, i] = dist.mean + dist.stddev * np.array([norm_ppf(p) for p in u[:, i]])
    return out


def _varied_specs(specs: Sequence[ParameterSpec], varied_names: Sequence[str]) -> list[ParameterSpec]:
    by_name = {s.name: s for s in specs}
    if len(by_name) != len(specs):
        raise ValueError("parameter names must be unique")
    if not varied_names:
        raise ValueError("at least one varied parameter is required")
    if len(set(varied_names)) != len(varied_names):
        raise ValueError("varied names must be unique")
    missing = [n for n in varied_names if n not in by_name]
    if missing:
        raise ValueError(f"unknown varied parameters {missing}")
    return [by_name[n] for n in varied_names]


def _make_samples(specs, varied_names, values: np.ndarray, start_id: int) -> list[Sample]:
    col = {n: i for i, n in enumerate(varied_names)}
    samples = []
    for r, row in enumerate(values):
        inputs = {
            s.name: float(row[col[s.name]]) if s.name in col else float(s.default)
            for s in specs
        }
        samples.append(Sample(start_id + r, inputs))
    return samples


# --------------------------------------------------------------------------
# Saltelli
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SaltelliDesign:
    """Radial A/B/AB layout with ``N * (d + 2)`` runs.

    Runs are grouped per base row ``j``: the group starting at
    ``start_id + j * (d + 2)`` holds ``A(j)``, ``AB(0, j) .. AB(d-1, j)`` and
    ``B(j)`` in that order.
    """

    base_count: int
    varied_names: tuple[str, ...]
    start_id: int = 0

    kind = "saltelli"

    @property
    def dimension(self) -> int:
        return len(self.varied_names)

    @property
    def total_runs(self) -> int:
        return self.base_count * (self.dimension + 2)

    def run_id(self, slot: tuple) -> int:
        d = self.dimension
        if slot[0] == "A":
            j, k = slot[1], 0
        elif slot[0] == "B":
            j, k = slot[1], d + 1
        elif slot[0] == "AB":
            i, j = slot[1], slot[2]
            if not 0 <= i < d:
                raise ValueError(f"coordinate {i} out of range")
            k = 1 + i
        else:
            raise ValueError(f"unknown slot {slot!r}")
        if not 0 <= j < self.base_count:
            raise ValueError(f"row {j} out of range")
        return self.start_id + j * (d + 2) + k

    def slot(self, run_id: int) -> tuple:
        d = self.dimension
        off = run_id - self.start_id
        if not 0 <= off < self.total_runs:
            raise ValueError(f"run_id {run_id} not in design")
        j, k = divmod(off, d + 2)
        if k == 0:
            return ("A", j)
        if k == d + 1:
            return ("B", j)
        return ("AB", k - 1, j)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "base_count": self.base_count,
            "varied_names": list(self.varied_names),
            "start_id": self.start_id,
        }


def saltelli_design(
    specs: Sequence[ParameterSpec],
    varied_names: Sequence[str],
    n: int,
    *,
    skip: int = 1,
    start_id: int = 0,
) -> tuple[list[Sample], SaltelliDesign]:
    """Saltelli design for first-order and total indices.

    A comes from Sobol' dimensions ``[0, d)`` and B from ``[d, 2d)`` of one
    ``2d``-dimensional sequence.
    """
    varied = _varied_specs(specs, varied_names)
    d = len(varied)
    if n < 1:
        raise ValueError(f"base count must be positive, got {n}")
    if 2 * d > max_dimension():
        raise ValueError(f"{d} varied parameters need {2 * d} Sobol dimensions; at most {max_dimension()} available")
    if n & (n - 1):
        warnings.warn(f"base count {n} is not a power of two; Sobol balance properties are lost", stacklevel=2)
    u = sobol_points(2 * d, n, skip=skip)
    a = transform_points(u[:, :d], varied)
    b = transform_points(u[:, d:], varied)
    rows = np.empty((n, d + 2, d))
    rows[:, 0] = a
    rows[:, d + 1] = b
    for i in range(d):
        ab = a.copy()
        ab[:, i] = b[:, i]
        rows[:, 1 + i] = ab
    design = SaltelliDesign(n, tuple(varied_names), start_id)
    return _make_samples(specs, varied_names, rows.reshape(-1, d), start_id), design


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------


def monte_carlo(
    specs: Sequence[ParameterSpec],
    varied_names: Sequence[str],
    n: int,
    seed: int | None = None,
    *,
    allow_empty: bool = False,
    start_id: int = 0,
) -> list[Sample]:
    """I.i.d. draws from each varied parameter's distribution."""
    varied = _varied_specs(specs, varied_names)
    if n < 0 or (n == 0 and not allow_empty):
        raise ValueError(f"sample count must be positive, got {n}")
    rng = np.random.default_rng(seed)
    values = np.empty((n, len(varied)))
    for i, spec in enumerate(varied):
        dist = spec.distribution
        if isinstance(dist, Uniform):
            values[:, i] = rng.uniform(dist.lo, dist.hi, size=n)
        else:
            values[:, i] = rng.normal(dist.mean, dist.stddev, size=n)
    return _make_samples(specs, varied_names, values, start_id)


# --------------------------------------------------------------------------
# Stochastic collocation
# --------------------------------------------------------------------------


def gauss_rule(dist, npoints: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss nodes and probability weights matched to ``dist``."""
    if isinstance(dist, Uniform):
        x, w = np.polynomial.legendre.leggauss(npoints)
        return dist.lo + (x + 1) * (dist.hi - dist.lo) / 2, w / w.sum()
    if isinstance(dist, Normal):
        x, w = np.polynomial.hermite_e.hermegauss(npoints)
        return dist.mean + dist.stddev * x, w / w.sum()
    raise TypeError(f"unsupported distribution {dist!r}")


@dataclass(frozen=True)
class QuadratureDesign:
    nodes: tuple[Sample, ...]
    weights: tuple[float, ...]
    order: int
    varied_names: tuple[str, ...]

    kind = "collocation"

    def weight_of(self) -> dict[int, float]:
        return {s.run_id: w for s, w in zip(self.nodes, self.weights)}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "order": self.order,
            "varied_names": list(self.varied_names),
            "run_ids": [s.run_id for s in self.nodes],
            "weights": list(self.weights),
        }


def stochastic_collocation(
    specs: Sequence[ParameterSpec],
    varied_names: Sequence[str],
    order: int,
    *,
    start_id: int = 0,
) -> QuadratureDesign:
    """Tensor grid of ``(order + 1)``-point Gauss rules over the varied parameters."""
    varied = _varied_specs(specs, varied_names)
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    rules = [gauss_rule(s.distribution, order + 1) for s in varied]
    nodes = np.array(list(itertools.product(*(r[0] for r in rules))))
    weights = np.array([math.prod(ws) for ws in itertools.product(*(r[1] for r in rules))])
    weights = weights / weights.sum()
    samples = _make_samples(specs, varied_names, nodes, start_id)
    return QuadratureDesign(tuple(samples), tuple(float(w) for w in weights), order, tuple(varied_names))


# --------------------------------------------------------------------------
# One-at-a-time perturbation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationDesign:
    """Layout: ``start_id`` is the centre, then ``plus(i)``, ``minus(i)`` per coordinate."""

    reference: dict
    steps: dict
    varied_names: tuple[str, ...]
    start_id: int = 0

    kind = "perturbation"

    @property
    def total_runs(self) -> int:
        return 2 * len(self.varied_names) + 1

    def run_id(self, slot: tuple) -> int:
        if slot[0] == "center":
            return self.start_id
        i = slot[1]
        if not 0 <= i < len(self.varied_names):
            raise ValueError(f"coordinate {i} out of range")
        return self.start_id + 1 + 2 * i + (0 if slot[0] == "plus" else 1)

    def slot(self, run_id: int) -> tuple:
        off = run_id - self.start_id
        if not 0 <= off < self.total_runs:
            raise ValueError(f"run_id {run_id} not in design")
        if off == 0:
            return ("center",)
        i, r = divmod(off - 1, 2)
        return ("plus" if r == 0 else "minus", i)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "reference": dict(self.reference),
            "steps": dict(self.steps),
            "varied_names": list(self.varied_names),
            "start_id": self.start_id,
        }


def perturbation_design(
    specs: Sequence[ParameterSpec],
    reference: Sample | dict | None,
    varied_names: Sequence[str],
    rel_step: float,
    *,
    start_id: int = 0,
) -> tuple[list[Sample], PerturbationDesign]:
    """Centre plus/minus one-at-a-time perturbations about ``reference``.

    The step for coordinate ``i`` is ``rel_step * |x_i|``, or ``rel_step``
    itself where the reference coordinate is zero.
    """
    _varied_specs(specs, varied_names)
    if not rel_step > 0:
        raise ValueError(f"rel_step must be positive, got {rel_step}")
    if reference is None:
        ref = {s.name: float(s.default) for s in specs}
    else:
        ref = dict(reference.inputs if isinstance(reference, Sample) else reference)
        for s in specs:
            ref.setdefault(s.name, float(s.default))
    steps = {n: (rel_step * abs(ref[n]) if ref[n] != 0 else rel_step) for n in varied_names}
    samples = [Sample(start_id, dict(ref))]
    for n in varied_names:
        for sign in (1, -1):
            x = dict(ref)
            x[n] = ref[n] + sign * steps[n]
            samples.append(Sample(start_id + len(samples), x))
    return samples, PerturbationDesign(ref, steps, tuple(varied_names), start_id)


def design_from_dict(d: dict, samples: Sequence[Sample] = ()):
    """Rebuild a design from manifest metadata.

    Collocation designs need the stored ``samples`` to recover their nodes.
    """
    kind = d["kind"]
    if kind == "saltelli":
        return SaltelliDesign(int(d["base_count"]), tuple(d["varied_names"]), int(d.get("start_id", 0)))
    if kind == "perturbation":
        return PerturbationDesign(dict(d["reference"]), dict(d["steps"]), tuple(d["varied_names"]), int(d.get("start_id", 0)))
    if kind == "collocation":
        by_id = {s.run_id: s for s in samples}
        nodes = tuple(by_id[i] if i in by_id else Sample(i, {}) for i in d["run_ids"])
        return QuadratureDesign(nodes, tuple(d["weights"]), int(d["order"]), tuple(d["varied_names"]))
    if kind == "monte_carlo":
        return None
    raise ValueError(f"unknown design kind {kind!r}")
