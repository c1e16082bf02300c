"""Model adapters run by the workers.

Every adapter evaluates one sample at a time, mapping an ordered
``{name: value}`` input dict to a ``{name: value}`` output dict.
"""

from __future__ import annotations

import asyncio
import json
import math
import subprocess
import time
from typing import Callable, Mapping, Sequence

from .campaign import Sample
from .protocol import ProtocolError, _numbers, serialize_request

BUILTIN_MODELS = ("ishigami", "linear", "sleep")


class ModelError(RuntimeError):
    pass


class ModelTimeout(ModelError):
    pass


def ishigami(x1: float, x2: float, x3: float, a: float = 7.0, b: float = 0.1) -> float:
    s1 = math.sin(x1)
    return s1 + a * math.sin(x2) ** 2 + b * x3**4 * s1


def linear(x: Sequence[float], coefficients: Sequence[float]) -> float:
    if len(x) != len(coefficients):
        raise ValueError(f"{len(x)} inputs for {len(coefficients)} coefficients")
    return math.fsum(a * v for a, v in zip(coefficients, x))


class BuiltInModel:
    """One of the analytic benchmark models.

    ``ishigami`` reads the first three inputs in order; ``linear`` pairs
    ``coefficients`` with the inputs in order (all ones when omitted);
    ``sleep`` waits ``duration_ms`` and returns the input sum. Any model can
    be slowed down by ``delay_ms`` to emulate a longer simulation.
    """

    def __init__(self, name: str, params: Mapping | None = None, delay_ms: float = 0.0):
        if name not in BUILTIN_MODELS:
            raise ValueError(f"unknown built-in model {name!r}; choose from {BUILTIN_MODELS}")
        self.name = name
        self.params = dict(params or {})
        self.delay_ms = float(delay_ms)
        if name == "sleep":
            self.delay_ms += float(self.params.get("duration_ms", 150.0))

    def compute(self, inputs: Mapping[str, float]) -> dict[str, float]:
        x = list(inputs.values())
        if self.name == "ishigami":
            if len(x) < 3:
                raise ModelError("ishigami needs three inputs")
            return {"y": ishigami(x[0], x[1], x[2], self.params.get("a", 7.0), self.params.get("b", 0.1))}
        if self.name == "linear":
            coef = self.params.get("coefficients") or [1.0] * len(x)
            try:
                return {"y": linear(x, coef)}
            except ValueError as exc:
                raise ModelError(str(exc)) from None
        return {"y": math.fsum(x)}

    async def evaluate(self, inputs: Mapping[str, float]) -> dict[str, float]:
        if self.delay_ms > 0:
            await asyncio.sleep(self.delay_ms / 1000.0)
        return self.compute(inputs)

    def __call__(self, inputs: Mapping[str, float]) -> dict[str, float]:
        if self.delay_ms > 0:
            time.sleep(self.delay_ms / 1000.0)
        return self.compute(inputs)

    def __repr__(self):
        return f"BuiltInModel({self.name!r}, {self.params!r}, delay_ms={self.delay_ms})"


class FunctionModel:
    """Wraps a Python callable taking the input dict.

    A scalar return value is reported as the single output ``y``.
    """

    def __init__(self, fn: Callable[[dict], Mapping[str, float] | float], delay_ms: float = 0.0):
        self.fn = fn
        self.delay_ms = float(delay_ms)

    def compute(self, inputs):
        out = self.fn(dict(inputs))
        if isinstance(out, Mapping):
            return {k: float(v) for k, v in out.items()}
        return {"y": float(out)}

    async def evaluate(self, inputs):
        if self.delay_ms > 0:
            await asyncio.sleep(self.delay_ms / 1000.0)
        return self.compute(inputs)

    def __call__(self, inputs):
        if self.delay_ms > 0:
            time.sleep(self.delay_ms / 1000.0)
        return self.compute(inputs)


class SubprocessModel:
    """Runs an external command once per sample.

    The request payload is written to the child's stdin; the child prints a
    JSON object of outputs on stdout. ``{run_id}`` in any argument is replaced
    by the sample's run id. A nonzero exit status, unparsable stdout or
    exceeding ``timeout_s`` (the child is killed) is a model failure.
    """

    def __init__(self, command: Sequence[str], timeout_s: float | None = None):
        if not command:
            raise ValueError("empty command")
        self.command = list(command)
        self.timeout_s = timeout_s

    def argv(self, sample: Sample) -> list[str]:
        return [arg.replace("{run_id}", str(sample.run_id)) for arg in self.command]

    @staticmethod
    def _outputs(returncode: int, stdout: bytes, stderr: bytes) -> dict[str, float]:
        if returncode != 0:
            raise ModelError(f"model exited with status {returncode}: {stderr[-500:].decode(errors='replace')}")
        try:
            return _numbers(json.loads(stdout), "outputs")
        except (ValueError, ProtocolError) as exc:
            raise ModelError(f"unparsable model output: {exc}; stdout={stdout[:200]!r}") from None

    def __call__(self, sample: Sample) -> dict[str, float]:
        try:
            proc = subprocess.run(
                self.argv(sample),
                input=serialize_request(sample),
                capture_output=True,
                timeout=self.timeout_s,
            )
        except subprocess.TimeoutExpired:
            raise ModelTimeout(f"model exceeded {self.timeout_s} s") from None
        except OSError as exc:
            raise ModelError(f"cannot start model: {exc}") from None
        return self._outputs(proc.returncode, proc.stdout, proc.stderr)

    async def evaluate_sample(self, sample: Sample) -> dict[str, float]:
        try:
            proc = await asyncio.create_subprocess_exec(
                *self.argv(sample),
                stdin=asyncio.subprocess.PIPE,
                stdout=asyncio.subprocess.PIPE,
                stderr=asyncio.subprocess.PIPE,
            )
        except OSError as exc:
            raise ModelError(f"cannot start model: {exc}") from None
        try:
            stdout, stderr = await asyncio.wait_for(proc.communicate(serialize_request(sample)), self.timeout_s)
        except asyncio.TimeoutError:
            proc.kill()
            await proc.wait()
            raise ModelTimeout(f"model exceeded {self.timeout_s} s") from None
        return self._outputs(proc.returncode, stdout, stderr)


def run_subprocess_model(adapter: SubprocessModel, sample: Sample) -> dict[str, float]:
    return adapter(sample)


ModelAdapter = BuiltInModel | FunctionModel | SubprocessModel


async def evaluate(adapter: ModelAdapter, sample: Sample) -> dict[str, float]:
    if isinstance(adapter, SubprocessModel):
        return await adapter.evaluate_sample(sample)
    return await adapter.evaluate(sample.inputs)
