"""Campaign data model and durable run store.

A campaign directory holds two files:

``campaign.json``
    The manifest: name, parameter definitions, discovered output names and
    design metadata. Rewritten atomically whenever it changes.
``runs.ndjson``
    Append-only run records, one JSON object per line. The last line for a
    given ``run_id`` is its current state.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping

logger = logging.getLogger(__name__)

MANIFEST_FILE = "campaign.json"
RUNS_FILE = "runs.ndjson"

RECORD_FIELDS = (
    "run_id",
    "state",
    "inputs",
    "outputs",
    "sim_time_ms",
    "wall_time_ms",
    "attempts",
)


class CampaignError(Exception):
    """Base class for campaign store errors."""


class DuplicateParameter(CampaignError):
    pass


class DuplicateRunId(CampaignError):
    pass


class InputKeyMismatch(CampaignError):
    pass


class OutputKeyMismatch(CampaignError):
    pass


class UnknownRun(CampaignError):
    pass


class AlreadyCompleted(CampaignError):
    pass


class IllegalTransition(CampaignError):
    pass


class CorruptRecord(CampaignError):
    def __init__(self, path: Path, offset: int, reason: str):
        super().__init__(f"{path}: corrupt record at byte offset {offset}: {reason}")
        self.path = path
        self.offset = offset


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or not self.lo < self.hi:
            raise ValueError(f"Uniform requires finite lo < hi, got ({self.lo}, {self.hi})")

    def to_dict(self) -> dict:
        return {"kind": "uniform", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class Normal:
    mean: float
    stddev: float

    def __post_init__(self):
        if not math.isfinite(self.mean) or not (self.stddev > 0 and math.isfinite(self.stddev)):
            raise ValueError(f"Normal requires finite mean and stddev > 0, got ({self.mean}, {self.stddev})")

    def to_dict(self) -> dict:
        return {"kind": "normal", "mean": self.mean, "stddev": self.stddev}


Distribution = Uniform | Normal


def distribution_from_dict(d: Mapping[str, Any]) -> Distribution:
    kind = d.get("kind")
    if kind == "uniform":
        return Uniform(float(d["lo"]), float(d["hi"]))
    if kind == "normal":
        return Normal(float(d["mean"]), float(d["stddev"]))
    raise ValueError(f"unknown distribution kind {kind!r}")


@dataclass(frozen=True)
class ParameterSpec:
    """A named model input.

    ``default`` is the value used when the parameter is held fixed. When
    omitted it is the midpoint of a Uniform range or the mean of a Normal.
    """

    name: str
    distribution: Distribution
    default: float | None = None

    def __post_init__(self):
        if not self.name or not self.name.isidentifier():
            raise ValueError(f"parameter name must be an identifier, got {self.name!r}")
        dist = self.distribution
        if self.default is None:
            mid = (dist.lo + dist.hi) / 2 if isinstance(dist, Uniform) else dist.mean
            object.__setattr__(self, "default", float(mid))
        if isinstance(dist, Uniform) and not dist.lo <= self.default <= dist.hi:
            raise ValueError(f"default {self.default} of {self.name!r} outside [{dist.lo}, {dist.hi}]")
        if not math.isfinite(self.default):
            raise ValueError(f"default of {self.name!r} must be finite")

    def to_dict(self) -> dict:
        return {"name": self.name, "distribution": self.distribution.to_dict(), "default": self.default}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ParameterSpec:
        return cls(d["name"], distribution_from_dict(d["distribution"]), d.get("default"))


# --------------------------------------------------------------------------
# Runs
# --------------------------------------------------------------------------


class RunState(str, enum.Enum):
    QUEUED = "QUEUED"
    SUBMITTED = "SUBMITTED"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


@dataclass(frozen=True)
class Sample:
    run_id: int
    inputs: dict[str, float]


@dataclass
class RunRecord:
    run_id: int
    state: RunState
    inputs: dict[str, float]
    outputs: dict[str, float] | None = None
    sim_time_ms: float | None = None
    wall_time_ms: float | None = None
    attempts: int = 0
    reason: str | None = None

    @property
    def overhead_ms(self) -> float | None:
        if self.wall_time_ms is None or self.sim_time_ms is None:
            return None
        return self.wall_time_ms - self.sim_time_ms

    def to_dict(self) -> dict:
        d = {
            "run_id": self.run_id,
            "state": self.state.value,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "sim_time_ms": self.sim_time_ms,
            "wall_time_ms": self.wall_time_ms,
            "attempts": self.attempts,
        }
        if self.reason is not None:
            d["reason"] = self.reason
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RunRecord:
        missing = [k for k in RECORD_FIELDS if k not in d]
        if missing:
            raise ValueError(f"missing fields {missing}")
        rec = cls(
            run_id=int(d["run_id"]),
            state=RunState(d["state"]),
            inputs={k: float(v) for k, v in d["inputs"].items()},
            outputs=None if d["outputs"] is None else {k: float(v) for k, v in d["outputs"].items()},
            sim_time_ms=d["sim_time_ms"],
            wall_time_ms=d["wall_time_ms"],
            attempts=int(d["attempts"]),
            reason=d.get("reason"),
        )
        if rec.state is RunState.COMPLETED and (
            rec.outputs is None or rec.sim_time_ms is None or rec.wall_time_ms is None
        ):
            raise ValueError("COMPLETED record without outputs or timings")
        return rec


def encode_record(record: RunRecord) -> bytes:
    return json.dumps(record.to_dict(), separators=(",", ":"), allow_nan=False).encode() + b"\n"


@dataclass
class CampaignManifest:
    name: str
    parameters: list[ParameterSpec]
    output_names: list[str] | None = None
    design: dict | None = None
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    @property
    def parameter_names(self) -> list[str]:
        return [p.name for p in self.parameters]

    def parameter(self, name: str) -> ParameterSpec:
        for p in self.parameters:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "created_at": self.created_at,
            "parameters": [p.to_dict() for p in self.parameters],
            "output_names": self.output_names,
            "design": self.design,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CampaignManifest:
        return cls(
            name=d["name"],
            parameters=[ParameterSpec.from_dict(p) for p in d["parameters"]],
            output_names=d.get("output_names"),
            design=d.get("design"),
            created_at=d["created_at"],
        )


def _check_unique(parameters: Iterable[ParameterSpec]) -> None:
    seen: set[str] = set()
    for p in parameters:
        if p.name in seen:
            raise DuplicateParameter(f"duplicate parameter name {p.name!r}")
        seen.add(p.name)


class Campaign:
    """An open campaign directory.

    Writes are serialized by an internal lock so one instance can be shared by
    concurrent dispatcher tasks or threads. Each completed/failed record is
    flushed (and fsync'ed when ``durable``) before the call returns.
    """

    def __init__(self, workdir: str | os.PathLike, manifest: CampaignManifest, *, durable: bool = True):
        self.workdir = Path(workdir)
        self.manifest = manifest
        self.durable = durable
        self._records: dict[int, RunRecord] = {}
        self._lock = threading.RLock()
        self._fh = None

    # -- construction -----------------------------------------------------

    @classmethod
    def create(
        cls,
        name: str,
        parameters: list[ParameterSpec],
        workdir: str | os.PathLike,
        *,
        durable: bool = True,
    ) -> Campaign:
        _check_unique(parameters)
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        if (workdir / MANIFEST_FILE).exists():
            raise CampaignError(f"{workdir} already holds a campaign")
        if not os.access(workdir, os.W_OK):
            raise PermissionError(f"{workdir} is not writable")
        camp = cls(workdir, CampaignManifest(name=name, parameters=list(parameters)), durable=durable)
        camp._write_manifest()
        (workdir / RUNS_FILE).touch()
        camp._open_for_append()
        return camp

    @classmethod
    def open(cls, workdir: str | os.PathLike, *, strict: bool = False, durable: bool = True) -> Campaign:
        workdir = Path(workdir)
        with open(workdir / MANIFEST_FILE, encoding="utf-8") as fh:
            manifest = CampaignManifest.from_dict(json.load(fh))
        camp = cls(workdir, manifest, durable=durable)
        camp._load_runs(strict=strict)
        camp._open_for_append()
        return camp

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def runs_path(self) -> Path:
        return self.workdir / RUNS_FILE

    @property
    def manifest_path(self) -> Path:
        return self.workdir / MANIFEST_FILE

    # -- persistence ------------------------------------------------------

    def _write_manifest(self) -> None:
        tmp = self.manifest_path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.manifest.to_dict(), fh, indent=2)
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.manifest_path)

    def _load_runs(self, strict: bool) -> None:
        path = self.runs_path
        if not path.exists():
            return
        data = path.read_bytes()
        offset = 0
        good_end = 0
        for line in data.splitlines(keepends=True):
            body = line.strip()
            if body:
                try:
                    if not line.endswith(b"\n"):
                        raise ValueError("truncated line")
                    rec = RunRecord.from_dict(json.loads(body))
                except (ValueError, KeyError, TypeError) as exc:
                    if strict:
                        raise CorruptRecord(path, offset, str(exc)) from exc
                    logger.warning("skipping corrupt record in %s at byte offset %d: %s", path, offset, exc)
                else:
                    self._apply(rec)
                    good_end = offset + len(line)
            offset += len(line)
        if not data.endswith(b"\n") and data:
            # a torn final write never returned; drop it so later appends start clean
            with open(path, "r+b") as fh:
                fh.truncate(max(good_end, data.rfind(b"\n") + 1))

    def _apply(self, rec: RunRecord) -> None:
        prev = self._records.get(rec.run_id)
        if prev is not None and prev.state is RunState.COMPLETED:
            return
        self._records[rec.run_id] = rec

    def _open_for_append(self) -> None:
        self._fh = open(self.runs_path, "ab")

    def _append(self, records: Iterable[RunRecord]) -> None:
        buf = b"".join(encode_record(r) for r in records)
        if not buf:
            return
        self._fh.write(buf)
        self._fh.flush()
        if self.durable:
            os.fsync(self._fh.fileno())

    # -- operations -------------------------------------------------------

    def set_design(self, design: dict) -> None:
        with self._lock:
            self.manifest.design = design
            self._write_manifest()

    def add_samples(self, samples: Iterable[Sample]) -> int:
        samples = list(samples)
        names = set(self.manifest.parameter_names)
        with self._lock:
            seen: set[int] = set()
            for s in samples:
                if s.run_id < 0:
                    raise ValueError(f"run_id must be non-negative, got {s.run_id}")
                if s.run_id in self._records or s.run_id in seen:
                    raise DuplicateRunId(f"run_id {s.run_id} already present")
                if set(s.inputs) != names:
                    raise InputKeyMismatch(
                        f"run {s.run_id}: inputs {sorted(s.inputs)} do not match parameters {sorted(names)}"
                    )
                seen.add(s.run_id)
            recs = [RunRecord(s.run_id, RunState.QUEUED, {k: float(s.inputs[k]) for k in self.manifest.parameter_names}) for s in samples]
            self._append(recs)
            for r in recs:
                self._records[r.run_id] = r
        return len(recs)

    def _get(self, run_id: int) -> RunRecord:
        try:
            return self._records[run_id]
        except KeyError:
            raise UnknownRun(f"unknown run_id {run_id}") from None

    def mark_submitted(self, run_id: int, attempt: int) -> None:
        """In-memory QUEUED -> SUBMITTED transition (not persisted)."""
        with self._lock:
            rec = self._get(run_id)
            if rec.state is not RunState.QUEUED:
                raise IllegalTransition(f"run {run_id}: {rec.state.value} -> SUBMITTED")
            rec.state = RunState.SUBMITTED
            rec.attempts = attempt

    def requeue(self, run_id: int) -> None:
        """In-memory SUBMITTED -> QUEUED transition for a scheduled retry."""
        with self._lock:
            rec = self._get(run_id)
            if rec.state is not RunState.SUBMITTED:
                raise IllegalTransition(f"run {run_id}: {rec.state.value} -> QUEUED")
            rec.state = RunState.QUEUED

    def record_result(
        self,
        run_id: int,
        outputs: Mapping[str, float],
        sim_time_ms: float,
        wall_time_ms: float,
        attempts: int,
    ) -> None:
        with self._lock:
            rec = self._get(run_id)
            if rec.state is RunState.COMPLETED:
                raise AlreadyCompleted(f"run {run_id} already completed")
            if rec.state is RunState.FAILED:
                raise IllegalTransition(f"run {run_id}: FAILED -> COMPLETED")
            if wall_time_ms < sim_time_ms:
                raise ValueError(f"run {run_id}: wall time {wall_time_ms} < sim time {sim_time_ms}")
            keys = list(outputs)
            new_schema = self.manifest.output_names is None
            if not new_schema and sorted(keys) != sorted(self.manifest.output_names):
                raise OutputKeyMismatch(
                    f"run {run_id}: outputs {sorted(keys)} do not match {sorted(self.manifest.output_names)}"
                )
            done = RunRecord(
                run_id,
                RunState.COMPLETED,
                rec.inputs,
                {k: float(v) for k, v in outputs.items()},
                float(sim_time_ms),
                float(wall_time_ms),
                max(int(attempts), 1),
            )
            if new_schema:
                self.manifest.output_names = keys
                self._write_manifest()
            self._append([done])
            self._records[run_id] = done

    def mark_failed(self, run_id: int, attempts: int, reason: str) -> None:
        with self._lock:
            rec = self._get(run_id)
            if rec.state not in (RunState.QUEUED, RunState.SUBMITTED):
                raise IllegalTransition(f"run {run_id}: {rec.state.value} -> FAILED")
            failed = RunRecord(run_id, RunState.FAILED, rec.inputs, attempts=max(int(attempts), 1), reason=reason)
            self._append([failed])
            self._records[run_id] = failed

    def record(self, run_id: int) -> RunRecord:
        with self._lock:
            return self._get(run_id)

    def records(self) -> list[RunRecord]:
        with self._lock:
            return [self._records[k] for k in sorted(self._records)]

    def samples(self, states: Iterable[RunState] = (RunState.QUEUED, RunState.SUBMITTED)) -> list[Sample]:
        """Samples whose runs are in one of ``states`` (pending ones by default)."""
        states = set(states)
        return [Sample(r.run_id, dict(r.inputs)) for r in self.records() if r.state in states]

    def load_results(self) -> list[RunRecord]:
        return [r for r in self.records() if r.state is RunState.COMPLETED]

    def status(self) -> dict[RunState, int]:
        counts: dict[RunState, int] = {}
        with self._lock:
            for r in self._records.values():
                counts[r.state] = counts.get(r.state, 0) + 1
        return counts

    def __len__(self) -> int:
        return len(self._records)


def create_campaign(name: str, parameters: list[ParameterSpec], workdir: str | os.PathLike, **kw) -> Campaign:
    return Campaign.create(name, parameters, workdir, **kw)


def open_campaign(workdir: str | os.PathLike, **kw) -> Campaign:
    return Campaign.open(workdir, **kw)


def load_results(campaign: Campaign) -> list[RunRecord]:
    return campaign.load_results()


def campaign_status(campaign: Campaign) -> dict[RunState, int]:
    return campaign.status()
