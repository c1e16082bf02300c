"""Provider side: single-sample HTTP handler, plain server and mock cloud.

Each POST carries exactly one sample; the handler runs the model once and
answers with the outputs and the measured model execution time.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import math
import random
import threading
import time
from dataclasses import dataclass, field

from aiohttp import web

from .events import EventLog, WorkerEvent, WorkerEventKind, now_ms
from .models import ModelAdapter, ModelError, evaluate
from .protocol import CONTENT_TYPE, ProtocolError, error_body, parse_request, serialize_response

logger = logging.getLogger(__name__)


@dataclass
class WorkerResponse:
    status: int
    body: bytes


class Worker:
    """Runs one model execution per request and logs provider-side events."""

    def __init__(self, adapter: ModelAdapter, events: EventLog | None = None):
        self.adapter = adapter
        self.events = events if events is not None else EventLog()
        self._seq = itertools.count()

    def _emit(self, kind, run_id, request, instance_id=None):
        self.events.emit(WorkerEvent(now_ms(), run_id, kind, instance_id, request))

    async def handle(self, payload: bytes) -> WorkerResponse:
        seq = next(self._seq)
        try:
            sample = parse_request(payload)
        except ProtocolError as exc:
            self._emit(WorkerEventKind.RECEIVED, None, seq)
            return WorkerResponse(400, error_body(str(exc)))
        self._emit(WorkerEventKind.RECEIVED, sample.run_id, seq)
        return await self._execute(sample, seq)

    async def _execute(self, sample, seq, instance_id=None) -> WorkerResponse:
        self._emit(WorkerEventKind.STARTED, sample.run_id, seq, instance_id)
        t0 = time.perf_counter()
        try:
            outputs = await evaluate(self.adapter, sample)
            if not all(math.isfinite(v) for v in outputs.values()):
                raise ModelError("model produced non-finite outputs")
        except Exception as exc:  # any model failure is reported to the client, never crashes the server
            self._emit(WorkerEventKind.FINISHED, sample.run_id, seq, instance_id)
            reason = f"{type(exc).__name__}: {exc}"
            logger.debug("run %s failed: %s", sample.run_id, reason)
            return WorkerResponse(500, error_body(reason))
        sim_ms = (time.perf_counter() - t0) * 1000.0
        self._emit(WorkerEventKind.FINISHED, sample.run_id, seq, instance_id)
        return WorkerResponse(200, serialize_response(sample.run_id, outputs, sim_ms))


async def handle_request(payload: bytes, adapter: ModelAdapter) -> WorkerResponse:
    return await Worker(adapter).handle(payload)


# --------------------------------------------------------------------------
# Mock cloud
# --------------------------------------------------------------------------


@dataclass
class MockCloudConfig:
    """Serverless instance semantics emulated by :class:`MockCloud`.

    ``provision_fraction`` caps the pool at that share of ``max_instances``
    (some platforms under-provision under heavy fan-out). With
    ``queue_when_full`` requests wait for capacity instead of getting
    ``throttle_status``.
    """

    cold_start_ms: float = 0.0
    max_instances: int = 1000
    instance_concurrency: int = 1
    idle_reclaim_ms: float = 60_000.0
    failure_rate: float = 0.0
    throttle_status: int = 429
    provision_fraction: float = 1.0
    queue_when_full: bool = False
    seed: int | None = None

    def __post_init__(self):
        if self.cold_start_ms < 0:
            raise ValueError("cold_start_ms must be non-negative")
        if self.max_instances < 1 or self.instance_concurrency < 1:
            raise ValueError("max_instances and instance_concurrency must be positive")
        if not self.idle_reclaim_ms > 0:
            raise ValueError("idle_reclaim_ms must be positive")
        if not 0 <= self.failure_rate < 1:
            raise ValueError("failure_rate must lie in [0, 1)")
        if not 0 < self.provision_fraction <= 1:
            raise ValueError("provision_fraction must lie in (0, 1]")

    @property
    def instance_cap(self) -> int:
        return max(1, math.floor(self.max_instances * self.provision_fraction))


@dataclass
class _Instance:
    id: int
    ready: bool = False
    busy: int = 0
    last_used: float = field(default_factory=now_ms)


class MockCloud(Worker):
    """Worker fronted by an emulated pool of serverless instances.

    Admission, in order: reuse a ready instance with spare concurrency; else
    create a new instance (paying ``cold_start_ms``) if the pool is below its
    cap; else throttle. Idle instances are reclaimed lazily on admission.
    """

    def __init__(self, adapter: ModelAdapter, config: MockCloudConfig, events: EventLog | None = None):
        super().__init__(adapter, events)
        self.config = config
        self.instances: dict[int, _Instance] = {}
        self._ids = itertools.count()
        self._rng = random.Random(config.seed)
        self._freed: asyncio.Condition | None = None
        self.peak_instances = 0

    def _reclaim(self, t: float) -> None:
        limit = self.config.idle_reclaim_ms
        for iid in [i.id for i in self.instances.values() if i.busy == 0 and i.ready and t - i.last_used > limit]:
            del self.instances[iid]

    def _admit(self) -> tuple[_Instance | None, bool]:
        self._reclaim(now_ms())
        conc = self.config.instance_concurrency
        for inst in self.instances.values():
            if inst.ready and inst.busy < conc:
                inst.busy += 1
                return inst, False
        if len(self.instances) < self.config.instance_cap:
            inst = _Instance(next(self._ids), busy=1)
            self.instances[inst.id] = inst
            self.peak_instances = max(self.peak_instances, len(self.instances))
            return inst, True
        return None, False

    async def handle(self, payload: bytes) -> WorkerResponse:
        seq = next(self._seq)
        try:
            sample = parse_request(payload)
        except ProtocolError as exc:
            self._emit(WorkerEventKind.RECEIVED, None, seq)
            return WorkerResponse(400, error_body(str(exc)))
        self._emit(WorkerEventKind.RECEIVED, sample.run_id, seq)

        inst, cold = self._admit()
        while inst is None and self.config.queue_when_full:
            if self._freed is None:
                self._freed = asyncio.Condition()
            async with self._freed:
                await self._freed.wait()
            inst, cold = self._admit()
        if inst is None:
            self._emit(WorkerEventKind.THROTTLED, sample.run_id, seq)
            return WorkerResponse(self.config.throttle_status, error_body("too many requests"))

        try:
            if cold:
                self._emit(WorkerEventKind.INSTANCE_COLD_STARTED, sample.run_id, seq, inst.id)
                if self.config.cold_start_ms > 0:
                    await asyncio.sleep(self.config.cold_start_ms / 1000.0)
                inst.ready = True
            if self.config.failure_rate > 0 and self._rng.random() < self.config.failure_rate:
                self._emit(WorkerEventKind.INJECTED_FAILURE, sample.run_id, seq, inst.id)
                return WorkerResponse(500, error_body("injected failure"))
            return await self._execute(sample, seq, inst.id)
        finally:
            inst.busy -= 1
            inst.last_used = now_ms()
            if self._freed is not None:
                async with self._freed:
                    self._freed.notify()


# --------------------------------------------------------------------------
# HTTP serving
# --------------------------------------------------------------------------


def make_app(worker: Worker) -> web.Application:
    async def endpoint(request: web.Request) -> web.Response:
        body = await request.read()
        resp = await worker.handle(body)
        return web.Response(body=resp.body, status=resp.status, content_type=CONTENT_TYPE)

    app = web.Application(client_max_size=64 * 1024**2)
    app.router.add_post("/{tail:.*}", endpoint)
    return app


class ServerHandle:
    """A worker served over HTTP from a background thread with its own event loop.

    ``close()`` stops accepting connections and waits for in-flight requests
    to finish (up to ``shutdown_timeout`` seconds).
    """

    def __init__(self, worker: Worker, host: str = "127.0.0.1", port: int = 0, *, shutdown_timeout: float = 60.0):
        self.worker = worker
        self.host = host
        self.port = port
        self.shutdown_timeout = shutdown_timeout
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, name="sensfan-worker", daemon=True)
        self._runner: web.AppRunner | None = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}/"

    @property
    def events(self) -> EventLog:
        return self.worker.events

    async def _start(self):
        self._runner = web.AppRunner(make_app(self.worker), access_log=None, shutdown_timeout=self.shutdown_timeout)
        await self._runner.setup()
        site = web.TCPSite(self._runner, self.host, self.port, backlog=4096)
        await site.start()
        self.port = self._runner.addresses[0][1]

    def start(self) -> ServerHandle:
        self._thread.start()
        try:
            asyncio.run_coroutine_threadsafe(self._start(), self._loop).result()
        except Exception:
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join()
            raise
        return self

    def close(self) -> None:
        if self._runner is not None:
            asyncio.run_coroutine_threadsafe(self._runner.cleanup(), self._loop).result()
            self._runner = None
        if self._thread.is_alive():
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join()
            self._loop.close()
        self.worker.events.close()

    def wait(self) -> None:
        """Block until interrupted (used by the command-line server)."""
        try:
            while self._thread.is_alive():
                self._thread.join(0.5)
        except KeyboardInterrupt:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(adapter: ModelAdapter, host: str = "127.0.0.1", port: int = 0, *, event_log=None) -> ServerHandle:
    """Serve ``adapter`` over HTTP; ``port=0`` picks a free port."""
    return ServerHandle(Worker(adapter, EventLog(event_log)), host, port).start()


def mock_cloud_serve(
    adapter: ModelAdapter,
    mock: MockCloudConfig,
    host: str = "127.0.0.1",
    port: int = 0,
    *,
    event_log=None,
) -> ServerHandle:
    return ServerHandle(MockCloud(adapter, mock, EventLog(event_log)), host, port).start()
