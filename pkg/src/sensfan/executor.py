"""Client-side dispatcher.

Samples are drained from a request queue and POSTed one per request. A
counting semaphore caps the number of requests in flight at ``max_load``.
Failed attempts that may heal (throttling, server errors, timeouts, dropped
connections, signer failures) go to the back of the queue after a capped
exponential backoff; the rest fail the run immediately. Each success is
persisted to the campaign before its ``COMPLETED`` event is logged.
"""

from __future__ import annotations

import asyncio
import logging
import os
import random
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import aiohttp

from .campaign import Campaign, CampaignError, RunState, Sample
from .events import DispatchEvent, EventKind, EventLog, now_ms
from .protocol import CONTENT_TYPE, ProtocolError, parse_response, serialize_request

logger = logging.getLogger(__name__)

EVENTS_FILE = "events.ndjson"


class DispatchError(Exception):
    pass


class RetryableError(DispatchError):
    """The attempt failed but a later one may succeed."""

    def __init__(self, detail: str, status: int | None = None):
        super().__init__(detail)
        self.detail = detail
        self.status = status


class FatalError(DispatchError):
    """The request will not succeed however often it is repeated."""

    def __init__(self, detail: str, status: int | None = None):
        super().__init__(detail)
        self.detail = detail
        self.status = status


class SignerError(RetryableError):
    pass


@dataclass(frozen=True)
class Backoff:
    initial_ms: float = 100.0
    multiplier: float = 2.0
    max_ms: float = 5000.0
    jitter: float = 0.0

    def __post_init__(self):
        if self.initial_ms < 0 or self.multiplier < 1 or self.max_ms < 0 or not 0 <= self.jitter <= 1:
            raise ValueError(f"invalid backoff {self}")


def backoff_delay(attempt: int, backoff: Backoff, rng: random.Random | None = None) -> float:
    """Delay in ms before re-queueing after failed attempt number ``attempt``."""
    if attempt < 1:
        raise ValueError("attempt must be >= 1")
    delay = min(backoff.initial_ms * backoff.multiplier ** (attempt - 1), backoff.max_ms)
    if backoff.jitter:
        u = (rng or random).uniform(-1.0, 1.0)
        delay *= 1.0 + backoff.jitter * u
    return delay


@dataclass(frozen=True)
class HttpRequest:
    method: str
    url: str
    headers: dict
    body: bytes


Signer = Callable[[HttpRequest], HttpRequest]


def identity_signer(request: HttpRequest) -> HttpRequest:
    return request


class StaticTokenSigner:
    """Adds a fixed ``Authorization`` header."""

    def __init__(self, token: str, header: str = "Authorization", scheme: str = "Bearer"):
        self.token = token
        self.header = header
        self.scheme = scheme

    def __call__(self, request: HttpRequest) -> HttpRequest:
        value = f"{self.scheme} {self.token}" if self.scheme else self.token
        return replace(request, headers={**request.headers, self.header: value})


def sign_request(request: HttpRequest, signer: Signer | None) -> HttpRequest:
    """Apply ``signer``; it may add headers but must leave everything else alone."""
    if signer is None:
        return request
    try:
        signed = signer(request)
    except Exception as exc:
        raise SignerError(f"signer failed: {type(exc).__name__}: {exc}") from exc
    if not isinstance(signed, HttpRequest):
        raise SignerError("signer did not return a request")
    if (signed.method, signed.url, signed.body) != (request.method, request.url, request.body):
        raise SignerError("signer modified the request line or body")
    if any(signed.headers.get(k) != v for k, v in request.headers.items()):
        raise SignerError("signer modified existing headers")
    return signed


@dataclass
class ExecutorConfig:
    """Dispatcher settings.

    ``event_log`` defaults to ``events.ndjson`` in the campaign directory.
    """

    endpoint_url: str
    max_load: int = 256
    request_timeout_ms: int = 30_000
    max_retries: int = 3
    backoff: Backoff = field(default_factory=Backoff)
    signer: Signer | None = None
    event_log: str | os.PathLike | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.max_load < 1:
            raise ValueError("max_load must be >= 1")
        if self.request_timeout_ms <= 0:
            raise ValueError("request_timeout_ms must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class SendResult:
    outputs: dict[str, float]
    sim_time_ms: float
    wall_time_ms: float


def _excerpt(body: bytes, n: int = 200) -> str:
    return body[:n].decode("utf-8", errors="replace")


async def send_one(sample: Sample, config: ExecutorConfig, session: aiohttp.ClientSession | None = None) -> SendResult:
    """POST one sample and classify the outcome.

    Returns the parsed result on HTTP 200; raises :class:`RetryableError` for
    429, 5xx, timeouts, connection failures and signer failures, and
    :class:`FatalError` for any other status or an unparsable 200 body.
    """
    req = HttpRequest("POST", config.endpoint_url, {"Content-Type": CONTENT_TYPE}, serialize_request(sample))
    req = sign_request(req, config.signer)
    if session is None:
        async with aiohttp.ClientSession() as own:
            return await _send(req, sample, config, own)
    return await _send(req, sample, config, session)


async def _send(req: HttpRequest, sample: Sample, config: ExecutorConfig, session) -> SendResult:
    timeout = aiohttp.ClientTimeout(total=config.request_timeout_ms / 1000.0)
    t0 = time.perf_counter()
    try:
        async with session.request(req.method, req.url, data=req.body, headers=req.headers, timeout=timeout) as resp:
            status = resp.status
            body = await resp.read()
    except asyncio.TimeoutError:
        raise RetryableError(f"timeout after {config.request_timeout_ms} ms") from None
    except (aiohttp.ClientError, OSError) as exc:
        raise RetryableError(f"{type(exc).__name__}: {exc}") from None
    wall_ms = (time.perf_counter() - t0) * 1000.0
    if status == 200:
        try:
            parsed = parse_response(body, sample.run_id)
        except ProtocolError as exc:
            raise FatalError(f"bad response ({exc}): {_excerpt(body)!r}", status) from None
        return SendResult(parsed.outputs, parsed.sim_time_ms, wall_ms)
    detail = f"HTTP {status}: {_excerpt(body)}"
    if status == 429 or 500 <= status < 600:
        raise RetryableError(detail, status)
    raise FatalError(detail, status)


@dataclass
class RunSummary:
    total: int
    completed: int
    failed: int
    retries_total: int
    retried_run_ids: list[int]
    failed_run_ids: list[int]
    wall_time_ms: float
    sum_sim_time_ms: float
    peak_in_flight: int = 0
    skipped: int = 0
    events: list[DispatchEvent] = field(default_factory=list, repr=False)

    @property
    def speedup(self) -> float:
        if self.wall_time_ms <= 0:
            return 0.0
        return self.sum_sim_time_ms / self.wall_time_ms

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "completed": self.completed,
            "failed": self.failed,
            "skipped": self.skipped,
            "retries_total": self.retries_total,
            "retried_run_ids": self.retried_run_ids,
            "failed_run_ids": self.failed_run_ids,
            "wall_time_ms": self.wall_time_ms,
            "sum_sim_time_ms": self.sum_sim_time_ms,
            "speedup": self.speedup,
            "peak_in_flight": self.peak_in_flight,
        }


class _Dispatch:
    def __init__(self, samples: Sequence[Sample], config: ExecutorConfig, campaign: Campaign):
        self.config = config
        self.campaign = campaign
        self.rng = random.Random(config.seed)
        path = config.event_log if config.event_log is not None else campaign.workdir / EVENTS_FILE
        self.log = EventLog(path)
        self.run_events: list[DispatchEvent] = []

        self.pending: list[Sample] = []
        for s in samples:
            state = campaign.record(s.run_id).state
            if state in (RunState.QUEUED, RunState.SUBMITTED):
                if state is RunState.SUBMITTED:
                    campaign.requeue(s.run_id)
                self.pending.append(s)
        self.skipped = len(samples) - len(self.pending)
        self.remaining = len(self.pending)

        self.in_flight = 0
        self.peak = 0
        self.completed = 0
        self.failed_ids: list[int] = []
        self.retried: dict[int, int] = {}
        self.sum_sim = 0.0
        self.abort: BaseException | None = None

    def emit(self, run_id: int, kind: EventKind, detail: str | None = None) -> None:
        ev = DispatchEvent(now_ms(), run_id, kind, detail)
        self.run_events.append(ev)
        self.log.emit(ev)

    def _terminal(self) -> None:
        self.remaining -= 1
        if self.remaining == 0:
            self.queue.put_nowait(None)

    async def _attempt(self, sample: Sample, attempt: int) -> None:
        rid = sample.run_id
        try:
            self.campaign.mark_submitted(rid, attempt)
            self.emit(rid, EventKind.SENT, f"attempt={attempt}")
            self.in_flight += 1
            self.peak = max(self.peak, self.in_flight)
            try:
                result = await send_one(sample, self.config, self.session)
            except RetryableError as exc:
                if attempt <= self.config.max_retries:
                    self.campaign.requeue(rid)
                    self.retried[rid] = self.retried.get(rid, 0) + 1
                    delay = backoff_delay(attempt, self.config.backoff, self.rng)
                    self.emit(rid, EventKind.RETRY_SCHEDULED, exc.detail)
                    asyncio.get_running_loop().call_later(delay / 1000.0, self.queue.put_nowait, (sample, attempt + 1))
                    return
                reason = f"max retries exceeded: {exc.detail}"
            except FatalError as exc:
                reason = exc.detail
            else:
                if self.campaign.record(rid).state is RunState.COMPLETED:
                    logger.debug("dropping duplicate response for run %d", rid)
                    return
                try:
                    self.campaign.record_result(rid, result.outputs, result.sim_time_ms, result.wall_time_ms, attempt)
                except (CampaignError, ValueError) as exc:
                    # e.g. output schema drift or a reported sim time above the wall time
                    reason = f"{type(exc).__name__}: {exc}"
                else:
                    self.completed += 1
                    self.sum_sim += result.sim_time_ms
                    self.emit(rid, EventKind.COMPLETED, "HTTP 200")
                    self._terminal()
                    return
            self.campaign.mark_failed(rid, attempt, reason)
            self.failed_ids.append(rid)
            self.emit(rid, EventKind.FAILED, reason)
            self._terminal()
        except asyncio.CancelledError:
            raise
        except Exception as exc:
            # campaign store could not be written (or a bug): stop everything, keep what is on disk
            self.abort = exc
            self.queue.put_nowait(None)
        finally:
            self.in_flight -= 1
            self.sem.release()

    async def run(self) -> RunSummary:
        self.queue: asyncio.Queue = asyncio.Queue()
        self.sem = asyncio.Semaphore(self.config.max_load)
        for s in self.pending:
            self.emit(s.run_id, EventKind.ENQUEUED)
            self.queue.put_nowait((s, 1))
        if not self.pending:
            self.queue.put_nowait(None)
        tasks: set[asyncio.Task] = set()
        t0 = time.perf_counter()
        connector = aiohttp.TCPConnector(limit=self.config.max_load)
        try:
            async with aiohttp.ClientSession(connector=connector) as self.session:
                while True:
                    item = await self.queue.get()
                    if item is None or self.abort is not None:
                        break
                    await self.sem.acquire()
                    task = asyncio.create_task(self._attempt(*item))
                    tasks.add(task)
                    task.add_done_callback(tasks.discard)
                if self.abort is not None:
                    for t in tasks:
                        t.cancel()
                await asyncio.gather(*tasks, return_exceptions=True)
        finally:
            self.log.close()
        wall = (time.perf_counter() - t0) * 1000.0
        if self.abort is not None:
            raise DispatchError(f"dispatch aborted: {type(self.abort).__name__}: {self.abort}") from self.abort
        return RunSummary(
            total=len(self.pending),
            completed=self.completed,
            failed=len(self.failed_ids),
            retries_total=sum(self.retried.values()),
            retried_run_ids=list(self.retried),
            failed_run_ids=sorted(self.failed_ids),
            wall_time_ms=wall,
            sum_sim_time_ms=self.sum_sim,
            peak_in_flight=self.peak,
            skipped=self.skipped,
            events=self.run_events,
        )


async def run_async(samples: Sequence[Sample], config: ExecutorConfig, campaign: Campaign) -> RunSummary:
    return await _Dispatch(samples, config, campaign).run()


def run(samples: Sequence[Sample] | None, config: ExecutorConfig, campaign: Campaign) -> RunSummary:
    """Dispatch ``samples`` (all pending campaign runs when ``None``) and block until done.

    Runs already COMPLETED or FAILED in the campaign are skipped, so calling
    this again after an interruption dispatches only the remainder.
    """
    if samples is None:
        samples = campaign.samples()
    return asyncio.run(run_async(samples, config, campaign))


def default_event_log(campaign: Campaign) -> Path:
    return campaign.workdir / EVENTS_FILE
