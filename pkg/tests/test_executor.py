import asyncio
import json
import random
import socket
from collections import Counter, defaultdict

import pytest

from sensfan.campaign import ParameterSpec, RunState, Sample, Uniform
from sensfan.events import EventKind, read_dispatch_events
from sensfan.executor import (
    Backoff,
    DispatchError,
    ExecutorConfig,
    FatalError,
    HttpRequest,
    RetryableError,
    SignerError,
    StaticTokenSigner,
    backoff_delay,
    identity_signer,
    run,
    send_one,
    sign_request,
)
from sensfan.models import BuiltInModel
from sensfan.protocol import parse_request, serialize_response
from sensfan.worker import MockCloudConfig, mock_cloud_serve, serve

FAST = Backoff(initial_ms=1, multiplier=2, max_ms=10)


def _echo(payload, n):
    s = parse_request(payload)
    return 200, serialize_response(s.run_id, {"y": sum(s.inputs.values())}, 0.0)


def _fill(campaign, n):
    samples = [Sample(i, {"x1": float(i), "x2": 0.0, "x3": 0.0}) for i in range(n)]
    campaign.add_samples(samples)
    return samples


def _cfg(url, **kw):
    kw.setdefault("backoff", FAST)
    return ExecutorConfig(url, **kw)


def _check_prefix_grammar(events):
    """Per run: ENQUEUED (SENT RETRY_SCHEDULED?)* then one terminal."""
    by_run = defaultdict(list)
    for e in events:
        by_run[e.run_id].append(e.kind)
    for kinds in by_run.values():
        assert kinds[0] is EventKind.ENQUEUED
        i = 1
        while i < len(kinds) and kinds[i] is EventKind.SENT:
            nxt = kinds[i + 1] if i + 1 < len(kinds) else None
            if nxt is EventKind.RETRY_SCHEDULED:
                i += 2
                continue
            assert nxt in (EventKind.COMPLETED, EventKind.FAILED)
            assert i + 2 == len(kinds)
            break
        else:
            pytest.fail(f"no terminal event in {kinds}")
    return by_run


def _peak_in_flight(events):
    active = peak = 0
    for e in events:
        if e.kind is EventKind.SENT:
            active += 1
            peak = max(peak, active)
        elif e.kind in (EventKind.COMPLETED, EventKind.FAILED, EventKind.RETRY_SCHEDULED):
            active -= 1
    return peak


# -- pure helpers -------------------------------------------------------------


def test_backoff_examples():
    b = Backoff(100, 2.0, 5000, 0)
    assert backoff_delay(1, b) == 100
    assert backoff_delay(4, b) == 800
    assert backoff_delay(10, b) == 5000
    with pytest.raises(ValueError):
        backoff_delay(0, b)


def test_backoff_jitter_bounds():
    b = Backoff(100, 2.0, 5000, 0.25)
    rng = random.Random(0)
    delays = [backoff_delay(3, b, rng) for _ in range(1000)]
    assert min(delays) >= 300 and max(delays) <= 500
    assert max(delays) - min(delays) > 150


def test_config_validation():
    with pytest.raises(ValueError):
        ExecutorConfig("http://x", max_load=0)
    with pytest.raises(ValueError):
        ExecutorConfig("http://x", max_retries=-1)
    with pytest.raises(ValueError):
        Backoff(multiplier=0.5)
    with pytest.raises(ValueError):
        Backoff(initial_ms=-1)


def test_signers():
    req = HttpRequest("POST", "http://h/", {"Content-Type": "application/json"}, b"{}")
    assert sign_request(req, identity_signer) == req
    assert sign_request(req, None) == req
    signed = sign_request(req, StaticTokenSigner("abc"))
    assert signed.headers == {"Content-Type": "application/json", "Authorization": "Bearer abc"}
    assert signed.body == req.body

    def boom(r):
        raise RuntimeError("expired credentials")

    with pytest.raises(SignerError):
        sign_request(req, boom)
    with pytest.raises(SignerError):
        sign_request(req, lambda r: HttpRequest(r.method, r.url, r.headers, b"tampered"))
    with pytest.raises(SignerError):
        sign_request(req, lambda r: HttpRequest(r.method, r.url, {"Content-Type": "text/plain"}, r.body))
    assert issubclass(SignerError, RetryableError)


# -- send_one -----------------------------------------------------------------


@pytest.mark.parametrize(
    "status, exc",
    [(429, RetryableError), (500, RetryableError), (503, RetryableError), (400, FatalError), (404, FatalError)],
)
def test_send_one_classification(stub_server, status, exc):
    srv = stub_server(lambda p, n: (status, b'{"error":"x"}'))
    with pytest.raises(exc) as info:
        asyncio.run(send_one(Sample(0, {"x": 1.0}), _cfg(srv.url)))
    assert info.value.status == status


def test_send_one_success(stub_server):
    srv = stub_server(_echo)
    out = asyncio.run(send_one(Sample(4, {"x": 1.5}), _cfg(srv.url)))
    assert out.outputs == {"y": 1.5} and out.sim_time_ms == 0.0 and out.wall_time_ms > 0


def test_send_one_bad_body_is_fatal(stub_server):
    srv = stub_server(lambda p, n: (200, b"<html>oops</html>"))
    with pytest.raises(FatalError, match="oops"):
        asyncio.run(send_one(Sample(0, {}), _cfg(srv.url)))
    wrong = stub_server(lambda p, n: (200, serialize_response(99, {"y": 1.0}, 1.0)))
    with pytest.raises(FatalError, match="does not match"):
        asyncio.run(send_one(Sample(0, {}), _cfg(wrong.url)))


def test_send_one_timeout(stub_server):
    async def slow(p, n):
        await asyncio.sleep(1.0)
        return _echo(p, n)

    srv = stub_server(slow)
    with pytest.raises(RetryableError, match="timeout"):
        asyncio.run(send_one(Sample(0, {}), _cfg(srv.url, request_timeout_ms=100)))


def _closed_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_send_one_connection_refused():
    with pytest.raises(RetryableError):
        asyncio.run(send_one(Sample(0, {}), _cfg(f"http://127.0.0.1:{_closed_port()}/")))


def test_signed_request_is_sent(stub_server):
    srv = stub_server(_echo)
    cfg = _cfg(srv.url, signer=StaticTokenSigner("tok"))
    assert asyncio.run(send_one(Sample(0, {"x": 1.0}), cfg)).outputs == {"y": 1.0}
    assert srv.worker.requests == [b'{"run_id":0,"inputs":{"x":1.0}}']


# -- run ----------------------------------------------------------------------


def test_run_healthy(campaign, stub_server):
    srv = stub_server(_echo)
    samples = _fill(campaign, 200)
    summary = run(samples, _cfg(srv.url, max_load=32), campaign)
    assert (summary.total, summary.completed, summary.failed) == (200, 200, 0)
    assert summary.completed + summary.failed == summary.total
    assert 1 <= summary.peak_in_flight <= 32
    assert campaign.status() == {RunState.COMPLETED: 200}
    events = read_dispatch_events(campaign.workdir / "events.ndjson")
    by_run = _check_prefix_grammar(events)
    assert sorted(by_run) == list(range(200))
    assert _peak_in_flight(events) <= 32


def test_run_mock_cloud_max_load_500(campaign):
    samples = _fill(campaign, 1000)
    cloud = MockCloudConfig(max_instances=1000)
    with mock_cloud_serve(BuiltInModel("sleep", {"duration_ms": 20}), cloud) as srv:
        summary = run(samples, ExecutorConfig(srv.url, max_load=500), campaign)
    assert summary.completed == 1000 and summary.failed == 0
    assert summary.peak_in_flight <= 500
    assert _peak_in_flight(summary.events) <= 500


def test_max_load_one_is_sequential(campaign, stub_server):
    srv = stub_server(_echo)
    samples = _fill(campaign, 10)
    summary = run(samples, _cfg(srv.url, max_load=1), campaign)
    assert summary.completed == 10
    seq = [e for e in summary.events if e.kind is not EventKind.ENQUEUED]
    kinds = [e.kind for e in seq]
    assert kinds == [EventKind.SENT, EventKind.COMPLETED] * 10


def test_retry_exhaustion(campaign, stub_server):
    srv = stub_server(lambda p, n: (500, b'{"error":"down"}'))
    samples = _fill(campaign, 100)
    summary = run(samples, _cfg(srv.url, max_retries=2, max_load=16), campaign)
    assert summary.failed == 100 and summary.completed == 0
    assert summary.retries_total == 200
    assert all(campaign.record(i).attempts == 3 for i in range(100))
    assert all(campaign.record(i).reason.startswith("max retries exceeded") for i in range(100))
    sent = Counter(e.run_id for e in summary.events if e.kind is EventKind.SENT)
    assert set(sent.values()) == {3}
    _check_prefix_grammar(summary.events)


def test_fatal_not_retried(campaign, stub_server):
    srv = stub_server(lambda p, n: (400, b'{"error":"bad"}'))
    samples = _fill(campaign, 5)
    summary = run(samples, _cfg(srv.url, max_retries=5), campaign)
    assert summary.failed == 5 and summary.retries_total == 0
    assert len(srv.worker.requests) == 5


def test_throttle_then_success(campaign, stub_server):
    # every other request is throttled once
    def flaky(p, n):
        return (429, b"{}") if n % 2 else _echo(p, n)

    srv = stub_server(flaky)
    samples = _fill(campaign, 20)
    summary = run(samples, _cfg(srv.url, max_retries=20, max_load=4), campaign)
    assert summary.completed == 20 and summary.failed == 0
    assert summary.retries_total >= 1
    assert summary.retried_run_ids
    for rid in summary.retried_run_ids:
        assert campaign.record(rid).attempts > 1
    retry_details = [e.detail for e in summary.events if e.kind is EventKind.RETRY_SCHEDULED]
    assert all("429" in d for d in retry_details)


def test_retries_go_to_back_of_queue(campaign, stub_server):
    srv = stub_server(lambda p, n: (503, b"{}") if parse_request(p).run_id == 0 and n == 1 else _echo(p, n))
    samples = _fill(campaign, 6)
    summary = run(samples, _cfg(srv.url, max_load=1, backoff=Backoff(0, 1, 0)), campaign)
    sent = [e.run_id for e in summary.events if e.kind is EventKind.SENT]
    assert sent == [0, 1, 2, 3, 4, 5, 0]


def test_failing_signer_schedules_retry(campaign, stub_server):
    srv = stub_server(_echo)
    calls = Counter()

    def signer(req):
        calls["n"] += 1
        if calls["n"] == 1:
            raise RuntimeError("token refresh failed")
        return req

    samples = _fill(campaign, 3)
    summary = run(samples, _cfg(srv.url, signer=signer, max_load=1), campaign)
    assert summary.completed == 3
    retry = [e for e in summary.events if e.kind is EventKind.RETRY_SCHEDULED]
    assert len(retry) == 1 and "signer" in retry[0].detail


def test_timeout_retried_then_failed(campaign, stub_server):
    async def slow(p, n):
        await asyncio.sleep(0.5)
        return _echo(p, n)

    srv = stub_server(slow)
    samples = _fill(campaign, 2)
    summary = run(samples, _cfg(srv.url, request_timeout_ms=100, max_retries=1), campaign)
    assert summary.failed == 2
    assert all("timeout" in campaign.record(i).reason for i in range(2))


def test_inconsistent_sim_time_fails_run(campaign, stub_server):
    srv = stub_server(lambda p, n: (200, serialize_response(parse_request(p).run_id, {"y": 1.0}, 1e9)))
    samples = _fill(campaign, 2)
    summary = run(samples, _cfg(srv.url), campaign)
    assert summary.failed == 2
    assert "wall time" in campaign.record(0).reason


def test_unreachable_endpoint_fails_runs(campaign):
    samples = _fill(campaign, 4)
    summary = run(samples, _cfg(f"http://127.0.0.1:{_closed_port()}/", max_retries=1), campaign)
    assert summary.failed == 4 and summary.completed == 0


def test_exactly_once_persistence(campaign, stub_server):
    srv = stub_server(lambda p, n: (500, b"{}") if n % 3 == 0 else _echo(p, n))
    samples = _fill(campaign, 60)
    run(samples, _cfg(srv.url, max_retries=10, max_load=8), campaign)
    campaign.close()
    completed = Counter()
    for line in campaign.runs_path.read_text().splitlines():
        rec = json.loads(line)
        if rec["state"] == "COMPLETED":
            completed[rec["run_id"]] += 1
    assert len(completed) == 60 and set(completed.values()) == {1}


def test_resume_skips_completed(campaign, stub_server):
    srv = stub_server(_echo)
    samples = _fill(campaign, 20)
    for i in range(0, 20, 2):
        campaign.record_result(i, {"y": float(i)}, 1.0, 2.0, 1)
    campaign.mark_submitted(1, 1)  # stale in-flight run from a dead dispatcher
    summary = run(samples, _cfg(srv.url), campaign)
    assert summary.total == 10 and summary.skipped == 10
    sent = sorted(parse_request(p).run_id for p in srv.worker.requests)
    assert sent == list(range(1, 20, 2))
    assert campaign.status() == {RunState.COMPLETED: 20}
    again = run(None, _cfg(srv.url), campaign)
    assert again.total == 0 and again.completed == 0


def test_campaign_write_failure_aborts(campaign, stub_server, monkeypatch):
    srv = stub_server(_echo)
    samples = _fill(campaign, 50)
    real = campaign.record_result
    count = Counter()

    def flaky(*a, **k):
        count["n"] += 1
        if count["n"] > 10:
            raise OSError(28, "No space left on device")
        return real(*a, **k)

    monkeypatch.setattr(campaign, "record_result", flaky)
    with pytest.raises(DispatchError, match="No space"):
        run(samples, _cfg(srv.url, max_load=1), campaign)
    assert len(campaign.load_results()) == 10


def test_event_log_location(campaign, stub_server, tmp_path):
    srv = stub_server(_echo)
    samples = _fill(campaign, 3)
    run(samples, _cfg(srv.url, event_log=tmp_path / "elsewhere.ndjson"), campaign)
    assert len(read_dispatch_events(tmp_path / "elsewhere.ndjson")) == 9


def test_run_with_real_worker(campaign):
    samples = _fill(campaign, 30)
    with serve(BuiltInModel("ishigami", delay_ms=20)) as srv:
        summary = run(samples, ExecutorConfig(srv.url, max_load=8), campaign)
    assert summary.completed == 30
    assert summary.sum_sim_time_ms >= 30 * 20
    assert 1 < summary.speedup <= 8
    assert campaign.record(0).outputs == {"y": 0.0}
