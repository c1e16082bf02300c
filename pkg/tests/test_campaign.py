import json
import math
import threading

import pytest

from sensfan.campaign import (
    AlreadyCompleted,
    Campaign,
    CampaignError,
    CorruptRecord,
    DuplicateParameter,
    DuplicateRunId,
    IllegalTransition,
    InputKeyMismatch,
    Normal,
    OutputKeyMismatch,
    ParameterSpec,
    RunState,
    Sample,
    Uniform,
    UnknownRun,
    campaign_status,
    create_campaign,
    load_results,
)
from conftest import GOLDEN


def _samples(n, start=0):
    return [Sample(i, {"x1": 0.1 * i, "x2": 0.0, "x3": 1.0}) for i in range(start, start + n)]


def test_distribution_invariants():
    with pytest.raises(ValueError):
        Uniform(1.0, 1.0)
    with pytest.raises(ValueError):
        Normal(0.0, 0.0)
    with pytest.raises(ValueError):
        ParameterSpec("x", Uniform(0, 1), default=2.0)
    assert ParameterSpec("x", Uniform(0, 10)).default == 5.0
    assert ParameterSpec("x", Normal(2, 3)).default == 2.0
    with pytest.raises(ValueError):
        ParameterSpec("not a name", Uniform(0, 1))


def test_create_empty_campaign(tmp_path, ishigami_specs):
    camp = create_campaign("demo", ishigami_specs, tmp_path / "camp")
    assert len(camp.manifest.parameters) == 3
    assert len(camp) == 0
    assert (tmp_path / "camp" / "campaign.json").exists()
    assert (tmp_path / "camp" / "runs.ndjson").read_bytes() == b""
    camp.close()


def test_duplicate_parameter(tmp_path):
    specs = [ParameterSpec("r12", Uniform(0, 1)), ParameterSpec("r12", Uniform(0, 1))]
    with pytest.raises(DuplicateParameter):
        create_campaign("dup", specs, tmp_path / "c")
    assert not (tmp_path / "c" / "campaign.json").exists()


def test_42_parameters(tmp_path):
    specs = [ParameterSpec(f"r{i}", Uniform(0.5, 1.5)) for i in range(42)]
    with create_campaign("llh", specs, tmp_path / "c") as camp:
        assert len(camp.manifest.parameters) == 42


def test_unwritable_directory(tmp_path, ishigami_specs):
    target = tmp_path / "file"
    target.write_text("x")
    with pytest.raises(OSError):
        create_campaign("x", ishigami_specs, target / "sub")


def test_add_samples(campaign):
    assert campaign.add_samples(_samples(1000)) == 1000
    assert campaign_status(campaign) == {RunState.QUEUED: 1000}
    assert campaign.add_samples([]) == 0


def test_add_samples_errors(campaign):
    campaign.add_samples(_samples(2))
    with pytest.raises(DuplicateRunId):
        campaign.add_samples(_samples(1))
    with pytest.raises(InputKeyMismatch):
        campaign.add_samples([Sample(5, {"x1": 0.0, "x2": 0.0})])
    with pytest.raises(DuplicateRunId):
        campaign.add_samples([Sample(7, {"x1": 0, "x2": 0, "x3": 0})] * 2)
    assert len(campaign) == 2


def test_record_result(campaign):
    campaign.add_samples(_samples(10))
    campaign.record_result(7, {"q_out": 1.25}, 150.0, 480.0, 1)
    rec = campaign.record(7)
    assert rec.state is RunState.COMPLETED
    assert rec.overhead_ms == 330.0
    assert campaign.manifest.output_names == ["q_out"]
    with pytest.raises(AlreadyCompleted):
        campaign.record_result(7, {"q_out": 1.25}, 150.0, 480.0, 1)
    with pytest.raises(OutputKeyMismatch):
        campaign.record_result(3, {"wrong_name": 1.0}, 1.0, 2.0, 1)
    with pytest.raises(UnknownRun):
        campaign.record_result(99, {"q_out": 1.0}, 1.0, 2.0, 1)
    with pytest.raises(ValueError):
        campaign.record_result(4, {"q_out": 1.0}, 5.0, 2.0, 1)
    # output schema survives re-opening
    reopened = Campaign.open(campaign.workdir)
    assert reopened.manifest.output_names == ["q_out"]
    reopened.close()


def test_mark_failed(campaign):
    campaign.add_samples(_samples(5))
    campaign.mark_failed(3, 5, "max retries exceeded")
    rec = campaign.record(3)
    assert rec.state is RunState.FAILED and rec.attempts == 5 and rec.reason == "max retries exceeded"
    with pytest.raises(UnknownRun):
        campaign.mark_failed(42, 1, "x")
    campaign.record_result(1, {"y": 1.0}, 1.0, 2.0, 1)
    with pytest.raises(IllegalTransition):
        campaign.mark_failed(1, 1, "late")
    with pytest.raises(IllegalTransition):
        campaign.record_result(3, {"y": 1.0}, 1.0, 2.0, 1)
    reopened = Campaign.open(campaign.workdir)
    assert reopened.record(3).reason == "max retries exceeded"
    reopened.close()


def test_in_memory_transitions(campaign):
    campaign.add_samples(_samples(2))
    campaign.mark_submitted(0, 1)
    assert campaign.status() == {RunState.QUEUED: 1, RunState.SUBMITTED: 1}
    with pytest.raises(IllegalTransition):
        campaign.mark_submitted(0, 2)
    campaign.requeue(0)
    with pytest.raises(IllegalTransition):
        campaign.requeue(0)
    campaign.mark_submitted(0, 2)
    assert campaign.record(0).attempts == 2
    # submitted state is not persisted: a reopened campaign sees the run as queued
    reopened = Campaign.open(campaign.workdir)
    assert reopened.record(0).state is RunState.QUEUED
    reopened.close()


def test_load_results_ordering(campaign):
    assert load_results(campaign) == []
    campaign.add_samples(_samples(50))
    for i in reversed(range(50)):
        campaign.record_result(i, {"y": float(i)}, 1.0, 2.0, 1)
    reopened = Campaign.open(campaign.workdir)
    assert [r.run_id for r in reopened.load_results()] == list(range(50))
    assert reopened.status() == {RunState.COMPLETED: 50}
    reopened.close()


def test_truncated_line_lenient(campaign, caplog):
    campaign.add_samples(_samples(4))
    for i in range(4):
        campaign.record_result(i, {"y": 1.0}, 1.0, 2.0, 1)
    campaign.close()
    path = campaign.runs_path
    data = path.read_bytes()
    path.write_bytes(data[:-15])  # tear the last completion
    with caplog.at_level("WARNING"):
        reopened = Campaign.open(campaign.workdir)
    assert len(reopened.load_results()) == 3
    assert "offset" in caplog.text
    # the torn tail was dropped, so new appends parse cleanly
    reopened.record_result(3, {"y": 1.0}, 1.0, 2.0, 1)
    reopened.close()
    again = Campaign.open(campaign.workdir, strict=True)
    assert len(again.load_results()) == 4
    again.close()


def test_corrupt_line_strict(campaign):
    campaign.add_samples(_samples(2))
    campaign.close()
    with open(campaign.runs_path, "ab") as fh:
        fh.write(b"{not json}\n")
    with pytest.raises(CorruptRecord) as info:
        Campaign.open(campaign.workdir, strict=True)
    assert info.value.offset > 0
    lenient = Campaign.open(campaign.workdir)
    assert len(lenient) == 2
    lenient.close()


def test_reopen_existing_refused(campaign, ishigami_specs):
    with pytest.raises(CampaignError):
        Campaign.create("again", ishigami_specs, campaign.workdir)


def test_concurrent_writes(campaign):
    campaign.add_samples(_samples(400))

    def worker(k):
        for i in range(k, 400, 8):
            campaign.record_result(i, {"y": float(i)}, 1.0, 2.0, 1)

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    lines = campaign.runs_path.read_bytes().splitlines()
    assert len(lines) == 800
    assert all(json.loads(line) for line in lines)
    assert sum(campaign.status().values()) == 400


def test_record_golden(tmp_path):
    """Field names and order of the run store and manifest are fixed."""
    specs = [ParameterSpec("x", Uniform(0.0, 2.0))]
    camp = create_campaign("golden", specs, tmp_path / "g")
    camp.add_samples([Sample(0, {"x": 1.5}), Sample(1, {"x": 0.5})])
    camp.record_result(0, {"y": 2.25}, 150.0, 480.0, 1)
    camp.mark_failed(1, 3, "max retries exceeded: HTTP 500")
    camp.close()
    assert camp.runs_path.read_bytes() == (GOLDEN / "runs.ndjson").read_bytes()
    manifest = json.loads(camp.manifest_path.read_text())
    expected = json.loads((GOLDEN / "campaign.json").read_text())
    manifest["created_at"] = expected["created_at"]
    assert manifest == expected
    assert list(manifest) == list(expected)


def test_durable_prefix_after_kill(tmp_path):
    """A child killed mid-stream leaves exactly the records whose writes returned."""
    import subprocess
    import sys

    script = f"""
import sys
from sensfan.campaign import Campaign, ParameterSpec, Sample, Uniform
camp = Campaign.create("k", [ParameterSpec("x", Uniform(0, 1))], {str(tmp_path / 'k')!r})
camp.add_samples([Sample(i, {{"x": 0.5}}) for i in range(100)])
for i in range(60):
    camp.record_result(i, {{"y": 1.0}}, 1.0, 2.0, 1)
    print(i, flush=True)
import os, signal
os.kill(os.getpid(), signal.SIGKILL)
"""
    proc = subprocess.run([sys.executable, "-c", script], capture_output=True, text=True)
    acknowledged = [int(x) for x in proc.stdout.split()]
    camp = Campaign.open(tmp_path / "k")
    assert [r.run_id for r in camp.load_results()] == acknowledged
    camp.close()


def test_normal_default_finite():
    p = ParameterSpec("g", Normal(1.0, 2.0), default=math.pi)
    assert ParameterSpec.from_dict(p.to_dict()) == p
