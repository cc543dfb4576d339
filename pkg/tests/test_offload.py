import json
import random
import threading
from pathlib import Path

import pytest

from fedorch.core import JobState, NodeKind, ResourceVector, WorkloadKind, WorkloadSpec
from fedorch.offload import (
    REMOTE_TO_LOCAL,
    DuplicateSite,
    Flavor,
    HttpChannel,
    InProcessChannel,
    OffloadController,
    OffloadError,
    ProviderDescriptor,
    ProviderUnreachable,
    RejectedByProvider,
    RemoteStatus,
    UnknownRemoteId,
    UnsupportedFlavor,
    local_path,
    make_provider_server,
    translate,
)
from fedorch.sim import SimProvider

FIXTURES = Path(__file__).parent / "fixtures" / "translate"


def spec(job_id="j1", cpu=4, mem=16, accel=None, command=("python", "train.py"), duration=100, outcome="succeed"):
    return WorkloadSpec(
        job_id,
        WorkloadKind.BATCH,
        "p",
        "u",
        ResourceVector(cpu, mem, accel or {}),
        image="img",
        command=command,
        est_duration=duration,
        outcome=outcome,
    )


def desc(site="condor", flavor=Flavor.CONDOR, cpu=16, delay=(0, 0), loss=0.0):
    return ProviderDescriptor(site, flavor, ResourceVector(cpu, 64), delay, loss)


class Clock:
    def __init__(self):
        self.now = 0

    def __call__(self):
        return self.now


def controller_with_provider(delay=(10, 0), loss=0.0, cpu=16):
    clock = Clock()
    workloads = {}
    d = desc(delay=delay, loss=loss, cpu=cpu)
    backend = SimProvider(d, random.Random(0), clock, workloads)
    ctl = OffloadController()
    ctl.register_provider(d, InProcessChannel(backend))
    return ctl, backend, clock, workloads


def fixture_specs():
    return json.loads((FIXTURES / "specs.json").read_text())


def fixture_spec(entry):
    return WorkloadSpec(
        entry["id"],
        WorkloadKind.BATCH,
        "p",
        "u",
        ResourceVector(entry["cpu"], entry["mem"], entry["accel"]),
        image=entry["image"],
        command=tuple(entry["command"]),
    )


@pytest.mark.parametrize("flavor", [f.value for f in Flavor])
@pytest.mark.parametrize("entry", fixture_specs(), ids=lambda e: e["name"])
def test_translate_matches_golden_fixture(entry, flavor):
    expected = (FIXTURES / f"{entry['name']}.{flavor}.txt").read_bytes()
    assert translate(fixture_spec(entry), flavor).encode() == expected


def test_slurm_anchor_has_five_lines():
    doc = translate(spec(accel={"A100-slice": 1}), Flavor.SLURM)
    assert len(doc.splitlines()) == 5


def test_container_without_accelerator_has_no_accel_flag():
    doc = translate(spec(), Flavor.CONTAINER)
    assert "--accel" not in doc


def test_translate_is_pure():
    s = spec(accel={"T4-slice": 2})
    for flavor in Flavor:
        assert translate(s, flavor) == translate(s, flavor)


def test_unsupported_flavor():
    with pytest.raises(UnsupportedFlavor):
        translate(spec(), "KubernetesLike")


def test_register_provider_adds_virtual_node():
    ctl = OffloadController()
    node = ctl.register_provider(desc(), InProcessChannel(None))
    assert node.kind is NodeKind.VIRTUAL
    assert node.capacity == ResourceVector(16, 64)
    assert len(ctl.nodes) == 1


def test_duplicate_site():
    ctl = OffloadController()
    ctl.register_provider(desc(), InProcessChannel(None))
    with pytest.raises(DuplicateSite):
        ctl.register_provider(desc(flavor=Flavor.SLURM), InProcessChannel(None))


def test_three_providers_plus_local_site():
    ctl = OffloadController()
    for site, flavor in [("a", Flavor.CONDOR), ("b", Flavor.SLURM), ("c", Flavor.CONTAINER)]:
        ctl.register_provider(desc(site, flavor), InProcessChannel(None))
    sites = {"local"} | {n.site for n in ctl.nodes.values()}
    assert len(sites) == 4


def test_descriptor_validation():
    with pytest.raises(ValueError):
        desc(loss=1.5)
    with pytest.raises(ValueError):
        desc(delay=(5, 6))


def test_create_on_empty_provider_is_queued():
    ctl, _, _, workloads = controller_with_provider()
    s = spec()
    workloads[s.id] = s
    record = ctl.create_remote(s, "condor", 0)
    assert record.remote_status is RemoteStatus.QUEUED
    assert ctl.active_on("condor") == ["j1"]


def test_create_rejected_when_provider_full():
    ctl, _, _, workloads = controller_with_provider(cpu=4)
    a, b = spec("a", cpu=4), spec("b", cpu=1)
    workloads.update(a=a, b=b)
    ctl.create_remote(a, "condor", 0)
    with pytest.raises(RejectedByProvider):
        ctl.create_remote(b, "condor", 0)


def test_remote_ids_unique_over_many_creates():
    ctl, _, _, workloads = controller_with_provider(cpu=10_000)
    ids = set()
    for i in range(200):
        s = spec(f"j{i}", cpu=1, mem=0)
        workloads[s.id] = s
        ids.add(ctl.create_remote(s, "condor", 0).remote_id)
    assert len(ids) == 200


def test_sync_follows_remote_lifecycle():
    ctl, _, clock, workloads = controller_with_provider(delay=(10, 0))
    s = spec(duration=100)
    workloads[s.id] = s
    record = ctl.create_remote(s, "condor", 0)
    clock.now = 5
    assert ctl.sync_states(5) == []
    clock.now = 20
    [update] = ctl.sync_states(20)
    assert update.status is RemoteStatus.RUNNING
    clock.now = 200
    [update] = ctl.sync_states(200)
    assert update.status is RemoteStatus.DONE
    assert ctl.active_on("condor") == []
    log = ctl.fetch_logs(record)
    assert log == "START j1\nEND j1\n"


def test_queued_job_has_empty_log():
    ctl, _, _, workloads = controller_with_provider(delay=(50, 0))
    s = spec()
    workloads[s.id] = s
    assert ctl.fetch_logs(ctl.create_remote(s, "condor", 0)) == ""


def test_loss_rate_one_reports_lost():
    ctl, _, clock, workloads = controller_with_provider(loss=1.0)
    s = spec(duration=100)
    workloads[s.id] = s
    ctl.create_remote(s, "condor", 0)
    clock.now = 500
    [update] = ctl.sync_states(500)
    assert update.status is RemoteStatus.LOST


def test_delete_queued_job_and_unknown_id():
    ctl, backend, _, workloads = controller_with_provider(delay=(50, 0))
    s = spec()
    workloads[s.id] = s
    record = ctl.create_remote(s, "condor", 0)
    assert ctl.delete_remote(record) is True
    assert backend.jobs == {}
    assert ctl.active_on("condor") == []
    record.remote_id = "condor-99999"
    assert ctl.delete_remote(record) is False
    with pytest.raises(UnknownRemoteId):
        ctl.fetch_logs(record)


def test_unreachable_provider_leaves_records_untouched():
    ctl, backend, clock, workloads = controller_with_provider()
    s = spec()
    workloads[s.id] = s
    record = ctl.create_remote(s, "condor", 0)
    backend.reachable = lambda: False
    clock.now = 500
    assert ctl.sync_states(500) == []
    assert record.remote_status is RemoteStatus.QUEUED
    with pytest.raises(ProviderUnreachable):
        ctl.create_remote(spec("x"), "condor", 500)


def test_mapping_table_total():
    assert set(REMOTE_TO_LOCAL) == set(RemoteStatus)
    assert REMOTE_TO_LOCAL[RemoteStatus.QUEUED] is JobState.DISPATCHED
    assert REMOTE_TO_LOCAL[RemoteStatus.RUNNING] is JobState.RUNNING
    assert REMOTE_TO_LOCAL[RemoteStatus.DONE] is JobState.SUCCEEDED
    assert REMOTE_TO_LOCAL[RemoteStatus.FAILED] is JobState.FAILED
    assert REMOTE_TO_LOCAL[RemoteStatus.LOST] is JobState.EVICTED


def test_local_path_catches_up_skipped_running():
    assert local_path(JobState.DISPATCHED, RemoteStatus.DONE) == (JobState.RUNNING, JobState.SUCCEEDED)
    assert local_path(JobState.RUNNING, RemoteStatus.RUNNING) == ()
    with pytest.raises(OffloadError):
        local_path(JobState.RUNNING, RemoteStatus.QUEUED)


class _EchoBackend:
    def __init__(self):
        self.up = True
        self.calls = []

    def reachable(self):
        return self.up

    def handle(self, verb, body):
        self.calls.append((verb, body))
        if verb == "CREATE":
            return {"remote_id": "r-1"}
        if verb == "STATUS":
            return {"status": "RUNNING"}
        if verb == "DELETE":
            return {"ok": True}
        return {"log": ""}


def test_http_channel_round_trip():
    backend = _EchoBackend()
    server = make_provider_server(backend)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        channel = HttpChannel(f"http://127.0.0.1:{server.server_address[1]}")
        body = {"id": "j1", "doc": "queue 1\n", "resources": {"cpu": 1, "mem_gib": 2, "accel": {}}}
        assert channel.call("CREATE", body) == {"remote_id": "r-1"}
        assert channel.call("STATUS", {"remote_id": "r-1"}) == {"status": "RUNNING"}
        assert backend.calls[0] == ("CREATE", body)
        backend.up = False
        with pytest.raises(ProviderUnreachable):
            channel.call("STATUS", {"remote_id": "r-1"})
    finally:
        server.shutdown()
        server.server_close()


def test_http_channel_connection_refused():
    with pytest.raises(ProviderUnreachable):
        HttpChannel("http://127.0.0.1:9", timeout=0.5).call("STATUS", {"remote_id": "x"})
