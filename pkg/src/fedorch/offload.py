"""Virtual nodes backed by remote providers.

Each registered provider appears to the scheduler as one ``Virtual`` node whose
capacity is the provider's static capacity.  Dispatching there turns into a
CREATE on the provider; a periodic STATUS poll maps remote states back onto the
local job lifecycle.  The four verbs carry JSON bodies and can travel over an
in-process channel (simulation) or plain HTTP (service mode).
"""

from __future__ import annotations

import enum
import json
import logging
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Dict, List, Mapping, Optional, Protocol, Tuple

from .core import JobState, Node, NodeKind, ResourceVector, WorkloadSpec

logger = logging.getLogger(__name__)

VERBS = ("CREATE", "STATUS", "DELETE", "LOGS")


class OffloadError(Exception):
    pass


class DuplicateSite(OffloadError):
    pass


class UnknownSite(OffloadError):
    pass


class UnsupportedFlavor(OffloadError):
    pass


class ProviderUnreachable(OffloadError):
    pass


class RejectedByProvider(OffloadError):
    pass


class UnknownRemoteId(OffloadError):
    pass


class Flavor(str, enum.Enum):
    CONDOR = "CondorLike"
    SLURM = "SlurmLike"
    CONTAINER = "ContainerRuntime"


class RemoteStatus(str, enum.Enum):
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"
    LOST = "LOST"

    @property
    def terminal(self) -> bool:
        return self in (RemoteStatus.DONE, RemoteStatus.FAILED, RemoteStatus.LOST)


_STATUS_RANK = {
    RemoteStatus.QUEUED: 0,
    RemoteStatus.RUNNING: 1,
    RemoteStatus.DONE: 2,
    RemoteStatus.FAILED: 2,
    RemoteStatus.LOST: 2,
}

# Local state each remote status corresponds to.  LOST is retryable: the local
# job is evicted and goes through requeue.
REMOTE_TO_LOCAL: Mapping[RemoteStatus, JobState] = {
    RemoteStatus.QUEUED: JobState.DISPATCHED,
    RemoteStatus.RUNNING: JobState.RUNNING,
    RemoteStatus.DONE: JobState.SUCCEEDED,
    RemoteStatus.FAILED: JobState.FAILED,
    RemoteStatus.LOST: JobState.EVICTED,
}


def local_path(current: JobState, remote: RemoteStatus) -> Tuple[JobState, ...]:
    """Local transitions that bring a Dispatched/Running job in line with ``remote``."""
    target = REMOTE_TO_LOCAL[remote]
    if current is target:
        return ()
    if current is JobState.DISPATCHED and target is JobState.SUCCEEDED:
        return (JobState.RUNNING, JobState.SUCCEEDED)
    if current is JobState.RUNNING and target is JobState.DISPATCHED:
        raise OffloadError("remote status went backwards: RUNNING -> QUEUED")
    return (target,)


@dataclass(frozen=True)
class ProviderDescriptor:
    site: str
    flavor: Flavor
    capacity: ResourceVector
    queue_delay_dist: Tuple[int, int] = (0, 0)
    loss_rate: float = 0.0
    endpoint: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "flavor", Flavor(self.flavor))
        mean, jitter = self.queue_delay_dist
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError(f"loss_rate must be in [0, 1], got {self.loss_rate}")
        if mean < 0 or jitter < 0 or jitter > mean:
            raise ValueError(f"queue delay needs 0 <= jitter <= mean, got {self.queue_delay_dist}")


@dataclass
class RemoteJobRecord:
    local_id: str
    remote_id: str
    provider: str
    remote_status: RemoteStatus = RemoteStatus.QUEUED
    last_sync: int = 0


def _accel_items(spec: WorkloadSpec) -> List[Tuple[str, int]]:
    return list(spec.request.accel.items())


def translate(spec: WorkloadSpec, flavor: Flavor) -> str:
    """Render ``spec`` as a job document in the provider's dialect. Pure function."""
    try:
        flavor = Flavor(flavor)
    except ValueError:
        raise UnsupportedFlavor(str(flavor)) from None
    request = spec.request
    command = " ".join(spec.command)
    if flavor is Flavor.SLURM:
        lines = [
            f"#DIRECTIVE job-name={spec.id}",
            f"#DIRECTIVE cpus={request.cpu_cores}",
            f"#DIRECTIVE mem={request.memory_gib}G",
        ]
        lines += [f"#DIRECTIVE gres=accel:{model}:{n}" for model, n in _accel_items(spec)]
        lines.append(f"run {spec.image} {command}")
    elif flavor is Flavor.CONDOR:
        lines = [
            f"executable = {spec.image}",
            f"arguments = {command}",
            f"request_cpus = {request.cpu_cores}",
            f"request_memory_gb = {request.memory_gib}",
        ]
        lines += [f"request_accelerators = {model}:{n}" for model, n in _accel_items(spec)]
        lines.append("queue 1")
    else:
        lines = ["run", f"--cpus {request.cpu_cores}", f"--memory {request.memory_gib}g"]
        lines += [f"--accel {model}:{n}" for model, n in _accel_items(spec)]
        lines.append(spec.image)
        lines += list(spec.command)
    return "\n".join(lines) + "\n"


def resources_body(request: ResourceVector) -> Dict[str, Any]:
    return {"cpu": request.cpu_cores, "mem_gib": request.memory_gib, "accel": dict(request.accel)}


class Channel(Protocol):
    def call(self, verb: str, body: Dict[str, Any]) -> Dict[str, Any]:
        ...


class ProviderBackend(Protocol):
    def reachable(self) -> bool:
        ...

    def handle(self, verb: str, body: Dict[str, Any]) -> Dict[str, Any]:
        ...


class InProcessChannel:
    """Delivers protocol messages to a backend object, through JSON encoding.

    Bodies are serialised both ways so the payloads are exactly what would go
    over HTTP.
    """

    def __init__(self, backend: ProviderBackend):
        self.backend = backend

    def call(self, verb: str, body: Dict[str, Any]) -> Dict[str, Any]:
        if verb not in VERBS:
            raise ValueError(f"unknown verb {verb!r}")
        if not self.backend.reachable():
            raise ProviderUnreachable(verb)
        request = json.loads(json.dumps(body))
        return json.loads(json.dumps(self.backend.handle(verb, request), sort_keys=True))


class HttpChannel:
    """POSTs protocol messages to ``<base_url>/<verb>``."""

    def __init__(self, base_url: str, timeout: float = 5.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def call(self, verb: str, body: Dict[str, Any]) -> Dict[str, Any]:
        if verb not in VERBS:
            raise ValueError(f"unknown verb {verb!r}")
        req = urllib.request.Request(
            f"{self.base_url}/{verb.lower()}",
            data=json.dumps(body).encode(),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode())
        except urllib.error.HTTPError as exc:
            if exc.code == 503:
                raise ProviderUnreachable(verb) from None
            return json.loads(exc.read().decode() or "{}")
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise ProviderUnreachable(f"{verb}: {exc}") from None


def make_provider_server(backend: ProviderBackend, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """HTTP front end for a provider backend.

    Requests may arrive concurrently; a lock funnels them into the backend one
    at a time.  An unreachable backend answers 503.
    """
    lock = threading.Lock()

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self) -> None:  # noqa: N802
            verb = self.path.strip("/").upper()
            if verb not in VERBS:
                self._reply(404, {"error": f"unknown verb {verb}"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            try:
                body = json.loads(self.rfile.read(length) or b"{}")
            except json.JSONDecodeError:
                self._reply(400, {"error": "malformed JSON"})
                return
            with lock:
                if not backend.reachable():
                    self._reply(503, {"error": "unreachable"})
                    return
                response = backend.handle(verb, body)
            self._reply(200, response)

        def _reply(self, code: int, payload: Dict[str, Any]) -> None:
            data = json.dumps(payload, sort_keys=True).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, format: str, *args: Any) -> None:
            logger.debug("provider http: " + format, *args)

    return ThreadingHTTPServer((host, port), Handler)


@dataclass(frozen=True)
class SyncUpdate:
    record: RemoteJobRecord
    previous: RemoteStatus
    status: RemoteStatus


class OffloadController:
    """Tracks providers, their virtual nodes and the remote record of every offloaded job."""

    def __init__(self) -> None:
        self.providers: Dict[str, ProviderDescriptor] = {}
        self.channels: Dict[str, Channel] = {}
        self.nodes: Dict[str, Node] = {}
        # Active (non-terminal) records, keyed by local job id.
        self.records: Dict[str, RemoteJobRecord] = {}
        # Records that reached a terminal status or were deleted.
        self.closed: List[RemoteJobRecord] = []
        # Deletes that could not be delivered yet.
        self.pending_deletes: List[RemoteJobRecord] = []

    def register_provider(self, desc: ProviderDescriptor, channel: Channel) -> Node:
        if desc.site in self.providers:
            raise DuplicateSite(desc.site)
        node = Node(
            id=desc.site,
            site=desc.site,
            kind=NodeKind.VIRTUAL,
            capacity=desc.capacity,
            provider=desc.site,
        )
        self.providers[desc.site] = desc
        self.channels[desc.site] = channel
        self.nodes[desc.site] = node
        return node

    def _channel(self, site: str) -> Channel:
        try:
            return self.channels[site]
        except KeyError:
            raise UnknownSite(site) from None

    def create_remote(self, spec: WorkloadSpec, site: str, now: int) -> RemoteJobRecord:
        """Send CREATE; raises ProviderUnreachable or RejectedByProvider on failure."""
        channel = self._channel(site)
        doc = translate(spec, self.providers[site].flavor)
        reply = channel.call("CREATE", {"id": spec.id, "doc": doc, "resources": resources_body(spec.request)})
        if "error" in reply:
            raise RejectedByProvider(f"{site}: {reply['error']}")
        record = RemoteJobRecord(spec.id, reply["remote_id"], site, RemoteStatus.QUEUED, now)
        self.records[spec.id] = record
        return record

    def sync_states(self, now: int, records: Optional[List[RemoteJobRecord]] = None) -> List[SyncUpdate]:
        """Poll STATUS for every active record and report the ones that changed.

        Records of an unreachable provider are left untouched for the next poll.
        Terminal records leave the active set.
        """
        if records is None:
            records = [self.records[k] for k in sorted(self.records)]
        updates = []
        down = set()
        for record in records:
            if record.provider in down:
                continue
            try:
                reply = self._channel(record.provider).call("STATUS", {"remote_id": record.remote_id})
            except ProviderUnreachable:
                down.add(record.provider)
                continue
            if "error" in reply:
                logger.warning("status for %s on %s: %s", record.remote_id, record.provider, reply["error"])
                status = RemoteStatus.LOST
            else:
                status = RemoteStatus(reply["status"])
            previous = record.remote_status
            if _STATUS_RANK[status] < _STATUS_RANK[previous] or (previous.terminal and status != previous):
                raise OffloadError(f"{record.remote_id}: status moved {previous.value} -> {status.value}")
            record.remote_status = status
            record.last_sync = now
            if status.terminal:
                self.records.pop(record.local_id, None)
                self.closed.append(record)
            if status != previous:
                updates.append(SyncUpdate(record, previous, status))
        return updates

    def delete_remote(self, record: RemoteJobRecord) -> bool:
        """Send DELETE; False if the provider no longer knows the job.

        The record leaves the active set either way.  ProviderUnreachable is
        raised to the caller, who should queue the delete with :meth:`defer_delete`.
        """
        self.records.pop(record.local_id, None)
        reply = self._channel(record.provider).call("DELETE", {"remote_id": record.remote_id})
        self.closed.append(record)
        if reply.get("ok"):
            return True
        logger.warning("delete of %s on %s: %s", record.remote_id, record.provider, reply.get("error"))
        return False

    def defer_delete(self, record: RemoteJobRecord) -> None:
        self.records.pop(record.local_id, None)
        self.pending_deletes.append(record)

    def retry_deletes(self) -> List[Tuple[RemoteJobRecord, bool]]:
        done = []
        still = []
        for record in self.pending_deletes:
            try:
                done.append((record, self.delete_remote(record)))
            except ProviderUnreachable:
                still.append(record)
        self.pending_deletes = still
        return done

    def fetch_logs(self, record: RemoteJobRecord) -> str:
        reply = self._channel(record.provider).call("LOGS", {"remote_id": record.remote_id})
        if "error" in reply:
            raise UnknownRemoteId(record.remote_id)
        return reply["log"]

    def active_on(self, site: str) -> List[str]:
        return sorted(r.local_id for r in self.records.values() if r.provider == site)


