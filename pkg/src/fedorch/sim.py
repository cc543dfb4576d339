"""Deterministic discrete-event harness.

One integer clock, one seeded generator, one agenda.  Every state change is
appended to an :class:`EventLog` as ``{"t", "seq", "kind", "payload"}``; the
log alone is enough to rebuild allocations, job states and accounting.

Generator draw order is fixed: a provider CREATE draws the queue delay first,
then the loss check.  Nothing else draws.
"""

from __future__ import annotations

import dataclasses
import heapq
import itertools
import json
import math
import random
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from . import dag
from .core import (
    Job,
    JobState,
    Node,
    NodeKind,
    Project,
    Reason,
    ResourceVector,
    WorkloadSpec,
    node_order_key,
    rv_add,
    rv_fits,
    rv_sub,
    rv_sum,
    transition,
)
from .offload import (
    InProcessChannel,
    OffloadController,
    ProviderDescriptor,
    ProviderUnreachable,
    RejectedByProvider,
    RemoteStatus,
    local_path,
)
from .partition import AcceleratorDevice, claim_slices, release_claim, slice_key
from .queue import (
    Admit,
    Dispatch,
    DuplicateId,
    EmptyRequest,
    Evict,
    QueueState,
    Reject,
    Requeue,
    UnknownProject,
    reconcile,
    requeue,
    submit,
)


class InvariantViolation(RuntimeError):
    def __init__(self, invariant: str, detail: str):
        super().__init__(f"{invariant}: {detail}")
        self.invariant = invariant
        self.detail = detail


def sample_delay(rng: random.Random, dist: Tuple[int, int]) -> int:
    """Uniform integer delay in ``[mean - jitter, mean + jitter]``, rounded half up.

    Always consumes exactly one draw.
    """
    mean, jitter = dist
    u = rng.random()
    return math.floor(mean - jitter + u * 2 * jitter + 0.5)


# --------------------------------------------------------------------------
# Scenario


@dataclass(frozen=True)
class DeviceSpec:
    model: str
    count: int
    slices: int


@dataclass(frozen=True)
class LocalNodeSpec:
    id: str
    site: str
    capacity: ResourceVector
    devices: Tuple[DeviceSpec, ...] = ()

    def full_capacity(self) -> ResourceVector:
        accel: Dict[str, int] = {}
        for dev in self.devices:
            key = slice_key(dev.model)
            accel[key] = accel.get(key, 0) + dev.count * dev.slices
        return rv_add(self.capacity, ResourceVector(accel=accel))


@dataclass(frozen=True)
class WorkflowEntry:
    id: str
    start_time: int
    doc: str
    project: str
    user: str
    max_retries: int = 0
    # Rules whose jobs exit with an application error.
    fail_rules: Tuple[str, ...] = ()
    image: str = "workflow"

    def rules(self) -> List[dag.Rule]:
        return dag.parse_workflow(self.doc)


@dataclass(frozen=True)
class FailureSpec:
    site: str
    window: Tuple[int, int]
    mode: str

    def active(self, t: int) -> bool:
        return self.window[0] <= t < self.window[1]


@dataclass(frozen=True)
class Knobs:
    sync_period: int = 30
    eviction_grace: int = 0
    reconcile_period: int = 10
    horizon: Optional[int] = None


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    local_nodes: Tuple[LocalNodeSpec, ...] = ()
    providers: Tuple[ProviderDescriptor, ...] = ()
    projects: Tuple[Project, ...] = ()
    workloads: Tuple[WorkloadSpec, ...] = ()
    workflows: Tuple[WorkflowEntry, ...] = ()
    knobs: Knobs = Knobs()
    failures: Tuple[FailureSpec, ...] = ()
    # Where the scenario was loaded from; recorded in the log header only.
    name: str = ""

    @property
    def sites(self) -> List[str]:
        local = sorted({n.site for n in self.local_nodes})
        return local + sorted(p.site for p in self.providers)

    def workflow_specs(self) -> List[WorkloadSpec]:
        specs = []
        for entry in self.workflows:
            for rule in entry.rules():
                specs.append(
                    rule.workload(
                        entry.id,
                        entry.project,
                        entry.user,
                        entry.start_time,
                        entry.max_retries,
                        "fail" if rule.name in entry.fail_rules else "succeed",
                        entry.image,
                    )
                )
        return specs

    def default_horizon(self) -> int:
        """Generous cut-off: last arrival + serialized work + 10x queueing and polling."""
        specs = list(self.workloads) + self.workflow_specs()
        last = max(
            [s.submit_time for s in self.workloads]
            + [w.start_time for w in self.workflows]
            + [f.window[1] for f in self.failures]
            + [0]
        )
        work = sum(s.est_duration * (s.max_retries + 1) for s in specs)
        delay = max([sum(p.queue_delay_dist) for p in self.providers] + [0])
        polling = self.knobs.sync_period + self.knobs.reconcile_period + self.knobs.eviction_grace
        return last + work + 10 * (len(specs) + 1) * (delay + polling)

    def with_seed(self, seed: int) -> "Scenario":
        return dataclasses.replace(self, seed=seed)


def inject_failure(scn: Scenario, spec: FailureSpec) -> Scenario:
    """Return a copy of ``scn`` in which provider ``spec.site`` misbehaves during ``spec.window``.

    ``blackout`` makes the provider unreachable; ``loss`` marks jobs running
    there during the window LOST.
    """
    from .offload import UnknownSite

    if spec.site not in {p.site for p in scn.providers}:
        raise UnknownSite(spec.site)
    t0, t1 = spec.window
    if t0 < 0 or t1 < t0:
        raise ValueError(f"bad failure window {spec.window}")
    if spec.mode not in ("blackout", "loss"):
        raise ValueError(f"unknown failure mode {spec.mode!r}")
    return dataclasses.replace(scn, failures=scn.failures + (spec,))


# --------------------------------------------------------------------------
# Event log


@dataclass(frozen=True)
class Event:
    t: int
    seq: int
    kind: str
    payload: Dict[str, Any]

    def to_json(self) -> str:
        payload = json.dumps(self.payload, sort_keys=True, separators=(",", ":"))
        return f'{{"t":{self.t},"seq":{self.seq},"kind":{json.dumps(self.kind)},"payload":{payload}}}'


class CorruptLog(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EventLog:
    def __init__(self, records: Optional[Iterable[Event]] = None):
        self.records: List[Event] = list(records or [])

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def emit(self, t: int, kind: str, payload: Dict[str, Any]) -> Event:
        event = Event(t, len(self.records), kind, payload)
        if self.records and (t, event.seq) <= (self.records[-1].t, self.records[-1].seq):
            raise InvariantViolation("log-order", f"event at t={t} after t={self.records[-1].t}")
        self.records.append(event)
        return event

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "EventLog":
        records = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptLog(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(data, dict) or set(data) != {"t", "seq", "kind", "payload"}:
                raise CorruptLog(lineno, "expected keys t, seq, kind, payload")
            if not isinstance(data["t"], int) or not isinstance(data["seq"], int):
                raise CorruptLog(lineno, "t and seq must be integers")
            if not isinstance(data["kind"], str) or not isinstance(data["payload"], dict):
                raise CorruptLog(lineno, "kind must be a string and payload an object")
            records.append(Event(data["t"], data["seq"], data["kind"], data["payload"]))
        return cls(records)


# --------------------------------------------------------------------------
# Simulated provider backend


@dataclass
class _RemoteJob:
    remote_id: str
    local_id: str
    request: ResourceVector
    start: int
    end: int
    outcome: str
    lost_at: Optional[int]

    def status(self, now: int) -> RemoteStatus:
        if self.lost_at is not None and now >= self.lost_at:
            return RemoteStatus.LOST
        if now < self.start:
            return RemoteStatus.QUEUED
        if now < self.end:
            return RemoteStatus.RUNNING
        return RemoteStatus.DONE if self.outcome == "succeed" else RemoteStatus.FAILED


class SimProvider:
    """Remote batch system answering the four protocol verbs on the simulated clock.

    A remote job waits a sampled queue delay, runs for the workload's
    ``est_duration`` and ends DONE or FAILED per its ``outcome``.  With
    probability ``loss_rate`` it is LOST halfway through its run.
    """

    def __init__(
        self,
        desc: ProviderDescriptor,
        rng: random.Random,
        clock: Callable[[], int],
        workloads: Mapping[str, WorkloadSpec],
        failures: Sequence[FailureSpec] = (),
    ):
        self.desc = desc
        self.rng = rng
        self.clock = clock
        self.workloads = workloads
        self.failures = [f for f in failures if f.site == desc.site]
        self.jobs: Dict[str, _RemoteJob] = {}
        self.deleted: set = set()
        self._seq = itertools.count(1)

    def reachable(self) -> bool:
        now = self.clock()
        return not any(f.mode == "blackout" and f.active(now) for f in self.failures)

    def in_use(self, now: int) -> ResourceVector:
        return rv_sum(j.request for j in self.jobs.values() if not j.status(now).terminal)

    def handle(self, verb: str, body: Dict[str, Any]) -> Dict[str, Any]:
        now = self.clock()
        if verb == "CREATE":
            return self._create(body, now)
        remote_id = body.get("remote_id")
        if verb == "DELETE":
            if remote_id in self.jobs:
                del self.jobs[remote_id]
                self.deleted.add(remote_id)
                return {"ok": True}
            if remote_id in self.deleted:
                return {"ok": True}
            return {"error": f"unknown remote_id {remote_id}"}
        job = self.jobs.get(remote_id)
        if job is None:
            return {"error": f"unknown remote_id {remote_id}"}
        status = job.status(now)
        if verb == "STATUS":
            return {"status": status.value}
        if verb == "LOGS":
            lines = []
            if now >= job.start and (job.lost_at is None or job.lost_at >= job.start):
                lines.append(f"START {job.local_id}")
            if status in (RemoteStatus.DONE, RemoteStatus.FAILED):
                lines.append(f"END {job.local_id}")
            return {"log": "".join(line + "\n" for line in lines)}
        return {"error": f"unknown verb {verb}"}

    def _create(self, body: Dict[str, Any], now: int) -> Dict[str, Any]:
        spec = self.workloads.get(body.get("id"))
        if spec is None:
            return {"error": f"unknown workload {body.get('id')}"}
        res = body["resources"]
        request = ResourceVector(res["cpu"], res["mem_gib"], res.get("accel", {}))
        if not rv_fits(rv_add(self.in_use(now), request), self.desc.capacity):
            return {"error": "insufficient capacity"}
        delay = sample_delay(self.rng, self.desc.queue_delay_dist)
        lost = self.rng.random() < self.desc.loss_rate
        start = now + delay
        end = start + spec.est_duration
        lost_at = start + spec.est_duration // 2 if lost else None
        for f in self.failures:
            if f.mode != "loss":
                continue
            lo, hi = max(start, f.window[0]), min(end, f.window[1])
            if lo < hi:
                lost_at = lo if lost_at is None else min(lost_at, lo)
        remote_id = f"{self.desc.site}-{next(self._seq):05d}"
        self.jobs[remote_id] = _RemoteJob(remote_id, spec.id, request, start, end, spec.outcome, lost_at)
        return {"remote_id": remote_id}


# --------------------------------------------------------------------------
# Engine


def _rv(vector: ResourceVector) -> Dict[str, Any]:
    return vector.to_dict()


@dataclass
class SimResult:
    log: EventLog
    jobs: Dict[str, Job]
    nodes: Dict[str, Node]
    workflows: Dict[str, dag.WorkflowRun]
    offload: OffloadController
    providers: Dict[str, SimProvider]
    horizon_reached: bool = False

    def stuck(self) -> List[str]:
        return sorted(j.id for j in self.jobs.values() if not j.state.terminal)


class Simulation:
    """Single-threaded event loop driving queue, workflows and providers."""

    def __init__(self, scenario: Scenario, check_invariants: bool = True):
        self.scenario = scenario
        self.knobs = scenario.knobs
        self.check_invariants = check_invariants
        self.rng = random.Random(scenario.seed)
        self.log = EventLog()
        self.now = 0
        self.horizon = scenario.knobs.horizon if scenario.knobs.horizon is not None else scenario.default_horizon()
        self._agenda: List[Tuple[int, int, str, tuple]] = []
        self._order = itertools.count()
        self._immediate_reconcile = False
        self._periodic_at: Optional[int] = None
        self._sync_at: Optional[int] = None
        self.horizon_reached = False
        self._started = False
        # Evicted jobs still holding their allocation during the grace period.
        self._draining: set = set()
        # Called with the simulation after every reconcile step (external checkers).
        self.reconcile_hooks: List[Callable[["Simulation"], None]] = []
        self._reserved_ids = {w.id for w in scenario.workloads} | {w.id for w in scenario.workflow_specs()}

        self.queue = QueueState(projects={p.name: p for p in scenario.projects})
        self.specs: Dict[str, WorkloadSpec] = {}
        self.nodes: Dict[str, Node] = {}
        for spec in scenario.local_nodes:
            devices = []
            for dev in spec.devices:
                for i in range(dev.count):
                    devices.append(AcceleratorDevice(f"{spec.id}/{dev.model}-{i}", dev.model, dev.slices))
            self.nodes[spec.id] = Node(spec.id, spec.site, NodeKind.LOCAL, spec.full_capacity(), devices=devices)
        self.offload = OffloadController()
        self.providers: Dict[str, SimProvider] = {}
        for desc in sorted(scenario.providers, key=lambda p: p.site):
            backend = SimProvider(desc, self.rng, lambda: self.now, self.specs, scenario.failures)
            self.providers[desc.site] = backend
            self.nodes[desc.site] = self.offload.register_provider(desc, InProcessChannel(backend))
        self.workflows: Dict[str, dag.WorkflowRun] = {}
        self._workflow_of: Dict[str, Tuple[str, str]] = {}
        self._workflow_entries = {w.id: w for w in scenario.workflows}

    # -- agenda -------------------------------------------------------------

    def _schedule(self, t: int, action: str, *args: Any) -> None:
        heapq.heappush(self._agenda, (t, next(self._order), action, args))

    def _emit(self, kind: str, **payload: Any) -> None:
        self.log.emit(self.now, kind, payload)

    def _request_reconcile(self) -> None:
        if not self._immediate_reconcile:
            self._immediate_reconcile = True
            self._schedule(self.now, "reconcile", False)

    def _ensure_periodic(self) -> None:
        period = self.knobs.reconcile_period
        at = (self.now // period + 1) * period
        if self._periodic_at is None or self._periodic_at <= self.now:
            self._periodic_at = at
            self._schedule(at, "reconcile", True)

    def _ensure_sync(self) -> None:
        period = self.knobs.sync_period
        if self._sync_at is None or self._sync_at <= self.now:
            self._sync_at = (self.now // period + 1) * period
            self._schedule(self._sync_at, "sync")

    def ordered_nodes(self) -> List[Node]:
        return sorted(self.nodes.values(), key=node_order_key)

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        scn = self.scenario
        if scn.local_nodes or scn.providers or scn.workloads or scn.workflows or scn.projects:
            # An empty scenario yields an empty log.
            self._emit("SimStart", seed=scn.seed, scenario=scn.name)
        for node in self.ordered_nodes():
            self._emit(
                "NodeUp",
                node=node.id,
                site=node.site,
                node_kind=node.kind.value,
                capacity=_rv(node.capacity),
            )
        for project in sorted(self.queue.projects.values(), key=lambda p: p.name):
            self._emit(
                "Project",
                project=project.name,
                quota=None if project.quota is None else _rv(project.quota),
            )
        for spec in self.scenario.workloads:
            self._schedule(spec.submit_time, "submit", spec)
        for entry in self.scenario.workflows:
            self._schedule(entry.start_time, "workflow_start", entry.id)

    def submit_now(self, spec: WorkloadSpec) -> str:
        """Inject a workload at the current clock (interactive sessions)."""
        self.start()
        spec = dataclasses.replace(spec, submit_time=self.now)
        if spec.id in self._reserved_ids:
            raise DuplicateId(spec.id)
        if spec.request.is_zero():
            raise EmptyRequest(spec.id)
        if self.queue.projects and spec.project not in self.queue.projects:
            raise UnknownProject(spec.project)
        self._reserved_ids.add(spec.id)
        self._schedule(self.now, "submit", spec)
        return spec.id

    def run_until(self, limit: Optional[int] = None) -> None:
        self.start()
        stop = self.horizon if limit is None else min(limit, self.horizon)
        while self._agenda and self._agenda[0][0] <= stop:
            t, _, action, args = heapq.heappop(self._agenda)
            self.now = t
            getattr(self, f"_on_{action}")(*args)
        if limit is not None and limit > self.now:
            self.now = min(limit, self.horizon)
        if self._agenda and self._agenda[0][0] > self.horizon and (limit is None or limit >= self.horizon):
            self.horizon_reached = True

    def run(self) -> SimResult:
        self.run_until()
        if self.horizon_reached:
            self.now = self.horizon
            self._emit("Horizon", stuck=[j.id for j in self._live_jobs()])
        return self.result()

    def result(self) -> SimResult:
        return SimResult(
            self.log, self.queue.jobs, self.nodes, self.workflows, self.offload, self.providers, self.horizon_reached
        )

    def _live_jobs(self) -> List[Job]:
        return sorted((j for j in self.queue.jobs.values() if not j.state.terminal), key=lambda j: j.id)

    # -- handlers -------------------------------------------------------------

    def _on_submit(self, spec: WorkloadSpec) -> None:
        self.specs[spec.id] = spec
        submit(self.queue, spec, self.now)
        payload = dict(
            job=spec.id,
            job_kind=spec.kind.value,
            project=spec.project,
            user=spec.user,
            request=_rv(spec.request),
            submit_time=spec.submit_time,
            max_retries=spec.max_retries,
        )
        if spec.workflow is not None:
            payload["workflow"] = spec.workflow
        self._emit("Submit", **payload)
        self._request_reconcile()

    def _on_reconcile(self, periodic: bool) -> None:
        if periodic:
            if self._periodic_at != self.now:
                return
            self._periodic_at = None
        else:
            self._immediate_reconcile = False
        self.queue.clock = self.now
        decisions = reconcile(self.queue, self.ordered_nodes(), self.knobs.eviction_grace)
        for decision in decisions:
            job = self.queue.jobs[decision.job]
            if isinstance(decision, Admit):
                transition(job, JobState.ADMITTED, self.now, Reason.QUOTA_ADMIT)
                self._emit("Admit", job=job.id, project=job.spec.project)
            elif isinstance(decision, Dispatch):
                self._dispatch(job, self.nodes[decision.node])
            elif isinstance(decision, Evict):
                self._evict(job, decision.reason)
            elif isinstance(decision, Requeue):
                self._requeue(job)
            elif isinstance(decision, Reject):
                self.queue.pending.remove(job.id)
                self._fail(job, Reason.FAULT, detail=decision.reason)
        if self.queue.pending:
            self._ensure_periodic()
        if self.check_invariants:
            self._check_nodes()
        for hook in self.reconcile_hooks:
            hook(self)

    def _dispatch(self, job: Job, node: Node) -> None:
        record = None
        if node.kind is NodeKind.VIRTUAL:
            try:
                record = self.offload.create_remote(job.spec, node.provider, self.now)
            except ProviderUnreachable:
                self._emit("ProviderUnreachable", site=node.site, verb="CREATE", job=job.id)
                self._ensure_periodic()
                return
            except RejectedByProvider as exc:
                self.queue.pending.remove(job.id)
                self._fail(job, Reason.FAULT, detail=str(exc))
                return
        node.allocate(job.spec.request)
        job.node = node.id
        job.attempt += 1
        job.dispatch_time = self.now
        job.start_time = None
        self.queue.pending.remove(job.id)
        self.queue.running.add(job.id)
        transition(job, JobState.DISPATCHED, self.now, Reason.DISPATCH)
        self._emit(
            "Dispatch",
            job=job.id,
            node=node.id,
            site=node.site,
            node_kind=node.kind.value,
            project=job.spec.project,
            user=job.spec.user,
            request=_rv(job.spec.request),
            attempt=job.attempt,
        )
        if record is not None:
            self._emit("RemoteCreate", job=job.id, site=node.site, remote_id=record.remote_id)
            self._ensure_sync()
            return
        owner = (job.spec.project, job.spec.user)
        for key, count in job.spec.request.accel.items():
            job.instances.extend(claim_slices(node.devices, key, count, owner))
        self._start(job)
        self._schedule(self.now + job.spec.est_duration, "finish", job.id, job.attempt)

    def _start(self, job: Job) -> None:
        transition(job, JobState.RUNNING, self.now, Reason.START)
        job.start_time = self.now
        self._emit("Start", job=job.id, node=job.node)

    def _release(self, job: Job) -> None:
        node = self.nodes[job.node]
        request = job.spec.request
        node.release(request)
        if job.id in self._draining:
            node.draining = rv_sub(node.draining, request)
            self._draining.discard(job.id)
        if job.instances:
            release_claim(node.devices, job.instances)
            job.instances = []
        job.node = None
        self._emit(
            "Release",
            job=job.id,
            node=node.id,
            site=node.site,
            project=job.spec.project,
            user=job.spec.user,
            request=_rv(request),
        )

    def _finish(self, job: Job, success: bool) -> None:
        self.queue.running.discard(job.id)
        if success:
            transition(job, JobState.SUCCEEDED, self.now, Reason.FINISH)
            self._emit("Finish", job=job.id, project=job.spec.project, user=job.spec.user)
        else:
            transition(job, JobState.FAILED, self.now, Reason.FAULT)
            self._emit("Fail", job=job.id, project=job.spec.project, user=job.spec.user, reason=Reason.FAULT.value)
        self._release(job)
        self._job_terminal(job)
        self._request_reconcile()

    def _fail(self, job: Job, reason: Reason, detail: str = "") -> None:
        transition(job, JobState.FAILED, self.now, reason)
        payload = dict(job=job.id, project=job.spec.project, user=job.spec.user, reason=reason.value)
        if detail:
            payload["detail"] = detail
        self._emit("Fail", **payload)
        self._job_terminal(job)

    def _evict(self, job: Job, reason: Reason) -> None:
        node = self.nodes[job.node]
        self.queue.running.discard(job.id)
        transition(job, JobState.EVICTED, self.now, reason)
        self._emit("Evict", job=job.id, node=node.id, site=node.site, project=job.spec.project, reason=reason.value)
        if node.kind is NodeKind.VIRTUAL and reason is Reason.EVICT_FOR_INTERACTIVE:
            record = self.offload.records[job.id]
            try:
                ok = self.offload.delete_remote(record)
                self._emit("RemoteDelete", job=job.id, site=node.site, remote_id=record.remote_id, ok=ok)
            except ProviderUnreachable:
                self.offload.defer_delete(record)
                self._emit("ProviderUnreachable", site=node.site, verb="DELETE", job=job.id)
                self._ensure_sync()
        if reason is Reason.EVICT_FOR_INTERACTIVE and self.knobs.eviction_grace:
            self._draining.add(job.id)
            node.draining = rv_add(node.draining, job.spec.request)
            self._schedule(self.now + self.knobs.eviction_grace, "drained", job.id, job.attempt)
        else:
            self._release(job)

    def _requeue(self, job: Job) -> None:
        requeue(job, self.now)
        if job.state is JobState.PENDING:
            self.queue.pending.append(job.id)
            self.queue.resort()
            self._emit("Requeue", job=job.id, project=job.spec.project, retries_used=job.retries_used)
        else:
            self._emit(
                "Fail",
                job=job.id,
                project=job.spec.project,
                user=job.spec.user,
                reason=Reason.RETRIES_EXHAUSTED.value,
            )
            self._job_terminal(job)

    def _on_drained(self, job_id: str, attempt: int) -> None:
        job = self.queue.jobs[job_id]
        if job.attempt != attempt or job.node is None:
            return
        self._release(job)
        self._requeue(job)
        self._request_reconcile()

    def _on_finish(self, job_id: str, attempt: int) -> None:
        job = self.queue.jobs[job_id]
        if job.state is not JobState.RUNNING or job.attempt != attempt:
            return
        self._finish(job, job.spec.outcome == "succeed")

    def _on_sync(self) -> None:
        if self._sync_at == self.now:
            self._sync_at = None
        for record, ok in self.offload.retry_deletes():
            self._emit("RemoteDelete", job=record.local_id, site=record.provider, remote_id=record.remote_id, ok=ok)
        updates = self.offload.sync_states(self.now)
        for update in updates:
            record = update.record
            job = self.queue.jobs[record.local_id]
            self._emit(
                "RemoteStatus",
                job=job.id,
                site=record.provider,
                remote_id=record.remote_id,
                status=update.status.value,
            )
            for state in local_path(job.state, update.status):
                if state is JobState.RUNNING:
                    self._start(job)
                elif state is JobState.SUCCEEDED:
                    self._finish(job, True)
                elif state is JobState.FAILED:
                    self._finish(job, False)
                elif state is JobState.EVICTED:
                    self._evict(job, Reason.REMOTE_LOST)
                    self._requeue(job)
                    self._request_reconcile()
        if self.offload.records or self.offload.pending_deletes:
            self._ensure_sync()
        if self.check_invariants:
            self.check_remote_consistency()

    def _on_workflow_start(self, run_id: str) -> None:
        entry = self._workflow_entries[run_id]
        run = dag.WorkflowRun(entry.rules(), run_id=run_id)
        self.workflows[run_id] = run
        self._emit("WorkflowStart", run=run_id, rules=len(run.rules))
        self._release_rules(run, dag.ready_set(run))
        self._maybe_end_workflow(run)

    def _release_rules(self, run: dag.WorkflowRun, names: Iterable[str]) -> None:
        entry = self._workflow_entries[run.run_id]
        for name in sorted(names):
            run.release([name])
            spec = run.rule(name).workload(
                run.run_id,
                entry.project,
                entry.user,
                self.now,
                entry.max_retries,
                "fail" if name in entry.fail_rules else "succeed",
                entry.image,
            )
            self._workflow_of[spec.id] = (run.run_id, name)
            self._emit("RuleRelease", run=run.run_id, rule=name, job=spec.id)
            self._on_submit(spec)

    def _job_terminal(self, job: Job) -> None:
        if job.id not in self._workflow_of:
            return
        run_id, rule = self._workflow_of[job.id]
        run = self.workflows[run_id]
        outcome = dag.RuleStatus.DONE if job.state is JobState.SUCCEEDED else dag.RuleStatus.FAILED
        before = dict(run.rule_status)
        _, ready = dag.on_rule_terminal(run, rule, outcome)
        self._emit("RuleDone" if outcome is dag.RuleStatus.DONE else "RuleFailed", run=run_id, rule=rule, job=job.id)
        for name in sorted(run.rule_status):
            if run.rule_status[name] is dag.RuleStatus.CANCELLED and before[name] is not dag.RuleStatus.CANCELLED:
                self._emit("RuleCancel", run=run_id, rule=name)
        self._release_rules(run, ready)
        self._maybe_end_workflow(run)

    def _maybe_end_workflow(self, run: dag.WorkflowRun) -> None:
        if not run.finished:
            return
        counts = {s.value: 0 for s in dag.RuleStatus}
        for status in run.rule_status.values():
            counts[status.value] += 1
        self._emit(
            "WorkflowEnd",
            run=run.run_id,
            done=counts["Done"],
            failed=counts["Failed"],
            cancelled=counts["Cancelled"],
        )

    # -- self checks -----------------------------------------------------------

    def _check_nodes(self) -> None:
        for node in self.nodes.values():
            if not rv_fits(node.allocated, node.capacity):
                raise InvariantViolation("no-overcommit", f"node {node.id} allocated {node.allocated!r}")
        for name, project in self.queue.projects.items():
            if project.quota is not None and not rv_fits(self.queue.project_usage(name), project.quota):
                raise InvariantViolation("project-quota", f"project {name} over quota")

    def check_remote_consistency(self) -> None:
        for site in self.offload.providers:
            local = sorted(
                j.id
                for j in self.queue.jobs.values()
                if j.node == site and j.state in (JobState.DISPATCHED, JobState.RUNNING)
            )
            remote = self.offload.active_on(site)
            if local != remote:
                raise InvariantViolation("remote-local-consistency", f"{site}: local {local} remote {remote}")


def run_scenario(scn: Scenario, check_invariants: bool = True) -> SimResult:
    return Simulation(scn, check_invariants).run()
