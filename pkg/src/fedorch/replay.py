"""Rebuild state from an event log and check the platform invariants against it.

This reads nothing but the log: node capacities come from ``NodeUp``, quotas
from ``Project``, allocations from ``Dispatch``/``Release`` pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from .core import (
    ZERO,
    IllegalTransition,
    Job,
    JobState,
    Reason,
    ResourceVector,
    WorkloadSpec,
    rv_add,
    rv_fits,
    rv_sub,
    transition,
)
from .metrics import MetricsState, fold, format_fraction, utilization

_STATE_OF_KIND = {
    "Admit": JobState.ADMITTED,
    "Dispatch": JobState.DISPATCHED,
    "Start": JobState.RUNNING,
    "Finish": JobState.SUCCEEDED,
    "Fail": JobState.FAILED,
    "Evict": JobState.EVICTED,
    "Requeue": JobState.PENDING,
}

_REASON_OF_KIND = {
    "Admit": Reason.QUOTA_ADMIT,
    "Dispatch": Reason.DISPATCH,
    "Start": Reason.START,
    "Finish": Reason.FINISH,
    "Requeue": Reason.USER_SUBMIT,
}


@dataclass
class ReplayResult:
    states: Dict[str, JobState] = field(default_factory=dict)
    allocated: Dict[str, ResourceVector] = field(default_factory=dict)
    capacity: Dict[str, ResourceVector] = field(default_factory=dict)
    violations: List[Tuple[str, str]] = field(default_factory=list)
    jobs: Dict[str, Job] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations


def replay(events: Iterable) -> ReplayResult:
    out = ReplayResult()
    quotas: Dict[str, Optional[ResourceVector]] = {}
    node_kind: Dict[str, str] = {}
    holding: Dict[str, str] = {}
    usage: Dict[str, ResourceVector] = {}
    awaiting_delete: Dict[str, int] = {}
    last = None

    def violate(invariant: str, detail: str) -> None:
        out.violations.append((invariant, detail))

    for ev in events:
        if last is not None and (ev.t, ev.seq) <= last:
            violate("log-order", f"({ev.t}, {ev.seq}) after {last}")
        last = (ev.t, ev.seq)
        p = ev.payload
        if ev.kind == "NodeUp":
            out.capacity[p["node"]] = ResourceVector.from_dict(p["capacity"])
            out.allocated[p["node"]] = ZERO
            node_kind[p["node"]] = p["node_kind"]
            continue
        if ev.kind == "Project":
            quotas[p["project"]] = None if p["quota"] is None else ResourceVector.from_dict(p["quota"])
            continue
        if ev.kind == "Submit":
            spec = WorkloadSpec(
                id=p["job"],
                kind=p["job_kind"],
                project=p["project"],
                user=p["user"],
                request=ResourceVector.from_dict(p["request"]),
                submit_time=p["submit_time"],
                max_retries=p["max_retries"],
            )
            if spec.id in out.jobs:
                violate("unique-job-id", spec.id)
            out.jobs[spec.id] = Job.submitted(spec, ev.t)
            continue
        if ev.kind == "RemoteDelete":
            awaiting_delete.pop(p["job"], None)
            continue
        if ev.kind == "Release":
            node = p["node"]
            if holding.pop(p["job"], None) != node:
                violate("release-matches-dispatch", f"{p['job']} released from {node}")
                continue
            try:
                out.allocated[node] = rv_sub(out.allocated[node], ResourceVector.from_dict(p["request"]))
            except ValueError:
                violate("no-overcommit", f"negative allocation on {node}")
            continue
        if ev.kind not in _STATE_OF_KIND:
            continue

        job = out.jobs.get(p["job"])
        if job is None:
            violate("known-job", f"{ev.kind} for unsubmitted job {p['job']}")
            continue
        reason = _REASON_OF_KIND.get(ev.kind) or Reason(p.get("reason", Reason.FAULT.value))
        before = job.state
        try:
            transition(job, _STATE_OF_KIND[ev.kind], ev.t, reason)
        except IllegalTransition as exc:
            violate("legal-transitions", str(exc))
            continue
        if ev.kind == "Requeue":
            job.retries_used += 1
        request = job.spec.request
        project = job.spec.project
        active = (JobState.ADMITTED, JobState.DISPATCHED, JobState.RUNNING)
        if before in active and job.state not in active:
            usage[project] = rv_sub(usage[project], request)
        elif before not in active and job.state in active:
            usage[project] = rv_add(usage.get(project, ZERO), request)
            quota = quotas.get(project)
            if quota is not None and not rv_fits(usage[project], quota):
                violate("project-quota", f"project {project} over quota at t={ev.t}")
        if ev.kind == "Dispatch":
            node = p["node"]
            if node not in out.capacity:
                violate("known-node", f"dispatch to unknown node {node}")
                continue
            holding[job.id] = node
            out.allocated[node] = rv_add(out.allocated[node], request)
            if not rv_fits(out.allocated[node], out.capacity[node]):
                violate("no-overcommit", f"node {node} at t={ev.t}: {out.allocated[node]!r}")
        elif ev.kind == "Evict" and reason is Reason.EVICT_FOR_INTERACTIVE:
            if node_kind.get(p["node"]) == "Virtual":
                awaiting_delete[job.id] = ev.t
            # Remote loss may hit any job; preemption only batch.
            if job.spec.kind.value != "Batch":
                violate("interactive-never-evicted", job.id)

    for job_id in sorted(awaiting_delete):
        violate("offload-delete", f"evicted offloaded job {job_id} never deleted remotely")
    out.states = {job_id: job.state for job_id, job in out.jobs.items()}
    return out


@dataclass
class RunReport:
    scenario: str
    seed: str
    submitted: int
    succeeded: int
    failed: int
    evictions: int
    site_jobs: Dict[str, int]
    max_interactive_wait: int
    utilization: Dict[str, str]

    def render(self) -> str:
        lines = [
            f"scenario: {self.scenario}",
            f"seed: {self.seed}",
            f"submitted: {self.submitted}",
            f"succeeded: {self.succeeded}",
            f"failed: {self.failed}",
            f"evictions: {self.evictions}",
            f"sites: {len(self.site_jobs)}",
        ]
        lines += [f"  {site}: {count} dispatches" for site, count in sorted(self.site_jobs.items())]
        lines.append(f"max_interactive_wait: {self.max_interactive_wait}")
        lines.append("utilization:")
        lines += [f"  {resource}: {value}" for resource, value in sorted(self.utilization.items())]
        return "\n".join(lines) + "\n"


def build_report(events) -> RunReport:
    """Summarise a run; every figure is a direct count over the log."""
    events = list(events)
    scenario, seed = "-", "-"
    submitted = succeeded = failed = evictions = 0
    sites: Dict[str, int] = {}
    submit_time: Dict[str, int] = {}
    waits: List[int] = []
    for ev in events:
        p = ev.payload
        if ev.kind == "SimStart":
            scenario, seed = p["scenario"] or "-", str(p["seed"])
        elif ev.kind == "NodeUp":
            sites.setdefault(p["site"], 0)
        elif ev.kind == "Submit":
            submitted += 1
            if p["job_kind"] == "Interactive":
                submit_time[p["job"]] = p["submit_time"]
        elif ev.kind == "Finish":
            succeeded += 1
        elif ev.kind == "Fail":
            failed += 1
        elif ev.kind == "Evict":
            evictions += 1
        elif ev.kind == "Dispatch":
            sites[p["site"]] = sites.get(p["site"], 0) + 1
        elif ev.kind == "Start" and p["job"] in submit_time:
            waits.append(ev.t - submit_time.pop(p["job"]))
    state: MetricsState = fold(events)
    util: Dict[str, str] = {}
    end = events[-1].t if events else 0
    if end > 0:
        for resource, value in utilization(state, (0, end), "cluster")["cluster"].items():
            util[resource] = format_fraction(value)
    return RunReport(
        scenario=scenario,
        seed=seed,
        submitted=submitted,
        succeeded=succeeded,
        failed=failed,
        evictions=evictions,
        site_jobs=sites,
        max_interactive_wait=max(waits, default=0),
        utilization=util,
    )
