"""Opportunistic batch admission with strict interactive priority.

``reconcile`` is a pure planning step: it reads a consistent snapshot of the
queue and the nodes and returns an ordered list of decisions.  The simulator
applies them.  Batch jobs only ever fill free capacity; an interactive job that
fits nowhere evicts the smallest set of running batch jobs from one node.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Set, Tuple, Union

from .core import (
    ZERO,
    Job,
    JobState,
    Node,
    Project,
    Reason,
    ResourceVector,
    WorkloadKind,
    WorkloadSpec,
    node_order_key,
    rv_add,
    rv_fits,
    rv_sub,
    rv_sum,
    transition,
)


class QueueError(Exception):
    pass


class DuplicateId(QueueError):
    pass


class EmptyRequest(QueueError):
    pass


class InconsistentState(QueueError):
    pass


class UnknownProject(QueueError):
    pass


@dataclass(frozen=True)
class Admit:
    job: str


@dataclass(frozen=True)
class Dispatch:
    job: str
    node: str


@dataclass(frozen=True)
class Evict:
    job: str
    reason: Reason = Reason.EVICT_FOR_INTERACTIVE


@dataclass(frozen=True)
class Requeue:
    job: str


@dataclass(frozen=True)
class Reject:
    job: str
    reason: str


Decision = Union[Admit, Dispatch, Evict, Requeue, Reject]


def order_key(spec: WorkloadSpec) -> Tuple[int, int, str]:
    return (0 if spec.kind is WorkloadKind.INTERACTIVE else 1, spec.submit_time, spec.id)


def queue_order(pending: Iterable[WorkloadSpec]) -> List[WorkloadSpec]:
    """Interactive first, then oldest submit_time, then id."""
    return sorted(pending, key=order_key)


@dataclass
class QueueState:
    jobs: Dict[str, Job] = field(default_factory=dict)
    # Jobs awaiting placement: Pending, plus Admitted ones whose dispatch failed.
    pending: List[str] = field(default_factory=list)
    # Jobs holding an allocation in Dispatched or Running state.
    running: Set[str] = field(default_factory=set)
    projects: Dict[str, Project] = field(default_factory=dict)
    clock: int = 0

    @property
    def quotas(self) -> Dict[str, Optional[ResourceVector]]:
        return {name: project.quota for name, project in self.projects.items()}

    def resort(self) -> None:
        self.pending = [s.id for s in queue_order(self.jobs[j].spec for j in self.pending)]

    def project_usage(self, project: str) -> ResourceVector:
        return rv_sum(
            job.spec.request
            for job in self.jobs.values()
            if job.spec.project == project
            and job.state in (JobState.ADMITTED, JobState.DISPATCHED, JobState.RUNNING)
        )


def submit(state: QueueState, spec: WorkloadSpec, t: Optional[int] = None) -> str:
    if spec.id in state.jobs:
        raise DuplicateId(spec.id)
    if spec.request.is_zero():
        raise EmptyRequest(spec.id)
    if state.projects and spec.project not in state.projects:
        raise UnknownProject(spec.project)
    state.jobs[spec.id] = Job.submitted(spec, spec.submit_time if t is None else t)
    state.pending.append(spec.id)
    state.resort()
    return spec.id


def requeue(job: Job, t: int) -> Job:
    """Return an evicted job to Pending, or fail it once its retries are spent.

    ``submit_time`` lives on the immutable spec, so FIFO seniority survives.
    """
    job.retries_used += 1
    if job.retries_used > job.spec.max_retries:
        return transition(job, JobState.FAILED, t, Reason.RETRIES_EXHAUSTED)
    return transition(job, JobState.PENDING, t, Reason.USER_SUBMIT)


@dataclass(frozen=True)
class EvictionResult:
    victims: FrozenSet[str]
    node: Optional[str]
    satisfiable: bool

    @classmethod
    def not_satisfiable(cls) -> "EvictionResult":
        return cls(frozenset(), None, False)


def _victim_rank(job: Job) -> Tuple[int, str]:
    # Latest start first; jobs not yet started count from their dispatch.
    started = job.start_time if job.start_time is not None else job.dispatch_time
    return (-(started or 0), job.id)


def _covering_subsets(
    candidates: Sequence[Job], deficit: ResourceVector, size: int
) -> Iterator[Tuple[Job, ...]]:
    """Yield ``size``-subsets of ``candidates`` whose requests cover ``deficit``.

    Subsets come out in lexicographic index order; branches whose remaining
    candidates cannot cover the deficit are cut.
    """
    n = len(candidates)
    suffix = [ZERO] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix[i] = rv_add(suffix[i + 1], candidates[i].spec.request)

    chosen: List[Job] = []

    def walk(start: int, acc: ResourceVector) -> Iterator[Tuple[Job, ...]]:
        if len(chosen) == size:
            if rv_fits(deficit, acc):
                yield tuple(chosen)
            return
        need = size - len(chosen)
        for i in range(start, n - need + 1):
            if not rv_fits(deficit, rv_add(acc, suffix[i])):
                return
            chosen.append(candidates[i])
            yield from walk(i + 1, rv_add(acc, candidates[i].spec.request))
            chosen.pop()

    yield from walk(0, ZERO)


def _deficit(request: ResourceVector, free: ResourceVector) -> ResourceVector:
    accel = {k: max(0, v - free.accel.get(k, 0)) for k, v in request.accel.items()}
    return ResourceVector(
        max(0, request.cpu_cores - free.cpu_cores),
        max(0, request.memory_gib - free.memory_gib),
        accel,
    )


def evict_for(target: WorkloadSpec, running_batch: Sequence[Tuple[Job, Node]]) -> EvictionResult:
    """Choose the fewest batch jobs on one node whose release lets ``target`` fit.

    Among equally small sets the one whose jobs started latest wins (least lost
    work), compared as the sequence of ``(-start, id)`` pairs; remaining ties go
    to node order.  Nodes where ``target`` exceeds total capacity are skipped.
    """
    by_node: Dict[str, Tuple[Node, List[Job]]] = {}
    for job, node in running_batch:
        if job.spec.kind is not WorkloadKind.BATCH:
            continue
        by_node.setdefault(node.id, (node, []))[1].append(job)

    best = None
    for node, jobs in sorted(by_node.values(), key=lambda item: node_order_key(item[0])):
        if not rv_fits(target.request, node.capacity):
            continue
        deficit = _deficit(target.request, rv_add(node.free, node.draining))
        candidates = sorted(jobs, key=_victim_rank)
        limit = len(candidates) if best is None else min(len(candidates), best[0])
        for size in range(0, limit + 1):
            found = next(_covering_subsets(candidates, deficit, size), None)
            if found is not None:
                key = (size, tuple(_victim_rank(j) for j in found))
                if best is None or key < best[:2]:
                    best = (size, key[1], node.id, frozenset(j.id for j in found))
                break
    if best is None:
        return EvictionResult.not_satisfiable()
    return EvictionResult(best[3], best[2], True)


def _check_consistency(state: QueueState, nodes: Sequence[Node]) -> None:
    held: Dict[str, ResourceVector] = {node.id: ZERO for node in nodes}
    for job in state.jobs.values():
        if job.node is None:
            continue
        if job.node not in held:
            raise InconsistentState(f"job {job.id} holds an allocation on unknown node {job.node}")
        held[job.node] = rv_add(held[job.node], job.spec.request)
    for node in nodes:
        if held[node.id] != node.allocated:
            raise InconsistentState(
                f"node {node.id}: allocated {node.allocated!r} but jobs hold {held[node.id]!r}"
            )
        if not rv_fits(node.allocated, node.capacity):
            raise InconsistentState(f"node {node.id} over capacity")
    overlap = set(state.pending) & state.running
    if overlap:
        raise InconsistentState(f"jobs both pending and running: {sorted(overlap)}")


def reconcile(state: QueueState, nodes: Sequence[Node], eviction_grace: int = 0) -> List[Decision]:
    """Plan one admission/dispatch/eviction pass over ``state.pending``.

    With a non-zero ``eviction_grace`` victims keep their allocation while they
    drain, so the interactive job is only evicted-for here and placed by a later
    pass.
    """
    _check_consistency(state, nodes)
    work = sorted((copy.copy(node) for node in nodes), key=node_order_key)
    by_id = {node.id: node for node in work}
    usage = {name: state.project_usage(name) for name in state.projects}
    evicted: Set[str] = set()
    decisions: List[Decision] = []

    def running_batch() -> List[Tuple[Job, Node]]:
        out = []
        for jid in sorted(state.running):
            job = state.jobs[jid]
            if job.spec.kind is WorkloadKind.BATCH and jid not in evicted and job.node in by_id:
                out.append((job, by_id[job.node]))
        return out

    # Evictions can lower a project's usage below its quota, so a job skipped
    # earlier in the pass may have become admissible; scan again until stable.
    decided: Set[str] = set()
    while True:
        evicted_before = len(evicted)
        for spec in queue_order(state.jobs[j].spec for j in state.pending):
            if spec.id in decided:
                continue
            job = state.jobs[spec.id]
            request = spec.request
            project = state.projects.get(spec.project)
            if job.state is JobState.PENDING:
                if not any(rv_fits(request, node.capacity) for node in work):
                    decisions.append(Reject(job.id, "Unsatisfiable"))
                    decided.add(job.id)
                    continue
                if project is not None and project.quota is not None:
                    if not rv_fits(request, project.quota):
                        decisions.append(Reject(job.id, "ExceedsQuota"))
                        decided.add(job.id)
                        continue
                    if not project.admits(usage[spec.project], request):
                        continue

            target = next((node for node in work if rv_fits(request, node.free)), None)
            if target is None and spec.kind is WorkloadKind.INTERACTIVE:
                if any(rv_fits(request, rv_add(node.free, node.draining)) for node in work):
                    # Already-evicted victims are draining; wait for them.
                    continue
                result = evict_for(spec, running_batch())
                if not result.satisfiable:
                    continue
                host = by_id[result.node]
                ordered = sorted(result.victims, key=lambda v: _victim_rank(state.jobs[v]))
                for victim_id in ordered:
                    victim = state.jobs[victim_id]
                    decisions.append(Evict(victim_id, Reason.EVICT_FOR_INTERACTIVE))
                    evicted.add(victim_id)
                    if victim.spec.project in usage:
                        usage[victim.spec.project] = rv_sub(usage[victim.spec.project], victim.spec.request)
                    if eviction_grace:
                        host.draining = rv_add(host.draining, victim.spec.request)
                    else:
                        host.allocated = rv_sub(host.allocated, victim.spec.request)
                if not eviction_grace:
                    decisions.extend(Requeue(v) for v in ordered)
                    target = host
            if target is None:
                continue
            if job.state is JobState.PENDING:
                decisions.append(Admit(job.id))
                if spec.project in usage:
                    usage[spec.project] = rv_add(usage[spec.project], request)
            decisions.append(Dispatch(job.id, target.id))
            decided.add(job.id)
            target.allocated = rv_add(target.allocated, request)
        if len(evicted) == evicted_before:
            break
    return decisions
