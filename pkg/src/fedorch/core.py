"""Shared domain types: resource vectors, workloads, nodes and the job lifecycle."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Dict, List, Mapping, Optional, Tuple


class ResourceError(ValueError):
    """Resource arithmetic produced a negative component."""


class IllegalTransition(RuntimeError):
    """A job was asked to take an edge that is not in the lifecycle graph."""


def _freeze_accel(accel: Optional[Mapping[str, int]]) -> Mapping[str, int]:
    items = {}
    for key, value in sorted((accel or {}).items()):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ResourceError(f"accelerator count for {key!r} must be an integer")
        if value < 0:
            raise ResourceError(f"negative accelerator count for {key!r}")
        if value:
            items[key] = value
    return MappingProxyType(items)


@dataclass(frozen=True)
class ResourceVector:
    """Integer quantity of cores, GiB of memory and accelerator slices per model.

    Zero-valued accelerator entries are dropped, so ``{"T4-slice": 0}`` and ``{}``
    compare equal.
    """

    cpu_cores: int = 0
    memory_gib: int = 0
    accel: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("cpu_cores", "memory_gib"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ResourceError(f"{name} must be an integer, got {value!r}")
            if value < 0:
                raise ResourceError(f"{name} must be >= 0, got {value}")
        object.__setattr__(self, "accel", _freeze_accel(self.accel))

    def __hash__(self) -> int:
        return hash((self.cpu_cores, self.memory_gib, tuple(self.accel.items())))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ResourceVector):
            return NotImplemented
        return (
            self.cpu_cores == other.cpu_cores
            and self.memory_gib == other.memory_gib
            and dict(self.accel) == dict(other.accel)
        )

    def __repr__(self) -> str:
        accel = ", ".join(f"{k}:{v}" for k, v in self.accel.items())
        return f"RV(cpu={self.cpu_cores}, mem={self.memory_gib}, accel={{{accel}}})"

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        return rv_add(self, other)

    def __sub__(self, other: "ResourceVector") -> "ResourceVector":
        return rv_sub(self, other)

    def __mul__(self, factor: int) -> "ResourceVector":
        return ResourceVector(
            self.cpu_cores * factor,
            self.memory_gib * factor,
            {k: v * factor for k, v in self.accel.items()},
        )

    def is_zero(self) -> bool:
        return self.cpu_cores == 0 and self.memory_gib == 0 and not self.accel

    def fits(self, free: "ResourceVector") -> bool:
        return rv_fits(self, free)

    def dimensions(self) -> Dict[str, int]:
        """Flat ``{resource-name: amount}`` view, accelerator keys prefixed ``accel:``."""
        out = {"cpu_cores": self.cpu_cores, "memory_gib": self.memory_gib}
        for key, value in self.accel.items():
            out[f"accel:{key}"] = value
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {"cpu_cores": self.cpu_cores, "memory_gib": self.memory_gib, "accel": dict(self.accel)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ResourceVector":
        return cls(
            cpu_cores=data.get("cpu_cores", 0),
            memory_gib=data.get("memory_gib", 0),
            accel=dict(data.get("accel", {})),
        )


ZERO = ResourceVector()


def rv_add(a: ResourceVector, b: ResourceVector) -> ResourceVector:
    accel = dict(a.accel)
    for key, value in b.accel.items():
        accel[key] = accel.get(key, 0) + value
    return ResourceVector(a.cpu_cores + b.cpu_cores, a.memory_gib + b.memory_gib, accel)


def rv_sub(a: ResourceVector, b: ResourceVector) -> ResourceVector:
    """Componentwise ``a - b``; raises :class:`ResourceError` if any component goes negative."""
    if not rv_fits(b, a):
        raise ResourceError(f"cannot subtract {b!r} from {a!r}")
    accel = dict(a.accel)
    for key, value in b.accel.items():
        accel[key] = accel[key] - value
    return ResourceVector(a.cpu_cores - b.cpu_cores, a.memory_gib - b.memory_gib, accel)


def rv_fits(request: ResourceVector, free: ResourceVector) -> bool:
    if request.cpu_cores > free.cpu_cores or request.memory_gib > free.memory_gib:
        return False
    return all(value <= free.accel.get(key, 0) for key, value in request.accel.items())


def rv_sum(vectors) -> ResourceVector:
    total = ZERO
    for vector in vectors:
        total = rv_add(total, vector)
    return total


class WorkloadKind(str, enum.Enum):
    INTERACTIVE = "Interactive"
    BATCH = "Batch"


class JobState(str, enum.Enum):
    PENDING = "Pending"
    ADMITTED = "Admitted"
    DISPATCHED = "Dispatched"
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    EVICTED = "Evicted"

    @property
    def terminal(self) -> bool:
        return self in (JobState.SUCCEEDED, JobState.FAILED)


class Reason(str, enum.Enum):
    USER_SUBMIT = "UserSubmit"
    QUOTA_ADMIT = "QuotaAdmit"
    DISPATCH = "Dispatch"
    START = "Start"
    FINISH = "Finish"
    FAULT = "Fault"
    EVICT_FOR_INTERACTIVE = "EvictForInteractive"
    REMOTE_LOST = "RemoteLost"
    RETRIES_EXHAUSTED = "RetriesExhausted"


# Dispatched -> Evicted covers deleting an offloaded job that has not started
# remotely yet, and a remote LOST report before the first RUNNING poll.
LEGAL_TRANSITIONS: Mapping[JobState, frozenset] = MappingProxyType({
    JobState.PENDING: frozenset({JobState.ADMITTED, JobState.FAILED}),
    JobState.ADMITTED: frozenset({JobState.DISPATCHED, JobState.FAILED}),
    JobState.DISPATCHED: frozenset({JobState.RUNNING, JobState.FAILED, JobState.EVICTED}),
    JobState.RUNNING: frozenset({JobState.SUCCEEDED, JobState.FAILED, JobState.EVICTED}),
    JobState.EVICTED: frozenset({JobState.PENDING, JobState.FAILED}),
    JobState.SUCCEEDED: frozenset(),
    JobState.FAILED: frozenset(),
})


def is_legal(current: JobState, to: JobState) -> bool:
    return to in LEGAL_TRANSITIONS[current]


@dataclass(frozen=True)
class WorkloadSpec:
    id: str
    kind: WorkloadKind
    project: str
    user: str
    request: ResourceVector
    image: str = ""
    command: Tuple[str, ...] = ()
    est_duration: int = 0
    max_retries: int = 0
    submit_time: int = 0
    # Simulation-only: whether the workload exits with an application error.
    outcome: str = "succeed"
    # Workflow run that released this workload, if any.
    workflow: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", WorkloadKind(self.kind))
        object.__setattr__(self, "command", tuple(self.command))
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.outcome not in ("succeed", "fail"):
            raise ValueError(f"unknown outcome {self.outcome!r}")

    @property
    def evictable(self) -> bool:
        return self.kind is WorkloadKind.BATCH

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "id": self.id,
            "kind": self.kind.value,
            "project": self.project,
            "user": self.user,
            "request": self.request.to_dict(),
            "image": self.image,
            "command": list(self.command),
            "est_duration": self.est_duration,
            "max_retries": self.max_retries,
            "submit_time": self.submit_time,
        }
        if self.outcome != "succeed":
            data["outcome"] = self.outcome
        if self.workflow is not None:
            data["workflow"] = self.workflow
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "WorkloadSpec":
        fields = dict(data)
        fields["request"] = ResourceVector.from_dict(fields["request"])
        fields["command"] = tuple(fields.get("command", ()))
        return cls(**fields)


@dataclass(frozen=True)
class TransitionRecord:
    t: int
    from_state: Optional[JobState]
    to_state: JobState
    reason: Reason


@dataclass
class Job:
    """A submitted workload plus its mutable lifecycle bookkeeping.

    Owned by the simulator's event loop; nothing else writes to it.
    """

    spec: WorkloadSpec
    state: JobState = JobState.PENDING
    retries_used: int = 0
    history: List[TransitionRecord] = field(default_factory=list)
    # Node currently holding this job's allocation (cleared on release).
    node: Optional[str] = None
    dispatch_time: Optional[int] = None
    start_time: Optional[int] = None
    # Bumped on every dispatch so stale completion events can be discarded.
    attempt: int = 0
    instances: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def id(self) -> str:
        return self.spec.id

    @classmethod
    def submitted(cls, spec: WorkloadSpec, t: int) -> "Job":
        job = cls(spec)
        job.history.append(TransitionRecord(t, None, JobState.PENDING, Reason.USER_SUBMIT))
        return job


def transition(job: Job, to: JobState, t: int, reason: Reason) -> Job:
    """Move ``job`` along a lifecycle edge, appending a transition record."""
    if not is_legal(job.state, to):
        raise IllegalTransition(f"job {job.id}: {job.state.value} -> {to.value} ({reason.value})")
    job.history.append(TransitionRecord(t, job.state, to, reason))
    job.state = to
    return job


class NodeKind(str, enum.Enum):
    LOCAL = "Local"
    VIRTUAL = "Virtual"


@dataclass
class Node:
    id: str
    site: str
    kind: NodeKind
    capacity: ResourceVector
    allocated: ResourceVector = ZERO
    devices: list = field(default_factory=list)
    # Provider site backing a Virtual node.
    provider: Optional[str] = None
    # Allocation held by evicted jobs still inside their grace period.
    draining: ResourceVector = ZERO

    def __post_init__(self) -> None:
        if self.kind is NodeKind.VIRTUAL and not self.provider:
            raise ValueError(f"virtual node {self.id} needs a provider")

    @property
    def free(self) -> ResourceVector:
        return rv_sub(self.capacity, self.allocated)

    def allocate(self, request: ResourceVector) -> None:
        total = rv_add(self.allocated, request)
        if not rv_fits(total, self.capacity):
            raise ResourceError(f"node {self.id}: {request!r} does not fit free {self.free!r}")
        self.allocated = total

    def release(self, request: ResourceVector) -> None:
        self.allocated = rv_sub(self.allocated, request)


def node_order_key(node: Node) -> Tuple[int, str]:
    """Local nodes by id, then virtual nodes by id."""
    return (0 if node.kind is NodeKind.LOCAL else 1, node.id)


@dataclass
class Project:
    name: str
    quota: Optional[ResourceVector] = None
    members: List[str] = field(default_factory=list)

    def admits(self, usage: ResourceVector, request: ResourceVector) -> bool:
        if self.quota is None:
            return True
        return rv_fits(rv_add(usage, request), self.quota)
