"""Scenario JSON files: strict schema, semantic checks and conversion to :class:`Scenario`.

Unknown fields are rejected.  Every problem is reported as a
:class:`ScenarioValidationError` carrying the field path, e.g.
``workloads[3].request.cpu_cores``.
"""

from __future__ import annotations

import dataclasses
import json
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import pydantic
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveInt

from . import dag
from .core import Project, ResourceVector, WorkloadSpec
from .offload import ProviderDescriptor
from .partition import default_slices, slice_key
from .sim import DeviceSpec, FailureSpec, Knobs, LocalNodeSpec, Scenario, WorkflowEntry

BUNDLED_PREFIX = "@"


class ScenarioValidationError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)


class ResourceModel(_Strict):
    cpu_cores: NonNegativeInt = 0
    memory_gib: NonNegativeInt = 0
    accel: Dict[str, NonNegativeInt] = Field(default_factory=dict)

    def vector(self) -> ResourceVector:
        return ResourceVector(self.cpu_cores, self.memory_gib, dict(self.accel))


class DeviceModel(_Strict):
    model: str
    count: PositiveInt
    slices: Optional[PositiveInt] = None


class LocalNodeModel(_Strict):
    id: str
    site: str = "local"
    capacity: ResourceModel
    devices: List[DeviceModel] = Field(default_factory=list)


class DelayModel(_Strict):
    mean: NonNegativeInt = 0
    jitter: NonNegativeInt = 0


class ProviderModel(_Strict):
    site: str
    flavor: Literal["CondorLike", "SlurmLike", "ContainerRuntime"]
    capacity: ResourceModel
    queue_delay_dist: DelayModel = Field(default_factory=DelayModel)
    loss_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    endpoint: str = ""


class SitesModel(_Strict):
    local: List[LocalNodeModel] = Field(default_factory=list)
    providers: List[ProviderModel] = Field(default_factory=list)


class ProjectModel(_Strict):
    name: str
    quota: Optional[ResourceModel] = None
    members: List[str] = Field(default_factory=list)


class WorkloadModel(_Strict):
    id: str
    kind: Literal["Interactive", "Batch"]
    project: str
    user: str
    request: ResourceModel
    image: str = ""
    command: List[str] = Field(default_factory=list)
    est_duration: NonNegativeInt = 0
    max_retries: NonNegativeInt = 0
    submit_time: NonNegativeInt = 0
    outcome: Literal["succeed", "fail"] = "succeed"


class WorkflowModel(_Strict):
    id: str
    start_time: NonNegativeInt = 0
    doc: str
    project: str
    user: str
    max_retries: NonNegativeInt = 0
    fail_rules: List[str] = Field(default_factory=list)
    image: str = "workflow"


class KnobsModel(_Strict):
    sync_period: PositiveInt = 30
    eviction_grace: NonNegativeInt = 0
    reconcile_period: PositiveInt = 10
    horizon: Optional[NonNegativeInt] = None


class FailureModel(_Strict):
    site: str
    window: Tuple[NonNegativeInt, NonNegativeInt]
    mode: Literal["blackout", "loss"]


class ScenarioModel(_Strict):
    seed: int = Field(ge=0, lt=2**64)
    sites: SitesModel = Field(default_factory=SitesModel)
    projects: List[ProjectModel] = Field(default_factory=list)
    workloads: List[WorkloadModel] = Field(default_factory=list)
    workflows: List[WorkflowModel] = Field(default_factory=list)
    knobs: KnobsModel = Field(default_factory=KnobsModel)
    failures: List[FailureModel] = Field(default_factory=list)


def _loc_path(loc: Tuple[Union[str, int], ...]) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += ("." if out else "") + str(part)
    return out


def _check(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ScenarioValidationError(path, message)


def _semantic_checks(model: ScenarioModel) -> None:
    names: Dict[str, str] = {}
    for i, node in enumerate(model.sites.local):
        path = f"sites.local[{i}]"
        _check(node.id not in names, f"{path}.id", f"duplicate node id {node.id!r}")
        names[node.id] = path
        _check(not node.capacity.accel, f"{path}.capacity.accel", "declare accelerators through devices")
    local_sites = {n.site for n in model.sites.local}
    for i, prov in enumerate(model.sites.providers):
        path = f"sites.providers[{i}]"
        _check(prov.site not in names, f"{path}.site", f"site name {prov.site!r} already used")
        _check(prov.site not in local_sites, f"{path}.site", f"site {prov.site!r} is a local site")
        names[prov.site] = path
        _check(
            prov.queue_delay_dist.jitter <= prov.queue_delay_dist.mean,
            f"{path}.queue_delay_dist.jitter",
            "jitter must not exceed mean",
        )

    declared = set()
    for node in model.sites.local:
        for dev in node.devices:
            declared.add(slice_key(dev.model))
    for prov in model.sites.providers:
        declared.update(prov.capacity.accel)

    def accel_ok(res: ResourceModel, path: str) -> None:
        for key in res.accel:
            _check(key in declared, f"{path}.accel.{key}", f"accelerator {key!r} not declared by any site")

    projects = {}
    for i, proj in enumerate(model.projects):
        _check(proj.name not in projects, f"projects[{i}].name", f"duplicate project {proj.name!r}")
        projects[proj.name] = proj
        if proj.quota is not None:
            accel_ok(proj.quota, f"projects[{i}].quota")

    def project_ok(name: str, user: str, path: str) -> None:
        if not projects:
            return
        _check(name in projects, f"{path}.project", f"unknown project {name!r}")
        members = projects[name].members
        _check(not members or user in members, f"{path}.user", f"{user!r} is not a member of {name!r}")

    ids = set()
    for i, w in enumerate(model.workloads):
        path = f"workloads[{i}]"
        _check(w.id not in ids, f"{path}.id", f"duplicate workload id {w.id!r}")
        ids.add(w.id)
        _check(not w.request.vector().is_zero(), f"{path}.request", "request must be non-zero")
        accel_ok(w.request, f"{path}.request")
        project_ok(w.project, w.user, path)

    wf_ids = set()
    for i, wf in enumerate(model.workflows):
        path = f"workflows[{i}]"
        _check(wf.id not in wf_ids, f"{path}.id", f"duplicate workflow id {wf.id!r}")
        wf_ids.add(wf.id)
        project_ok(wf.project, wf.user, path)
        try:
            rules = dag.parse_workflow(wf.doc)
            run = dag.WorkflowRun(rules, run_id=wf.id)
        except dag.WorkflowError as exc:
            raise ScenarioValidationError(f"{path}.doc", str(exc)) from None
        missing = run.unproducible_inputs()
        _check(not missing, f"{path}.doc", f"inputs never produced: {sorted(missing)}")
        rule_names = {r.name for r in rules}
        for j, name in enumerate(wf.fail_rules):
            _check(name in rule_names, f"{path}.fail_rules[{j}]", f"no rule {name!r}")
        for rule in rules:
            job_id = f"{wf.id}.{rule.name}"
            _check(job_id not in ids, f"{path}.doc", f"job id {job_id!r} collides with a workload")
            ids.add(job_id)
            _check(not rule.request.is_zero(), f"{path}.doc", f"rule {rule.name!r} requests nothing")
            for key in rule.request.accel:
                _check(key in declared, f"{path}.doc", f"rule {rule.name!r}: accelerator {key!r} not declared")

    provider_sites = {p.site for p in model.sites.providers}
    for i, f in enumerate(model.failures):
        path = f"failures[{i}]"
        _check(f.site in provider_sites, f"{path}.site", f"unknown provider site {f.site!r}")
        _check(f.window[0] <= f.window[1], f"{path}.window", "window end precedes start")


def _to_scenario(model: ScenarioModel) -> Scenario:
    local = tuple(
        LocalNodeSpec(
            id=n.id,
            site=n.site,
            capacity=n.capacity.vector(),
            devices=tuple(
                DeviceSpec(d.model, d.count, d.slices if d.slices is not None else default_slices(d.model))
                for d in n.devices
            ),
        )
        for n in model.sites.local
    )
    providers = tuple(
        ProviderDescriptor(
            site=p.site,
            flavor=p.flavor,
            capacity=p.capacity.vector(),
            queue_delay_dist=(p.queue_delay_dist.mean, p.queue_delay_dist.jitter),
            loss_rate=p.loss_rate,
            endpoint=p.endpoint,
        )
        for p in model.sites.providers
    )
    projects = tuple(
        Project(p.name, None if p.quota is None else p.quota.vector(), list(p.members)) for p in model.projects
    )
    workloads = tuple(
        WorkloadSpec(
            id=w.id,
            kind=w.kind,
            project=w.project,
            user=w.user,
            request=w.request.vector(),
            image=w.image,
            command=tuple(w.command),
            est_duration=w.est_duration,
            max_retries=w.max_retries,
            submit_time=w.submit_time,
            outcome=w.outcome,
        )
        for w in model.workloads
    )
    workflows = tuple(
        WorkflowEntry(
            id=w.id,
            start_time=w.start_time,
            doc=w.doc,
            project=w.project,
            user=w.user,
            max_retries=w.max_retries,
            fail_rules=tuple(w.fail_rules),
            image=w.image,
        )
        for w in model.workflows
    )
    k = model.knobs
    return Scenario(
        seed=model.seed,
        local_nodes=local,
        providers=providers,
        projects=projects,
        workloads=workloads,
        workflows=workflows,
        knobs=Knobs(k.sync_period, k.eviction_grace, k.reconcile_period, k.horizon),
        failures=tuple(FailureSpec(f.site, tuple(f.window), f.mode) for f in model.failures),
    )


def scenario_from_dict(data: Any) -> Scenario:
    try:
        # JSON mode so that arrays are accepted for tuple fields under strict typing.
        model = ScenarioModel.model_validate_json(json.dumps(data))
    except pydantic.ValidationError as exc:
        err = exc.errors()[0]
        raise ScenarioValidationError(_loc_path(err["loc"]), err["msg"]) from None
    _semantic_checks(model)
    return _to_scenario(model)


def load_scenario(path: Union[str, Path]) -> Scenario:
    """Read a scenario file; ``@name`` loads a bundled scenario such as ``@fourSite``."""
    text = read_scenario_text(path)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioValidationError("", f"line {exc.lineno}: {exc.msg}") from None
    return dataclasses.replace(scenario_from_dict(data), name=str(path))


def read_scenario_text(path: Union[str, Path]) -> str:
    path = str(path)
    if path.startswith(BUNDLED_PREFIX):
        name = path[len(BUNDLED_PREFIX):]
        if not name.endswith(".json"):
            name += ".json"
        return resources.files("fedorch.scenarios").joinpath(name).read_text()
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ScenarioValidationError("", f"cannot read {path}: {exc.strerror}") from None


def _rv_dict(vector: ResourceVector) -> Dict[str, Any]:
    return vector.to_dict()


def scenario_to_dict(scn: Scenario) -> Dict[str, Any]:
    """Inverse of :func:`scenario_from_dict` (defaults written out explicitly)."""
    return {
        "seed": scn.seed,
        "sites": {
            "local": [
                {
                    "id": n.id,
                    "site": n.site,
                    "capacity": _rv_dict(n.capacity),
                    "devices": [{"model": d.model, "count": d.count, "slices": d.slices} for d in n.devices],
                }
                for n in scn.local_nodes
            ],
            "providers": [
                {
                    "site": p.site,
                    "flavor": p.flavor.value,
                    "capacity": _rv_dict(p.capacity),
                    "queue_delay_dist": {"mean": p.queue_delay_dist[0], "jitter": p.queue_delay_dist[1]},
                    "loss_rate": p.loss_rate,
                    "endpoint": p.endpoint,
                }
                for p in scn.providers
            ],
        },
        "projects": [
            {"name": p.name, "quota": None if p.quota is None else _rv_dict(p.quota), "members": list(p.members)}
            for p in scn.projects
        ],
        "workloads": [w.to_dict() for w in scn.workloads],
        "workflows": [
            {
                "id": w.id,
                "start_time": w.start_time,
                "doc": w.doc,
                "project": w.project,
                "user": w.user,
                "max_retries": w.max_retries,
                "fail_rules": list(w.fail_rules),
                "image": w.image,
            }
            for w in scn.workflows
        ],
        "knobs": {
            "sync_period": scn.knobs.sync_period,
            "eviction_grace": scn.knobs.eviction_grace,
            "reconcile_period": scn.knobs.reconcile_period,
            "horizon": scn.knobs.horizon,
        },
        "failures": [{"site": f.site, "window": list(f.window), "mode": f.mode} for f in scn.failures],
    }
