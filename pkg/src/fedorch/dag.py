"""Rule-based workflows: parsing, dependency graph and release control.

A workflow document is a sequence of rules::

    rule train:
      input: dataset
      output: model
      resources: cpu=4 mem_gib=16 accel=A100-slice:1
      run: python train.py

Artifacts are abstract names; an artifact exists once the rule producing it
is Done.  The controller never schedules anything itself: ready rules are
handed to the batch queue as ordinary batch workloads.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .core import ResourceVector, WorkloadKind, WorkloadSpec

NAME_RE = re.compile(r"[A-Za-z0-9_.-]+")
_RULE_RE = re.compile(r"rule ([A-Za-z0-9_.-]+):\s*$")
_PROP_RE = re.compile(r"  (input|output|resources|run):(.*)$")

DEFAULT_REQUEST = ResourceVector(cpu_cores=1, memory_gib=1)
DEFAULT_RULE_TIME = 60


class WorkflowError(Exception):
    pass


class WorkflowSyntaxError(WorkflowError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class DuplicateOutput(WorkflowError):
    pass


class CycleDetected(WorkflowError):
    def __init__(self, cycle: Sequence[str]):
        super().__init__("dependency cycle: " + " -> ".join(cycle))
        self.cycle = list(cycle)


class NotReleased(WorkflowError):
    pass


@dataclass(frozen=True)
class Rule:
    name: str
    inputs: Tuple[str, ...]
    outputs: Tuple[str, ...]
    request: ResourceVector = DEFAULT_REQUEST
    run: str = ""
    # Simulated runtime in seconds, from the ``time=`` resource token.
    time: int = DEFAULT_RULE_TIME
    # Whether the resources line was present; keeps unparse faithful.
    explicit_resources: bool = False

    def workload(
        self,
        run_id: str,
        project: str,
        user: str,
        submit_time: int,
        max_retries: int = 0,
        outcome: str = "succeed",
        image: str = "workflow",
    ) -> WorkloadSpec:
        return WorkloadSpec(
            id=f"{run_id}.{self.name}",
            kind=WorkloadKind.BATCH,
            project=project,
            user=user,
            request=self.request,
            image=image,
            command=tuple(self.run.split()),
            est_duration=self.time,
            max_retries=max_retries,
            submit_time=submit_time,
            outcome=outcome,
            workflow=run_id,
        )


def _split_names(text: str, line: int, column: int) -> Tuple[str, ...]:
    names = []
    if not text.strip():
        return ()
    offset = 0
    for raw in text.split(","):
        name = raw.strip()
        if not NAME_RE.fullmatch(name):
            col = column + offset + (len(raw) - len(raw.lstrip()))
            raise WorkflowSyntaxError(f"bad artifact name {name!r}", line, col)
        names.append(name)
        offset += len(raw) + 1
    return tuple(names)


def _parse_resources(text: str, line: int, column: int) -> Tuple[ResourceVector, int]:
    values = {"cpu": 0, "mem_gib": 0, "time": DEFAULT_RULE_TIME}
    accel: Dict[str, int] = {}
    seen = set()
    offset = 0
    for token in text.split(" "):
        col = column + offset
        offset += len(token) + 1
        if not token:
            continue

        def number(raw: str) -> int:
            if not raw.isdigit():
                raise WorkflowSyntaxError(f"expected non-negative integer in {token!r}", line, col)
            return int(raw)

        key, sep, value = token.partition("=")
        if not sep:
            raise WorkflowSyntaxError(f"expected key=value, got {token!r}", line, col)
        if key in seen and key != "accel":
            raise WorkflowSyntaxError(f"repeated resource {key!r}", line, col)
        seen.add(key)
        if key in values:
            values[key] = number(value)
        elif key == "accel":
            model, sep, count = value.rpartition(":")
            if not sep or not NAME_RE.fullmatch(model):
                raise WorkflowSyntaxError(f"accel must be <model>:<slices>, got {value!r}", line, col)
            accel[model] = accel.get(model, 0) + number(count)
        else:
            raise WorkflowSyntaxError(f"unknown resource {key!r}", line, col)
    return ResourceVector(values["cpu"], values["mem_gib"], accel), values["time"]


def parse_workflow(doc: str) -> List[Rule]:
    """Parse a workflow document into rules, checking names and output uniqueness."""
    rules: List[dict] = []
    current: Optional[dict] = None
    for lineno, raw in enumerate(doc.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if not line.startswith(" "):
            match = _RULE_RE.match(line)
            if not match:
                raise WorkflowSyntaxError(f"expected 'rule <name>:', got {line!r}", lineno)
            current = {"name": match.group(1), "line": lineno}
            if any(r["name"] == current["name"] for r in rules):
                raise WorkflowSyntaxError(f"duplicate rule {current['name']!r}", lineno, 6)
            rules.append(current)
            continue
        match = _PROP_RE.match(line)
        if not match:
            indent = len(line) - len(line.lstrip(" "))
            if indent != 2:
                raise WorkflowSyntaxError(f"expected two-space indent, got {indent}", lineno, indent + 1)
            raise WorkflowSyntaxError(f"unknown property line {line.strip()!r}", lineno, 3)
        if current is None:
            raise WorkflowSyntaxError("property outside of a rule", lineno, 3)
        key, value = match.group(1), match.group(2)
        if key in current:
            raise WorkflowSyntaxError(f"repeated {key!r} in rule {current['name']!r}", lineno, 3)
        value_col = len(key) + 4
        if key in ("input", "output"):
            current[key] = _split_names(value, lineno, value_col)
        elif key == "resources":
            current[key] = _parse_resources(value.strip(), lineno, value_col + 1)
        else:
            current[key] = value.strip()

    parsed = []
    owners: Dict[str, str] = {}
    for r in rules:
        outputs = r.get("output", ())
        if not outputs:
            raise WorkflowSyntaxError(f"rule {r['name']!r} has no output", r["line"])
        for out in outputs:
            if out in owners:
                raise DuplicateOutput(f"artifact {out!r} produced by both {owners[out]!r} and {r['name']!r}")
            owners[out] = r["name"]
        inputs = r.get("input", ())
        own = set(inputs) & set(outputs)
        if own:
            raise WorkflowSyntaxError(f"rule {r['name']!r} consumes its own output {sorted(own)}", r["line"])
        request, time = r.get("resources", (DEFAULT_REQUEST, DEFAULT_RULE_TIME))
        parsed.append(
            Rule(
                name=r["name"],
                inputs=inputs,
                outputs=outputs,
                request=request,
                run=r.get("run", ""),
                time=time,
                explicit_resources="resources" in r,
            )
        )
    return parsed


def unparse_workflow(rules: Iterable[Rule]) -> str:
    blocks = []
    for rule in rules:
        lines = [f"rule {rule.name}:"]
        if rule.inputs:
            lines.append("  input: " + ", ".join(rule.inputs))
        lines.append("  output: " + ", ".join(rule.outputs))
        if rule.explicit_resources:
            tokens = [f"cpu={rule.request.cpu_cores}", f"mem_gib={rule.request.memory_gib}"]
            tokens += [f"accel={model}:{count}" for model, count in rule.request.accel.items()]
            if rule.time != DEFAULT_RULE_TIME:
                tokens.append(f"time={rule.time}")
            lines.append("  resources: " + " ".join(tokens))
        if rule.run:
            lines.append("  run: " + rule.run)
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


def build_dependency_graph(rules: Sequence[Rule]) -> Set[Tuple[str, str]]:
    """Edges ``(producer, consumer)``; raises :class:`CycleDetected` with a witness."""
    producer = {out: rule.name for rule in rules for out in rule.outputs}
    edges = {
        (producer[inp], rule.name)
        for rule in rules
        for inp in rule.inputs
        if inp in producer
    }
    children: Dict[str, List[str]] = {rule.name: [] for rule in rules}
    for a, b in sorted(edges):
        children[a].append(b)

    white, grey, black = 0, 1, 2
    color = {name: white for name in children}
    for root in children:
        if color[root] != white:
            continue
        path = [root]
        stack = [iter(children[root])]
        color[root] = grey
        while stack:
            nxt = next(stack[-1], None)
            if nxt is None:
                color[path.pop()] = black
                stack.pop()
            elif color[nxt] == grey:
                raise CycleDetected(path[path.index(nxt):] + [nxt])
            elif color[nxt] == white:
                color[nxt] = grey
                path.append(nxt)
                stack.append(iter(children[nxt]))
    return edges


def descendants(edges: Iterable[Tuple[str, str]], roots: Iterable[str]) -> Set[str]:
    children: Dict[str, List[str]] = {}
    for a, b in edges:
        children.setdefault(a, []).append(b)
    seen: Set[str] = set()
    todo = list(roots)
    while todo:
        for child in children.get(todo.pop(), ()):
            if child not in seen:
                seen.add(child)
                todo.append(child)
    return seen


class RuleStatus(str, enum.Enum):
    WAITING = "Waiting"
    RELEASED = "Released"
    DONE = "Done"
    FAILED = "Failed"
    CANCELLED = "Cancelled"


@dataclass
class WorkflowRun:
    rules: List[Rule]
    produced: Set[str] = field(default_factory=set)
    rule_status: Dict[str, RuleStatus] = field(default_factory=dict)
    run_id: str = "wf"

    def __post_init__(self) -> None:
        self.edges = build_dependency_graph(self.rules)
        self._by_name = {rule.name: rule for rule in self.rules}
        for rule in self.rules:
            self.rule_status.setdefault(rule.name, RuleStatus.WAITING)

    def rule(self, name: str) -> Rule:
        return self._by_name[name]

    def release(self, names: Iterable[str]) -> None:
        for name in names:
            if self.rule_status[name] is not RuleStatus.WAITING:
                raise WorkflowError(f"rule {name!r} is {self.rule_status[name].value}, not Waiting")
            if not set(self._by_name[name].inputs) <= self.produced:
                raise WorkflowError(f"rule {name!r} has missing inputs")
            self.rule_status[name] = RuleStatus.RELEASED

    @property
    def finished(self) -> bool:
        return all(s in (RuleStatus.DONE, RuleStatus.FAILED, RuleStatus.CANCELLED) for s in self.rule_status.values())

    def unproducible_inputs(self) -> Set[str]:
        made = {out for rule in self.rules for out in rule.outputs} | self.produced
        return {inp for rule in self.rules for inp in rule.inputs if inp not in made}


def ready_set(run: WorkflowRun) -> Set[str]:
    return {
        rule.name
        for rule in run.rules
        if run.rule_status[rule.name] is RuleStatus.WAITING and set(rule.inputs) <= run.produced
    }


def on_rule_terminal(run: WorkflowRun, rule: str, outcome: RuleStatus) -> Tuple[WorkflowRun, Set[str]]:
    """Record a released rule's outcome; return the rules that just became ready.

    A failure cancels every transitive descendant that has not finished.
    """
    if run.rule_status.get(rule) is not RuleStatus.RELEASED:
        raise NotReleased(rule)
    if outcome is RuleStatus.DONE:
        before = ready_set(run)
        run.rule_status[rule] = RuleStatus.DONE
        run.produced.update(run.rule(rule).outputs)
        return run, ready_set(run) - before
    if outcome is not RuleStatus.FAILED:
        raise ValueError(f"outcome must be Done or Failed, got {outcome}")
    run.rule_status[rule] = RuleStatus.FAILED
    for name in descendants(run.edges, [rule]):
        if run.rule_status[name] is RuleStatus.WAITING:
            run.rule_status[name] = RuleStatus.CANCELLED
    return run, set()
