"""Accounting fold over the event stream and text exposition export.

Integrals are exact: resource units times integer seconds.  Utilization
fractions are kept as :class:`fractions.Fraction` and only rounded (to six
decimals) when formatted.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Tuple, Union

from .core import ResourceVector

ALLOWED_LABELS = frozenset({"project", "user", "site", "reason"})

Labels = Tuple[Tuple[str, str], ...]
SeriesKey = Tuple[str, Labels]
Number = Union[int, float]


class OutOfOrderEvent(ValueError):
    pass


class EmptyWindow(ValueError):
    pass


def _labels(**labels: str) -> Labels:
    bad = set(labels) - ALLOWED_LABELS
    if bad:
        raise ValueError(f"labels {sorted(bad)} not in the fixed label set")
    return tuple(sorted(labels.items()))


def resource_metric_part(resource: str) -> str:
    """``cpu_cores`` -> ``cpu_cores``; ``accel:A100-slice`` -> ``a100_slice``."""
    if resource.startswith("accel:"):
        resource = resource[len("accel:"):]
    return re.sub(r"[^a-z0-9_]", "_", resource.lower())


@dataclass
class _Interval:
    project: str
    user: str
    request: Dict[str, int]
    start: int
    end: Optional[int] = None


@dataclass
class MetricsState:
    counters: Dict[SeriesKey, int] = field(default_factory=dict)
    gauges: Dict[SeriesKey, Number] = field(default_factory=dict)
    # (project, resource) -> resource-seconds, accrued up to ``last[0]``.
    allocation_integrals: Dict[Tuple[str, str], int] = field(default_factory=dict)
    user_integrals: Dict[Tuple[str, str], int] = field(default_factory=dict)
    capacity: Dict[str, int] = field(default_factory=dict)
    intervals: List[_Interval] = field(default_factory=list)
    projects: set = field(default_factory=set)
    users: set = field(default_factory=set)
    last: Optional[Tuple[int, int]] = None
    _open: Dict[str, int] = field(default_factory=dict)
    _current: Dict[Tuple[str, str], int] = field(default_factory=dict)
    _current_user: Dict[Tuple[str, str], int] = field(default_factory=dict)

    def inc(self, name: str, amount: int = 1, **labels: str) -> None:
        key = (name, _labels(**labels))
        self.counters[key] = self.counters.get(key, 0) + amount

    def add_gauge(self, name: str, delta: Number, **labels: str) -> None:
        key = (name, _labels(**labels))
        self.gauges[key] = self.gauges.get(key, 0) + delta

    def counter(self, name: str, **labels: str) -> int:
        return self.counters.get((name, _labels(**labels)), 0)

    def counter_total(self, name: str) -> int:
        return sum(v for (n, _), v in self.counters.items() if n == name)


def _advance(state: MetricsState, t: int) -> None:
    if state.last is None:
        return
    dt = t - state.last[0]
    if dt <= 0:
        return
    for key, amount in state._current.items():
        if amount:
            state.allocation_integrals[key] = state.allocation_integrals.get(key, 0) + amount * dt
    for key, amount in state._current_user.items():
        if amount:
            state.user_integrals[key] = state.user_integrals.get(key, 0) + amount * dt


def _allocation(state: MetricsState, payload: Mapping, sign: int) -> None:
    request = ResourceVector.from_dict(payload["request"]).dimensions()
    project, user, site = payload["project"], payload["user"], payload["site"]
    for resource, amount in request.items():
        if not amount:
            continue
        key = (project, resource)
        state._current[key] = state._current.get(key, 0) + sign * amount
        ukey = (user, resource)
        state._current_user[ukey] = state._current_user.get(ukey, 0) + sign * amount
        state.add_gauge(f"site_allocated_{resource_metric_part(resource)}", sign * amount, site=site)


def record(state: MetricsState, event) -> MetricsState:
    """Fold one event record (anything with ``t``, ``seq``, ``kind``, ``payload``)."""
    t, seq, kind, payload = event.t, event.seq, event.kind, event.payload
    if state.last is not None and (t, seq) <= state.last:
        raise OutOfOrderEvent(f"event ({t}, {seq}) after {state.last}")
    _advance(state, t)
    state.last = (t, seq)

    if kind == "NodeUp":
        for resource, amount in ResourceVector.from_dict(payload["capacity"]).dimensions().items():
            state.capacity[resource] = state.capacity.get(resource, 0) + amount
            state.add_gauge(f"site_capacity_{resource_metric_part(resource)}", amount, site=payload["site"])
    elif kind == "Project":
        state.projects.add(payload["project"])
    elif kind == "Submit":
        state.projects.add(payload["project"])
        state.users.add(payload["user"])
        state.inc("jobs_submitted_total", project=payload["project"])
        state.inc("user_jobs_submitted_total", user=payload["user"])
    elif kind == "Dispatch":
        state.inc("jobs_dispatched_total", project=payload["project"], site=payload["site"])
        _allocation(state, payload, +1)
        state._open[payload["job"]] = len(state.intervals)
        request = ResourceVector.from_dict(payload["request"]).dimensions()
        state.intervals.append(_Interval(payload["project"], payload["user"], request, t))
    elif kind == "Release":
        _allocation(state, payload, -1)
        state.intervals[state._open.pop(payload["job"])].end = t
    elif kind == "Evict":
        state.inc("evictions_total", reason=payload["reason"])
    elif kind == "Requeue":
        state.inc("jobs_requeued_total", project=payload["project"])
    elif kind == "Finish":
        state.inc("jobs_succeeded_total", project=payload["project"])
    elif kind == "Fail":
        state.inc("jobs_failed_total", project=payload["project"], reason=payload["reason"])
    elif kind == "RemoteCreate":
        state.inc("remote_creates_total", site=payload["site"])
    elif kind == "RemoteDelete":
        state.inc("remote_deletes_total", site=payload["site"])
    elif kind == "ProviderUnreachable":
        state.inc("provider_unreachable_total", site=payload["site"])
    return state


def fold(events) -> MetricsState:
    state = MetricsState()
    for event in events:
        record(state, event)
    return state


def _escape(value: str) -> str:
    return value.replace("\\", "\\\\").replace("\n", "\\n").replace('"', '\\"')


def _format_value(value: Number) -> str:
    if isinstance(value, int) or (isinstance(value, float) and value.is_integer()):
        return str(int(value))
    return repr(float(value))


def _series(name: str, labels: Labels) -> str:
    if not labels:
        return name
    inner = ",".join(f'{k}="{_escape(v)}"' for k, v in labels)
    return f"{name}{{{inner}}}"


def export_text(state: MetricsState) -> str:
    """One ``name{labels} value`` line per series, sorted; empty state gives ''."""
    series: Dict[SeriesKey, Number] = {}
    series.update(state.counters)
    series.update(state.gauges)
    for (project, resource), amount in state.allocation_integrals.items():
        series[(f"project_{resource_metric_part(resource)}_seconds_total", _labels(project=project))] = amount
    for (user, resource), amount in state.user_integrals.items():
        series[(f"user_{resource_metric_part(resource)}_seconds_total", _labels(user=user))] = amount
    lines = sorted(f"{_series(name, labels)} {_format_value(v)}" for (name, labels), v in series.items())
    return "".join(line + "\n" for line in lines)


_LINE_RE = re.compile(r"^([a-zA-Z_:][a-zA-Z0-9_:]*)(?:\{(.*)\})? (\S+)$")
_LABEL_RE = re.compile(r'([a-zA-Z_][a-zA-Z0-9_]*)="((?:[^"\\]|\\.)*)"')


def parse_text(text: str) -> Dict[SeriesKey, Number]:
    """Parse exposition text back into ``{(name, labels): value}``."""
    out: Dict[SeriesKey, Number] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        match = _LINE_RE.match(line)
        if not match:
            raise ValueError(f"line {lineno}: not a metric line: {line!r}")
        name, raw_labels, raw_value = match.groups()
        labels = []
        if raw_labels:
            pos = 0
            while pos < len(raw_labels):
                m = _LABEL_RE.match(raw_labels, pos)
                if not m:
                    raise ValueError(f"line {lineno}: bad labels {raw_labels!r}")
                value = re.sub(r"\\(.)", lambda g: {"n": "\n"}.get(g.group(1), g.group(1)), m.group(2))
                labels.append((m.group(1), value))
                pos = m.end()
                if pos < len(raw_labels):
                    if raw_labels[pos] != ",":
                        raise ValueError(f"line {lineno}: bad labels {raw_labels!r}")
                    pos += 1
        value = float(raw_value)
        out[(name, tuple(sorted(labels)))] = int(value) if value.is_integer() and "." not in raw_value else value
    return out


def window_integrals(state: MetricsState, t0: int, t1: int, groupby: str) -> Dict[str, Dict[str, int]]:
    """Resource-seconds allocated inside ``[t0, t1)`` per group and resource."""
    out: Dict[str, Dict[str, int]] = {}
    for iv in state.intervals:
        end = iv.end if iv.end is not None else t1
        overlap = min(end, t1) - max(iv.start, t0)
        if overlap <= 0:
            continue
        group = _group(iv, groupby)
        row = out.setdefault(group, {})
        for resource, amount in iv.request.items():
            row[resource] = row.get(resource, 0) + amount * overlap
    return out


def _group(iv: _Interval, groupby: str) -> str:
    if groupby == "project":
        return iv.project
    if groupby == "user":
        return iv.user
    if groupby == "cluster":
        return "cluster"
    raise ValueError(f"groupby must be user, project or cluster, got {groupby!r}")


def utilization(state: MetricsState, window: Tuple[int, int], groupby: str = "project") -> Dict[str, Dict[str, Fraction]]:
    """Fraction of cluster capacity each group held during ``window``, per resource."""
    t0, t1 = window
    if t1 <= t0:
        raise EmptyWindow(f"window ({t0}, {t1}) is empty")
    integrals = window_integrals(state, t0, t1, groupby)
    if groupby == "project":
        groups = set(state.projects) | set(integrals)
    elif groupby == "user":
        groups = set(state.users) | set(integrals)
    else:
        groups = {"cluster"}
    length = t1 - t0
    table = {}
    for group in sorted(groups):
        row = integrals.get(group, {})
        table[group] = {
            resource: Fraction(row.get(resource, 0), cap * length)
            for resource, cap in sorted(state.capacity.items())
            if cap
        }
    return table


def format_fraction(value: Fraction) -> str:
    quantized = (Decimal(value.numerator) / Decimal(value.denominator)).quantize(
        Decimal("0.000001"), rounding=ROUND_HALF_UP
    )
    return f"{quantized:.6f}"
