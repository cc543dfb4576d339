"""Command line entry point.

Exit codes: 0 success, 1 invalid input (scenario, submission or log), 2 an
invariant violation found while running or replaying.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shlex
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, TextIO

from . import metrics
from .core import ResourceVector, WorkloadKind, WorkloadSpec
from .partition import slice_key
from .queue import QueueError
from .replay import build_report, replay
from .schema import ScenarioValidationError, load_scenario
from .sim import CorruptLog, EventLog, InvariantViolation, Scenario, SimResult, Simulation

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_INVARIANT = 2

SESSION_FILE = "session.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load(path: str, seed_override: Optional[int]) -> Scenario:
    try:
        scn = load_scenario(path)
    except ScenarioValidationError as exc:
        raise CliError(EXIT_INVALID, f"invalid scenario: {exc}") from None
    return scn if seed_override is None else scn.with_seed(seed_override)


def check_result(result: SimResult) -> None:
    """Raise :class:`InvariantViolation` for the first problem the replay finds."""
    found = replay(result.log)
    if found.violations:
        raise InvariantViolation(*found.violations[0])
    stuck = result.stuck()
    if stuck:
        raise InvariantViolation("all-jobs-terminal", f"{len(stuck)} jobs not terminal, first {stuck[0]}")


def write_outputs(result: SimResult, out_dir: Path, metrics_out: Optional[Path]) -> Dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    log_text = result.log.to_jsonl()
    paths = {
        "events": out_dir / "events.jsonl",
        "metrics": metrics_out or out_dir / "metrics.txt",
        "report": out_dir / "report.txt",
    }
    paths["events"].write_text(log_text)
    paths["metrics"].parent.mkdir(parents=True, exist_ok=True)
    paths["metrics"].write_text(metrics.export_text(metrics.fold(result.log)))
    paths["report"].write_text(build_report(result.log).render())
    return paths


# -- sessions ---------------------------------------------------------------


@dataclass
class Session:
    """A simulation that is rebuilt from its inputs on every command.

    The engine is deterministic, so replaying the scenario with the recorded
    submissions up to ``clock`` reproduces the live state exactly.
    """

    scenario_path: str
    seed_override: Optional[int] = None
    clock: int = 0
    submissions: List[Dict] = field(default_factory=list)

    def build(self) -> Simulation:
        sim = Simulation(_load(self.scenario_path, self.seed_override))
        for entry in self.submissions:
            sim.run_until(entry["at"])
            sim.submit_now(WorkloadSpec.from_dict(entry["spec"]))
        sim.run_until(self.clock)
        return sim

    def next_id(self, sim: Simulation) -> str:
        n = len(self.submissions) + 1
        while f"adhoc-{n:04d}" in sim.queue.jobs or f"adhoc-{n:04d}" in sim.specs:
            n += 1
        return f"adhoc-{n:04d}"

    def submit(self, spec: WorkloadSpec) -> str:
        sim = self.build()
        if not spec.id:
            spec = dataclasses.replace(spec, id=self.next_id(sim))
        try:
            sim.submit_now(spec)
        except QueueError as exc:
            raise CliError(EXIT_INVALID, f"{type(exc).__name__}: {exc}") from None
        self.submissions.append({"at": self.clock, "spec": spec.to_dict()})
        return spec.id

    def save(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        data = {
            "scenario": self.scenario_path,
            "seed_override": self.seed_override,
            "clock": self.clock,
            "submissions": self.submissions,
        }
        (directory / SESSION_FILE).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")

    @classmethod
    def open(cls, directory: Path) -> "Session":
        path = directory / SESSION_FILE
        if not path.exists():
            raise CliError(EXIT_INVALID, f"no session in {directory}; start one with 'run --session'")
        data = json.loads(path.read_text())
        return cls(data["scenario"], data["seed_override"], data["clock"], data["submissions"])


def status_lines(sim: Simulation) -> List[str]:
    lines = [f"t={sim.now}"]
    for job in sorted(sim.queue.jobs.values(), key=lambda j: j.id):
        lines.append(f"{job.id} {job.spec.kind.value} {job.state.value} node={job.node or '-'} retries={job.retries_used}")
    return lines


def _parse_accel(values: Sequence[str]) -> Dict[str, int]:
    accel: Dict[str, int] = {}
    for value in values:
        model, _, count = value.partition(":")
        if not model or not count.isdigit():
            raise CliError(EXIT_INVALID, f"--accel expects model:slices, got {value!r}")
        key = model if model.endswith("-slice") else slice_key(model)
        accel[key] = accel.get(key, 0) + int(count)
    return accel


def spec_from_args(args: argparse.Namespace) -> WorkloadSpec:
    return WorkloadSpec(
        id=args.id or "",
        kind=WorkloadKind(args.kind),
        project=args.project,
        user=args.user,
        request=ResourceVector(args.cpu, args.mem, _parse_accel(args.accel)),
        command=tuple(args.command),
        est_duration=args.duration,
        max_retries=args.max_retries,
    )


# -- commands ---------------------------------------------------------------


def cmd_validate(args: argparse.Namespace, out: TextIO) -> int:
    scn = _load(args.scenario, args.seed_override)
    print(f"ok: {len(scn.local_nodes)} local nodes, {len(scn.providers)} providers, "
          f"{len(scn.workloads)} workloads, {len(scn.workflows)} workflows", file=out)
    return EXIT_OK


def cmd_run(args: argparse.Namespace, out: TextIO) -> int:
    if args.session:
        session = Session(args.scenario, args.seed_override, args.until or 0)
        sim = session.build()
        session.save(args.out_dir)
        print(f"session started in {args.out_dir} at t={sim.now}", file=out)
        return EXIT_OK
    scn = _load(args.scenario, args.seed_override)
    if args.interactive:
        return _repl(scn, args, sys.stdin, out)
    sim = Simulation(scn)
    return _finish(sim, args, out)


def _finish(sim: Simulation, args: argparse.Namespace, out: TextIO) -> int:
    try:
        result = sim.run()
        write_outputs(result, args.out_dir, args.metrics_out)
        check_result(result)
    except InvariantViolation as exc:
        print(f"invariant violated: {exc.invariant}: {exc.detail}", file=out)
        return EXIT_INVARIANT
    out.write(build_report(result.log).render())
    return EXIT_OK


def _repl(scn: Scenario, args: argparse.Namespace, stdin: TextIO, out: TextIO) -> int:
    """Commands: ``submit <flags>``, ``advance <seconds>``, ``status``, ``quit``."""
    sim = Simulation(scn)
    sim.start()
    parser = build_submit_parser()
    count = 0
    for line in stdin:
        words = shlex.split(line)
        if not words:
            continue
        if words[0] == "quit":
            break
        if words[0] == "status":
            out.write("\n".join(status_lines(sim)) + "\n")
        elif words[0] == "advance" and len(words) == 2 and words[1].isdigit():
            sim.run_until(sim.now + int(words[1]))
            print(f"t={sim.now}", file=out)
        elif words[0] == "submit":
            try:
                sub = parser.parse_args(words[1:])
                spec = spec_from_args(sub)
                if not spec.id:
                    count += 1
                    spec = dataclasses.replace(spec, id=f"adhoc-{count:04d}")
                print(sim.submit_now(spec), file=out)
            except (CliError, QueueError) as exc:
                print(f"error: {type(exc).__name__}: {exc}", file=out)
            except SystemExit:
                print("error: bad submit arguments", file=out)
        else:
            print(f"error: unknown command {words[0]!r}", file=out)
    return _finish(sim, args, out)


def cmd_submit(args: argparse.Namespace, out: TextIO) -> int:
    session = Session.open(args.out_dir)
    job_id = session.submit(spec_from_args(args))
    session.save(args.out_dir)
    print(job_id, file=out)
    return EXIT_OK


def cmd_status(args: argparse.Namespace, out: TextIO) -> int:
    session = Session.open(args.out_dir)
    if args.advance:
        session.clock += args.advance
    sim = session.build()
    if args.advance:
        session.save(args.out_dir)
    out.write("\n".join(status_lines(sim)) + "\n")
    if args.finish:
        return _finish(sim, args, out)
    return EXIT_OK


def cmd_report(args: argparse.Namespace, out: TextIO) -> int:
    try:
        text = Path(args.eventlog).read_text()
    except OSError as exc:
        raise CliError(EXIT_INVALID, f"cannot read {args.eventlog}: {exc.strerror}") from None
    try:
        log = EventLog.from_jsonl(text)
    except CorruptLog as exc:
        raise CliError(EXIT_INVALID, f"corrupt log: {exc}") from None
    out.write(build_report(log).render())
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def _add_submit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", choices=[k.value for k in WorkloadKind], default=WorkloadKind.BATCH.value)
    p.add_argument("--cpu", type=int, default=0)
    p.add_argument("--mem", type=int, default=0, help="memory in GiB")
    p.add_argument("--accel", action="append", default=[], metavar="MODEL:SLICES")
    p.add_argument("--project", required=True)
    p.add_argument("--user", default="cli")
    p.add_argument("--duration", type=int, default=60)
    p.add_argument("--max-retries", type=int, default=0)
    p.add_argument("--id")
    p.add_argument("command", nargs="*")


def build_submit_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="submit", add_help=False, exit_on_error=False)
    _add_submit_flags(p)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedorch", description="Federated batch and interactive scheduling simulator.")
    parser.add_argument("--seed-override", type=int)
    parser.add_argument("--out-dir", type=Path, default=Path("out"))
    parser.add_argument("--metrics-out", type=Path)
    sub = parser.add_subparsers(dest="command_name", required=True)

    p = sub.add_parser("run", help="run a scenario to completion")
    p.add_argument("scenario", help="scenario JSON path, or @fourSite for the bundled fixture")
    p.add_argument("--interactive", action="store_true", help="read submit/advance/status commands from stdin")
    p.add_argument("--session", action="store_true", help="start a session in --out-dir instead of running")
    p.add_argument("--until", type=int, help="session start clock")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("submit", help="submit a job to the session in --out-dir")
    _add_submit_flags(p)
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("status", help="show job states of the session in --out-dir")
    p.add_argument("--advance", type=int, default=0, help="move the session clock forward first")
    p.add_argument("--finish", action="store_true", help="run the session to completion and write outputs")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("report", help="summarise an event log")
    p.add_argument("eventlog")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None, out: Optional[TextIO] = None) -> int:
    out = out or sys.stdout
    # Tests pass their own stream and want errors on it too.
    err = sys.stderr if out is sys.stdout else out
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, out)
    except CliError as exc:
        print(exc, file=err)
        return exc.code
    except InvariantViolation as exc:
        print(f"invariant violated: {exc.invariant}: {exc.detail}", file=err)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
