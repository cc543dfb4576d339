"""Regenerate src/fedorch/scenarios/fourSite.json (deterministic)."""

import json
import random
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "fedorch" / "scenarios" / "fourSite.json"

PROJECTS = {
    "astro": ["ana", "bo"],
    "hep": ["carl", "dana", "eli"],
    "ml-lab": ["fay", "gus"],
    "theory": ["hal"],
}

WORKFLOW = """\
rule fetch:
  output: raw.dat
  resources: cpu=2 mem_gib=4 time=120
rule calib:
  input: raw.dat
  output: calib.dat
  resources: cpu=4 mem_gib=8 time=300
rule split:
  input: calib.dat
  output: a.dat, b.dat
rule fit_a:
  input: a.dat
  output: fit_a.json
  resources: cpu=8 mem_gib=16 time=600
rule fit_b:
  input: b.dat
  output: fit_b.json
  resources: cpu=8 mem_gib=16 accel=V100-slice:1 time=600
rule merge:
  input: fit_a.json, fit_b.json
  output: merged.json
rule plot:
  input: merged.json
  output: plots.pdf
rule publish:
  input: plots.pdf, merged.json
  output: done.flag
"""


def main() -> None:
    rng = random.Random(20240917)
    workloads = []
    users = [(p, u) for p, members in sorted(PROJECTS.items()) for u in members]
    t = 0
    for i in range(184):
        t += rng.randint(0, 20)
        project, user = rng.choice(users)
        interactive = i % 6 == 5
        if interactive:
            roll = rng.random()
            if roll < 0.4:
                request = {"cpu_cores": 8, "memory_gib": 32, "accel": {"A100-slice": rng.choice([1, 2, 3, 4, 7])}}
            elif roll < 0.7:
                request = {"cpu_cores": 4, "memory_gib": 16, "accel": {"V100-slice": rng.choice([1, 2])}}
            else:
                request = {"cpu_cores": rng.choice([16, 32, 64]), "memory_gib": 64}
            duration = rng.randint(300, 900)
            kind, retries, command = "Interactive", 0, ["jupyter", "lab", "--no-browser"]
        else:
            roll = rng.random()
            if roll < 0.25:
                accel = {"A100-slice": rng.choice([1, 2, 3, 4, 7])}
            elif roll < 0.4:
                accel = {"T4-slice": rng.randint(1, 4)}
            elif roll < 0.6:
                accel = {"V100-slice": rng.randint(1, 4)}
            elif roll < 0.7:
                accel = {rng.choice(["RTX5000-slice", "A30-slice"]): 1}
            else:
                accel = {}
            cpus = [4, 8, 16] if accel else [16, 32, 64]
            request = {"cpu_cores": rng.choice(cpus), "memory_gib": rng.choice([8, 16, 64, 128])}
            if accel:
                request["accel"] = accel
            duration = rng.randint(900, 3600)
            kind, retries = "Batch", rng.choice([2, 3, 3, 4])
            command = ["python3", "train.py", f"--shard={i}"]
        workloads.append({
            "id": f"job-{i:03d}",
            "kind": kind,
            "project": project,
            "user": user,
            "request": request,
            "image": "registry.local/analysis:1.4",
            "command": command,
            "est_duration": duration,
            "max_retries": retries,
            "submit_time": t,
            "outcome": "fail" if kind == "Batch" and rng.random() < 0.05 else "succeed",
        })
    scenario = {
        "seed": 42,
        "sites": {
            "local": [
                {"id": "server-1", "site": "local", "capacity": {"cpu_cores": 64, "memory_gib": 750},
                 "devices": [{"model": "T4", "count": 8}, {"model": "RTX5000", "count": 5}]},
                {"id": "server-2", "site": "local", "capacity": {"cpu_cores": 128, "memory_gib": 1024},
                 "devices": [{"model": "A100", "count": 2}, {"model": "A30", "count": 1}]},
                {"id": "server-3", "site": "local", "capacity": {"cpu_cores": 128, "memory_gib": 1024},
                 "devices": [{"model": "A100", "count": 3}]},
                {"id": "server-4", "site": "local", "capacity": {"cpu_cores": 128, "memory_gib": 1024},
                 "devices": [{"model": "RTX5000", "count": 1}]},
            ],
            "providers": [
                {"site": "tier1-condor", "flavor": "CondorLike",
                 "capacity": {"cpu_cores": 256, "memory_gib": 1024},
                 "queue_delay_dist": {"mean": 60, "jitter": 30}, "loss_rate": 0.02},
                {"site": "hpc-slurm", "flavor": "SlurmLike",
                 "capacity": {"cpu_cores": 128, "memory_gib": 512, "accel": {"V100-slice": 8}},
                 "queue_delay_dist": {"mean": 120, "jitter": 60}, "loss_rate": 0.0},
                {"site": "site-podman", "flavor": "ContainerRuntime",
                 "capacity": {"cpu_cores": 64, "memory_gib": 256},
                 "queue_delay_dist": {"mean": 10, "jitter": 5}, "loss_rate": 0.05},
            ],
        },
        "projects": [
            {"name": name, "quota": None, "members": members} for name, members in sorted(PROJECTS.items())
        ],
        "workloads": workloads,
        "workflows": [
            {"id": "wf-calib", "start_time": 600, "doc": WORKFLOW, "project": "hep", "user": "carl", "max_retries": 2},
            {"id": "wf-calib-2", "start_time": 2400, "doc": WORKFLOW, "project": "hep", "user": "dana",
             "max_retries": 2},
        ],
        "knobs": {"sync_period": 30, "eviction_grace": 0, "reconcile_period": 10},
        "failures": [{"site": "tier1-condor", "window": [1800, 2100], "mode": "blackout"}],
    }
    OUT.write_text(json.dumps(scenario, indent=1) + "\n")


if __name__ == "__main__":
    main()
