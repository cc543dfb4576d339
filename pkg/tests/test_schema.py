import copy
import json
import random

import pytest

from fedorch.schema import ScenarioValidationError, load_scenario, scenario_from_dict, scenario_to_dict
from scenario_gen import random_scenario


def base():
    return random_scenario(random.Random(0), n_jobs=5, providers=1, workflows=1)


def error_path(data):
    with pytest.raises(ScenarioValidationError) as info:
        scenario_from_dict(data)
    return info.value.path


def test_random_scenario_validates():
    scn = scenario_from_dict(base())
    assert len(scn.workloads) == 5 and len(scn.providers) == 1


def test_unknown_field_rejected_with_path():
    data = base()
    data["workloads"][2]["colour"] = "red"
    assert error_path(data) == "workloads[2].colour"


def test_wrong_type_reports_nested_path():
    data = base()
    data["workloads"][3]["request"]["cpu_cores"] = "four"
    assert error_path(data) == "workloads[3].request.cpu_cores"


def test_negative_timestamp_rejected():
    data = base()
    data["workloads"][0]["submit_time"] = -1
    assert error_path(data) == "workloads[0].submit_time"


def test_undeclared_accelerator_rejected():
    data = base()
    data["workloads"][1]["request"]["accel"] = {"H100-slice": 1}
    assert error_path(data) == "workloads[1].request.accel.H100-slice"


def test_duplicate_workload_id():
    data = base()
    data["workloads"][1]["id"] = data["workloads"][0]["id"]
    assert error_path(data) == "workloads[1].id"


def test_empty_request_rejected():
    data = base()
    data["workloads"][0]["request"] = {}
    assert error_path(data) == "workloads[0].request"


def test_unknown_project_rejected():
    data = base()
    data["workloads"][4]["project"] = "gamma"
    assert error_path(data) == "workloads[4].project"


def test_jitter_above_mean_rejected():
    data = base()
    data["sites"]["providers"][0]["queue_delay_dist"] = {"mean": 3, "jitter": 4}
    assert error_path(data) == "sites.providers[0].queue_delay_dist.jitter"


def test_cyclic_workflow_rejected():
    data = base()
    data["workflows"][0]["doc"] = "rule a:\n  input: y\n  output: x\nrule b:\n  input: x\n  output: y\n"
    assert error_path(data) == "workflows[0].doc"


def test_failure_on_unknown_site():
    data = base()
    data["failures"] = [{"site": "nowhere", "window": [0, 10], "mode": "blackout"}]
    assert error_path(data) == "failures[0].site"


def test_missing_seed():
    data = base()
    del data["seed"]
    assert error_path(data) == "seed"


def test_round_trip_through_dict():
    scn = scenario_from_dict(base())
    assert scenario_from_dict(scenario_to_dict(scn)) == scn


def test_load_reports_json_syntax_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "seed": 1,\n  oops\n}\n')
    with pytest.raises(ScenarioValidationError) as info:
        load_scenario(path)
    assert "line 3" in str(info.value)


def test_load_records_name(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps(base()))
    assert load_scenario(path).name == str(path)


def test_bundled_four_site_fixture():
    scn = load_scenario("@fourSite")
    assert {p.site for p in scn.providers} == {"tier1-condor", "hpc-slurm", "site-podman"}
    assert {p.flavor.value for p in scn.providers} == {"CondorLike", "SlurmLike", "ContainerRuntime"}
    assert sorted(n.id for n in scn.local_nodes) == ["server-1", "server-2", "server-3", "server-4"]
    assert len(scn.workloads) + len(scn.workflow_specs()) == 200


def test_four_site_hardware():
    scn = load_scenario("@fourSite")
    nodes = {n.id: n for n in scn.local_nodes}
    assert (nodes["server-1"].capacity.cpu_cores, nodes["server-1"].capacity.memory_gib) == (64, 750)
    for name in ("server-2", "server-3", "server-4"):
        assert (nodes[name].capacity.cpu_cores, nodes[name].capacity.memory_gib) == (128, 1024)


def test_validation_does_not_mutate_input():
    data = base()
    snapshot = copy.deepcopy(data)
    scenario_from_dict(data)
    assert data == snapshot
