import pytest
from hypothesis import given, strategies as st

from fedorch.core import (
    LEGAL_TRANSITIONS,
    ZERO,
    IllegalTransition,
    Job,
    JobState,
    Node,
    NodeKind,
    Project,
    Reason,
    ResourceError,
    ResourceVector,
    WorkloadKind,
    WorkloadSpec,
    node_order_key,
    rv_add,
    rv_fits,
    rv_sub,
    transition,
)

MODELS = ["A100-slice", "T4-slice", "RTX5000-slice"]
vectors = st.builds(
    ResourceVector,
    st.integers(0, 200),
    st.integers(0, 2000),
    st.dictionaries(st.sampled_from(MODELS), st.integers(0, 14), max_size=3),
)


def rv(cpu=0, mem=0, **accel):
    return ResourceVector(cpu, mem, accel)


def spec(kind=WorkloadKind.BATCH, max_retries=0):
    return WorkloadSpec("j1", kind, "p", "u", rv(1, 1), max_retries=max_retries)


def test_add_componentwise():
    assert rv_add(rv(2, 4), rv(1, 0)) == rv(3, 4)


def test_add_zero_is_identity():
    a = ResourceVector(3, 7, {"T4-slice": 2})
    assert rv_add(a, ZERO) == a


def test_add_merges_disjoint_accelerator_keys():
    a = ResourceVector(0, 0, {"T4": 1})
    b = ResourceVector(0, 0, {"A100": 2})
    assert rv_add(a, b) == ResourceVector(0, 0, {"T4": 1, "A100": 2})


def test_fits_cpu_on_large_node():
    assert rv_fits(rv(4), rv(64, 750))


def test_zero_fits_anything():
    assert rv_fits(ZERO, ZERO)
    assert rv_fits(ZERO, rv(1, 1, T4=1))


def test_fits_missing_accelerator_key_counts_as_zero():
    assert not rv_fits(ResourceVector(0, 0, {"A100": 1}), ResourceVector(0, 0, {"T4": 8}))


def test_negative_components_rejected():
    with pytest.raises(ResourceError):
        ResourceVector(-1, 0)
    with pytest.raises(ResourceError):
        ResourceVector(0, 0, {"T4-slice": -2})


def test_subtraction_below_zero_is_contract_violation():
    with pytest.raises(ResourceError):
        rv_sub(rv(1, 1), rv(2, 0))


def test_zero_accelerator_entries_are_dropped():
    assert ResourceVector(1, 1, {"T4-slice": 0}) == rv(1, 1)
    assert hash(ResourceVector(1, 1, {"T4-slice": 0})) == hash(rv(1, 1))


def test_round_trip_dict():
    a = ResourceVector(3, 9, {"A100-slice": 2})
    assert ResourceVector.from_dict(a.to_dict()) == a


@given(vectors, vectors)
def test_add_then_sub_round_trips(a, b):
    assert rv_sub(rv_add(a, b), b) == a


@given(vectors, vectors)
def test_fits_matches_componentwise_definition(a, b):
    keys = set(a.accel) | set(b.accel)
    expected = (
        a.cpu_cores <= b.cpu_cores
        and a.memory_gib <= b.memory_gib
        and all(a.accel.get(k, 0) <= b.accel.get(k, 0) for k in keys)
    )
    assert rv_fits(a, b) == expected


def test_batch_evictable_interactive_not():
    assert spec(WorkloadKind.BATCH).evictable
    assert not spec(WorkloadKind.INTERACTIVE).evictable


def test_running_to_evicted_for_batch():
    job = Job.submitted(spec(), 0)
    for t, (to, reason) in enumerate(
        [
            (JobState.ADMITTED, Reason.QUOTA_ADMIT),
            (JobState.DISPATCHED, Reason.DISPATCH),
            (JobState.RUNNING, Reason.START),
            (JobState.EVICTED, Reason.EVICT_FOR_INTERACTIVE),
        ],
        start=1,
    ):
        transition(job, to, t, reason)
    assert job.state is JobState.EVICTED
    last = job.history[-1]
    assert (last.t, last.from_state, last.to_state, last.reason) == (
        4,
        JobState.RUNNING,
        JobState.EVICTED,
        Reason.EVICT_FOR_INTERACTIVE,
    )


def test_terminal_state_cannot_restart():
    job = Job.submitted(spec(), 0)
    job.state = JobState.SUCCEEDED
    with pytest.raises(IllegalTransition):
        transition(job, JobState.RUNNING, 5, Reason.START)
    assert job.state is JobState.SUCCEEDED


def test_evicted_back_to_pending():
    job = Job.submitted(spec(max_retries=2), 0)
    job.state = JobState.EVICTED
    transition(job, JobState.PENDING, 10, Reason.USER_SUBMIT)
    assert job.state is JobState.PENDING


def test_terminal_states_have_no_outgoing_edges():
    assert LEGAL_TRANSITIONS[JobState.SUCCEEDED] == frozenset()
    assert LEGAL_TRANSITIONS[JobState.FAILED] == frozenset()


def test_every_non_terminal_state_can_fail():
    for state in JobState:
        if not state.terminal:
            assert JobState.FAILED in LEGAL_TRANSITIONS[state]


def test_required_lifecycle_edges_present():
    required = [
        (JobState.PENDING, JobState.ADMITTED),
        (JobState.ADMITTED, JobState.DISPATCHED),
        (JobState.DISPATCHED, JobState.RUNNING),
        (JobState.RUNNING, JobState.SUCCEEDED),
        (JobState.RUNNING, JobState.FAILED),
        (JobState.RUNNING, JobState.EVICTED),
        (JobState.EVICTED, JobState.PENDING),
        (JobState.DISPATCHED, JobState.FAILED),
    ]
    for a, b in required:
        assert b in LEGAL_TRANSITIONS[a]


def test_node_allocate_refuses_overcommit():
    node = Node("n", "s", NodeKind.LOCAL, rv(4, 4))
    node.allocate(rv(3, 3))
    with pytest.raises(ResourceError):
        node.allocate(rv(2, 0))
    assert node.allocated == rv(3, 3)
    node.release(rv(3, 3))
    assert node.free == rv(4, 4)


def test_node_order_local_before_virtual():
    nodes = [
        Node("a-virt", "x", NodeKind.VIRTUAL, ZERO, provider="x"),
        Node("z-local", "l", NodeKind.LOCAL, ZERO),
        Node("b-local", "l", NodeKind.LOCAL, ZERO),
    ]
    assert [n.id for n in sorted(nodes, key=node_order_key)] == ["b-local", "z-local", "a-virt"]


def test_project_quota_admission():
    project = Project("p", quota=rv(8, 8))
    assert project.admits(rv(4, 4), rv(4, 4))
    assert not project.admits(rv(4, 4), rv(5, 1))
    assert Project("free").admits(rv(1000, 1000), rv(1000, 1000))
