import itertools
import random

import pytest
from hypothesis import given, strategies as st

from fedorch.core import (
    ZERO,
    Job,
    JobState,
    Node,
    NodeKind,
    Project,
    Reason,
    ResourceVector,
    WorkloadKind,
    WorkloadSpec,
    rv_add,
    rv_fits,
)
from fedorch.queue import (
    Admit,
    Dispatch,
    DuplicateId,
    EmptyRequest,
    Evict,
    InconsistentState,
    QueueState,
    Reject,
    Requeue,
    UnknownProject,
    evict_for,
    queue_order,
    reconcile,
    requeue,
    submit,
)

B, I = WorkloadKind.BATCH, WorkloadKind.INTERACTIVE


def rv(cpu=0, mem=0, slices=0):
    return ResourceVector(cpu, mem, {"A100-slice": slices} if slices else {})


def wspec(job_id, kind=B, request=None, t=0, project="p", max_retries=0):
    return WorkloadSpec(job_id, kind, project, "u", request or rv(1, 1), submit_time=t, max_retries=max_retries)


def local(node_id, capacity):
    return Node(node_id, "local", NodeKind.LOCAL, capacity)


def place_running(state, node, spec, start):
    """Put ``spec`` on ``node`` as a Running job started at ``start``."""
    job = Job(spec, JobState.RUNNING, node=node.id, dispatch_time=start, start_time=start)
    state.jobs[spec.id] = job
    state.running.add(spec.id)
    node.allocate(spec.request)
    return job


def test_interactive_ordered_before_earlier_batch():
    state = QueueState()
    submit(state, wspec("b", B, t=5), 5)
    submit(state, wspec("i", I, t=5), 5)
    assert state.pending == ["i", "b"]


def test_batch_fifo():
    state = QueueState()
    submit(state, wspec("b2", t=2))
    submit(state, wspec("b1", t=1))
    assert state.pending == ["b1", "b2"]


def test_queue_order_example():
    batch, inter = wspec("x", B, t=3), wspec("y", I, t=5)
    assert queue_order([batch, inter]) == [inter, batch]


def test_queue_order_idempotent():
    specs = queue_order([wspec(f"j{i}", random.Random(i).choice([B, I]), t=i % 4) for i in range(30)])
    assert queue_order(specs) == specs


@given(st.lists(st.tuples(st.sampled_from([B, I]), st.integers(0, 20)), max_size=100))
def test_pending_order_matches_sort_oracle(entries):
    state = QueueState()
    specs = [wspec(f"job{i:03d}", kind, t=t) for i, (kind, t) in enumerate(entries)]
    for spec in specs:
        submit(state, spec)

    def rank(spec):
        return (spec.kind.value != "Interactive", spec.submit_time, spec.id)

    assert state.pending == [s.id for s in sorted(specs, key=rank)]


def test_submit_errors():
    state = QueueState()
    submit(state, wspec("a"))
    with pytest.raises(DuplicateId):
        submit(state, wspec("a"))
    with pytest.raises(EmptyRequest):
        submit(state, wspec("z", request=ZERO))
    state.projects["p"] = Project("p")
    with pytest.raises(UnknownProject):
        submit(state, wspec("q", project="other"))


def test_requeue_without_retries_fails():
    job = Job(wspec("a", max_retries=0), JobState.EVICTED)
    requeue(job, 10)
    assert job.state is JobState.FAILED
    assert job.history[-1].reason is Reason.RETRIES_EXHAUSTED


def test_requeue_with_retries_goes_pending_and_keeps_submit_time():
    job = Job(wspec("a", t=7, max_retries=3), JobState.EVICTED)
    requeue(job, 50)
    assert job.state is JobState.PENDING
    assert job.retries_used == 1
    assert job.spec.submit_time == 7


def test_fourth_eviction_with_three_retries_fails():
    job = Job(wspec("a", max_retries=3), JobState.EVICTED)
    for n in range(1, 5):
        requeue(job, n)
        if n < 4:
            assert job.state is JobState.PENDING
            job.state = JobState.EVICTED
    assert job.state is JobState.FAILED
    assert job.retries_used == 4


def test_empty_pending_gives_no_decisions():
    assert reconcile(QueueState(), [local("n1", rv(4, 4))]) == []


def test_interactive_evicts_two_batch_jobs():
    node = local("n1", rv(8, 8, 4))
    state = QueueState()
    place_running(state, node, wspec("b1", request=rv(1, 1, 2)), 0)
    place_running(state, node, wspec("b2", request=rv(1, 1, 2)), 1)
    submit(state, wspec("i", I, request=rv(1, 1, 4), t=2), 2)
    decisions = reconcile(state, [node])
    evicts = [d for d in decisions if isinstance(d, Evict)]
    assert {d.job for d in evicts} == {"b1", "b2"}
    assert all(d.reason is Reason.EVICT_FOR_INTERACTIVE for d in evicts)
    assert decisions[-1] == Dispatch("i", "n1")
    assert decisions.index(evicts[-1]) < len(decisions) - 1


def test_single_candidate_evicted():
    node = local("n1", rv(8, 8, 7))
    state = QueueState()
    place_running(state, node, wspec("big", request=rv(1, 1, 7)), 0)
    result = evict_for(wspec("i", I, request=rv(0, 0, 1)), [(state.jobs["big"], node)])
    assert result.satisfiable and result.victims == {"big"} and result.node == "n1"


def test_free_node_elsewhere_means_no_eviction():
    busy, idle = local("n1", rv(4, 4)), local("n2", rv(4, 4))
    state = QueueState()
    place_running(state, busy, wspec("b", request=rv(4, 4)), 0)
    submit(state, wspec("i", I, request=rv(2, 2)))
    assert reconcile(state, [busy, idle]) == [Admit("i"), Dispatch("i", "n2")]


def test_not_satisfiable_when_too_big_for_any_node():
    node = local("n1", rv(4, 4))
    state = QueueState()
    place_running(state, node, wspec("b", request=rv(4, 4)), 0)
    result = evict_for(wspec("i", I, request=rv(8, 1)), [(state.jobs["b"], node)])
    assert not result.satisfiable and result.victims == frozenset()


def test_prefers_latest_started_victim():
    node = local("n1", rv(4, 4))
    state = QueueState()
    place_running(state, node, wspec("old", request=rv(2, 2)), 0)
    place_running(state, node, wspec("new", request=rv(2, 2)), 100)
    result = evict_for(wspec("i", I, request=rv(2, 2)), [(state.jobs[j], node) for j in ("old", "new")])
    assert result.victims == {"new"}


def test_equal_start_ties_break_on_id():
    node = local("n1", rv(4, 4))
    state = QueueState()
    place_running(state, node, wspec("b", request=rv(2, 2)), 5)
    place_running(state, node, wspec("a", request=rv(2, 2)), 5)
    result = evict_for(wspec("i", I, request=rv(2, 2)), [(state.jobs[j], node) for j in ("a", "b")])
    assert result.victims == {"a"}


def test_batch_never_evicts():
    node = local("n1", rv(4, 4))
    state = QueueState()
    place_running(state, node, wspec("b1", request=rv(4, 4)), 0)
    submit(state, wspec("b2", request=rv(2, 2), t=1), 1)
    assert reconcile(state, [node]) == []


def test_unsatisfiable_and_over_quota_rejected():
    node = local("n1", rv(4, 4))
    state = QueueState(projects={"p": Project("p", quota=rv(2, 2))})
    submit(state, wspec("huge", request=rv(16, 1)))
    submit(state, wspec("greedy", request=rv(3, 3), t=1))
    decisions = reconcile(state, [node])
    assert Reject("huge", "Unsatisfiable") in decisions
    assert Reject("greedy", "ExceedsQuota") in decisions


def test_quota_blocks_admission_until_usage_drops():
    node = local("n1", rv(8, 8))
    state = QueueState(projects={"p": Project("p", quota=rv(4, 4))})
    place_running(state, node, wspec("b1", request=rv(3, 3)), 0)
    submit(state, wspec("b2", request=rv(2, 2), t=1), 1)
    assert reconcile(state, [node]) == []


def test_eviction_that_frees_quota_admits_earlier_interactive():
    n1, n2 = local("n1", rv(8, 8)), local("n2", rv(4, 4))
    state = QueueState(projects={"alpha": Project("alpha"), "beta": Project("beta", quota=rv(8, 8))})
    place_running(state, n1, wspec("bx", request=rv(8, 1), project="beta"), 0)
    place_running(state, n2, wspec("ay", request=rv(4, 1), project="alpha"), 0)
    submit(state, wspec("i1", I, request=rv(4, 1), t=1, project="beta"), 1)
    submit(state, wspec("i2", I, request=rv(8, 1), t=2, project="alpha"), 2)
    decisions = reconcile(state, [n1, n2])
    assert decisions == [
        Evict("bx", Reason.EVICT_FOR_INTERACTIVE),
        Requeue("bx"),
        Admit("i2"),
        Dispatch("i2", "n1"),
        Evict("ay", Reason.EVICT_FOR_INTERACTIVE),
        Requeue("ay"),
        Admit("i1"),
        Dispatch("i1", "n2"),
    ]


def test_inconsistent_allocation_detected():
    node = local("n1", rv(8, 8))
    state = QueueState()
    place_running(state, node, wspec("b1", request=rv(3, 3)), 0)
    node.allocated = rv(1, 1)
    with pytest.raises(InconsistentState):
        reconcile(state, [node])


def test_local_nodes_filled_before_virtual():
    virt = Node("aaa-remote", "aaa-remote", NodeKind.VIRTUAL, rv(8, 8), provider="aaa-remote")
    loc = local("zzz", rv(8, 8))
    state = QueueState()
    submit(state, wspec("b", request=rv(1, 1)))
    assert reconcile(state, [virt, loc]) == [Admit("b"), Dispatch("b", "zzz")]


def test_grace_period_drains_before_dispatch():
    node = local("n1", rv(4, 4))
    state = QueueState()
    place_running(state, node, wspec("b", request=rv(4, 4)), 0)
    submit(state, wspec("i", I, request=rv(2, 2), t=1), 1)
    decisions = reconcile(state, [node], eviction_grace=30)
    assert decisions == [Evict("b")]


# -- independent oracles ----------------------------------------------------


def oracle_eviction(request, nodes, running):
    """Try every subset of batch jobs on every node; keep the smallest, latest-started one."""
    best = None
    for node in nodes:
        if not rv_fits(request, node.capacity):
            continue
        jobs = [j for j in running if j.node == node.id]
        for size in range(len(jobs) + 1):
            for subset in itertools.combinations(jobs, size):
                freed = node.free
                for j in subset:
                    freed = rv_add(freed, j.spec.request)
                if rv_fits(request, freed):
                    pref = sorted((-j.start_time, j.id) for j in subset)
                    key = (size, pref, node.id)
                    if best is None or key < best:
                        best = key
    return best


def random_instance(rng):
    nodes = []
    state = QueueState()
    for n in range(rng.randint(1, 3)):
        node = local(f"n{n}", rv(rng.choice([4, 8, 16]), rng.choice([8, 16]), rng.choice([0, 7])))
        nodes.append(node)
        for k in range(rng.randint(0, 6)):
            req = rv(rng.randint(0, 4), rng.randint(0, 4), rng.choice([0, 0, 1, 2, 3]))
            if req.is_zero() or not rv_fits(req, node.free):
                continue
            place_running(state, node, wspec(f"b{n}{k}", request=req), rng.randint(0, 5))
    target = wspec("i", I, request=rv(rng.randint(1, 12), rng.randint(1, 12), rng.choice([0, 1, 4, 7])))
    return state, nodes, target


def test_eviction_choice_matches_subset_enumeration():
    rng = random.Random(99)
    checked = 0
    for _ in range(300):
        state, nodes, target = random_instance(rng)
        if any(rv_fits(target.request, n.free) for n in nodes):
            continue
        running = [state.jobs[j] for j in sorted(state.running)]
        expected = oracle_eviction(target.request, nodes, running)
        result = evict_for(target, [(j, next(n for n in nodes if n.id == j.node)) for j in running])
        if expected is None:
            assert not result.satisfiable
            continue
        checked += 1
        size, pref, node_id = expected
        assert len(result.victims) == size
        assert sorted((-state.jobs[v].start_time, v) for v in result.victims) == pref
        assert result.node == node_id
    assert checked > 50


def test_reconcile_eviction_matches_oracle():
    rng = random.Random(7)
    checked = 0
    for _ in range(200):
        state, nodes, target = random_instance(rng)
        if any(rv_fits(target.request, n.free) for n in nodes):
            continue
        running = [state.jobs[j] for j in sorted(state.running)]
        expected = oracle_eviction(target.request, nodes, running)
        submit(state, target, 10)
        decisions = reconcile(state, nodes)
        if expected is None:
            assert decisions in ([], [Reject("i", "Unsatisfiable")])
            continue
        checked += 1
        evicted = {d.job for d in decisions if isinstance(d, Evict)}
        requeued = {d.job for d in decisions if isinstance(d, Requeue)}
        assert evicted == requeued
        assert sorted((-state.jobs[v].start_time, v) for v in evicted) == expected[1]
        assert decisions[-2:] == [Admit("i"), Dispatch("i", expected[2])]
    assert checked > 30
