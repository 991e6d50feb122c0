from collections import Counter

import numpy as np
import pytest

from datagen import gen_clustered_points, gen_graph
from forelem.apps import (
    KMeansProblem,
    PageRankProblem,
    build_kmeans_spec,
    build_matmul_spec,
    build_pagerank_spec,
    build_sort_spec,
    check_lloyd_fixed_point,
    check_statistics,
    init_kmeans,
    init_matmul,
    init_pagerank,
    init_sort,
    kmeans_assignment,
    kmeans_statistics,
    matmul_result,
    oracle_dense_matmul,
    oracle_power_iteration,
    pagerank_vector,
    sort_result,
    wcss,
)
from forelem.config import ClusterGenConfig, GraphGenConfig
from forelem.errors import DivByZero, SweepBudgetExhausted, WrongLoopKind
from forelem.exchange import ExchangeScheme
from forelem.executor import (
    ExecutionState,
    RunStatus,
    Scheduler,
    build_partitions,
    executed_tuples,
    is_fixed_point,
    run_forelem,
    run_partitioned,
    run_whilelem,
)
from forelem.ir import (
    ALWAYS,
    Arith,
    Const,
    FieldKind,
    GuardedBlock,
    Program,
    ReservoirDomain,
    SpaceDecl,
    SpaceWrite,
    TupleField,
    TupleSchema,
    build_reservoir,
    forelem,
    read,
)
from forelem.transforms import compose
from forelem.variants import get_variant


@pytest.fixture
def sparse_pair():
    rng = np.random.default_rng(7)
    A = np.where(rng.random((6, 5)) < 0.4, rng.integers(1, 9, (6, 5)), 0).astype(float)
    B = np.where(rng.random((5, 4)) < 0.4, rng.integers(1, 9, (5, 4)), 0).astype(float)
    return A, B


@pytest.fixture
def small_graph():
    edges = gen_graph(GraphGenConfig(scale=4, edge_factor=4, seed=11))
    return PageRankProblem(16, edges, epsilon=1e-12)


@pytest.fixture
def small_points():
    points, _ = gen_clustered_points(ClusterGenConfig(n=48, dim=2, k=3, seed=5))
    return KMeansProblem(points, 3, seed=5)


def _run_sort(values, sched=Scheduler(), adjacent_only=True):
    p = build_sort_spec(values, adjacent_only)
    state = ExecutionState.build(p, init_sort(values))
    return run_whilelem(p, state, sched)


@pytest.mark.parametrize(
    "sched",
    [Scheduler.in_order(), Scheduler.shuffled(seed=3), Scheduler.random(seed=3)],
)
@pytest.mark.parametrize("adjacent_only", [True, False])
def test_whilelem_sort_terminates_sorted(sched, adjacent_only):
    values = np.random.default_rng(1).integers(0, 50, size=12).astype(float)
    state, sweeps, status = _run_sort(values, sched, adjacent_only)
    assert status == RunStatus.TERMINATED
    assert np.array_equal(sort_result(state, len(values)), np.sort(values))
    assert sweeps[-1].state_changes == 0
    assert is_fixed_point(state)


def test_block_reads_state_before_writes():
    state, _, _ = _run_sort(np.array([2.0, 1.0]))
    assert sort_result(state, 2).tolist() == [1.0, 2.0]


def test_sweep_budget_exhaustion():
    values = np.arange(8, 0, -1).astype(float)
    p = build_sort_spec(values)
    result = run_whilelem(p, ExecutionState.build(p, init_sort(values)), max_sweeps=1)
    assert result.status == RunStatus.BUDGET_EXHAUSTED
    assert len(result.sweeps) == 1
    with pytest.raises(SweepBudgetExhausted):
        run_whilelem(p, ExecutionState.build(p, init_sort(values)), max_sweeps=1, strict=True)


def test_random_scheduler_verifies_within_budget():
    values = np.arange(6).astype(float)
    p = build_sort_spec(values)
    sched = Scheduler.random(seed=2)
    result = run_whilelem(p, ExecutionState.build(p, init_sort(values)), sched, max_sweeps=1)
    assert result.status == RunStatus.BUDGET_EXHAUSTED and len(result.sweeps) == 1
    result = run_whilelem(p, ExecutionState.build(p, init_sort(values)), sched, max_sweeps=2)
    assert result.status == RunStatus.TERMINATED
    assert len(result.sweeps) == 2 and result.sweeps[-1].verification


@pytest.mark.parametrize("budget", [1, 2, 3, 5])
def test_random_scheduler_never_overruns_budget(budget):
    values = np.arange(10, 0, -1).astype(float)
    p = build_sort_spec(values)
    result = run_whilelem(p, ExecutionState.build(p, init_sort(values)), Scheduler.random(seed=4), max_sweeps=budget)
    assert len(result.sweeps) <= budget


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("adjacent_only", [True, False])
def test_sort_random_arrays(seed, adjacent_only):
    rng = np.random.default_rng(seed)
    values = rng.integers(-20, 20, size=int(rng.integers(1, 25))).astype(float)
    state, _, status = _run_sort(values, Scheduler.shuffled(seed), adjacent_only)
    assert status == RunStatus.TERMINATED
    assert np.array_equal(sort_result(state, len(values)), np.sort(values))


def test_run_forelem_rejects_whilelem_root():
    p = build_sort_spec(np.array([1.0]))
    with pytest.raises(WrongLoopKind):
        run_forelem(p, ExecutionState.build(p, init_sort(np.array([1.0]))))


@pytest.mark.parametrize("workers", [1, 4])
def test_forelem_matmul_matches_oracle(sparse_pair, workers):
    A, B = sparse_pair
    p = build_matmul_spec(A, B)
    state, stats = run_forelem(p, ExecutionState.build(p, init_matmul(A, B)), workers=workers)
    assert stats.tuples_visited == len(p.reservoirs["X"])
    assert np.array_equal(matmul_result(state, (6, 4)), oracle_dense_matmul(A, B))


def test_executed_tuples_cover_reservoir(sparse_pair):
    p = build_matmul_spec(*sparse_pair)
    state = ExecutionState.build(p, init_matmul(*sparse_pair))
    assert Counter(executed_tuples(state)) == p.reservoirs["X"].multiset()


def test_division_by_zero_names_the_tuple():
    r = build_reservoir(TupleSchema.of("a"), [(0,)])
    a = TupleField("a")
    block = GuardedBlock(ALWAYS, (SpaceWrite("X", (a,), Arith("/", Const(1.0), read("Z", a))),))
    p = Program("div", {"T": r}, {"X": SpaceDecl("X"), "Z": SpaceDecl("Z")}, forelem(ReservoirDomain("T"), block))
    state = ExecutionState.build(p)
    with pytest.raises(DivByZero) as err:
        run_forelem(p, state)
    assert err.value.tuple_ref == (0,)
    assert state.space_values("X") == {}


def test_whilelem_kmeans_reaches_lloyd_fixed_point(small_points):
    prob = small_points
    p = build_kmeans_spec(prob)
    state, _, status = run_whilelem(p, ExecutionState.build(p, init_kmeans(prob)))
    assert status == RunStatus.TERMINATED
    assign = kmeans_assignment(state, prob.n)
    sums, sizes = kmeans_statistics(state, prob.k, prob.dim)
    assert check_statistics(prob.points, assign, sums, sizes) == []
    assert check_lloyd_fixed_point(prob.points, assign, prob.k) == []


def test_floor_defers_blocks_that_would_break_it():
    r = build_reservoir(TupleSchema.of("a"), [(0,), (1,), (2,)])
    block = GuardedBlock(ALWAYS, (SpaceWrite("N", (Const(0),), Const(1), "-="),))
    spaces = {"N": SpaceDecl("N", kind=FieldKind.INDEX, default=0, floor=1)}
    p = Program("drain", {"T": r}, spaces, forelem(ReservoirDomain("T"), block))
    state = ExecutionState.build(p, {"N": {(0,): 2}})
    _, stats = run_forelem(p, state)
    assert state.space_values("N") == {(0,): 1}
    assert stats.state_changes == 1 and stats.deferred == 2


@pytest.mark.parametrize("workers", [2, 8])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_threaded_kmeans_keeps_statistics(workers, seed):
    points, _ = gen_clustered_points(ClusterGenConfig(n=120, dim=2, k=4, seed=seed))
    prob = KMeansProblem(points, 4, seed=seed)
    p = build_kmeans_spec(prob)
    state, _, status = run_whilelem(p, ExecutionState.build(p, init_kmeans(prob)), Scheduler.shuffled(seed), workers=workers)
    assert status == RunStatus.TERMINATED
    assign = kmeans_assignment(state, prob.n)
    sums, sizes = kmeans_statistics(state, prob.k, prob.dim)
    assert sizes.sum() == prob.n and (sizes >= 1).all()
    assert check_statistics(prob.points, assign, sums, sizes) == []
    assert check_lloyd_fixed_point(prob.points, assign, prob.k) == []


def test_accepted_kmeans_moves_never_raise_wcss(small_points):
    prob = small_points
    p = build_kmeans_spec(prob)
    state = ExecutionState.build(p, init_kmeans(prob))
    scores = [wcss(prob.points, kmeans_assignment(state, prob.n), prob.k)]

    def on_change(record):
        scores.append(wcss(prob.points, kmeans_assignment(state, prob.n), prob.k))

    acts = state.activations()
    while state.sweep(acts, range(len(acts)), on_change=on_change).state_changes:
        pass
    assert len(scores) > 1
    assert all(later <= earlier + 1e-9 for earlier, later in zip(scores, scores[1:]))


def test_whilelem_pagerank_matches_power_iteration(small_graph):
    p = build_pagerank_spec(small_graph)
    state, _, status = run_whilelem(p, ExecutionState.build(p, init_pagerank(small_graph)))
    assert status == RunStatus.TERMINATED
    pr = pagerank_vector(state, small_graph.vertices)
    assert np.abs(pr - oracle_power_iteration(small_graph)).max() <= 1e-6


def _partitioned(base, initial, variant, partitions, scheme=None, **kwargs):
    comp = compose(base, variant, partitions)
    parts = build_partitions(comp.programs, initial, comp.layout)
    return run_partitioned(comp.merged, parts, scheme or ExchangeScheme(variant.exchange, variant.master_id), **kwargs)


@pytest.mark.parametrize("name", ["PageRank_1", "PageRank_2", "PageRank_3", "PageRank_4", "PageRank_TRR"])
@pytest.mark.parametrize("scheme", ["buffered", "master"])
def test_partitioned_pagerank_matches_oracle(small_graph, name, scheme):
    variant = get_variant(name, "pagerank")
    result = _partitioned(
        build_pagerank_spec(small_graph), init_pagerank(small_graph), variant, 3, ExchangeScheme.parse(scheme)
    )
    assert result.status == RunStatus.TERMINATED
    pr = pagerank_vector(result.state, small_graph.vertices)
    assert np.abs(pr - oracle_power_iteration(small_graph)).max() <= 1e-6


@pytest.mark.parametrize("name", ["Kmeans_1", "Kmeans_2", "Kmeans_3", "Kmeans_4"])
def test_partitioned_kmeans_invariants(small_points, name):
    prob = small_points
    result = _partitioned(build_kmeans_spec(prob), init_kmeans(prob), get_variant(name, "kmeans"), 2)
    assert result.status == RunStatus.TERMINATED
    assign = kmeans_assignment(result.state, prob.n)
    sums, sizes = kmeans_statistics(result.state, prob.k, prob.dim)
    assert check_statistics(prob.points, assign, sums, sizes) == []
    assert check_lloyd_fixed_point(prob.points, assign, prob.k) == []
    assert result.stats.exchange.exchanges == result.stats.rounds


def test_single_partition_matches_sequential_run(small_graph):
    base = build_pagerank_spec(small_graph)
    seq_state, seq_sweeps, _ = run_whilelem(base, ExecutionState.build(base, init_pagerank(small_graph)))
    result = _partitioned(base, init_pagerank(small_graph), get_variant("PageRank_1", "pagerank"), 1)
    assert np.array_equal(pagerank_vector(result.state, 16), pagerank_vector(seq_state, 16))
    assert result.stats.sweeps == len(seq_sweeps)
    assert result.stats.exchange.deltas_sent == 0


@pytest.fixture
def crowded_pair():
    # clusters 1 and 2 each pull one point out of cluster 0
    points = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 1.0], [0.0, -1.0], [10.0, 1.0], [10.0, -1.0]])
    return KMeansProblem(points, 3, init=np.array([0, 0, 1, 1, 2, 2]))


@pytest.mark.parametrize("name", ["Kmeans_1", "Kmeans_2", "Kmeans_3", "Kmeans_4"])
def test_partitioned_kmeans_never_empties_a_cluster(crowded_pair, name):
    prob = crowded_pair
    seen = []

    def on_exchange(event):
        for part in event.partitions:
            seen.append(kmeans_statistics(part.replica, prob.k, prob.dim)[1])

    result = _partitioned(
        build_kmeans_spec(prob), init_kmeans(prob), get_variant(name, "kmeans"), 2, on_exchange=on_exchange
    )
    assert result.status == RunStatus.TERMINATED
    assert seen and all((sizes >= 1).all() for sizes in seen)
    assign = kmeans_assignment(result.state, prob.n)
    sums, sizes = kmeans_statistics(result.state, prob.k, prob.dim)
    assert (sizes >= 1).all() and sizes.sum() == prob.n
    assert check_statistics(prob.points, assign, sums, sizes) == []
    assert check_lloyd_fixed_point(prob.points, assign, prob.k) == []


@pytest.mark.parametrize(
    "name, scheme",
    [("Kmeans_1", "buffered"), ("Kmeans_1", "master"), ("Kmeans_2", "indirect"), ("Kmeans_4", "buffered")],
)
def test_cluster_sizes_sum_to_n_at_every_exchange(small_points, name, scheme):
    prob = small_points
    totals = []

    def on_exchange(event):
        for part in event.partitions:
            totals.append(sum(part.replica.space_values("M_SIZE").values()))

    result = _partitioned(
        build_kmeans_spec(prob),
        init_kmeans(prob),
        get_variant(name, "kmeans"),
        2,
        ExchangeScheme.parse(scheme),
        on_exchange=on_exchange,
    )
    assert result.status == RunStatus.TERMINATED
    # two phases per round, two replicas per phase
    assert len(totals) == 4 * result.stats.rounds
    assert set(totals) == {prob.n}


def test_pagerank_replicas_lag_by_unflushed_deltas(small_graph):
    n = small_graph.vertices
    phases = []

    def on_exchange(event):
        for part in event.partitions:
            pending = {d.key: d.value for d in part.buffer.deltas() if d.space == "PR"}
            for v in range(n):
                expected = part.replica.base["PR"].read((v,)) + pending.get((v,), 0.0)
                assert part.replica.spaces["PR"].read((v,)) == pytest.approx(expected, abs=1e-12)
            if event.phase == "after":
                assert not pending
        if event.phase == "after":
            first = pagerank_vector(event.partitions[0].replica, n)
            for part in event.partitions[1:]:
                assert np.array_equal(pagerank_vector(part.replica, n), first)
        phases.append(event.phase)

    result = _partitioned(
        build_pagerank_spec(small_graph),
        init_pagerank(small_graph),
        get_variant("PageRank_1", "pagerank"),
        3,
        on_exchange=on_exchange,
    )
    assert result.status == RunStatus.TERMINATED
    assert phases.count("before") == phases.count("after") == result.stats.rounds


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_pagerank_agrees_across_schedulers(small_graph, seed):
    p = build_pagerank_spec(small_graph)

    def ranks(sched):
        state, _, status = run_whilelem(p, ExecutionState.build(p, init_pagerank(small_graph)), sched)
        assert status == RunStatus.TERMINATED
        return pagerank_vector(state, small_graph.vertices)

    tolerance = 10 * small_graph.epsilon * small_graph.vertices
    assert np.abs(ranks(Scheduler.in_order()) - ranks(Scheduler.shuffled(seed))).max() <= tolerance
