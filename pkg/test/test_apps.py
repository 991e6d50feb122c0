from types import SimpleNamespace

import numpy as np
import pytest

from forelem.apps import (
    KMeansProblem,
    PageRankProblem,
    build_kmeans_spec,
    build_matmul_spec,
    build_pagerank_spec,
    build_sort_spec,
    check_lloyd_fixed_point,
    check_statistics,
    cluster_stats,
    dangling_vertices,
    expanded_edges,
    init_kmeans,
    init_pagerank,
    initial_assignment,
    kmeans_early_stop,
    lloyd_margins,
    oracle_dense_matmul,
    oracle_lloyd,
    oracle_power_iteration,
    pagerank_residual,
    pagerank_vector,
    wcss,
)
from forelem.errors import DimMismatch, EmptyGraph, EmptyReservoir
from forelem.executor import ExecutionState, RunStatus, run_whilelem


@pytest.fixture
def blobs():
    rng = np.random.default_rng(8)
    centers = np.array([[0.0, 0.0], [5.0, 5.0], [0.0, 8.0]])
    return np.concatenate([c + rng.normal(0, 0.4, (15, 2)) for c in centers])


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(k=0),
        dict(k=50),
        dict(k=2, convergence_delta=-1.0),
        dict(k=2, threshold=1.5),
        dict(k=2, init=np.full(45, 2)),
    ],
)
def test_kmeans_problem_validation(blobs, kwargs):
    with pytest.raises(ValueError):
        KMeansProblem(blobs, **kwargs)


def test_initial_assignment_fills_every_cluster(blobs):
    prob = KMeansProblem(blobs[:6], 6, seed=1)
    assert sorted(initial_assignment(prob).tolist()) == list(range(6))
    prob = KMeansProblem(blobs, 3, seed=1)
    assert np.array_equal(initial_assignment(prob), initial_assignment(prob))


def test_init_kmeans_statistics_agree(blobs):
    prob = KMeansProblem(blobs, 3)
    spaces = init_kmeans(prob)
    assign = np.array([spaces["M"][(x,)] for x in range(prob.n)])
    sums = np.array([spaces["M_SUM"][(c,)] for c in range(3)])
    sizes = np.array([spaces["M_SIZE"][(c,)] for c in range(3)])
    assert check_statistics(blobs, assign, sums, sizes) == []


@pytest.mark.parametrize("seed", range(100))
def test_init_kmeans_sizes_sum_to_n(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(5, 60)), int(rng.integers(1, 6))
    prob = KMeansProblem(rng.normal(size=(n, 2)), k, seed=seed)
    sizes = np.array([init_kmeans(prob)["M_SIZE"][(c,)] for c in range(k)])
    assert sizes.sum() == n and (sizes >= 1).all()


def test_oracle_lloyd_is_a_fixed_point(blobs):
    prob = KMeansProblem(blobs, 3, seed=4)
    assign, centers, score = oracle_lloyd(prob)
    assert check_lloyd_fixed_point(blobs, assign, 3) == []
    assert score == pytest.approx(wcss(blobs, assign, 3))
    assert centers.shape == (3, 2)


def test_lloyd_check_flags_misassigned_point(blobs):
    assign = np.repeat([0, 1, 2], 15)
    assert check_lloyd_fixed_point(blobs, assign, 3) == []
    assign[0] = 1
    assert check_lloyd_fixed_point(blobs, assign, 3) == [0]


def test_lloyd_margins(blobs):
    assign = np.repeat([0, 1, 2], 15)
    assert lloyd_margins(blobs, assign, 3).max() == 0.0
    assign[0] = 1
    margins = lloyd_margins(blobs, assign, 3)
    assert np.flatnonzero(margins > 1e-9).tolist() == [0]
    assert margins[0] > 4.0


def test_check_statistics_reports_drift(blobs):
    assign = np.repeat([0, 1, 2], 15)
    sums, sizes = cluster_stats(blobs, assign, 3)
    sizes[0] += 1
    sums[2] += 0.5
    problems = check_statistics(blobs, assign, sums, sizes)
    assert len(problems) == 3


def test_identical_points_terminate_immediately():
    prob = KMeansProblem(np.ones((6, 2)), 2, seed=0)
    p = build_kmeans_spec(prob)
    state, sweeps, status = run_whilelem(p, ExecutionState.build(p, init_kmeans(prob)))
    assert status == RunStatus.TERMINATED
    assert len(sweeps) == 1 and sweeps[0].state_changes == 0


def test_kmeans_early_stop():
    prob = KMeansProblem(np.arange(8.0).reshape(4, 2), 2)
    assert kmeans_early_stop(prob, init_kmeans(prob)) is None
    prob = KMeansProblem(np.arange(8.0).reshape(4, 2), 2, threshold=0.5)
    stop = kmeans_early_stop(prob, init_kmeans(prob))
    assert stop(None, SimpleNamespace(state_changes=1))
    assert not stop(None, SimpleNamespace(state_changes=3))


def test_pagerank_problem_drops_self_loops():
    prob = PageRankProblem(3, [(0, 0), (0, 1), (2, 2)])
    assert prob.edges.tolist() == [[0, 1]]
    assert dangling_vertices(prob).tolist() == [1, 2]


@pytest.mark.parametrize(
    "vertices, edges, kwargs",
    [
        (2, [(0, 2)], {}),
        (2, [(-1, 0)], {}),
        (2, [(0, 1)], dict(damping=1.0)),
        (2, [(0, 1)], dict(epsilon=-1e-3)),
    ],
)
def test_pagerank_problem_validation(vertices, edges, kwargs):
    with pytest.raises(ValueError):
        PageRankProblem(vertices, edges, **kwargs)


def test_from_edges_infers_vertex_count():
    assert PageRankProblem.from_edges([(0, 4), (4, 1)]).vertices == 5
    assert PageRankProblem.from_edges([]).vertices == 0


def test_expanded_edges_fan_out_dangling_vertices():
    prob = PageRankProblem(4, [(0, 1), (1, 0)])
    edges = expanded_edges(prob)
    assert len(edges) == 2 + 2 * 3
    assert sorted(edges[edges[:, 0] == 2, 1].tolist()) == [0, 1, 3]
    assert (edges[:, 0] != edges[:, 1]).all()


def test_empty_graph_is_rejected():
    prob = PageRankProblem(0, [])
    with pytest.raises(EmptyGraph):
        build_pagerank_spec(prob)
    with pytest.raises(EmptyGraph):
        oracle_power_iteration(prob)


def _run_pagerank(prob):
    p = build_pagerank_spec(prob)
    state, _, status = run_whilelem(p, ExecutionState.build(p, init_pagerank(prob)))
    assert status == RunStatus.TERMINATED
    return pagerank_vector(state, prob.vertices)


def test_single_vertex_pagerank():
    prob = PageRankProblem(1, [])
    assert _run_pagerank(prob).tolist() == [pytest.approx(0.15)]
    assert oracle_power_iteration(prob).tolist() == [pytest.approx(0.15)]


def test_all_dangling_graph_is_uniform():
    prob = PageRankProblem(4, [], epsilon=1e-13)
    assert np.allclose(_run_pagerank(prob), 0.25, atol=1e-9)
    assert np.allclose(oracle_power_iteration(prob), 0.25)


def test_power_iteration_satisfies_fixed_point():
    rng = np.random.default_rng(3)
    prob = PageRankProblem(20, rng.integers(0, 20, size=(60, 2)))
    pr = oracle_power_iteration(prob)
    assert pagerank_residual(prob, pr) <= 1e-10
    assert pagerank_residual(prob, np.zeros(20)) > 1e-3


def test_matmul_dimension_mismatch():
    with pytest.raises(DimMismatch):
        build_matmul_spec(np.ones((2, 3)), np.ones((2, 2)))
    with pytest.raises(DimMismatch):
        oracle_dense_matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul_spec_holds_only_nonzero_products():
    A = np.array([[1.0, 0.0], [0.0, 2.0]])
    B = np.array([[0.0, 3.0], [4.0, 0.0]])
    p = build_matmul_spec(A, B)
    assert sorted(t.values for t in p.reservoirs["X"].tuples) == [(0, 1, 0), (1, 0, 1)]


def test_sort_rejects_empty_array():
    with pytest.raises(EmptyReservoir):
        build_sort_spec([])


@pytest.mark.parametrize("adjacent_only, pairs", [(True, 3), (False, 6)])
def test_sort_pair_reservoir(adjacent_only, pairs):
    assert len(build_sort_spec([3, 1, 2, 0], adjacent_only).reservoirs["P"]) == pairs
