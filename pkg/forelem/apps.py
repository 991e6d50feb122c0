"""
The four applications expressed as forelem programs.

Each application has a problem type, a builder producing the base
``Program``, an initializer producing the initial shared-space contents,
and an oracle computed without the executor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np
import scipy.sparse as sp

from .config import DEFAULT_SEED
from .errors import DimMismatch, EmptyGraph, EmptyReservoir, NoConvergence
from .ir import (
    DELTA_EXCEEDS,
    ALWAYS,
    And,
    Arith,
    Assertion,
    Compare,
    Const,
    Dist,
    Field,
    FieldKind,
    GuardedBlock,
    Program,
    ReservoirDomain,
    SharedSpace,
    SpaceDecl,
    SpaceWrite,
    TupleField,
    TupleSchema,
    build_reservoir,
    forelem,
    read,
    whilelem,
)

Spaces = dict[str, dict[tuple, Any]]


def space_values(source, name: str) -> dict[tuple, Any]:
    """Contents of space ``name`` from an execution state, a space mapping or plain dicts."""
    if hasattr(source, "space_values"):
        return source.space_values(name)
    space = source[name]
    return dict(space.items()) if isinstance(space, SharedSpace) else dict(space)


# k-Means


@dataclass
class KMeansProblem:
    points: np.ndarray
    k: int
    seed: int = DEFAULT_SEED
    convergence_delta: float = 0.0
    threshold: Optional[float] = None
    init: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        self.points = points.reshape(-1, 1) if points.ndim == 1 else points
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.n < self.k:
            raise ValueError(f"need at least k={self.k} points, got {self.n}")
        if self.convergence_delta < 0:
            raise ValueError("convergence_delta must be non-negative")
        if self.threshold is not None and not 0 <= self.threshold <= 1:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.init is not None:
            self.init = np.asarray(self.init, dtype=np.int64)
            if self.init.shape != (self.n,) or (self.init < 0).any() or (self.init >= self.k).any():
                raise ValueError("init must assign every point to a cluster in [0, k)")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def build_kmeans_spec(prob: KMeansProblem) -> Program:
    """``whilelem (⟨m,x⟩ ∈ T)``: move x to m when m's centre is strictly closer."""
    m, x = TupleField("m"), TupleField("x")
    own = read("M", x)
    coords = read("COORDS", x)
    guard = And(
        (
            Compare("!=", own, m),
            Compare(">", read("M_SIZE", own), Const(1)),
            Compare(">", read("M_SIZE", m), Const(0)),
            Compare(
                "<",
                Dist(coords, Arith("/", read("M_SUM", m), read("M_SIZE", m))),
                Dist(coords, Arith("/", read("M_SUM", own), read("M_SIZE", own))),
            ),
        )
    )
    body = (
        SpaceWrite("M_SUM", (own,), coords, "-="),
        SpaceWrite("M_SIZE", (own,), Const(1), "-="),
        SpaceWrite("M_SUM", (m,), coords, "+="),
        SpaceWrite("M_SIZE", (m,), Const(1), "+="),
        SpaceWrite("M", (x,), m),
    )
    tuples = [(c, p) for p in range(prob.n) for c in range(prob.k)]
    spaces = {
        "M": SpaceDecl("M", kind=FieldKind.INDEX, default=0),
        "COORDS": SpaceDecl("COORDS", kind=FieldKind.VECTOR, dim=prob.dim),
        "M_SUM": SpaceDecl("M_SUM", kind=FieldKind.VECTOR, dim=prob.dim),
        "M_SIZE": SpaceDecl("M_SIZE", kind=FieldKind.INDEX, default=0, floor=1),
    }
    return Program(
        name="kmeans",
        reservoirs={"T": build_reservoir(TupleSchema.of("m", "x"), tuples, "T")},
        spaces=spaces,
        root=whilelem(ReservoirDomain("T"), GuardedBlock(guard, body)),
        assertions=(Assertion("M_SIZE", "M"), Assertion("M_SUM", "M", "COORDS")),
        params={"k": prob.k, "n": prob.n, "dim": prob.dim},
    )


def initial_assignment(prob: KMeansProblem) -> np.ndarray:
    """Seeded uniform assignment; empty clusters take one point from the largest until none is empty."""
    rng = np.random.default_rng(prob.seed)
    assign = prob.init.copy() if prob.init is not None else rng.integers(0, prob.k, size=prob.n)
    sizes = np.bincount(assign, minlength=prob.k)
    while (sizes == 0).any():
        empty = int(np.flatnonzero(sizes == 0)[0])
        donor = int(np.argmax(sizes))
        moved = int(rng.choice(np.flatnonzero(assign == donor)))
        assign[moved] = empty
        sizes[donor] -= 1
        sizes[empty] += 1
    return assign


def cluster_stats(points: np.ndarray, assign: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, assign, points)
    return sums, np.bincount(assign, minlength=k)


def init_kmeans(prob: KMeansProblem) -> Spaces:
    assign = initial_assignment(prob)
    sums, sizes = cluster_stats(prob.points, assign, prob.k)
    return {
        "M": {(x,): int(c) for x, c in enumerate(assign)},
        "COORDS": {(x,): prob.points[x] for x in range(prob.n)},
        "M_SUM": {(c,): sums[c] for c in range(prob.k)},
        "M_SIZE": {(c,): int(sizes[c]) for c in range(prob.k)},
    }


def kmeans_assignment(source, n: int) -> np.ndarray:
    values = space_values(source, "M")
    return np.array([values.get((x,), 0) for x in range(n)], dtype=np.int64)


def kmeans_statistics(source, k: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    sums, sizes = space_values(source, "M_SUM"), space_values(source, "M_SIZE")
    return (
        np.array([sums.get((c,), np.zeros(dim)) for c in range(k)], dtype=np.float64).reshape(k, dim),
        np.array([sizes.get((c,), 0) for c in range(k)], dtype=np.int64),
    )


def centers_of(sums: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Cluster means; empty clusters get NaN."""
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / sizes[:, None]


def wcss(points: np.ndarray, assign: np.ndarray, k: Optional[int] = None) -> float:
    k = int(assign.max()) + 1 if k is None else k
    sums, sizes = cluster_stats(points, assign, k)
    centers = centers_of(sums, sizes)
    return float(((points - centers[assign]) ** 2).sum())


def lloyd_margins(points: np.ndarray, assign: np.ndarray, k: int) -> np.ndarray:
    """
    Per point, how much closer the nearest non-empty centre is than its own.

    Points alone in their cluster get 0; moving them would empty it.
    """
    if len(points) == 0:
        return np.zeros(0)
    sums, sizes = cluster_stats(points, assign, k)
    centers = centers_of(sums, sizes)
    nonempty = sizes > 0
    dists = np.sqrt(((points[:, None, :] - centers[None, nonempty, :]) ** 2).sum(axis=2))
    own = np.sqrt(((points - centers[assign]) ** 2).sum(axis=1))
    return np.where(sizes[assign] > 1, np.maximum(own - dists.min(axis=1), 0.0), 0.0)


def check_lloyd_fixed_point(points: np.ndarray, assign: np.ndarray, k: int, tol: float = 1e-9) -> list[int]:
    """Points strictly closer (by more than ``tol``) to a foreign non-empty cluster."""
    return np.flatnonzero(lloyd_margins(points, assign, k) > tol).tolist()


def check_statistics(
    points: np.ndarray, assign: np.ndarray, sums: np.ndarray, sizes: np.ndarray, tol: float = 1e-9
) -> list[str]:
    """Mismatches between the maintained cluster statistics and a recount from ``assign``."""
    k = len(sizes)
    true_sums, true_sizes = cluster_stats(points, assign, k)
    problems = []
    if int(sizes.sum()) != len(points):
        problems.append(f"sizes sum to {int(sizes.sum())}, expected {len(points)}")
    for c in np.flatnonzero(sizes != true_sizes):
        problems.append(f"cluster {c}: size {sizes[c]} != recount {true_sizes[c]}")
    bad = ~np.isclose(sums, true_sums, rtol=tol, atol=tol).all(axis=1)
    for c in np.flatnonzero(bad):
        problems.append(f"cluster {c}: coordinate sum drifted by {np.abs(sums[c] - true_sums[c]).max():.3g}")
    return problems


def oracle_lloyd(
    prob: KMeansProblem, init: Optional[np.ndarray] = None, max_iter: int = 10_000
) -> tuple[np.ndarray, np.ndarray, float]:
    """Batch Lloyd iterations from ``init`` until no point is reassigned."""
    assign = initial_assignment(prob) if init is None else np.asarray(init, dtype=np.int64).copy()
    points = prob.points
    for _ in range(max_iter):
        sums, sizes = cluster_stats(points, assign, prob.k)
        centers = centers_of(sums, sizes)
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        dists[:, sizes == 0] = np.inf
        own = dists[np.arange(prob.n), assign]
        best = dists.argmin(axis=1)
        # keep the current cluster on ties
        new = np.where(dists[np.arange(prob.n), best] < own, best, assign)
        if np.array_equal(new, assign):
            return assign, centers, wcss(points, assign, prob.k)
        assign = new
    raise NoConvergence(f"Lloyd iterations did not settle within {max_iter} rounds")


def kmeans_early_stop(prob: KMeansProblem, initial: Spaces) -> Optional[Callable]:
    """
    Early-stop predicate for the switched-fraction threshold and the centre-movement delta.

    None when neither is configured.
    """
    if prob.threshold is None and prob.convergence_delta <= 0:
        return None
    sums0 = np.array([initial["M_SUM"][(c,)] for c in range(prob.k)])
    sizes0 = np.array([initial["M_SIZE"][(c,)] for c in range(prob.k)])
    previous = [centers_of(sums0, sizes0)]

    def stop(state, stats) -> bool:
        if prob.threshold is not None and stats.state_changes / prob.n < prob.threshold:
            return True
        if prob.convergence_delta > 0:
            current = centers_of(*kmeans_statistics(state, prob.k, prob.dim))
            moved = np.nanmax(np.sqrt(((current - previous[0]) ** 2).sum(axis=1)))
            previous[0] = current
            return bool(moved < prob.convergence_delta)
        return False

    return stop


# PageRank


@dataclass
class PageRankProblem:
    vertices: int
    edges: np.ndarray
    damping: float = 0.85
    epsilon: float = 1e-10

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.vertices < 0:
            raise ValueError("vertex count must be non-negative")
        if len(edges) and (edges.min() < 0 or edges.max() >= self.vertices):
            raise ValueError(f"edge endpoints must lie in [0, {self.vertices})")
        if not 0 < self.damping < 1:
            raise ValueError(f"damping must lie in (0, 1), got {self.damping}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        self.edges = edges[edges[:, 0] != edges[:, 1]]

    @classmethod
    def from_edges(cls, edges, vertices: Optional[int] = None, **kwargs) -> PageRankProblem:
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if vertices is None:
            vertices = int(edges.max()) + 1 if len(edges) else 0
        return cls(vertices, edges, **kwargs)


def dangling_vertices(prob: PageRankProblem) -> np.ndarray:
    out = np.bincount(prob.edges[:, 0], minlength=prob.vertices)
    return np.flatnonzero(out == 0)


def expanded_edges(prob: PageRankProblem) -> np.ndarray:
    """Edges plus ``⟨u,i⟩`` for every dangling ``u`` and every ``i != u``."""
    n = prob.vertices
    dangling = dangling_vertices(prob)
    if n < 2 or not len(dangling):
        return prob.edges
    sources = np.repeat(dangling, n - 1)
    offsets = np.tile(np.arange(n - 1), len(dangling))
    targets = offsets + (offsets >= sources)
    return np.concatenate([prob.edges, np.stack([sources, targets], axis=1)])


def build_pagerank_spec(prob: PageRankProblem) -> Program:
    """Push-style delta propagation: each edge forwards the change of its source since its last visit."""
    if prob.vertices == 0:
        raise EmptyGraph("PageRank needs at least one vertex")
    u, v = TupleField("u"), TupleField("v")
    pr_u, old = read("PR", u), read("OLD", u, v)
    block = GuardedBlock(
        Compare(DELTA_EXCEEDS, pr_u, old),
        (
            SpaceWrite(
                "PR",
                (v,),
                Arith("*", Arith("*", Const(prob.damping), Arith("-", pr_u, old)), read("INV_DOUT", u)),
                "+=",
            ),
            SpaceWrite("OLD", (u, v), pr_u),
        ),
    )
    edges = build_reservoir(TupleSchema.of("u", "v"), expanded_edges(prob).tolist(), "E")
    return Program(
        name="pagerank",
        reservoirs={"E": edges},
        spaces={
            "PR": SpaceDecl("PR"),
            "OLD": SpaceDecl("OLD", key_arity=2),
            "INV_DOUT": SpaceDecl("INV_DOUT"),
        },
        root=whilelem(ReservoirDomain("E"), block, binder="e"),
        epsilon=prob.epsilon,
        params={"vertices": prob.vertices, "damping": prob.damping},
    )


def out_degrees(prob: PageRankProblem) -> np.ndarray:
    """Out-degrees after dangling expansion; duplicate edges count with multiplicity."""
    edges = expanded_edges(prob)
    return np.bincount(edges[:, 0], minlength=prob.vertices)


def init_pagerank(prob: PageRankProblem) -> Spaces:
    n = prob.vertices
    dout = out_degrees(prob)
    return {
        "PR": {(v,): (1 - prob.damping) / n for v in range(n)},
        "OLD": {},
        "INV_DOUT": {(u,): 1.0 / int(d) for u, d in enumerate(dout) if d > 0},
    }


def pagerank_vector(source, n: int) -> np.ndarray:
    values = space_values(source, "PR")
    return np.array([values.get((v,), 0.0) for v in range(n)])


def _transition(prob: PageRankProblem) -> tuple[sp.csr_matrix, np.ndarray]:
    n = prob.vertices
    edges = expanded_edges(prob)
    # duplicate (v, u) entries are summed, so multi-edges keep their weight
    adj = sp.csr_matrix((np.ones(len(edges)), (edges[:, 1], edges[:, 0])), shape=(n, n))
    dout = np.bincount(edges[:, 0], minlength=n).astype(np.float64)
    inv = np.divide(1.0, dout, out=np.zeros(n), where=dout > 0)
    return adj, inv


def pagerank_residual(prob: PageRankProblem, pr: np.ndarray) -> float:
    """Largest per-vertex violation of ``PR[v] = (1-d)/|V| + d * Σ PR[u]/Dout[u]``."""
    adj, inv = _transition(prob)
    rhs = (1 - prob.damping) / prob.vertices + prob.damping * (adj @ (pr * inv))
    return float(np.abs(pr - rhs).max()) if prob.vertices else 0.0


def oracle_power_iteration(prob: PageRankProblem, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Pull-style power iteration on the expanded graph until the L∞ change drops below ``tol``."""
    n = prob.vertices
    if n == 0:
        raise EmptyGraph("PageRank needs at least one vertex")
    adj, inv = _transition(prob)
    base = (1 - prob.damping) / n
    pr = np.full(n, base)
    for _ in range(max_iter):
        new = base + prob.damping * (adj @ (pr * inv))
        if np.abs(new - pr).max() < tol:
            return new
        pr = new
    raise NoConvergence(f"power iteration did not converge within {max_iter} iterations")


# Sparse matrix multiplication


def _as_csr(m) -> sp.csr_matrix:
    csr = sp.csr_matrix(m, dtype=np.float64)
    csr.eliminate_zeros()
    return csr


def build_matmul_spec(A, B) -> Program:
    """``forelem (⟨i,j,k⟩ ∈ X) C[i,j] += A[i,k]*B[k,j]`` over the nonzero products only."""
    a, b = _as_csr(A), _as_csr(B)
    if a.shape[1] != b.shape[0]:
        raise DimMismatch(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    tuples = [
        (i, int(j), int(k))
        for i in range(a.shape[0])
        for k in a.indices[a.indptr[i] : a.indptr[i + 1]]
        for j in b.indices[b.indptr[k] : b.indptr[k + 1]]
    ]
    i, j, k = TupleField("i"), TupleField("j"), TupleField("k")
    block = GuardedBlock(ALWAYS, (SpaceWrite("C", (i, j), Arith("*", read("A", i, k), read("B", k, j)), "+="),))
    return Program(
        name="matmul",
        reservoirs={"X": build_reservoir(TupleSchema.of("i", "j", "k"), tuples, "X")},
        spaces={name: SpaceDecl(name, key_arity=2) for name in ("A", "B", "C")},
        root=forelem(ReservoirDomain("X"), block),
        params={"rows": a.shape[0], "cols": b.shape[1], "inner": a.shape[1]},
    )


def init_matmul(A, B) -> Spaces:
    spaces: Spaces = {"C": {}}
    for name, m in (("A", A), ("B", B)):
        coo = _as_csr(m).tocoo()
        spaces[name] = {(int(r), int(c)): float(v) for r, c, v in zip(coo.row, coo.col, coo.data)}
    return spaces


def matmul_result(source, shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape)
    for (i, j), value in space_values(source, "C").items():
        out[i, j] = value
    return out


def oracle_dense_matmul(A, B) -> np.ndarray:
    a = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=np.float64)
    b = B.toarray() if sp.issparse(B) else np.asarray(B, dtype=np.float64)
    if a.shape[1] != b.shape[0]:
        raise DimMismatch(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


# Sort


def build_sort_spec(A, adjacent_only: bool = True) -> Program:
    """``whilelem (⟨i,j⟩ ∈ P) if (A[i] > A[j]) swap``; pairs are neighbours or every ``i < j``."""
    n = len(A)
    if n == 0:
        raise EmptyReservoir("cannot sort an empty array")
    pairs = [(i, i + 1) for i in range(n - 1)] if adjacent_only else [(i, j) for i in range(n) for j in range(i + 1, n)]
    i, j = TupleField("i"), TupleField("j")
    block = GuardedBlock(
        Compare(">", read("A", i), read("A", j)),
        (SpaceWrite("A", (i,), read("A", j)), SpaceWrite("A", (j,), read("A", i))),
    )
    return Program(
        name="sort",
        reservoirs={"P": build_reservoir(TupleSchema((Field("i"), Field("j"))), pairs, "P")},
        spaces={"A": SpaceDecl("A")},
        root=whilelem(ReservoirDomain("P"), block, binder="p"),
        params={"n": n},
    )


def init_sort(A) -> Spaces:
    return {"A": {(i,): float(v) for i, v in enumerate(A)}}


def sort_result(source, n: int) -> np.ndarray:
    values = space_values(source, "A")
    return np.array([values.get((i,), 0.0) for i in range(n)])
