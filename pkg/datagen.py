"""
Synthetic inputs: clustered point sets for k-Means and recursive-matrix
graphs for PageRank, plus writers for the ASCII formats ``dataset.py`` reads.
"""

from pathlib import Path

import numpy as np

from forelem.config import ClusterGenConfig, GraphGenConfig


def gen_clustered_points(cfg: ClusterGenConfig) -> tuple[np.ndarray, np.ndarray]:
    """
    Draw ``cfg.k`` centres uniformly from ``center_range`` and a sigma per
    cluster from ``sigma_range``; each point picks a cluster and is sampled
    from N(centre, sigma^2 I). Coordinates may leave ``center_range``.

    Returns the ``(n, dim)`` points and their generating cluster labels.
    """
    rng = np.random.default_rng(cfg.seed)
    centers = rng.uniform(*cfg.center_range, size=(cfg.k, cfg.dim))
    sigmas = rng.uniform(*cfg.sigma_range, size=cfg.k)
    if cfg.balanced:
        labels = rng.permutation(np.arange(cfg.n) % cfg.k)
    else:
        labels = rng.integers(0, cfg.k, size=cfg.n)
    noise = rng.standard_normal((cfg.n, cfg.dim))
    points = centers[labels] + noise * sigmas[labels, None]
    return points, labels.astype(np.int64)


def gen_graph(cfg: GraphGenConfig) -> np.ndarray:
    """
    Directed recursive-matrix multigraph as an ``(m, 2)`` array of ``u v`` pairs.

    Every edge descends ``scale`` levels of the adjacency matrix, picking a
    quadrant with probabilities ``(a, b, c, d)`` at each level. Labels are
    permuted afterwards when ``cfg.relabel`` is set. Self-loops are dropped,
    duplicates are kept.
    """
    rng = np.random.default_rng(cfg.seed)
    m = cfg.edge_factor * cfg.vertices
    src = np.zeros(m, dtype=np.int64)
    dst = np.zeros(m, dtype=np.int64)
    for bit in range(cfg.scale):
        quadrant = rng.choice(4, size=m, p=cfg.probabilities)
        src |= (quadrant >= 2).astype(np.int64) << bit
        dst |= (quadrant % 2).astype(np.int64) << bit
    if cfg.relabel and cfg.vertices > 1:
        perm = rng.permutation(cfg.vertices)
        src, dst = perm[src], perm[dst]
    keep = src != dst
    return np.stack([src[keep], dst[keep]], axis=1)


def write_points(path: str | Path, points: np.ndarray, header: str = "") -> Path:
    """One point per line, coordinates separated by spaces; ``header`` becomes a ``#`` comment."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    np.savetxt(path, points, fmt="%.17g", header=header, comments="# ")
    return path


def write_edges(path: str | Path, edges: np.ndarray, header: str = "") -> Path:
    """One ``u v`` pair per line, 0-based."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    np.savetxt(path, edges, fmt="%d", header=header, comments="# ")
    return path
