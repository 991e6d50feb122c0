import re
import warnings
from pathlib import Path
from typing import Optional

import numpy as np


def _loadtxt(path: Path, dtype) -> np.ndarray:
    with warnings.catch_warnings():
        # an empty file is a valid, empty input
        warnings.simplefilter("ignore", UserWarning)
        try:
            return np.loadtxt(path, dtype=dtype, comments="#", ndmin=2)
        except ValueError as e:
            raise ValueError(f"malformed input file {path}: {e}") from e


_VERTICES = re.compile(r"\bvertices=(\d+)")


class PointDataset:
    """ASCII point file: one point per line, coordinates separated by whitespace."""

    def __init__(self, file_path, dim: Optional[int] = None):
        self.file_path = Path(file_path)
        self.samples = self.load_data(self.file_path)
        if dim is not None and len(self) and self.dim != dim:
            raise ValueError(f"{self.file_path}: expected dimension {dim}, found {self.dim}")

    def load_data(self, path):
        return _loadtxt(path, np.float64)

    @property
    def dim(self) -> int:
        return self.samples.shape[1] if len(self) else 0

    def __getitem__(self, index):
        return self.samples[index]

    def __len__(self):
        return len(self.samples)


class EdgeDataset:
    """
    ASCII edge list: one ``u v`` pair of 0-based vertex ids per line.

    The vertex count is, in order of preference, the ``vertices`` argument,
    a ``vertices=N`` entry in a ``#`` header line, or the largest id plus one.
    """

    def __init__(self, file_path, vertices: Optional[int] = None):
        self.file_path = Path(file_path)
        self.samples = self.load_data(self.file_path)
        self._vertices = vertices if vertices is not None else self.header_vertices(self.file_path)
        if self._vertices is not None and len(self) and self.samples.max() >= self._vertices:
            raise ValueError(f"{self.file_path}: vertex id {self.samples.max()} out of range for {self._vertices} vertices")

    @staticmethod
    def header_vertices(path) -> Optional[int]:
        with open(path) as f:
            for line in f:
                if not line.startswith("#"):
                    break
                if m := _VERTICES.search(line):
                    return int(m.group(1))
        return None

    def load_data(self, path):
        edges = _loadtxt(path, np.int64)
        if edges.size == 0:
            return np.zeros((0, 2), dtype=np.int64)
        if edges.shape[1] != 2:
            raise ValueError(f"malformed edge file {path}: expected 2 columns, found {edges.shape[1]}")
        if (edges < 0).any():
            raise ValueError(f"malformed edge file {path}: negative vertex id")
        return edges

    @property
    def vertices(self) -> int:
        if self._vertices is not None:
            return self._vertices
        return int(self.samples.max()) + 1 if len(self) else 0

    def __getitem__(self, index):
        return self.samples[index]

    def __len__(self):
        return len(self.samples)
