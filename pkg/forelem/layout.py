"""
Physical tuple stores chosen at concretization.

A store fixes the enumeration order of a reservoir and how its fields sit
in memory. Semantics never depend on the store; only traversal order and
access cost do.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .ir import FieldKind, Program, TupleReservoir


class Layout(str, Enum):
    AOS = "aos"
    SOA = "soa"
    JAGGED = "jagged"


class TupleStore:
    layout: Layout

    def __init__(self, reservoir: TupleReservoir):
        self.reservoir = reservoir
        self.schema = reservoir.schema

    def __len__(self) -> int:
        return len(self.reservoir)

    def value(self, tid: int, pos: int):
        raise NotImplementedError

    def record(self, tid: int) -> tuple:
        return tuple(self.value(tid, pos) for pos in range(len(self.schema.fields)))

    def order(self) -> list[int]:
        return list(range(len(self)))


class AoSStore(TupleStore):
    """One record per tuple."""

    layout = Layout.AOS

    def __init__(self, reservoir: TupleReservoir):
        super().__init__(reservoir)
        self.records = [t.values for t in reservoir.tuples]

    def value(self, tid: int, pos: int):
        v = self.records[tid][pos]
        return np.asarray(v) if isinstance(v, tuple) else v

    def record(self, tid: int) -> tuple:
        return self.records[tid]


def _column(kind: FieldKind, dim: int, values: list) -> np.ndarray:
    if kind == FieldKind.INDEX:
        col = np.asarray(values, dtype=np.int64).reshape(len(values))
    elif kind == FieldKind.SCALAR:
        col = np.asarray(values, dtype=np.float64).reshape(len(values))
    else:
        col = np.asarray(values, dtype=np.float64).reshape(len(values), dim)
    col.flags.writeable = False
    return col


class SoAStore(TupleStore):
    """One dense array per field."""

    layout = Layout.SOA

    def __init__(self, reservoir: TupleReservoir, tids: list[int] | None = None):
        super().__init__(reservoir)
        tids = list(range(len(reservoir))) if tids is None else tids
        self.columns = [
            _column(f.kind, f.dim, [reservoir.tuples[t].values[pos] for t in tids])
            for pos, f in enumerate(self.schema.fields)
        ]
        self._kinds = [f.kind for f in self.schema.fields]
        self.slot_of = None if tids == list(range(len(reservoir))) else {t: s for s, t in enumerate(tids)}

    def value(self, tid: int, pos: int):
        slot = tid if self.slot_of is None else self.slot_of[tid]
        v = self.columns[pos][slot]
        kind = self._kinds[pos]
        if kind == FieldKind.INDEX:
            return int(v)
        if kind == FieldKind.SCALAR:
            return float(v)
        return v


class JaggedDiagonalStore(SoAStore):
    """
    ITPACK / jagged-diagonal storage.

    Tuples are grouped into rows by ``row_fields``; rows are sorted by
    decreasing length and the d-th diagonal holds the d-th tuple of every
    row longer than d. Columns are laid out diagonal after diagonal.
    """

    layout = Layout.JAGGED

    def __init__(self, reservoir: TupleReservoir, row_fields: tuple[str, ...]):
        positions = [reservoir.schema.position(f) for f in row_fields]
        rows: dict[tuple, list[int]] = defaultdict(list)
        for tid, t in enumerate(reservoir.tuples):
            rows[tuple(t.values[p] for p in positions)].append(tid)
        self.row_keys = sorted(rows, key=lambda key: (-len(rows[key]), key))
        width = len(rows[self.row_keys[0]]) if self.row_keys else 0
        self.diagonals = [
            [rows[key][d] for key in self.row_keys if len(rows[key]) > d] for d in range(width)
        ]
        self.jd_ptr = np.cumsum([0] + [len(diag) for diag in self.diagonals])
        self._order = [tid for diag in self.diagonals for tid in diag]
        self.row_fields = row_fields
        super().__init__(reservoir, self._order)

    def order(self) -> list[int]:
        return list(self._order)


@dataclass(frozen=True)
class ExecutablePlan:
    """A program plus the physical layout its reservoirs are stored in."""

    program: Program
    layout: Layout = Layout.AOS

    def row_fields(self, reservoir: str) -> tuple[str, ...] | None:
        for struct in self.program.index_structures.values():
            if struct.reservoir == reservoir and struct.group_fields:
                return struct.group_fields
        return None

    def build_store(self, reservoir: TupleReservoir) -> TupleStore:
        if self.layout == Layout.SOA:
            return SoAStore(reservoir)
        if self.layout == Layout.JAGGED:
            rows = self.row_fields(reservoir.name)
            if rows is not None:
                return JaggedDiagonalStore(reservoir, rows)
        return AoSStore(reservoir)

    def build_stores(self) -> dict[str, TupleStore]:
        return {name: self.build_store(r) for name, r in self.program.reservoirs.items()}
