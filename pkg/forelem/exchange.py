"""
Reconciliation of replicated shared spaces between partitions.

Partitions record their writes to replicated spaces as deltas in an
``UpdateBuffer``. At an exchange point one of three schemes brings all
replicas back into agreement:

* buffered: every partition sends its coalesced deltas to every other one;
* master: deltas go to one master, which reduces them into a single update
  per key and broadcasts it;
* indirect: derived spaces named by program assertions are recomputed from
  the exchanged authoritative assignments instead of being patched.

Replicas are any objects exposing ``spaces`` and ``base`` mappings of
``SharedSpace``; ``base`` holds the values agreed at the last exchange.
"""

from __future__ import annotations

import threading
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Optional

import numpy as np

from .errors import AssertionUnsatisfiable, OwnershipViolation
from .ir import Assertion, FieldKind, SharedSpace


class DeltaOp(str, Enum):
    ADD_SCALAR = "add_scalar"
    ADD_VECTOR = "add_vector"
    ADD_COUNT = "add_count"
    OVERWRITE = "overwrite"


@dataclass(frozen=True)
class Delta:
    space: str
    key: tuple
    op: DeltaOp
    value: Any

    @classmethod
    def add(cls, space: str, key: tuple, amount, kind: FieldKind) -> Delta:
        op = {
            FieldKind.SCALAR: DeltaOp.ADD_SCALAR,
            FieldKind.VECTOR: DeltaOp.ADD_VECTOR,
            FieldKind.INDEX: DeltaOp.ADD_COUNT,
        }[kind]
        return cls(space, tuple(key), op, amount)

    @classmethod
    def overwrite(cls, space: str, key: tuple, value) -> Delta:
        return cls(space, tuple(key), DeltaOp.OVERWRITE, value)

    @property
    def additive(self) -> bool:
        return self.op != DeltaOp.OVERWRITE

    def then(self, later: Delta) -> Delta:
        """The single delta equivalent to applying ``self`` and then ``later``."""
        if not later.additive:
            return later
        return Delta(self.space, self.key, self.op, self.value + later.value)

    def apply_to(self, value):
        return self.value if not self.additive else value + self.value

    @property
    def nbytes(self) -> int:
        width = len(self.value) if isinstance(self.value, np.ndarray) else 1
        return 8 * (len(self.key) + width)


class UpdateBuffer:
    """Pending deltas of one partition, coalesced per key."""

    def __init__(self, partition_id: int, owns: Optional[Callable[[str, tuple], bool]] = None):
        self.partition_id = partition_id
        self.owns = owns or (lambda space, key: True)
        self.pending: dict[tuple[str, tuple], Delta] = {}
        self.recorded = 0
        self.sweeps_since_flush = 0
        self._lock = threading.Lock()

    def record(self, d: Delta) -> None:
        if not d.additive and not self.owns(d.space, d.key):
            raise OwnershipViolation(
                f"partition {self.partition_id} may not overwrite {d.space}{list(d.key)} owned elsewhere"
            )
        slot = (d.space, d.key)
        with self._lock:
            existing = self.pending.get(slot)
            self.pending[slot] = d if existing is None else existing.then(d)
            self.recorded += 1

    def deltas(self) -> list[Delta]:
        return [self.pending[slot] for slot in sorted(self.pending)]

    def clear(self) -> None:
        self.pending.clear()
        self.sweeps_since_flush = 0

    def __len__(self) -> int:
        return len(self.pending)


def record_delta(buf: UpdateBuffer, d: Delta) -> None:
    buf.record(d)


class ExchangeKind(str, Enum):
    BUFFERED = "buffered"
    MASTER = "master"
    INDIRECT = "indirect"


@dataclass(frozen=True)
class ExchangeScheme:
    kind: ExchangeKind = ExchangeKind.BUFFERED
    master_id: int = 0
    assertions: tuple[Assertion, ...] = ()

    @classmethod
    def parse(cls, name: str, master_id: int = 0) -> ExchangeScheme:
        return cls(ExchangeKind(name), master_id)

    def __str__(self) -> str:
        return self.kind.value


@dataclass
class ExchangeCounters:
    exchanges: int = 0
    deltas_sent: int = 0
    messages: int = 0
    keys_touched: int = 0
    bytes_sent: int = 0

    def to_row(self) -> dict:
        return {
            "exchanges": self.exchanges,
            "deltas_sent": self.deltas_sent,
            "messages": self.messages,
            "keys_touched": self.keys_touched,
            "bytes_sent": self.bytes_sent,
        }


def reduce_deltas(bufs: Sequence[UpdateBuffer], skip: frozenset = frozenset()) -> dict[tuple[str, tuple], Delta]:
    """
    Combine every buffer's deltas per key, in partition order.

    Additive deltas are summed. An overwrite (only ever emitted by the
    owning partition) becomes the new base and the other partitions' sums
    are added on top of it.
    """
    overwrites: dict[tuple[str, tuple], Delta] = {}
    sums: dict[tuple[str, tuple], Delta] = {}
    for buf in sorted(bufs, key=lambda b: b.partition_id):
        for d in buf.deltas():
            if d.space in skip:
                continue
            slot = (d.space, d.key)
            if d.additive:
                sums[slot] = d if slot not in sums else sums[slot].then(d)
            else:
                overwrites[slot] = d
    totals = {}
    for slot in sorted(set(overwrites) | set(sums)):
        if slot in overwrites:
            base = overwrites[slot]
            totals[slot] = base if slot not in sums else Delta.overwrite(*slot, base.value + sums[slot].value)
        else:
            totals[slot] = sums[slot]
    return totals


def _apply_totals(replica, totals: Mapping[tuple[str, tuple], Delta]) -> None:
    for (space, key), d in totals.items():
        value = d.apply_to(replica.base[space].read(key))
        replica.spaces[space].write(key, value)
        replica.base[space].write(key, value)


def _commit_local(replica, bufs: Sequence[UpdateBuffer], skip: frozenset = frozenset()) -> None:
    for buf in bufs:
        for d in buf.deltas():
            if d.space not in skip:
                replica.base[d.space].write(d.key, replica.spaces[d.space].read(d.key))


def flush_buffered(
    bufs: Sequence[UpdateBuffer],
    replicas: Sequence,
    counters: ExchangeCounters | None = None,
    skip: frozenset = frozenset(),
) -> None:
    """All-to-all exchange: each replica ends at ``base + sum of all partitions' deltas``."""
    counters = counters if counters is not None else ExchangeCounters()
    peers = len(replicas) - 1
    if peers == 0:
        _commit_local(replicas[0], bufs, skip)
    else:
        totals = reduce_deltas(bufs, skip)
        for replica in replicas:
            _apply_totals(replica, totals)
        counters.keys_touched += len(totals)
    for buf in bufs:
        sent = [d for d in buf.deltas() if d.space not in skip]
        counters.deltas_sent += len(sent) * peers
        counters.messages += peers if sent else 0
        counters.bytes_sent += sum(d.nbytes for d in sent) * peers
        buf.clear()
    counters.exchanges += 1


def flush_master(
    bufs: Sequence[UpdateBuffer],
    replicas: Sequence,
    master_id: int = 0,
    counters: ExchangeCounters | None = None,
) -> None:
    """Master exchange: reduce at ``master_id`` into one update per key, then broadcast."""
    if not 0 <= master_id < len(replicas):
        raise ValueError(f"master_id {master_id} out of range for {len(replicas)} partitions")
    counters = counters if counters is not None else ExchangeCounters()
    peers = len(replicas) - 1
    if peers == 0:
        _commit_local(replicas[0], bufs)
    else:
        totals = reduce_deltas(bufs)
        for replica in replicas:
            _apply_totals(replica, totals)
        for buf in bufs:
            if buf.partition_id != master_id and len(buf):
                counters.deltas_sent += len(buf)
                counters.messages += 1
                counters.bytes_sent += sum(d.nbytes for d in buf.deltas())
        counters.deltas_sent += len(totals) * peers
        counters.messages += peers if totals else 0
        counters.bytes_sent += sum(d.nbytes for d in totals.values()) * peers
        counters.keys_touched += len(totals)
    for buf in bufs:
        buf.clear()
    counters.exchanges += 1


def recompute_assertion(a: Assertion, authoritative: Mapping[str, SharedSpace], size: int = 0) -> dict[tuple, Any]:
    """Evaluate ``a`` from the authoritative assignment: counts or per-key sums of ``a.value``."""
    assign = authoritative[a.assignment]
    keys = sorted(assign.contents)
    targets = np.fromiter((assign.contents[k] for k in keys), dtype=np.int64, count=len(keys))
    size = max(size, int(targets.max()) + 1 if len(targets) else 0)
    if a.value is None:
        counts = np.bincount(targets, minlength=size)
        return {(m,): int(c) for m, c in enumerate(counts)}
    values = authoritative[a.value]
    dim = values.decl.dim
    sums = np.zeros((size, dim))
    if keys:
        np.add.at(sums, targets, np.stack([values.read(k) for k in keys]))
    return {(m,): sums[m] for m in range(size)}


def check_assertions(assertions: Sequence[Assertion], replicas: Sequence, authoritative: Mapping[str, SharedSpace]) -> None:
    for a in assertions:
        missing = [s for s in (a.assignment, a.value) if s is not None and s not in authoritative]
        missing += [a.derived for r in replicas[:1] if a.derived not in r.spaces]
        if missing:
            raise AssertionUnsatisfiable(f"assertion on {a.derived} references undeclared spaces {missing}")


def flush_indirect(
    assertions: Sequence[Assertion],
    replicas: Sequence,
    authoritative: Mapping[str, SharedSpace],
    bufs: Sequence[UpdateBuffer] = (),
    counters: ExchangeCounters | None = None,
) -> None:
    """
    Indirect exchange.

    Assignment overwrites are applied to the authoritative spaces, every
    derived space is recomputed from them on all replicas, and remaining
    replicated spaces are reconciled as in the buffered scheme.
    """
    check_assertions(assertions, replicas, authoritative)
    counters = counters if counters is not None else ExchangeCounters()
    derived = frozenset(a.derived for a in assertions)
    assigned = frozenset(a.assignment for a in assertions)
    peers = len(replicas) - 1
    for buf in bufs:
        for d in buf.deltas():
            if d.space in assigned:
                current = authoritative[d.space].read(d.key)
                authoritative[d.space].write(d.key, d.apply_to(current))
                counters.deltas_sent += peers
                counters.bytes_sent += d.nbytes * peers
    # a lone replica already holds exact derived values
    for a in assertions if peers else ():
        size = max((k[0] + 1 for k in replicas[0].spaces[a.derived].contents), default=0)
        values = recompute_assertion(a, authoritative, size)
        for replica in replicas:
            for key, value in values.items():
                replica.spaces[a.derived].write(key, value)
                replica.base[a.derived].write(key, value)
        counters.keys_touched += len(values)
    counters.messages += peers * len(replicas) if peers else 0
    flush_buffered(bufs, replicas, counters, skip=derived | assigned)
