"""
Execution of forelem and whilelem loop nests.

A loop nest is flattened into activations: one per innermost iteration,
each a frame (bound tuple and loop variables) plus the guarded blocks to
run for it. A sweep runs every activation once in the order chosen by a
``Scheduler``; a whilelem loop sweeps until one full sweep changes nothing.

Guarded blocks are atomic. All right-hand sides, keys and nested
enumerations are evaluated against the state as it was before the block,
then the writes are applied together.
"""

from __future__ import annotations

import threading
import time
from collections import defaultdict
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, NamedTuple, Optional

import numpy as np

from .config import DEFAULT_SEED
from .errors import DivByZero, SweepBudgetExhausted, UnknownField, UnknownSpace, WrongLoopKind
from .exchange import (
    Delta,
    ExchangeCounters,
    ExchangeKind,
    ExchangeScheme,
    UpdateBuffer,
    flush_buffered,
    flush_indirect,
    flush_master,
)
from .ir import (
    Frame,
    GuardedBlock,
    IfStmt,
    IndexedField,
    IndexedFieldWrite,
    IndexSize,
    IntervalDomain,
    Loop,
    LoopKind,
    LoopVar,
    NestedForelem,
    Program,
    ReservoirDomain,
    SharedSpace,
    SpaceDecl,
    SpaceRead,
    SpaceWrite,
    SplitTag,
    TupleField,
    TupleFieldWrite,
    TupleRef,
    ValuesDomain,
    coerce_value,
    eval_expr,
    walk,
)
from .layout import ExecutablePlan, Layout, TupleStore


class SchedulePolicy(str, Enum):
    IN_ORDER = "in_order"
    SHUFFLED = "shuffled"
    RANDOM = "random"


@dataclass(frozen=True)
class Scheduler:
    """Order in which a sweep visits activations."""

    policy: SchedulePolicy = SchedulePolicy.IN_ORDER
    seed: int = DEFAULT_SEED
    batch: Optional[int] = None

    @classmethod
    def in_order(cls) -> Scheduler:
        return cls(SchedulePolicy.IN_ORDER)

    @classmethod
    def shuffled(cls, seed: int = DEFAULT_SEED) -> Scheduler:
        return cls(SchedulePolicy.SHUFFLED, seed)

    @classmethod
    def random(cls, seed: int = DEFAULT_SEED, batch: Optional[int] = None) -> Scheduler:
        return cls(SchedulePolicy.RANDOM, seed, batch)

    @property
    def visits_all(self) -> bool:
        return self.policy != SchedulePolicy.RANDOM

    def rng(self, offset: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.seed + offset)

    def order(self, n: int, rng: np.random.Generator, exhaustive: bool = False) -> Sequence[int]:
        if n == 0 or self.policy == SchedulePolicy.IN_ORDER:
            return range(n)
        if self.policy == SchedulePolicy.SHUFFLED or exhaustive:
            return rng.permutation(n).tolist()
        return rng.integers(0, n, size=self.batch or n).tolist()


class RunStatus(str, Enum):
    TERMINATED = "Terminated"
    BUDGET_EXHAUSTED = "SweepBudgetExhausted"
    EARLY_STOP = "EarlyStop"


@dataclass(frozen=True)
class Change:
    space: str
    key: tuple
    old: Any
    new: Any
    local: bool = False
    overwrite: bool = True
    amount: Any = None


@dataclass
class ChangeRecord:
    changes: list[Change] = field(default_factory=list)
    fired: int = 0
    deferred: int = 0

    @property
    def empty(self) -> bool:
        return not self.changes

    def __len__(self) -> int:
        return len(self.changes)


@dataclass
class SweepStats:
    tuples_visited: int = 0
    guards_fired: int = 0
    state_changes: int = 0
    locations_changed: int = 0
    wall_time: float = 0.0
    verification: bool = False
    deferred: int = 0

    def merge(self, other: SweepStats) -> SweepStats:
        return SweepStats(
            self.tuples_visited + other.tuples_visited,
            self.guards_fired + other.guards_fired,
            self.state_changes + other.state_changes,
            self.locations_changed + other.locations_changed,
            max(self.wall_time, other.wall_time),
            self.verification or other.verification,
            self.deferred + other.deferred,
        )


@dataclass(frozen=True)
class Activation:
    frame: Frame
    blocks: tuple[GuardedBlock, ...]


class KeyLocks:
    """Striped per-location locks, always acquired in stripe order."""

    def __init__(self, stripes: int = 64):
        self._locks = [threading.Lock() for _ in range(stripes)]

    def stripes(self, targets: Iterable) -> tuple[int, ...]:
        return tuple(sorted({hash(t) % len(self._locks) for t in targets}))

    @contextmanager
    def held(self, stripes: tuple[int, ...]):
        for s in stripes:
            self._locks[s].acquire()
        try:
            yield
        finally:
            for s in reversed(stripes):
                self._locks[s].release()


def _same(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(a, b)
    return a == b


def _decl_for(program: Program, name: str) -> Optional[SpaceDecl]:
    if name in program.spaces:
        return program.spaces[name]
    for lf in program.localized.values():
        if lf.space == name:
            return lf.decl
    return None


class ExecutionState:
    """
    Shared-space contents, localized tuple fields and tuple stores of one run.

    Localized fields are stored per localization key, so tuples that share
    the key of the space they replaced share one slot.
    """

    def __init__(
        self,
        program: Program,
        spaces: dict[str, SharedSpace],
        stores: dict[str, TupleStore],
        local: dict[str, dict[tuple, Any]],
        rng_seed: int = DEFAULT_SEED,
    ):
        self.program = program
        self.epsilon = program.epsilon
        self.spaces = spaces
        self.stores = stores
        self.local = local
        self.rng_seed = rng_seed
        self.base: dict[str, SharedSpace] = {}
        # per-key lower bounds overriding the declared floor of a space
        self.floors: dict[str, dict[tuple, Any]] = {}
        self.locks = KeyLocks()
        self._positions: dict[tuple[str, str], int] = {}
        self._groups: dict[tuple[str, tuple], dict[tuple, list[int]]] = {}
        self._max_sizes: dict[tuple[str, tuple], int] = {}
        self._activations: dict[int, tuple[Loop, list[Activation]]] = {}

    @classmethod
    def build(
        cls,
        program: Program,
        spaces: Mapping[str, Any] | None = None,
        layout: Layout = Layout.AOS,
        plan: ExecutablePlan | None = None,
        seed: int = DEFAULT_SEED,
    ) -> ExecutionState:
        """Initial state of ``program``; localized fields are filled from the spaces they replaced."""
        given: dict[str, SharedSpace] = {}
        for name, contents in (spaces or {}).items():
            if isinstance(contents, SharedSpace):
                given[name] = contents
            elif (decl := _decl_for(program, name)) is not None:
                given[name] = SharedSpace(decl, contents)

        own = {}
        for name, decl in program.spaces.items():
            src = given.get(name)
            if src is None:
                own[name] = SharedSpace(decl)
            elif src.decl == decl:
                own[name] = src.copy()
            else:
                own[name] = SharedSpace(decl, src.contents)

        plan = plan or ExecutablePlan(program, layout)
        stores = plan.build_stores()
        local: dict[str, dict[tuple, Any]] = {}
        for lf in program.localized.values():
            store = stores[lf.reservoir]
            positions = [store.schema.position(f) for f in lf.key_fields]
            src = given.get(lf.space)
            slots = local.setdefault(lf.name, {})
            for tid in range(len(store)):
                key = tuple(store.value(tid, p) for p in positions)
                if key not in slots:
                    slots[key] = src.read(key) if src is not None else lf.decl.default_value()
        return cls(program, own, stores, local, seed)

    # evaluation context

    def read_space(self, name: str, key: tuple) -> Any:
        try:
            space = self.spaces[name]
        except KeyError:
            raise UnknownSpace(f"shared space {name!r} is not declared") from None
        return space.read(key)

    def position(self, reservoir: str, name: str) -> int:
        slot = (reservoir, name)
        if slot not in self._positions:
            self._positions[slot] = self.stores[reservoir].schema.position(name)
        return self._positions[slot]

    def local_key(self, ref: TupleRef, key_fields: tuple[str, ...]) -> tuple:
        store = self.stores[ref.reservoir]
        return tuple(store.value(ref.tid, self.position(ref.reservoir, f)) for f in key_fields)

    def tuple_value(self, ref: TupleRef, name: str) -> Any:
        lf = self.program.localized.get(name)
        if lf is not None and lf.reservoir == ref.reservoir:
            key = self.local_key(ref, lf.key_fields)
            slots = self.local[name]
            return slots[key] if key in slots else lf.decl.default_value()
        return self.stores[ref.reservoir].value(ref.tid, self.position(ref.reservoir, name))

    def record(self, ref: TupleRef) -> tuple:
        return self.stores[ref.reservoir].record(ref.tid)

    def groups(self, reservoir: str, fields: tuple[str, ...]) -> dict[tuple, list[int]]:
        slot = (reservoir, fields)
        if slot not in self._groups:
            store = self.stores[reservoir]
            positions = [self.position(reservoir, f) for f in fields]
            groups: dict[tuple, list[int]] = defaultdict(list)
            for tid in store.order():
                groups[tuple(store.value(tid, p) for p in positions)].append(tid)
            self._groups[slot] = dict(groups)
        return self._groups[slot]

    def indexed_ref(self, struct: str, group: tuple, index: int) -> TupleRef:
        s = self.program.index_structures[struct]
        tids = self.groups(s.reservoir, s.group_fields).get(group, ())
        if not 0 <= index < len(tids):
            raise IndexError(f"{struct}{list(group)}[{index}] out of range ({len(tids)} tuples)")
        return TupleRef(s.reservoir, tids[index])

    def index_size(self, struct: str, group: tuple) -> int:
        s = self.program.index_structures[struct]
        return len(self.groups(s.reservoir, s.group_fields).get(group, ()))

    def max_index_size(self, struct: str, prefix: tuple) -> int:
        slot = (struct, prefix)
        if slot not in self._max_sizes:
            s = self.program.index_structures[struct]
            groups = self.groups(s.reservoir, s.group_fields)
            n = len(prefix)
            self._max_sizes[slot] = max((len(t) for g, t in groups.items() if g[:n] == prefix), default=0)
        return self._max_sizes[slot]

    # enumeration

    def select(self, reservoir: str, where, frame: Frame) -> Sequence[int]:
        if not where:
            return self.stores[reservoir].order()
        fields = tuple(f for f, _ in where)
        key = tuple(int(eval_expr(e, frame, self)) for _, e in where)
        return self.groups(reservoir, fields).get(key, ())

    def enumerate_domain(self, binder: str, domain, frame: Frame) -> list[Frame]:
        match domain:
            case ReservoirDomain(reservoir=r, where=where):
                return [frame.at(TupleRef(r, tid)) for tid in self.select(r, where, frame)]
            case ValuesDomain(reservoir=r, field=name, where=where):
                store = self.stores[r]
                pos = self.position(r, name)
                values = sorted({store.value(tid, pos) for tid in self.select(r, where, frame)})
                return [frame.bind(binder, v) for v in values]
            case IntervalDomain(size=size, exclude=exclude):
                n = int(eval_expr(size, frame, self))
                skip = None if exclude is None else int(eval_expr(exclude, frame, self))
                frames = [frame.bind(binder, i) for i in range(n) if i != skip]
                if isinstance(size, IndexSize):
                    group = tuple(int(eval_expr(g, frame, self)) for g in size.group)
                    frames = [f.at(self.indexed_ref(size.struct, group, f.env[binder])) for f in frames]
                return frames
        raise TypeError(f"not a domain: {domain!r}")

    def activations(self, loop: Loop | None = None) -> list[Activation]:
        """Flattened innermost iterations of ``loop`` (the program root by default), in storage order."""
        loop = loop or self.program.root
        cached = self._activations.get(id(loop))
        if cached is None or cached[0] is not loop:
            out: list[Activation] = []
            self._flatten(loop, Frame(), out)
            cached = self._activations[id(loop)] = (loop, out)
        return cached[1]

    def _flatten(self, loop: Loop, frame: Frame, out: list[Activation]) -> None:
        for f in self.enumerate_domain(loop.binder, loop.domain, frame):
            blocks: list[GuardedBlock] = []
            for node in loop.body:
                if isinstance(node, Loop):
                    if blocks:
                        out.append(Activation(f, tuple(blocks)))
                        blocks = []
                    self._flatten(node, f, out)
                else:
                    blocks.append(node)
            if blocks:
                out.append(Activation(f, tuple(blocks)))

    # atomic blocks

    def _field_target(self, ref: Optional[TupleRef], name: str) -> tuple:
        lf = self.program.localized.get(name)
        if ref is None or lf is None or lf.reservoir != ref.reservoir:
            raise UnknownField(name, "mutable tuple fields")
        return ("local", name, self.local_key(ref, lf.key_fields))

    def _collect(self, stmts, frame: Frame, out: list) -> None:
        for s in stmts:
            match s:
                case SpaceWrite(space=space, keys=keys, value=value, op=op):
                    if space not in self.spaces:
                        raise UnknownSpace(f"shared space {space!r} is not declared")
                    key = self.spaces[space].address(tuple(int(eval_expr(k, frame, self)) for k in keys))
                    out.append((("space", space, key), op, eval_expr(value, frame, self)))
                case TupleFieldWrite(name=name, value=value, op=op):
                    out.append((self._field_target(frame.tuple_ref, name), op, eval_expr(value, frame, self)))
                case IndexedFieldWrite(struct=struct, group=group, index=index, name=name, value=value, op=op):
                    ref = self.indexed_ref(
                        struct,
                        tuple(int(eval_expr(g, frame, self)) for g in group),
                        int(eval_expr(index, frame, self)),
                    )
                    out.append((self._field_target(ref, name), op, eval_expr(value, frame, self)))
                case NestedForelem(binder=binder, domain=domain, body=body):
                    for f in self.enumerate_domain(binder, domain, frame):
                        before = len(out)
                        self._collect(body, f, out)
                        if getattr(domain, "choose_one", False) and len(out) > before:
                            break
                case IfStmt(test=test, then=then, orelse=orelse):
                    self._collect(then if eval_expr(test, frame, self) else orelse, frame, out)
                case _:
                    raise TypeError(f"not a statement: {s!r}")

    def _plan(self, block: GuardedBlock, frame: Frame) -> tuple[list, bool]:
        taken = eval_expr(block.guard, frame, self)
        pending: list = []
        self._collect(block.body if taken else block.orelse, frame, pending)
        # a block with an else branch fires when it produces writes
        fired = bool(pending) if block.orelse else bool(taken and block.body)
        return pending, fired

    def _current(self, target: tuple) -> Any:
        kind, name, key = target
        if kind == "space":
            return self.spaces[name].read(key)
        slots = self.local[name]
        return slots[key] if key in slots else self.program.localized[name].decl.default_value()

    def _store(self, target: tuple, value) -> None:
        kind, name, key = target
        if kind == "space":
            self.spaces[name].write(key, value)
        else:
            decl = self.program.localized[name].decl
            self.local[name][key] = coerce_value(decl.kind, decl.dim, value)

    def _below_floor(self, target: tuple, old, new) -> bool:
        kind, name, key = target
        if kind != "space" or self.spaces[name].decl.floor is None or not new < old:
            return False
        return new < self.floors.get(name, {}).get(key, self.spaces[name].decl.floor)

    def _apply(self, pending: list) -> Optional[list[Change]]:
        """Write the staged block; None, with nothing written, when a write would break a floor."""
        staged: dict[tuple, list] = {}
        for target, op, value in pending:
            entry = staged.get(target)
            if entry is None:
                entry = staged[target] = [self._current(target), False, None]
            if op == "=":
                entry[:] = [value, True, None]
            else:
                amount = value if op == "+=" else -value
                entry[0] = entry[0] + amount
                entry[2] = amount if entry[2] is None else entry[2] + amount
        if any(self._below_floor(t, self._current(t), new) for t, (new, _, _) in staged.items()):
            return None
        changes = []
        for target, (new, overwrite, amount) in staged.items():
            old = self._current(target)
            if _same(old, new):
                continue
            self._store(target, new)
            changes.append(Change(target[1], target[2], old, new, target[0] == "local", overwrite, amount))
        return changes

    def describe(self, frame: Frame):
        return self.record(frame.tuple_ref) if frame.tuple_ref is not None else dict(frame.env)

    def execute_block(
        self, block: GuardedBlock, frame: Frame, locks: KeyLocks | None = None
    ) -> tuple[Optional[list[Change]], bool]:
        try:
            pending, ran = self._plan(block, frame)
            if locks is None or not pending:
                return (self._apply(pending) if pending else []), ran
            while True:
                stripes = locks.stripes(t for t, _, _ in pending)
                with locks.held(stripes):
                    pending, ran = self._plan(block, frame)
                    if set(locks.stripes(t for t, _, _ in pending)) <= set(stripes):
                        return self._apply(pending), ran
        except DivByZero as e:
            raise e.with_tuple(self.describe(frame)) from e

    # sweeps

    def sweep(
        self,
        activations: Sequence[Activation],
        order: Sequence[int],
        workers: int = 1,
        on_change: Callable[[ChangeRecord], None] | None = None,
    ) -> SweepStats:
        start = time.perf_counter()
        if workers <= 1 or len(order) < 2:
            stats = self._sweep_chunk(activations, order, None, on_change)
        else:
            chunks = [order[w::workers] for w in range(workers)]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(lambda c: self._sweep_chunk(activations, c, self.locks, on_change), chunks))
            stats = SweepStats()
            for p in parts:
                stats = stats.merge(p)
        stats.wall_time = time.perf_counter() - start
        return stats

    def _sweep_chunk(self, activations, order, locks, on_change) -> SweepStats:
        stats = SweepStats()
        for idx in order:
            a = activations[idx]
            record = execute_tuple(a.blocks, a.frame, self, locks)
            stats.tuples_visited += 1
            stats.guards_fired += record.fired > 0
            stats.deferred += record.deferred
            if record.changes:
                stats.state_changes += 1
                stats.locations_changed += len(record.changes)
                if on_change is not None:
                    on_change(record)
        return stats

    # results

    def export_spaces(self) -> dict[str, SharedSpace]:
        """Declared spaces plus localized fields folded back into the spaces they came from."""
        out = {name: s.copy() for name, s in self.spaces.items()}
        for lf in self.program.localized.values():
            space = out.setdefault(lf.space, SharedSpace(lf.decl))
            for key, value in self.local[lf.name].items():
                space.write(key, value)
        return out

    def space_values(self, name: str) -> dict[tuple, Any]:
        return dict(self.export_spaces()[name].items())


def execute_tuple(
    body: Sequence[GuardedBlock],
    t: Frame | TupleRef,
    state: ExecutionState,
    locks: KeyLocks | None = None,
) -> ChangeRecord:
    """Run the guarded blocks for one tuple; the record is empty iff the visit was a no-op."""
    frame = t if isinstance(t, Frame) else Frame(t)
    record = ChangeRecord()
    for block in body:
        changes, ran = state.execute_block(block, frame, locks)
        if changes is None:
            record.deferred += 1
            continue
        record.changes.extend(changes)
        record.fired += ran
    return record


def run_forelem(
    p: Program,
    state: ExecutionState,
    sched: Scheduler = Scheduler(),
    workers: int = 1,
) -> tuple[ExecutionState, SweepStats]:
    """Execute every tuple of a forelem nest exactly once."""
    if p.root.kind != LoopKind.FORELEM:
        raise WrongLoopKind(f"run_forelem needs a forelem root, got {p.root.kind.value}")
    acts = state.activations(p.root)
    stats = state.sweep(acts, sched.order(len(acts), sched.rng(), exhaustive=True), workers)
    return state, stats


class WhilelemResult(NamedTuple):
    state: ExecutionState
    sweeps: list[SweepStats]
    status: RunStatus


EarlyStop = Callable[[ExecutionState, SweepStats], bool]


def _whilelem_sweeps(
    state: ExecutionState,
    acts: Sequence[Activation],
    sched: Scheduler,
    rng: np.random.Generator,
    workers: int,
    on_change=None,
    limit: int = 2,
) -> list[SweepStats]:
    """
    One scheduler sweep, followed by a visit-all verification sweep when
    random selection saw no change and ``limit`` leaves room for it.
    """
    stats = state.sweep(acts, sched.order(len(acts), rng), workers, on_change)
    if stats.state_changes or sched.visits_all or limit < 2:
        return [stats]
    check = state.sweep(acts, range(len(acts)), workers, on_change)
    check.verification = True
    return [stats, check]


def _quiet(batch: Sequence[SweepStats], sched: Scheduler) -> bool:
    """No change in a batch that visited every activation at least once."""
    return sum(s.state_changes for s in batch) == 0 and (sched.visits_all or batch[-1].verification)


def run_whilelem(
    p: Program,
    state: ExecutionState,
    sched: Scheduler = Scheduler(),
    max_sweeps: int = 10_000,
    early_stop: EarlyStop | None = None,
    workers: int = 1,
    strict: bool = False,
) -> WhilelemResult:
    """Sweep until a full sweep changes nothing, ``early_stop`` fires, or ``max_sweeps`` is spent."""
    if p.root.kind != LoopKind.WHILELEM:
        raise WrongLoopKind(f"run_whilelem needs a whilelem root, got {p.root.kind.value}")
    acts = state.activations(p.root)
    rng = sched.rng()
    sweeps: list[SweepStats] = []
    while len(sweeps) < max_sweeps:
        batch = _whilelem_sweeps(state, acts, sched, rng, workers, limit=max_sweeps - len(sweeps))
        sweeps.extend(batch)
        if _quiet(batch, sched):
            return WhilelemResult(state, sweeps, RunStatus.TERMINATED)
        if early_stop is not None and early_stop(state, batch[-1]):
            return WhilelemResult(state, sweeps, RunStatus.EARLY_STOP)
    if strict:
        raise SweepBudgetExhausted(f"{p.name} did not terminate within {max_sweeps} sweeps")
    return WhilelemResult(state, sweeps, RunStatus.BUDGET_EXHAUSTED)


def is_fixed_point(state: ExecutionState) -> bool:
    """True when visiting every activation once changes nothing."""
    acts = state.activations()
    return state.sweep(acts, range(len(acts))).state_changes == 0


def executed_tuples(state: ExecutionState, loop: Loop | None = None) -> list[tuple]:
    """Records of the tuples one sweep visits, in enumeration order."""
    return [state.record(a.frame.tuple_ref) for a in state.activations(loop) if a.frame.tuple_ref is not None]


# Partitioned execution


@dataclass(frozen=True)
class SpaceRoles:
    """
    How each shared space behaves once a reservoir is split.

    A private space is accessed only at keys carrying the split field, so
    each partition touches its own disjoint slice. Exchanged spaces are
    replicated and reconciled through deltas. ``key_pos`` gives, per space,
    the key position holding the split field in every write.
    """

    private: frozenset = frozenset()
    exchanged: frozenset = frozenset()
    readonly: frozenset = frozenset()
    key_pos: Mapping[str, int] = field(default_factory=dict)


def split_of(program: Program) -> Optional[tuple[str, SplitTag]]:
    for node in walk(program.root):
        if isinstance(node, (ReservoirDomain, ValuesDomain)) and node.split is not None:
            return node.reservoir, node.split
    return None


def _split_binders(program: Program, split_field: str) -> set[str]:
    return {
        n.binder
        for n in walk(program.root)
        if isinstance(n, Loop) and isinstance(n.domain, ValuesDomain) and n.domain.field == split_field
    }


def classify_spaces(program: Program, split_field: Optional[str]) -> SpaceRoles:
    binders = _split_binders(program, split_field) if split_field else set()

    def carries_split(e) -> bool:
        match e:
            case TupleField(name=name) | IndexedField(name=name):
                return name == split_field
            case LoopVar(name=name):
                return name in binders
        return False

    reads: dict[str, list[tuple]] = defaultdict(list)
    writes: dict[str, list[tuple]] = defaultdict(list)
    for node in walk(program.root):
        if isinstance(node, SpaceRead):
            reads[node.space].append(node.keys)
        elif isinstance(node, SpaceWrite):
            writes[node.space].append(node.keys)

    def positions(accesses: list[tuple], arity: int) -> set[int]:
        return {p for p in range(arity) if all(carries_split(keys[p]) for keys in accesses)}

    private, exchanged, readonly, key_pos = set(), set(), set(), {}
    for name, decl in program.spaces.items():
        if not writes[name]:
            readonly.add(name)
            continue
        w = positions(writes[name], decl.key_arity) if split_field else set()
        r = positions(reads[name], decl.key_arity) if split_field else set()
        if w:
            key_pos[name] = min(w)
        if split_field is None or w & r:
            private.add(name)
            if w & r:
                key_pos[name] = min(w & r)
        else:
            exchanged.add(name)
    for lf in program.localized.values():
        if split_field in lf.key_fields:
            key_pos[lf.space] = lf.key_fields.index(split_field)
    return SpaceRoles(frozenset(private), frozenset(exchanged), frozenset(readonly), key_pos)


@dataclass
class Partition:
    id: int
    program: Program
    replica: ExecutionState
    buffer: UpdateBuffer
    roles: SpaceRoles
    source: Mapping[str, SharedSpace]
    owned_values: Optional[frozenset] = None

    @property
    def sub_reservoir(self):
        split = split_of(self.program)
        name = split[0] if split else next(iter(self.program.reservoirs))
        return self.program.reservoirs[name]

    def owns(self, space: str, key: tuple) -> bool:
        if self.owned_values is None:
            return True
        pos = self.roles.key_pos.get(space)
        return pos is not None and key[pos] in self.owned_values


def _as_spaces(program: Program, spaces: Mapping[str, Any]) -> dict[str, SharedSpace]:
    out = {}
    for name, contents in spaces.items():
        if isinstance(contents, SharedSpace):
            out[name] = contents
        elif (decl := _decl_for(program, name)) is not None:
            out[name] = SharedSpace(decl, contents)
    return out


def build_partitions(
    programs: Sequence[Program],
    spaces: Mapping[str, Any],
    layout: Layout = Layout.AOS,
    seed: int = DEFAULT_SEED,
) -> list[Partition]:
    """One partition per split program, each with its own replica of the initial spaces."""
    split = split_of(programs[0]) if len(programs) > 1 else None
    roles = classify_spaces(programs[0], split[1].field if split else None)
    source = _as_spaces(programs[0], spaces)
    parts = []
    for i, prog in enumerate(programs):
        replica = ExecutionState.build(prog, source, layout, seed=seed)
        replica.base = {name: replica.spaces[name].copy() for name in roles.exchanged}
        owned = None
        if split is not None:
            owned = frozenset(prog.reservoirs[split[0]].distinct_values(split[1].field))
        part = Partition(i, prog, replica, UpdateBuffer(i), roles, source, owned)
        part.buffer.owns = part.owns
        parts.append(part)
    return parts


@dataclass
class ExchangeEvent:
    round: int
    phase: str
    partitions: Sequence[Partition]
    counters: ExchangeCounters


@dataclass
class RunStats:
    variant: str = ""
    partitions: int = 1
    workers: int = 1
    rounds: int = 0
    sweeps: int = 0
    tuples_visited: int = 0
    guards_fired: int = 0
    state_changes: int = 0
    wall_ms: float = 0.0
    status: RunStatus = RunStatus.TERMINATED
    exchange: ExchangeCounters = field(default_factory=ExchangeCounters)

    def to_row(self) -> dict:
        return {
            "variant": self.variant,
            "partitions": self.partitions,
            "workers": self.workers,
            "rounds": self.rounds,
            "sweeps": self.sweeps,
            "tuples_visited": self.tuples_visited,
            "guards_fired": self.guards_fired,
            "state_changes": self.state_changes,
            "wall_ms": round(self.wall_ms, 3),
            "status": self.status.value,
            **self.exchange.to_row(),
        }


class PartitionedResult(NamedTuple):
    state: ExecutionState
    stats: RunStats
    status: RunStatus


def _delta_recorder(part: Partition, tracked: frozenset) -> Callable[[ChangeRecord], None]:
    localized = part.program.localized

    def record(rec: ChangeRecord) -> None:
        for c in rec.changes:
            space, decl = c.space, None
            if c.local:
                decl = localized[c.space].decl
                space = decl.name
            if space not in tracked:
                continue
            decl = decl or part.replica.spaces[space].decl
            if c.overwrite:
                part.buffer.record(Delta.overwrite(space, c.key, c.new))
            else:
                part.buffer.record(Delta.add(space, c.key, c.amount, decl.kind))

    return record


def merge_partitions(p: Program, parts: Sequence[Partition], layout: Layout = Layout.AOS) -> ExecutionState:
    """Global state: replicated spaces from any replica, private data from its owners."""
    roles = parts[0].roles
    merged = {name: s.copy() for name, s in parts[0].source.items()}
    for i, part in enumerate(parts):
        exported = part.replica.export_spaces()
        for name, space in exported.items():
            if name in roles.readonly:
                continue
            if name in roles.exchanged:
                if i == 0:
                    merged[name] = space
                continue
            pos = roles.key_pos.get(name)
            target = merged.setdefault(name, SharedSpace(space.decl))
            for key, value in space.items():
                if part.owned_values is None or pos is None or key[pos] in part.owned_values:
                    target.write(key, value)
    return ExecutionState.build(p, merged, layout)


def share_floors(parts: Sequence[Partition], rotation: int = 0) -> None:
    """
    Split the slack above each exchanged space's floor between the partitions.

    Between two exchanges a partition may lower a key by at most its share
    of ``base - floor``, so the reconciled value cannot drop below the
    floor. Integer remainders go to partitions in turn as ``rotation``
    advances.
    """
    count = len(parts)
    for i, part in enumerate(parts):
        part.replica.floors.clear()
        for name in part.roles.exchanged:
            decl = part.replica.spaces[name].decl
            if decl.floor is None or name not in part.replica.base:
                continue
            bounds = {}
            for key, value in part.replica.base[name].items():
                slack = value - decl.floor
                if slack <= 0:
                    bounds[key] = value
                    continue
                if isinstance(slack, (int, np.integer)):
                    share, extra = divmod(int(slack), count)
                    share += (i - rotation) % count < extra
                else:
                    share = slack / count
                bounds[key] = value - share
            part.replica.floors[name] = bounds


def run_partitioned(
    p: Program,
    parts: Sequence[Partition],
    scheme: ExchangeScheme = ExchangeScheme(),
    workers: int = 1,
    sweeps_per_exchange: int = 1,
    max_rounds: int = 10_000,
    scheduler: Scheduler = Scheduler(),
    early_stop: EarlyStop | None = None,
    on_exchange: Callable[[ExchangeEvent], None] | None = None,
    strict: bool = False,
    layout: Layout = Layout.AOS,
    variant: str = "",
) -> PartitionedResult:
    """
    Run every partition on its replica and reconcile replicas at exchange points.

    A round is ``sweeps_per_exchange`` local sweeps per partition (fewer
    when a partition goes quiet) followed by one exchange. The run ends when
    a round changes nothing anywhere and leaves nothing to exchange.
    ``p`` describes the merged result.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    kind = parts[0].program.root.kind
    roles = parts[0].roles
    counters = ExchangeCounters()
    assertions = tuple(scheme.assertions or p.assertions) if scheme.kind == ExchangeKind.INDIRECT else ()
    assigned = frozenset(a.assignment for a in assertions)
    tracked = roles.exchanged | assigned if len(parts) > 1 else frozenset()
    authoritative = {
        name: parts[0].source[name].copy()
        for a in assertions
        for name in (a.assignment, a.value)
        if name is not None and name in parts[0].source
    }
    recorders = [_delta_recorder(part, tracked) for part in parts]
    rngs = [scheduler.rng(part.id) for part in parts]
    intra = max(1, workers // len(parts))
    sweeps = [0] * len(parts)

    def run_round(i: int) -> SweepStats:
        part = parts[i]
        acts = part.replica.activations()
        total = SweepStats()
        if kind == LoopKind.FORELEM:
            sweeps[i] += 1
            order = scheduler.order(len(acts), rngs[i], exhaustive=True)
            return part.replica.sweep(acts, order, intra, recorders[i])
        for _ in range(sweeps_per_exchange):
            batch = _whilelem_sweeps(part.replica, acts, scheduler, rngs[i], intra, recorders[i])
            sweeps[i] += len(batch)
            for s in batch:
                total = total.merge(s)
            if all(s.state_changes == 0 for s in batch):
                break
        part.buffer.sweeps_since_flush += 1
        return total

    def exchange() -> None:
        bufs = [part.buffer for part in parts]
        replicas = [part.replica for part in parts]
        if scheme.kind == ExchangeKind.INDIRECT:
            flush_indirect(assertions, replicas, authoritative, bufs, counters)
        elif scheme.kind == ExchangeKind.MASTER:
            flush_master(bufs, replicas, scheme.master_id, counters)
        else:
            flush_buffered(bufs, replicas, counters)

    stats = RunStats(variant, len(parts), workers, exchange=counters)
    status = RunStatus.BUDGET_EXHAUSTED
    idle = 0
    start = time.perf_counter()
    pool = ThreadPoolExecutor(max_workers=min(workers, len(parts))) if min(workers, len(parts)) > 1 else None
    try:
        while stats.rounds < max_rounds:
            stats.rounds += 1
            if len(parts) > 1:
                share_floors(parts, stats.rounds)
            results = list(pool.map(run_round, range(len(parts)))) if pool else [run_round(i) for i in range(len(parts))]
            round_stats = SweepStats()
            for r in results:
                round_stats = round_stats.merge(r)
            stats.tuples_visited += round_stats.tuples_visited
            stats.guards_fired += round_stats.guards_fired
            stats.state_changes += round_stats.state_changes
            pending = sum(len(part.buffer) for part in parts)
            if on_exchange is not None:
                on_exchange(ExchangeEvent(stats.rounds, "before", parts, counters))
            exchange()
            if on_exchange is not None:
                on_exchange(ExchangeEvent(stats.rounds, "after", parts, counters))
            quiet = round_stats.state_changes == 0 and pending == 0
            idle = idle + 1 if quiet else 0
            # a deferred block waits at most one round per partition for a floor share
            if kind == LoopKind.FORELEM or (quiet and (round_stats.deferred == 0 or idle >= len(parts))):
                status = RunStatus.TERMINATED
                break
            if early_stop is not None and early_stop(parts[0].replica, round_stats):
                status = RunStatus.EARLY_STOP
                break
    finally:
        if pool is not None:
            pool.shutdown()
    stats.wall_ms = (time.perf_counter() - start) * 1000
    stats.sweeps = max(sweeps)
    stats.status = status
    if status == RunStatus.BUDGET_EXHAUSTED and strict:
        raise SweepBudgetExhausted(f"{p.name} did not terminate within {max_rounds} rounds")
    return PartitionedResult(merge_partitions(p, parts, layout), stats, status)
