"""
Source-to-source transformations on forelem programs.

Every transformation is a total function from ``Program`` to ``Program``
(splitting returns one program per partition) that either rewrites the
program or raises an error naming the precondition it violates. Programs
are immutable, so transformations may be applied concurrently.
"""

from __future__ import annotations

from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass, replace
from typing import Any, Optional

from .errors import (
    EmptyReservoir,
    ForelemError,
    LayoutUnsupported,
    NotIndexField,
    NotLocalizable,
    NotMaterialized,
    NotPerfectlyNested,
    NotReducible,
    PipelineError,
    UnknownField,
    UnknownSpace,
)
from .exchange import ExchangeKind
from .ir import (
    ALWAYS,
    DANGLING_STUB,
    And,
    Compare,
    Const,
    FieldKind,
    GuardedBlock,
    IfStmt,
    IndexedField,
    IndexedFieldWrite,
    IndexSize,
    IndexStructure,
    IntervalDomain,
    LocalizedField,
    Loop,
    LoopKind,
    LoopVar,
    MaxIndexSize,
    NestedForelem,
    Program,
    ReservoirDomain,
    SpaceRead,
    SpaceWrite,
    SplitTag,
    TupleField,
    TupleFieldWrite,
    Tuple,
    TupleReservoir,
    TupleSchema,
    ValuesDomain,
    fresh_name,
    loop_chain,
    loop_vars,
    render_domain,
    replace_level,
    rewrite,
    validate_program,
    walk,
)
from .layout import ExecutablePlan, Layout


def _require_index(schema: TupleSchema, name: str, where: str) -> None:
    if not schema.has(name):
        raise UnknownField(name, where)
    if schema.field(name).kind != FieldKind.INDEX:
        raise NotIndexField(f"field {name!r} of {where} is not an index field")


def _level(program: Program, level: int) -> Loop:
    chain = loop_chain(program.root)
    if not 0 <= level < len(chain):
        raise NotPerfectlyNested(f"{program.name} has no perfectly nested loop at level {level}")
    return chain[level]


def _iterated_reservoir(program: Program) -> str:
    for node in walk(program.root):
        if isinstance(node, (ReservoirDomain, ValuesDomain)):
            return node.reservoir
    raise EmptyReservoir(f"{program.name} iterates no reservoir")


def orthogonalize(program: Program, field_name: str, level: int = 0, binder: Optional[str] = None) -> Program:
    """
    Introduce an outer loop over the distinct values of ``field_name``.

    ``loop (t ∈ T)`` becomes ``loop (y ∈ T.f) forelem (t ∈ T.f[y])``. The
    outer loop keeps the original kind; per sweep the same tuples run.
    """
    loop = _level(program, level)
    d = loop.domain
    if not isinstance(d, ReservoirDomain):
        raise UnknownField(field_name, f"loop at level {level}, which does not iterate a reservoir")
    _require_index(program.reservoirs[d.reservoir].schema, field_name, f"reservoir {d.reservoir}")
    taken = loop_vars(program.root)
    if binder is None:
        binder = fresh_name(taken, ("y", "w", "z"))
    elif binder in taken:
        raise ValueError(f"loop variable {binder!r} is already bound")
    inner = Loop(
        LoopKind.FORELEM,
        loop.binder,
        ReservoirDomain(d.reservoir, d.where + ((field_name, LoopVar(binder)),), d.split),
        loop.body,
    )
    outer = Loop(loop.kind, binder, ValuesDomain(d.reservoir, field_name, d.where, d.split), (inner,))
    return program.with_root(replace_level(program.root, level, outer))


def _tag_splits(program: Program, reservoir: str, sub: TupleReservoir, tag: SplitTag) -> Program:
    def fn(node):
        if isinstance(node, (ReservoirDomain, ValuesDomain)) and node.reservoir == reservoir:
            return replace(node, split=tag)
        return None

    return replace(
        program,
        reservoirs={**program.reservoirs, reservoir: sub},
        root=rewrite(program.root, fn),
    )


def split_by_value(program: Program, field_name: str, parts: int) -> list[Program]:
    """One program per partition; distinct values of ``field_name`` are dealt round-robin in sorted order."""
    if parts < 1:
        raise ValueError(f"parts must be >= 1, got {parts}")
    name = _iterated_reservoir(program)
    r = program.reservoirs[name]
    _require_index(r.schema, field_name, f"reservoir {name}")
    pos = r.schema.position(field_name)
    values = r.distinct_values(field_name)
    out = []
    for i in range(parts):
        own = frozenset(values[i::parts])
        sub = r.filter(lambda t, own=own: t.values[pos] in own)
        out.append(_tag_splits(program, name, sub, SplitTag(field_name, "value", i, parts)))
    return out


def split_ranges(lo: int, hi: int, parts: int) -> list[tuple[int, int]]:
    width = max(1, (hi - lo + 1) // parts)
    ranges = [(lo + i * width, lo + (i + 1) * width - 1) for i in range(parts)]
    ranges[-1] = (ranges[-1][0], hi)
    return ranges


def split_by_range(program: Program, field_name: str, parts: int) -> list[Program]:
    """One program per contiguous value range of ``field_name``; the last range absorbs the remainder."""
    if parts < 1:
        raise ValueError(f"parts must be >= 1, got {parts}")
    name = _iterated_reservoir(program)
    r = program.reservoirs[name]
    _require_index(r.schema, field_name, f"reservoir {name}")
    if not len(r):
        raise EmptyReservoir(f"cannot range-split empty reservoir {name}")
    pos = r.schema.position(field_name)
    column = r.column(field_name)
    out = []
    for i, (lo, hi) in enumerate(split_ranges(min(column), max(column), parts)):
        sub = r.filter(lambda t, lo=lo, hi=hi: lo <= t.values[pos] <= hi)
        out.append(_tag_splits(program, name, sub, SplitTag(field_name, "range", i, parts, lo, hi)))
    return out


def _space_accesses(loop: Loop, space: str, reservoir: Optional[str] = None):
    """(access node, reservoir whose tuple is bound at the access) for every access of ``space``."""
    if isinstance(loop.domain, ReservoirDomain):
        reservoir = loop.domain.reservoir
    for node in loop.body:
        if isinstance(node, Loop):
            yield from _space_accesses(node, space, reservoir)
            continue
        for n in walk(node):
            if isinstance(n, (SpaceRead, SpaceWrite)) and n.space == space:
                yield n, reservoir
    if not isinstance(loop.domain, ReservoirDomain):
        for n in walk(loop.domain):
            if isinstance(n, SpaceRead) and n.space == space:
                yield n, None


def localize(program: Program, space: str, as_field: Optional[str] = None) -> Program:
    """
    Replace shared space ``space`` by a field of the iterated tuples.

    Every access must be keyed by the same tuple fields, in the same order,
    of the same reservoir; the new field is mutable when the space is written.
    """
    if space not in program.spaces:
        raise UnknownSpace(f"shared space {space!r} is not declared")
    accesses = list(_space_accesses(program.root, space))
    if not accesses:
        raise NotLocalizable(f"{space} is never accessed inside a tuple loop")
    reservoirs = {r for _, r in accesses}
    if None in reservoirs or len(reservoirs) > 1:
        raise NotLocalizable(f"{space} is accessed outside a single reservoir loop")
    reservoir = reservoirs.pop()
    schema = program.reservoirs[reservoir].schema
    key_fields = None
    for node, _ in accesses:
        if not all(isinstance(k, TupleField) and schema.has(k.name) for k in node.keys):
            raise NotLocalizable(f"{space} is accessed with a key that is not made of tuple fields")
        names = tuple(k.name for k in node.keys)
        if key_fields is None:
            key_fields = names
        elif names != key_fields:
            raise NotLocalizable(
                f"{space} is keyed by {list(key_fields)} and {list(names)}; distinct tuples would share a location"
            )
    for name in key_fields:
        if schema.field(name).kind != FieldKind.INDEX:
            raise NotLocalizable(f"{space} is keyed by non-index field {name!r}")

    taken = set(program.fields_of(reservoir))
    name = as_field or space.lower()
    if name in taken:
        name = fresh_name(taken, (name,))
    mutable = any(isinstance(n, SpaceWrite) for n, _ in accesses)

    def fn(node):
        if isinstance(node, SpaceRead) and node.space == space:
            return TupleField(name)
        if isinstance(node, SpaceWrite) and node.space == space:
            return TupleFieldWrite(name, node.value, node.op)
        return None

    decl = program.spaces[space]
    return replace(
        program,
        root=rewrite(program.root, fn),
        spaces={k: v for k, v in program.spaces.items() if k != space},
        localized={**program.localized, name: LocalizedField(name, reservoir, key_fields, mutable, decl)},
    )


def _innermost_reservoir_level(program: Program) -> int:
    chain = loop_chain(program.root)
    for level in range(len(chain) - 1, -1, -1):
        if isinstance(chain[level].domain, ReservoirDomain):
            return level
    raise NotMaterialized(f"{program.name} has no reservoir loop to materialize")


def materialize(program: Program, level: Optional[int] = None, binder: str = "i") -> Program:
    """Iterate an index interval over a new index structure instead of the reservoir itself."""
    level = _innermost_reservoir_level(program) if level is None else level
    loop = _level(program, level)
    d = loop.domain
    if not isinstance(d, ReservoirDomain):
        raise NotMaterialized(f"loop at level {level} iterates {render_domain(d)}, not a reservoir")
    struct = fresh_name(set(program.index_structures), (f"P{d.reservoir}",))
    group_fields = tuple(f for f, _ in d.where)
    group = tuple(e for _, e in d.where)
    taken = loop_vars(program.root)
    if binder in taken:
        binder = fresh_name(taken, (binder, "ii", "kk"))
    index = LoopVar(binder)

    def fn(node):
        if isinstance(node, TupleField):
            return IndexedField(struct, group, index, node.name)
        if isinstance(node, TupleFieldWrite):
            return IndexedFieldWrite(struct, group, index, node.name, node.value, node.op)
        return None

    body = tuple(node if isinstance(node, Loop) else rewrite(node, fn) for node in loop.body)
    new = Loop(loop.kind, binder, IntervalDomain(IndexSize(struct, group)), body)
    return replace(
        program,
        root=replace_level(program.root, level, new),
        index_structures={**program.index_structures, struct: IndexStructure(struct, d.reservoir, group_fields)},
    )


@dataclass(frozen=True)
class SubsetSpec:
    """
    A family of tuples enumerable from one of its members.

    The built-in family is the dangling-vertex fan-out: for a source ``u``
    the tuples ``⟨u, i⟩`` for every ``i`` in ``[0, |V|-1]`` except ``u``,
    with ``|V|`` taken from the program parameter ``universe``.
    """

    name: str = "dangling"
    source: str = "u"
    target: str = "v"
    universe: str = "vertices"
    arbitrary: bool = False


def find_families(r: TupleReservoir, spec: SubsetSpec, n: int) -> list[int]:
    """Sources whose tuples are exactly the family of ``spec``."""
    src, dst = r.schema.position(spec.source), r.schema.position(spec.target)
    targets: dict[int, list[int]] = defaultdict(list)
    for t in r.tuples:
        targets[t.values[src]].append(t.values[dst])
    return sorted(
        u for u, vs in targets.items() if n > 1 and len(vs) == n - 1 and sorted(vs) == [i for i in range(n) if i != u]
    )


def reduce_reservoir(program: Program, spec: SubsetSpec = SubsetSpec()) -> Program:
    """
    Replace every family of ``spec`` by one stub tuple ``⟨u, $C⟩``.

    The loop body expands a stub at execution time with a nested forelem
    over ``[0,|V|-1]\\{u}``; ordinary tuples run the original block.
    """
    root = program.root
    d = root.domain
    if not isinstance(d, ReservoirDomain):
        raise NotReducible(f"root of {program.name} does not iterate a reservoir")
    r = program.reservoirs[d.reservoir]
    if set(r.schema.names) != {spec.source, spec.target}:
        raise NotReducible(f"{d.reservoir} tuples are not pairs ⟨{spec.source},{spec.target}⟩")
    for name in (spec.source, spec.target):
        _require_index(r.schema, name, f"reservoir {d.reservoir}")
    if any(lf.reservoir == d.reservoir for lf in program.localized.values()):
        raise NotReducible(f"{d.reservoir} carries localized fields; stubs cannot hold them")
    if len(root.body) != 1 or not isinstance(root.body[0], GuardedBlock) or root.body[0].orelse:
        raise NotReducible("reduction needs a loop body of exactly one guarded block")
    if spec.universe not in program.params:
        raise NotReducible(f"program parameter {spec.universe!r} is not set")
    n = int(program.params[spec.universe])
    families = set(find_families(r, spec, n))
    if not families:
        return program

    src, dst = r.schema.position(spec.source), r.schema.position(spec.target)
    kept = [t for t in r.tuples if t.values[src] not in families]
    stubs = []
    for u in sorted(families):
        values = [0, 0]
        values[src], values[dst] = u, DANGLING_STUB
        stubs.append(Tuple(tuple(values)))
    reduced = replace(r, tuples=tuple(kept) + tuple(stubs))

    block = root.body[0]
    w = fresh_name(loop_vars(root), ("w", "z"))

    def to_loop_var(node):
        return LoopVar(w) if node == TupleField(spec.target) else None

    expanded = IfStmt(rewrite(block.guard, to_loop_var), rewrite(block.body, to_loop_var))
    new_block = GuardedBlock(
        Compare("==", TupleField(spec.target), Const(DANGLING_STUB)),
        (
            NestedForelem(
                w,
                IntervalDomain(Const(n), exclude=TupleField(spec.source), choose_one=spec.arbitrary),
                (expanded,),
            ),
        ),
        (IfStmt(block.guard, block.body),),
    )
    return replace(
        program,
        reservoirs={**program.reservoirs, d.reservoir: reduced},
        root=replace(root, body=(new_block,)),
    )


def expand_reduced(r: TupleReservoir, spec: SubsetSpec, n: int) -> list[tuple]:
    """The tuples a reduced reservoir stands for, in execution order."""
    src, dst = r.schema.position(spec.source), r.schema.position(spec.target)
    out = []
    for t in r.tuples:
        if t.values[dst] != DANGLING_STUB:
            out.append(t.values)
            continue
        u = t.values[src]
        for i in range(n):
            if i != u:
                values = list(t.values)
                values[dst] = i
                out.append(tuple(values))
    return out


def _bound_check(inner: str, struct: str, group: tuple) -> Compare:
    return Compare("<", LoopVar(inner), IndexSize(struct, group))


def _with_bound(block: GuardedBlock, check: Compare) -> GuardedBlock:
    if block.orelse:
        raise NotPerfectlyNested("a padded loop cannot run else branches")
    if block.guard == ALWAYS:
        guard = check
    elif isinstance(block.guard, And):
        guard = And((check,) + block.guard.terms)
    else:
        guard = And((check, block.guard))
    return replace(block, guard=guard)


def _without_bound(block: GuardedBlock, check: Compare) -> GuardedBlock:
    g = block.guard
    if g == check:
        return replace(block, guard=ALWAYS)
    if isinstance(g, And) and g.terms and g.terms[0] == check:
        rest = g.terms[1:]
        return replace(block, guard=rest[0] if len(rest) == 1 else And(rest))
    raise NotPerfectlyNested("padded loop body lacks its bound check")


def _mentions(node, binder: str) -> bool:
    return any(isinstance(n, LoopVar) and n.name == binder for n in walk(node))


def interchange(program: Program, a: int, b: int) -> Program:
    """
    Swap two adjacent perfectly nested forelem loops.

    An inner loop bounded by ``|PA[..][i]|`` moves outward bounded by
    ``max_i |PA[..][i]|`` and the body gains the check ``kk < |PA[..][i]|``;
    interchanging the result again restores the original.
    """
    if abs(a - b) != 1:
        raise NotPerfectlyNested(f"levels {a} and {b} are not adjacent")
    top = min(a, b)
    outer, inner = _level(program, top), _level(program, top + 1)
    if outer.kind != LoopKind.FORELEM or inner.kind != LoopKind.FORELEM:
        raise NotPerfectlyNested("only forelem loops can be interchanged")
    if inner.children:
        raise NotPerfectlyNested("inner loop is not innermost")
    if _mentions(outer.domain, inner.binder):
        raise NotPerfectlyNested(f"bounds of {outer.binder} depend on {inner.binder}")

    size = inner.domain.size if isinstance(inner.domain, IntervalDomain) else None
    outer_size = outer.domain.size if isinstance(outer.domain, IntervalDomain) else None
    if isinstance(size, IndexSize) and size.group and size.group[-1] == LoopVar(outer.binder):
        # ragged inner bound: pad to the maximum and guard the padding
        prefix = size.group[:-1]
        if _mentions(prefix, outer.binder):
            raise NotPerfectlyNested(f"bounds of {inner.binder} depend on {outer.binder} more than once")
        check = _bound_check(inner.binder, size.struct, size.group)
        body = tuple(_with_bound(block, check) for block in inner.body)
        new_inner = Loop(LoopKind.FORELEM, outer.binder, outer.domain, body)
        new_outer = Loop(LoopKind.FORELEM, inner.binder, IntervalDomain(MaxIndexSize(size.struct, prefix)), (new_inner,))
    elif isinstance(outer_size, MaxIndexSize):
        group = outer_size.prefix + (LoopVar(inner.binder),)
        check = _bound_check(outer.binder, outer_size.struct, group)
        body = tuple(_without_bound(block, check) for block in inner.body)
        new_inner = Loop(LoopKind.FORELEM, outer.binder, IntervalDomain(IndexSize(outer_size.struct, group)), body)
        new_outer = Loop(LoopKind.FORELEM, inner.binder, inner.domain, (new_inner,))
    else:
        if isinstance(inner.domain, ReservoirDomain) or isinstance(outer.domain, ReservoirDomain):
            raise NotPerfectlyNested("a tuple loop cannot be interchanged")
        if _mentions(inner.domain, outer.binder):
            raise NotPerfectlyNested(f"bounds of {inner.binder} depend on {outer.binder}")
        new_inner = Loop(LoopKind.FORELEM, outer.binder, outer.domain, inner.body)
        new_outer = Loop(LoopKind.FORELEM, inner.binder, inner.domain, (new_inner,))
    return program.with_root(replace_level(program.root, top, new_outer))


def concretize(p: Program, layout: Layout | str = Layout.AOS) -> ExecutablePlan:
    """Fix the physical layout; jagged-diagonal storage needs a materialized, interchanged nest."""
    layout = Layout(layout)
    if layout == Layout.JAGGED:
        if not p.index_structures:
            raise NotMaterialized(f"{p.name} has no index structure to store jagged")
        padded = any(
            isinstance(loop.domain, IntervalDomain) and isinstance(loop.domain.size, MaxIndexSize)
            for loop in walk(p.root)
            if isinstance(loop, Loop)
        )
        if not padded:
            raise LayoutUnsupported(f"jagged-diagonal layout needs an interchanged nest; {p.name} has none")
    return ExecutablePlan(p, layout)


# Pipelines


class Transformation:
    """One pipeline step; maps the current list of programs to the next."""

    def apply(self, programs: list[Program], partitions: int = 1) -> list[Program]:
        return [self.apply_one(p) for p in programs]

    def apply_one(self, p: Program) -> Program:
        raise NotImplementedError


@dataclass(frozen=True)
class Orthogonalize(Transformation):
    field: str
    level: int = 0
    binder: Optional[str] = None

    def apply_one(self, p: Program) -> Program:
        return orthogonalize(p, self.field, self.level, self.binder)

    def __str__(self) -> str:
        extra = (f", level={self.level}" if self.level else "") + (f", binder={self.binder}" if self.binder else "")
        return f"orthogonalize({self.field}{extra})"


@dataclass(frozen=True)
class SplitByValue(Transformation):
    field: str
    parts: Optional[int] = None

    def apply(self, programs: list[Program], partitions: int = 1) -> list[Program]:
        if len(programs) != 1:
            raise ValueError("programs are already split")
        return split_by_value(programs[0], self.field, self.parts or partitions)

    def __str__(self) -> str:
        return f"split({self.field})"


@dataclass(frozen=True)
class SplitByRange(Transformation):
    field: str
    parts: Optional[int] = None

    def apply(self, programs: list[Program], partitions: int = 1) -> list[Program]:
        if len(programs) != 1:
            raise ValueError("programs are already split")
        return split_by_range(programs[0], self.field, self.parts or partitions)

    def __str__(self) -> str:
        return f"split_range({self.field})"


@dataclass(frozen=True)
class Localize(Transformation):
    space: str
    as_field: Optional[str] = None

    def apply_one(self, p: Program) -> Program:
        return localize(p, self.space, self.as_field)

    def __str__(self) -> str:
        return f"localize({self.space}" + (f", as={self.as_field})" if self.as_field else ")")


@dataclass(frozen=True)
class Materialize(Transformation):
    level: Optional[int] = None
    binder: str = "i"

    def apply_one(self, p: Program) -> Program:
        return materialize(p, self.level, self.binder)

    def __str__(self) -> str:
        args = []
        if self.level is not None:
            args.append(f"level={self.level}")
        if self.binder != "i":
            args.append(f"binder={self.binder}")
        return "materialize" + (f"({', '.join(args)})" if args else "")


@dataclass(frozen=True)
class ReduceReservoir(Transformation):
    spec: SubsetSpec = SubsetSpec()

    def apply_one(self, p: Program) -> Program:
        return reduce_reservoir(p, self.spec)

    def __str__(self) -> str:
        return f"reduce({self.spec.name})"


@dataclass(frozen=True)
class Interchange(Transformation):
    a: int
    b: int

    def apply_one(self, p: Program) -> Program:
        return interchange(p, self.a, self.b)

    def __str__(self) -> str:
        return f"interchange({self.a},{self.b})"


@dataclass(frozen=True)
class Concretize(Transformation):
    layout: Layout = Layout.AOS

    def apply_one(self, p: Program) -> Program:
        concretize(p, self.layout)
        return p

    def __str__(self) -> str:
        return f"concretize({self.layout.value})"


@dataclass(frozen=True)
class Variant:
    name: str
    app: str
    pipeline: tuple[Transformation, ...] = ()
    exchange: ExchangeKind = ExchangeKind.BUFFERED
    layout: Layout = Layout.AOS
    description: str = ""
    master_id: int = 0
    options: tuple[tuple[str, Any], ...] = ()

    def option(self, key: str, default: Any = None) -> Any:
        return dict(self.options).get(key, default)

    @property
    def steps(self) -> list[str]:
        return [str(s) for s in self.pipeline]


@dataclass
class Composition:
    programs: list[Program]
    plans: list[ExecutablePlan]
    merged: Program
    variant: Variant
    layout: Layout = Layout.AOS

    @property
    def partitions(self) -> int:
        return len(self.programs)


def merge_split(programs: Sequence[Program]) -> Program:
    """The single program over the union of all partition reservoirs, without split tags."""
    first = programs[0]
    reservoirs = {}
    for name, r in first.reservoirs.items():
        tuples = tuple(t for p in programs for t in p.reservoirs[name].tuples)
        reservoirs[name] = replace(r, tuples=tuples) if len(programs) > 1 else r

    def unsplit(node):
        if isinstance(node, (ReservoirDomain, ValuesDomain)) and node.split is not None:
            return replace(node, split=None)
        return None

    return replace(first, reservoirs=reservoirs, root=rewrite(first.root, unsplit))


def compose(base: Program, variant: Variant, partitions: int = 1, layout: Layout | str | None = None) -> Composition:
    """Apply the variant's pipeline to ``base``; every failure names the step that caused it."""
    programs = [base]
    for pos, step in enumerate(variant.pipeline):
        try:
            programs = step.apply(programs, partitions)
        except (ForelemError, ValueError) as e:
            raise PipelineError(pos, str(step), e) from e
    for p in programs:
        problems = validate_program(p)
        if problems:
            detail = "; ".join(f"{d.code} at {d.path}: {d.message}" for d in problems)
            raise PipelineError(len(variant.pipeline), "validate", ValueError(detail))
    concrete = [s.layout for s in variant.pipeline if isinstance(s, Concretize)]
    chosen = Layout(layout) if layout is not None else (concrete[-1] if concrete else variant.layout)
    try:
        plans = [concretize(p, chosen) for p in programs]
    except ForelemError as e:
        raise PipelineError(len(variant.pipeline), f"concretize({chosen.value})", e) from e
    return Composition(programs, plans, merge_split(programs), variant, chosen)
