"""
Tuple-based loop intermediate representation.

A program is a nest of ``forelem``/``whilelem`` loops iterating tuple
reservoirs. Loop bodies are guarded blocks that read and write shared
spaces through keyed access. Every node is an immutable dataclass, so
transformations rewrite programs by building new nodes and executors can
share them between workers.
"""

from __future__ import annotations

import math
import operator
from collections import Counter
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field, fields, is_dataclass, replace
from enum import Enum
from typing import Any, Protocol, Union

import numpy as np

from .errors import (
    ArityMismatch,
    DimMismatch,
    DivByZero,
    KindMismatch,
    NotIndexField,
    SchemaMismatch,
    UnknownField,
)

# Sentinel target of a reduced tuple family (the ``$C`` stub of reservoir reduction).
DANGLING_STUB = 2**63 - 1


class FieldKind(str, Enum):
    INDEX = "index"
    SCALAR = "scalar"
    VECTOR = "vector"


@dataclass(frozen=True)
class Field:
    name: str
    kind: FieldKind = FieldKind.INDEX
    dim: int = 1

    def __post_init__(self):
        if not self.name.isidentifier():
            raise ValueError(f"field name {self.name!r} is not an identifier")
        if self.kind == FieldKind.VECTOR and self.dim < 1:
            raise ValueError(f"vector field {self.name!r} needs dim >= 1")


@dataclass(frozen=True)
class TupleSchema:
    fields: tuple[Field, ...]

    def __post_init__(self):
        names = [f.name for f in self.fields]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"duplicate field names in schema: {duplicates}")

    @classmethod
    def of(cls, *specs: str | Field) -> TupleSchema:
        """Build a schema from names (index fields) or ``Field`` objects."""
        return cls(tuple(s if isinstance(s, Field) else Field(s) for s in specs))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def has(self, name: str) -> bool:
        return any(f.name == name for f in self.fields)

    def position(self, name: str) -> int:
        for i, f in enumerate(self.fields):
            if f.name == name:
                return i
        raise UnknownField(name, "schema")

    def field(self, name: str) -> Field:
        return self.fields[self.position(name)]


def coerce_value(kind: FieldKind, dim: int, value: Any) -> Any:
    """Normalize a value to its canonical form; raise ``KindMismatch`` when impossible."""
    if kind == FieldKind.INDEX:
        if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, np.integer)):
            raise KindMismatch(f"index value must be an integer, got {value!r}")
        if value < 0:
            raise KindMismatch(f"index value must be non-negative, got {value!r}")
        return int(value)
    if kind == FieldKind.SCALAR:
        if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, float, np.integer, np.floating)):
            raise KindMismatch(f"scalar value must be a real number, got {value!r}")
        return float(value)
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (dim,):
        raise KindMismatch(f"vector value must have shape ({dim},), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class Tuple:
    values: tuple

    def __getitem__(self, i: int):
        return self.values[i]

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class TupleReservoir:
    """
    An unordered multiset of tuples sharing one schema.

    ``tuples`` is storage order only; executors decide enumeration order.
    """

    name: str
    schema: TupleSchema
    tuples: tuple[Tuple, ...] = ()

    def __len__(self) -> int:
        return len(self.tuples)

    def multiset(self) -> Counter:
        return Counter(t.values for t in self.tuples)

    def column(self, name: str) -> list:
        pos = self.schema.position(name)
        return [t.values[pos] for t in self.tuples]

    def distinct_values(self, name: str) -> list[int]:
        _require_index(self, name)
        return sorted(set(self.column(name)))

    def filter(self, keep: Callable[[Tuple], bool], name: str | None = None) -> TupleReservoir:
        return TupleReservoir(name or self.name, self.schema, tuple(t for t in self.tuples if keep(t)))


def _hashable(kind: FieldKind, value: Any) -> Any:
    return tuple(float(v) for v in value) if kind == FieldKind.VECTOR else value


def build_reservoir(schema: TupleSchema, tuples: Sequence, name: str = "T") -> TupleReservoir:
    """Build a reservoir holding exactly the given multiset of tuples."""
    normalized = []
    for i, t in enumerate(tuples):
        values = t.values if isinstance(t, Tuple) else tuple(t)
        if len(values) != len(schema.fields):
            raise SchemaMismatch(i, f"arity {len(values)} != {len(schema.fields)}")
        try:
            canon = tuple(
                _hashable(f.kind, coerce_value(f.kind, f.dim, v)) for f, v in zip(schema.fields, values)
            )
        except KindMismatch as e:
            raise SchemaMismatch(i, str(e)) from e
        normalized.append(Tuple(canon))
    return TupleReservoir(name, schema, tuple(normalized))


def _require_index(r: TupleReservoir, name: str) -> None:
    if not r.schema.has(name):
        raise UnknownField(name, f"reservoir {r.name}")
    if r.schema.field(name).kind != FieldKind.INDEX:
        raise NotIndexField(f"field {name!r} of reservoir {r.name} is not an index field")


def select_by_field(r: TupleReservoir, field_name: str, value: int) -> TupleReservoir:
    """The sub-multiset ``r.field[value]``."""
    _require_index(r, field_name)
    pos = r.schema.position(field_name)
    return r.filter(lambda t: t.values[pos] == value)


def select_by_range(r: TupleReservoir, field_name: str, lo: int, hi: int) -> TupleReservoir:
    """The sub-multiset of tuples with ``lo <= field <= hi``."""
    _require_index(r, field_name)
    pos = r.schema.position(field_name)
    return r.filter(lambda t: lo <= t.values[pos] <= hi)


# Shared spaces


@dataclass(frozen=True)
class SpaceDecl:
    name: str
    key_arity: int = 1
    kind: FieldKind = FieldKind.SCALAR
    dim: int = 1
    default: Any = 0.0
    # no write may lower a value below this
    floor: Any = None

    def __post_init__(self):
        if self.key_arity < 1:
            raise ValueError(f"space {self.name!r} needs key_arity >= 1")
        if self.floor is not None and self.kind == FieldKind.VECTOR:
            raise ValueError(f"vector space {self.name!r} cannot carry a floor")

    def default_value(self) -> Any:
        if self.kind == FieldKind.VECTOR:
            return np.full(self.dim, float(self.default) if np.isscalar(self.default) else 0.0)
        return coerce_value(self.kind, self.dim, self.default)


class SharedSpace:
    """
    Keyed store behind a shared space declaration.

    The address function is the identity on integer key tuples, so distinct
    keys always address distinct locations. Unwritten keys read the default.
    """

    __slots__ = ("decl", "contents", "_default")

    def __init__(self, decl: SpaceDecl, contents: Mapping | None = None):
        self.decl = decl
        self.contents: dict[tuple, Any] = {}
        self._default = decl.default_value()
        for key, value in (contents or {}).items():
            self.write(key, value)

    @property
    def name(self) -> str:
        return self.decl.name

    def address(self, key) -> tuple:
        key = tuple(key) if isinstance(key, (tuple, list, np.ndarray)) else (key,)
        if len(key) != self.decl.key_arity:
            raise ArityMismatch(f"space {self.name} expects {self.decl.key_arity} key(s), got {len(key)}")
        return tuple(int(k) for k in key)

    def read(self, key) -> Any:
        return self.contents.get(self.address(key), self._default)

    def write(self, key, value) -> None:
        self.contents[self.address(key)] = coerce_value(self.decl.kind, self.decl.dim, value)

    def items(self):
        return self.contents.items()

    def copy(self) -> SharedSpace:
        other = SharedSpace(self.decl)
        # vector values are never mutated in place, sharing them is safe
        other.contents = dict(self.contents)
        return other

    def __len__(self) -> int:
        return len(self.contents)

    def __repr__(self) -> str:
        return f"SharedSpace({self.name}, {len(self.contents)} keys)"


def space_read(s: SharedSpace, key) -> Any:
    return s.read(key)


def space_write(s: SharedSpace, key, value) -> None:
    s.write(key, value)


# Expressions


class Expr:
    __slots__ = ()


@dataclass(frozen=True)
class Const(Expr):
    value: Any


@dataclass(frozen=True)
class TupleField(Expr):
    name: str


@dataclass(frozen=True)
class LoopVar(Expr):
    name: str


@dataclass(frozen=True)
class SpaceRead(Expr):
    space: str
    keys: tuple[Expr, ...]


@dataclass(frozen=True)
class Arith(Expr):
    op: str
    lhs: Expr
    rhs: Expr

    def __post_init__(self):
        if self.op not in _ARITH:
            raise ValueError(f"unknown arithmetic operator {self.op!r}")


DELTA_EXCEEDS = "|>|"


@dataclass(frozen=True)
class Compare(Expr):
    op: str
    lhs: Expr
    rhs: Expr

    def __post_init__(self):
        if self.op not in _COMPARE and self.op != DELTA_EXCEEDS:
            raise ValueError(f"unknown comparison operator {self.op!r}")


@dataclass(frozen=True)
class Dist(Expr):
    lhs: Expr
    rhs: Expr


@dataclass(frozen=True)
class And(Expr):
    terms: tuple[Expr, ...]


@dataclass(frozen=True)
class IndexedField(Expr):
    """``PT[g...][i].name``: a field of the tuple an index structure assigns to ``i``."""

    struct: str
    group: tuple[Expr, ...]
    index: Expr
    name: str


@dataclass(frozen=True)
class IndexSize(Expr):
    struct: str
    group: tuple[Expr, ...]


@dataclass(frozen=True)
class MaxIndexSize(Expr):
    """Largest ``|struct[prefix..., *]|`` over all groups extending ``prefix``."""

    struct: str
    prefix: tuple[Expr, ...]


_ARITH = {"+": operator.add, "-": operator.sub, "*": operator.mul, "/": operator.truediv}
_COMPARE = {
    "==": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


def read(space: str, *keys: Expr) -> SpaceRead:
    return SpaceRead(space, tuple(keys))


# Statements


class Stmt:
    __slots__ = ()


WRITE_OPS = ("=", "+=", "-=")


@dataclass(frozen=True)
class SpaceWrite(Stmt):
    space: str
    keys: tuple[Expr, ...]
    value: Expr
    op: str = "="

    def __post_init__(self):
        if self.op not in WRITE_OPS:
            raise ValueError(f"unknown write operator {self.op!r}")


@dataclass(frozen=True)
class TupleFieldWrite(Stmt):
    name: str
    value: Expr
    op: str = "="


@dataclass(frozen=True)
class IndexedFieldWrite(Stmt):
    struct: str
    group: tuple[Expr, ...]
    index: Expr
    name: str
    value: Expr
    op: str = "="


@dataclass(frozen=True)
class NestedForelem(Stmt):
    binder: str
    domain: Domain
    body: tuple[Stmt, ...]


@dataclass(frozen=True)
class IfStmt(Stmt):
    test: Expr
    then: tuple[Stmt, ...]
    orelse: tuple[Stmt, ...] = ()


@dataclass(frozen=True)
class GuardedBlock:
    """``if (guard) { body } else { orelse }``, executed as one atomic unit."""

    guard: Expr
    body: tuple[Stmt, ...]
    orelse: tuple[Stmt, ...] = ()


ALWAYS = Const(True)


# Iteration domains


@dataclass(frozen=True)
class SplitTag:
    """Marks a domain as one partition ``S(R)_index`` of a split reservoir."""

    field: str
    mode: str
    index: int
    parts: int
    lo: int | None = None
    hi: int | None = None


@dataclass(frozen=True)
class ReservoirDomain:
    """Tuples of ``reservoir`` whose fields equal the ``where`` expressions (``T.x[y]``)."""

    reservoir: str
    where: tuple[tuple[str, Expr], ...] = ()
    split: SplitTag | None = None


@dataclass(frozen=True)
class ValuesDomain:
    """Distinct values of ``field`` among the tuples selected by ``where`` (``T.x``)."""

    reservoir: str
    field: str
    where: tuple[tuple[str, Expr], ...] = ()
    split: SplitTag | None = None


@dataclass(frozen=True)
class IntervalDomain:
    """Integers ``[0, size-1]``, optionally without ``exclude`` (``V\\{u}``)."""

    size: Expr
    exclude: Expr | None = None
    choose_one: bool = False


Domain = Union[ReservoirDomain, ValuesDomain, IntervalDomain]


class LoopKind(str, Enum):
    FORELEM = "forelem"
    WHILELEM = "whilelem"


@dataclass(frozen=True)
class Loop:
    kind: LoopKind
    binder: str
    domain: Domain
    body: tuple[Union[GuardedBlock, "Loop"], ...]

    @property
    def children(self) -> tuple[Loop, ...]:
        return tuple(n for n in self.body if isinstance(n, Loop))

    @property
    def blocks(self) -> tuple[GuardedBlock, ...]:
        return tuple(n for n in self.body if isinstance(n, GuardedBlock))


def forelem(domain: Domain, *body, binder: str = "t") -> Loop:
    return Loop(LoopKind.FORELEM, binder, domain, tuple(body))


def whilelem(domain: Domain, *body, binder: str = "t") -> Loop:
    return Loop(LoopKind.WHILELEM, binder, domain, tuple(body))


# Program


@dataclass(frozen=True)
class LocalizedField:
    """A tuple field that replaced a shared space; stored per localization key."""

    name: str
    reservoir: str
    key_fields: tuple[str, ...]
    mutable: bool
    decl: SpaceDecl

    @property
    def space(self) -> str:
        return self.decl.name

    @property
    def kind(self) -> FieldKind:
        return self.decl.kind

    @property
    def dim(self) -> int:
        return self.decl.dim


@dataclass(frozen=True)
class IndexStructure:
    name: str
    reservoir: str
    group_fields: tuple[str, ...] = ()


@dataclass(frozen=True)
class Assertion:
    """``derived[i] = SUM(value[x] if assignment[x] == i)`` (count when ``value`` is None)."""

    derived: str
    assignment: str
    value: str | None = None
    size_param: str = "k"

    @property
    def kind(self) -> str:
        return "count" if self.value is None else "sum"


@dataclass(frozen=True)
class Program:
    name: str
    reservoirs: Mapping[str, TupleReservoir]
    spaces: Mapping[str, SpaceDecl]
    root: Loop
    epsilon: float = 0.0
    localized: Mapping[str, LocalizedField] = field(default_factory=dict)
    index_structures: Mapping[str, IndexStructure] = field(default_factory=dict)
    assertions: tuple[Assertion, ...] = ()
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    def fields_of(self, reservoir: str) -> tuple[str, ...]:
        local = tuple(f.name for f in self.localized.values() if f.reservoir == reservoir)
        return self.reservoirs[reservoir].schema.names + local

    def with_root(self, root: Loop, **changes) -> Program:
        return replace(self, root=root, **changes)


# Generic traversal


def walk(node) -> Iterator:
    """Pre-order traversal over every dataclass node reachable from ``node``."""
    if isinstance(node, tuple):
        for n in node:
            yield from walk(n)
        return
    if not is_dataclass(node) or isinstance(node, type):
        return
    yield node
    for f in fields(node):
        yield from walk(getattr(node, f.name))


def rewrite(node, fn: Callable[[Any], Any]):
    """Bottom-up rebuild; ``fn`` returns a replacement node or ``None`` to keep it."""
    if isinstance(node, tuple):
        new = tuple(rewrite(n, fn) for n in node)
        return node if all(a is b for a, b in zip(new, node)) else new
    if not is_dataclass(node) or isinstance(node, type):
        return node
    changes = {}
    for f in fields(node):
        value = getattr(node, f.name)
        new_value = rewrite(value, fn)
        if new_value is not value:
            changes[f.name] = new_value
    if changes:
        node = replace(node, **changes)
    out = fn(node)
    return node if out is None else out


def loop_chain(root: Loop) -> list[Loop]:
    """Loops along the single-child nesting chain starting at ``root``."""
    chain = [root]
    while len(chain[-1].children) == 1 and not chain[-1].blocks:
        chain.append(chain[-1].children[0])
    return chain


def replace_level(root: Loop, level: int, new: Loop) -> Loop:
    if level == 0:
        return new
    child = root.children[0]
    idx = root.body.index(child)
    body = root.body[:idx] + (replace_level(child, level - 1, new),) + root.body[idx + 1 :]
    return replace(root, body=body)


def loop_vars(root: Loop) -> set[str]:
    names = {n.binder for n in walk(root) if isinstance(n, (Loop, NestedForelem))}
    names |= {n.name for n in walk(root) if isinstance(n, LoopVar)}
    return names


def fresh_name(taken: set[str], preferred: Sequence[str]) -> str:
    for name in preferred:
        if name not in taken:
            return name
    i = 1
    while f"{preferred[0]}{i}" in taken:
        i += 1
    return f"{preferred[0]}{i}"


# Validation


@dataclass(frozen=True)
class Diagnostic:
    code: str
    path: str
    message: str


@dataclass
class _Scope:
    reservoir: str | None = None
    loop_vars: frozenset = frozenset()

    def bind(self, name: str) -> _Scope:
        return _Scope(self.reservoir, self.loop_vars | {name})


def validate_program(p: Program) -> list[Diagnostic]:
    """Return diagnostics for undeclared names, impure guards, dimension errors and unguarded whilelems."""
    out: list[Diagnostic] = []
    _check_loop(p, p.root, _Scope(), "root", out, inside_whilelem=False)
    return out


def _check_domain(p: Program, d: Domain, scope: _Scope, path: str, out: list) -> None:
    if isinstance(d, (ReservoirDomain, ValuesDomain)):
        if d.reservoir not in p.reservoirs:
            out.append(Diagnostic("UnknownReservoir", path, f"reservoir {d.reservoir!r} is not declared"))
            return
        schema = p.reservoirs[d.reservoir].schema
        names = [f for f, _ in d.where] + ([d.field] if isinstance(d, ValuesDomain) else [])
        for name in names:
            if not schema.has(name):
                out.append(Diagnostic("UnknownField", path, f"{d.reservoir} has no field {name!r}"))
            elif schema.field(name).kind != FieldKind.INDEX:
                out.append(Diagnostic("NotIndexField", path, f"{d.reservoir}.{name} is not an index field"))
        for i, (_, e) in enumerate(d.where):
            _check_expr(p, e, scope, f"{path}/where[{i}]", out)
    else:
        _check_expr(p, d.size, scope, f"{path}/size", out)
        if d.exclude is not None:
            _check_expr(p, d.exclude, scope, f"{path}/exclude", out)


def _check_loop(p: Program, loop: Loop, scope: _Scope, path: str, out: list, inside_whilelem: bool) -> None:
    _check_domain(p, loop.domain, scope, f"{path}/domain", out)
    if isinstance(loop.domain, ReservoirDomain):
        inner = _Scope(loop.domain.reservoir, scope.loop_vars)
    else:
        inner = scope.bind(loop.binder)
    whilelem_ctx = inside_whilelem or loop.kind == LoopKind.WHILELEM
    blocks = loop.blocks
    if whilelem_ctx and blocks and all(b.guard == ALWAYS for b in blocks):
        out.append(Diagnostic("MissingGuard", path, "whilelem body has no guard"))
    for i, node in enumerate(loop.body):
        sub = f"{path}/body[{i}]"
        if isinstance(node, Loop):
            _check_loop(p, node, inner, sub, out, whilelem_ctx)
        else:
            _check_block(p, node, inner, sub, out)


def _check_block(p: Program, block: GuardedBlock, scope: _Scope, path: str, out: list) -> None:
    impure = [n for n in walk(block.guard) if isinstance(n, (Stmt, GuardedBlock, Loop))]
    if impure or isinstance(block.guard, Stmt):
        out.append(Diagnostic("ImpureGuard", f"{path}/guard", "guard contains a statement"))
    else:
        _check_expr(p, block.guard, scope, f"{path}/guard", out)
    for name, stmts in (("body", block.body), ("orelse", block.orelse)):
        for i, s in enumerate(stmts):
            _check_stmt(p, s, scope, f"{path}/{name}[{i}]", out)


def _check_stmt(p: Program, s, scope: _Scope, path: str, out: list) -> None:
    if isinstance(s, SpaceWrite):
        _check_space(p, s.space, len(s.keys), path, out)
        for i, k in enumerate(s.keys):
            _check_expr(p, k, scope, f"{path}/key[{i}]", out)
        _check_expr(p, s.value, scope, f"{path}/value", out)
    elif isinstance(s, TupleFieldWrite):
        _check_tuple_field(p, s.name, scope, path, out)
        _check_expr(p, s.value, scope, f"{path}/value", out)
    elif isinstance(s, IndexedFieldWrite):
        _check_expr(p, IndexedField(s.struct, s.group, s.index, s.name), scope, path, out)
        _check_expr(p, s.value, scope, f"{path}/value", out)
    elif isinstance(s, NestedForelem):
        _check_domain(p, s.domain, scope, f"{path}/domain", out)
        inner = scope.bind(s.binder)
        for i, b in enumerate(s.body):
            _check_stmt(p, b, inner, f"{path}/body[{i}]", out)
    elif isinstance(s, IfStmt):
        _check_expr(p, s.test, scope, f"{path}/test", out)
        for name, stmts in (("then", s.then), ("orelse", s.orelse)):
            for i, b in enumerate(stmts):
                _check_stmt(p, b, scope, f"{path}/{name}[{i}]", out)
    else:
        out.append(Diagnostic("NotAStatement", path, f"{type(s).__name__} is not a statement"))


def _check_space(p: Program, name: str, arity: int, path: str, out: list) -> None:
    if name not in p.spaces:
        out.append(Diagnostic("UnknownSpace", path, f"shared space {name!r} is not declared"))
    elif p.spaces[name].key_arity != arity:
        out.append(Diagnostic("ArityMismatch", path, f"{name} takes {p.spaces[name].key_arity} key(s), got {arity}"))


def _check_tuple_field(p: Program, name: str, scope: _Scope, path: str, out: list) -> None:
    if scope.reservoir is None:
        out.append(Diagnostic("UnknownField", path, f"field {name!r} used outside a tuple loop"))
    elif scope.reservoir in p.reservoirs and name not in p.fields_of(scope.reservoir):
        out.append(Diagnostic("UnknownField", path, f"{scope.reservoir} has no field {name!r}"))


def _check_expr(p: Program, e, scope: _Scope, path: str, out: list) -> None:
    for node in walk(e):
        if isinstance(node, SpaceRead):
            _check_space(p, node.space, len(node.keys), path, out)
        elif isinstance(node, TupleField):
            _check_tuple_field(p, node.name, scope, path, out)
        elif isinstance(node, LoopVar) and node.name not in scope.loop_vars:
            out.append(Diagnostic("UnknownLoopVar", path, f"loop variable {node.name!r} is not bound"))
        elif isinstance(node, (IndexedField, IndexSize, MaxIndexSize)) and node.struct not in p.index_structures:
            out.append(Diagnostic("UnknownIndexStructure", path, f"index structure {node.struct!r} is not declared"))
        elif isinstance(node, Dist):
            a, b = static_dim(p, node.lhs, scope.reservoir), static_dim(p, node.rhs, scope.reservoir)
            if a is not None and b is not None and a != b:
                out.append(Diagnostic("DimMismatch", path, f"dist between dim-{a} and dim-{b} values"))


def static_dim(p: Program, e, reservoir: str | None) -> int | None:
    """Vector dimension of ``e`` when statically known; 0 for scalars."""
    if isinstance(e, Const):
        return len(e.value) if isinstance(e.value, (tuple, list, np.ndarray)) else 0
    if isinstance(e, SpaceRead) and e.space in p.spaces:
        decl = p.spaces[e.space]
        return decl.dim if decl.kind == FieldKind.VECTOR else 0
    if isinstance(e, TupleField) and reservoir in p.reservoirs:
        local = p.localized.get(e.name)
        if local is not None and local.reservoir == reservoir:
            return local.dim if local.kind == FieldKind.VECTOR else 0
        schema = p.reservoirs[reservoir].schema
        if schema.has(e.name):
            f = schema.field(e.name)
            return f.dim if f.kind == FieldKind.VECTOR else 0
    if isinstance(e, Arith):
        a, b = static_dim(p, e.lhs, reservoir), static_dim(p, e.rhs, reservoir)
        if a is None or b is None:
            return None
        return max(a, b)
    if isinstance(e, (Compare, Dist, And, IndexSize, MaxIndexSize, LoopVar)):
        return 0
    return None


# Evaluation


@dataclass(frozen=True)
class TupleRef:
    reservoir: str
    tid: int


@dataclass
class Frame:
    tuple_ref: TupleRef | None = None
    env: dict = field(default_factory=dict)

    def bind(self, name: str, value: int) -> Frame:
        return Frame(self.tuple_ref, {**self.env, name: value})

    def at(self, ref: TupleRef) -> Frame:
        return Frame(ref, self.env)


class EvalContext(Protocol):
    epsilon: float

    def read_space(self, name: str, key: tuple) -> Any: ...

    def tuple_value(self, ref: TupleRef, name: str) -> Any: ...

    def indexed_ref(self, struct: str, group: tuple, index: int) -> TupleRef: ...

    def index_size(self, struct: str, group: tuple) -> int: ...

    def max_index_size(self, struct: str, prefix: tuple) -> int: ...


def _numeric(v):
    return np.asarray(v, dtype=np.float64) if isinstance(v, (tuple, list)) else v


def eval_expr(e: Expr, frame: Frame | Tuple | None, state: EvalContext) -> Any:
    """Evaluate ``e`` without side effects."""
    if not isinstance(frame, Frame):
        frame = Frame(frame)
    match e:
        case Const(value=v):
            return v
        case TupleField(name=name):
            if frame.tuple_ref is None:
                raise UnknownField(name, "expression without a bound tuple")
            return state.tuple_value(frame.tuple_ref, name)
        case LoopVar(name=name):
            try:
                return frame.env[name]
            except KeyError:
                raise UnknownField(name, "loop variables") from None
        case SpaceRead(space=space, keys=keys):
            return state.read_space(space, tuple(int(eval_expr(k, frame, state)) for k in keys))
        case Arith(op=op, lhs=lhs, rhs=rhs):
            a = _numeric(eval_expr(lhs, frame, state))
            b = _numeric(eval_expr(rhs, frame, state))
            if op == "/" and np.any(np.asarray(b) == 0):
                raise DivByZero(f"division by zero in {render_expr(e)}")
            return _ARITH[op](a, b)
        case Compare(op=op, lhs=lhs, rhs=rhs):
            a = eval_expr(lhs, frame, state)
            b = eval_expr(rhs, frame, state)
            if isinstance(a, (np.ndarray, tuple)) or isinstance(b, (np.ndarray, tuple)):
                raise KindMismatch(f"comparison of vector values in {render_expr(e)}")
            if op == DELTA_EXCEEDS:
                return abs(a - b) > state.epsilon
            return bool(_COMPARE[op](a, b))
        case Dist(lhs=lhs, rhs=rhs):
            a = np.asarray(eval_expr(lhs, frame, state), dtype=np.float64)
            b = np.asarray(eval_expr(rhs, frame, state), dtype=np.float64)
            if a.shape != b.shape:
                raise DimMismatch(f"dist between shapes {a.shape} and {b.shape}")
            diff = a - b
            return math.sqrt(float(np.dot(diff, diff)))
        case And(terms=terms):
            return all(eval_expr(t, frame, state) for t in terms)
        case IndexedField(struct=struct, group=group, index=index, name=name):
            ref = state.indexed_ref(
                struct, tuple(int(eval_expr(g, frame, state)) for g in group), int(eval_expr(index, frame, state))
            )
            return state.tuple_value(ref, name)
        case IndexSize(struct=struct, group=group):
            return state.index_size(struct, tuple(int(eval_expr(g, frame, state)) for g in group))
        case MaxIndexSize(struct=struct, prefix=prefix):
            return state.max_index_size(struct, tuple(int(eval_expr(g, frame, state)) for g in prefix))
    raise TypeError(f"not an expression: {e!r}")


# Rendering in the loop notation


def render_expr(e) -> str:
    match e:
        case Const(value=v):
            if v is True:
                return "true"
            if isinstance(v, int) and v == DANGLING_STUB:
                return "$C"
            if isinstance(v, float):
                return f"{v:g}"
            return str(v)
        case TupleField(name=name) | LoopVar(name=name):
            return name
        case SpaceRead(space=space, keys=keys):
            return f"{space}[{','.join(render_expr(k) for k in keys)}]"
        case Arith(op=op, lhs=lhs, rhs=rhs):
            return f"({render_expr(lhs)}{op}{render_expr(rhs)})"
        case Compare(op=op, lhs=lhs, rhs=rhs):
            if op == DELTA_EXCEEDS:
                return f"|{render_expr(lhs)}-{render_expr(rhs)}| > eps"
            return f"{render_expr(lhs)} {op} {render_expr(rhs)}"
        case Dist(lhs=lhs, rhs=rhs):
            return f"dist({render_expr(lhs)},{render_expr(rhs)})"
        case And(terms=terms):
            return " && ".join(render_expr(t) for t in terms)
        case IndexedField(struct=struct, group=group, index=index, name=name):
            return f"{struct}{_subscripts(group)}[{render_expr(index)}].{name}"
        case IndexSize(struct=struct, group=group):
            return f"|{struct}{_subscripts(group)}|"
        case MaxIndexSize(struct=struct, prefix=prefix):
            return f"max(|{struct}{_subscripts(prefix)}[*]|)"
    return repr(e)


def _subscripts(exprs) -> str:
    return "".join(f"[{render_expr(g)}]" for g in exprs)


def _reservoir_label(d: ReservoirDomain | ValuesDomain) -> str:
    name = f"S({d.reservoir})_{d.split.index}" if d.split is not None else d.reservoir
    return name + "".join(f".{f}[{render_expr(v)}]" for f, v in d.where)


def render_domain(d: Domain) -> str:
    match d:
        case ReservoirDomain():
            return _reservoir_label(d)
        case ValuesDomain(field=name):
            return f"{_reservoir_label(d)}.{name}"
        case IntervalDomain(size=size, exclude=exclude):
            text = f"[0,{render_expr(size)}-1]"
            return text + (f"\\{{{render_expr(exclude)}}}" if exclude is not None else "")
    return repr(d)


def _render_stmts(stmts, indent: int) -> list[str]:
    pad = "  " * indent
    lines = []
    for s in stmts:
        match s:
            case SpaceWrite(space=space, keys=keys, value=value, op=op):
                lines.append(f"{pad}{space}[{','.join(render_expr(k) for k in keys)}] {op} {render_expr(value)}")
            case TupleFieldWrite(name=name, value=value, op=op):
                lines.append(f"{pad}{name} {op} {render_expr(value)}")
            case IndexedFieldWrite(struct=struct, group=group, index=index, name=name, value=value, op=op):
                target = f"{struct}{_subscripts(group)}[{render_expr(index)}].{name}"
                lines.append(f"{pad}{target} {op} {render_expr(value)}")
            case NestedForelem(binder=binder, domain=domain, body=body):
                lines.append(f"{pad}forelem ({binder} ∈ {render_domain(domain)})")
                lines.extend(_render_stmts(body, indent + 1))
            case IfStmt(test=test, then=then, orelse=orelse):
                lines.append(f"{pad}if ({render_expr(test)})")
                lines.extend(_render_stmts(then, indent + 1))
                if orelse:
                    lines.append(f"{pad}else")
                    lines.extend(_render_stmts(orelse, indent + 1))
    return lines


def render_loop(loop: Loop, program: Program | None = None, indent: int = 0) -> list[str]:
    pad = "  " * indent
    if isinstance(loop.domain, ReservoirDomain):
        names = (
            program.fields_of(loop.domain.reservoir)
            if program is not None and loop.domain.reservoir in program.reservoirs
            else (loop.binder,)
        )
        binder = f"⟨{','.join(names)}⟩"
    else:
        binder = loop.binder
    lines = [f"{pad}{loop.kind.value} ({binder} ∈ {render_domain(loop.domain)})"]
    for node in loop.body:
        if isinstance(node, Loop):
            lines.extend(render_loop(node, program, indent + 1))
        elif node.guard == ALWAYS:
            lines.extend(_render_stmts(node.body, indent + 1))
        else:
            lines.append(f"{pad}  if ({render_expr(node.guard)})")
            lines.extend(_render_stmts(node.body, indent + 2))
            if node.orelse:
                lines.append(f"{pad}  else")
                lines.extend(_render_stmts(node.orelse, indent + 2))
    return lines


def render(program: Program | Loop) -> str:
    if isinstance(program, Loop):
        return "\n".join(render_loop(program))
    return "\n".join(render_loop(program.root, program))
