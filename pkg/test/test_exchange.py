from types import SimpleNamespace

import numpy as np
import pytest

from forelem.errors import AssertionUnsatisfiable, OwnershipViolation
from forelem.exchange import (
    Delta,
    DeltaOp,
    ExchangeCounters,
    ExchangeKind,
    ExchangeScheme,
    UpdateBuffer,
    flush_buffered,
    flush_indirect,
    flush_master,
    recompute_assertion,
)
from forelem.ir import Assertion, FieldKind, SharedSpace, SpaceDecl

S = SpaceDecl("S")


def _replica(decls, contents=None):
    contents = contents or {}
    spaces = {d.name: SharedSpace(d, contents.get(d.name)) for d in decls}
    return SimpleNamespace(spaces=spaces, base={name: s.copy() for name, s in spaces.items()})


def _add(replica, buf, space, key, amount):
    s = replica.spaces[space]
    s.write(key, s.read(key) + amount)
    buf.record(Delta.add(space, key, amount, s.decl.kind))


def test_delta_then():
    a = Delta.add("S", (0,), 2.0, FieldKind.SCALAR)
    b = Delta.add("S", (0,), 3.0, FieldKind.SCALAR)
    w = Delta.overwrite("S", (0,), 7.0)
    assert a.then(b).value == 5.0 and a.then(b).op == DeltaOp.ADD_SCALAR
    assert a.then(w) == w
    assert w.then(b) == Delta.overwrite("S", (0,), 10.0)
    assert w.then(b).apply_to(100.0) == 10.0
    assert a.apply_to(1.0) == 3.0


def test_update_buffer_coalesces_per_key():
    buf = UpdateBuffer(0)
    for amount in (1.0, 2.0, 4.0):
        buf.record(Delta.add("S", (3,), amount, FieldKind.SCALAR))
    buf.record(Delta.add("S", (1,), 1.0, FieldKind.SCALAR))
    assert len(buf) == 2 and buf.recorded == 4
    assert [d.key for d in buf.deltas()] == [(1,), (3,)]
    assert buf.deltas()[1].value == 7.0
    buf.clear()
    assert len(buf) == 0


def test_overwrite_outside_ownership_is_rejected():
    buf = UpdateBuffer(1, owns=lambda space, key: key[0] % 2 == 1)
    buf.record(Delta.overwrite("M", (3,), 2))
    buf.record(Delta.add("M_SIZE", (0,), 1, FieldKind.INDEX))
    with pytest.raises(OwnershipViolation):
        buf.record(Delta.overwrite("M", (4,), 2))


def _random_streams(seed, parts=3, keys=5, steps=40):
    rng = np.random.default_rng(seed)
    initial = {"S": {(k,): float(k) for k in range(keys)}}
    replicas = [_replica([S], initial) for _ in range(parts)]
    bufs = [UpdateBuffer(i) for i in range(parts)]
    expected = {k: float(k) for k in range(keys)}
    for _ in range(steps):
        p, key, amount = int(rng.integers(parts)), int(rng.integers(keys)), float(rng.integers(-5, 6))
        _add(replicas[p], bufs[p], "S", (key,), amount)
        expected[key] += amount
    return replicas, bufs, expected


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_buffered_and_master_reach_same_state(seed):
    results = []
    for flush in (flush_buffered, lambda b, r: flush_master(b, r, master_id=1)):
        replicas, bufs, expected = _random_streams(seed)
        flush(bufs, replicas)
        for r in replicas:
            assert dict(r.spaces["S"].items()) == {(k,): v for k, v in expected.items()}
            assert dict(r.base["S"].items()) == dict(r.spaces["S"].items())
        assert all(len(b) == 0 for b in bufs)
        results.append(dict(replicas[0].spaces["S"].items()))
    assert results[0] == results[1]


def _one_delta_each(parts=3):
    replicas = [_replica([S]) for _ in range(parts)]
    bufs = [UpdateBuffer(i) for i in range(parts)]
    for r, b in zip(replicas, bufs):
        _add(r, b, "S", (0,), 1.0)
    return replicas, bufs


def test_buffered_counters():
    replicas, bufs = _one_delta_each()
    counters = ExchangeCounters()
    flush_buffered(bufs, replicas, counters)
    assert counters.deltas_sent == 6 and counters.messages == 6
    assert counters.exchanges == 1 and counters.keys_touched == 1
    assert replicas[2].spaces["S"].read((0,)) == 3.0


def test_master_counters():
    replicas, bufs = _one_delta_each()
    counters = ExchangeCounters()
    flush_master(bufs, replicas, 0, counters)
    assert counters.deltas_sent == 4 and counters.messages == 4
    assert replicas[1].spaces["S"].read((0,)) == 3.0


def test_master_id_out_of_range():
    replicas, bufs = _one_delta_each(2)
    with pytest.raises(ValueError):
        flush_master(bufs, replicas, master_id=2)


def test_single_replica_exchange_sends_nothing():
    replicas, bufs = _one_delta_each(1)
    counters = ExchangeCounters()
    flush_buffered(bufs, replicas, counters)
    assert counters.deltas_sent == 0 and counters.messages == 0
    assert replicas[0].base["S"].read((0,)) == 1.0


def test_overwrite_then_others_add_on_top():
    replicas = [_replica([S], {"S": {(0,): 5.0}}) for _ in range(2)]
    bufs = [UpdateBuffer(0), UpdateBuffer(1)]
    replicas[0].spaces["S"].write((0,), 9.0)
    bufs[0].record(Delta.overwrite("S", (0,), 9.0))
    _add(replicas[1], bufs[1], "S", (0,), 2.0)
    flush_buffered(bufs, replicas)
    assert [r.spaces["S"].read((0,)) for r in replicas] == [11.0, 11.0]


M = SpaceDecl("M", kind=FieldKind.INDEX, default=0)
COORDS = SpaceDecl("COORDS", kind=FieldKind.VECTOR, dim=2)
M_SIZE = SpaceDecl("M_SIZE", kind=FieldKind.INDEX, default=0)


@pytest.fixture
def authoritative():
    return {
        "M": SharedSpace(M, {(0,): 1, (1,): 0, (2,): 1}),
        "COORDS": SharedSpace(COORDS, {(0,): [1.0, 2.0], (1,): [3.0, 4.0], (2,): [5.0, 6.0]}),
    }


def test_recompute_count_and_sum(authoritative):
    counts = recompute_assertion(Assertion("M_SIZE", "M"), authoritative, size=3)
    assert counts == {(0,): 1, (1,): 2, (2,): 0}
    sums = recompute_assertion(Assertion("M_SUM", "M", "COORDS"), authoritative)
    assert np.array_equal(sums[(0,)], [3.0, 4.0])
    assert np.array_equal(sums[(1,)], [6.0, 8.0])


def test_flush_indirect_recounts_from_assignment(authoritative):
    stale = {"M_SIZE": {(0,): 1, (1,): 2}}
    replicas = [_replica([M_SIZE], stale) for _ in range(2)]
    buf = UpdateBuffer(0)
    # point 1 moves from cluster 0 to cluster 1
    buf.record(Delta.overwrite("M", (1,), 1))
    counters = ExchangeCounters()
    flush_indirect((Assertion("M_SIZE", "M"),), replicas, authoritative, [buf, UpdateBuffer(1)], counters)
    assert authoritative["M"].read((1,)) == 1
    for r in replicas:
        assert dict(r.spaces["M_SIZE"].items()) == {(0,): 0, (1,): 3}
    assert counters.exchanges == 1 and counters.deltas_sent == 1


def test_flush_indirect_rejects_missing_spaces(authoritative):
    replicas = [_replica([M_SIZE]) for _ in range(2)]
    with pytest.raises(AssertionUnsatisfiable):
        flush_indirect((Assertion("M_SIZE", "NOPE"),), replicas, authoritative)


def test_scheme_parse():
    scheme = ExchangeScheme.parse("master", master_id=2)
    assert scheme.kind == ExchangeKind.MASTER and scheme.master_id == 2
    assert str(ExchangeScheme()) == "buffered"
    with pytest.raises(ValueError):
        ExchangeScheme.parse("gossip")
