import io

import numpy as np
import pytest

from oblivq.errors import OutOfBounds, TmBudgetExceeded
from oblivq.memsim import (Session, TmContext, Trace, decode_event, encode_events, export_trace,
                           first_divergence, read_trace, trace_digest)
from oblivq.relmodel import Schema


def test_event_packing_roundtrip():
    codes = encode_events(1, 7, [0, 5, 123456])
    assert [tuple(decode_event(c)) for c in codes] == [("W", 7, 0), ("W", 7, 5), ("W", 7, 123456)]
    assert tuple(decode_event(encode_events(0, 3, [9])[0])) == ("R", 3, 9)


def test_trace_modes_agree_on_digest_and_count():
    full, dig, cnt = Trace("full"), Trace("digest"), Trace("count")
    for t in (full, dig, cnt):
        t.append(encode_events(0, 1, range(10)))
        t.append(encode_events(1, 2, range(3)))
    assert full.digest() == dig.digest() == trace_digest(full)
    assert len(full) == len(dig) == len(cnt) == 13
    assert [e.op for e in full.events()][-3:] == ["W"] * 3
    with pytest.raises(ValueError):
        cnt.digest()
    with pytest.raises(ValueError):
        dig.codes()


def test_first_divergence():
    a = np.array([1, 2, 3])
    assert first_divergence(a, a.copy()) is None
    assert first_divergence(a, np.array([1, 5, 3])) == 1
    assert first_divergence(a, a[:2]) == 2


def test_reads_and_writes_are_traced_and_bounds_checked():
    s = Session(trace_mode="full")
    R = s.load(Schema.of("R", "A"), [(1,), (2,)])
    s.mem.read(R.arena, 1)
    s.mem.write(R.arena, 0, np.array([1, 9]))
    assert [tuple(e) for e in s.trace.events()] == [("R", 0, 1), ("W", 0, 0)]
    assert R.rows() == [(9,), (2,)]
    with pytest.raises(OutOfBounds):
        s.mem.read(R.arena, 2)
    assert s.mem.layout == [(0, 2)]


def test_tm_budget_enforced_and_peak_tracked():
    tm = TmContext(budget_words=10)
    with tm.hold(6):
        with pytest.raises(TmBudgetExceeded):
            tm.alloc(5)
        with tm.hold(4):
            pass
    assert tm.used == 0 and tm.peak_usage == 10
    assert TmContext.default_budget(6, 64) == 64 * 3


def test_export_and_read_trace_roundtrip():
    s = Session(trace_mode="full")
    R = s.load(Schema.of("R", "A"), [(1,), (2,), (3,)])
    s.mem.scan(R.arena, 3)
    s.mem.write(R.arena, 2, np.array([1, 4]))
    buf = io.StringIO()
    export_trace(s, buf)
    buf.seek(0)
    layout, codes = read_trace(buf)
    assert layout == s.mem.layout
    assert np.array_equal(codes, s.trace.codes())
    assert buf.getvalue().splitlines()[1] == '{"op":"R","arena":0,"slot":0}'


def test_stats_fields():
    s = Session(budget_words=100)
    s.load(Schema.of("R", "A"), [(1,)])
    assert set(s.stats()) == {"um_accesses", "tm_peak_words", "tm_budget_words", "counter_high_water", "arenas"}
