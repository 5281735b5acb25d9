import random
from collections import Counter

import pytest

from oblivq.errors import PlanError
from oblivq.join import JoinTree, binary_join, full_attr, multiway_full_degrees, multiway_join
from oblivq.memsim import Session
from oblivq.primitives import Predicate
from oblivq.relmodel import Schema, str_attr


def nested_loop(schemas, datas):
    out = [{}]
    for sch, rows in zip(schemas, datas):
        nxt = []
        for partial in out:
            for row in rows:
                t = dict(zip(sch.names, row))
                if all(partial[k] == v for k, v in t.items() if k in partial):
                    nxt.append({**partial, **t})
        out = nxt
    return out


def test_binary_join_intermediate_tables():
    s = Session()
    cap = {}
    R = s.load(Schema.of("R", str_attr("A", 4)), [("a",), ("b",), ("a",)])
    S = s.load(Schema.of("S", str_attr("A", 4)), [("a",), ("b",), ("a",), ("a",)])
    out = binary_join(R, S, capture=cap)
    assert Counter(out.rows()) == Counter({("a",): 6, ("b",): 1})
    assert cap["R_tilde"].rows(["#rid", "A", "#n", "#ns"]) == [(1, "a", 1, 3), (3, "a", 1, 3), (2, "b", 1, 1)]
    assert sorted(cap["S_tilde"].rows(["#sid", "A", "#n", "#nr", "#jid"])) == [
        (1, "a", 1, 2, 1), (2, "b", 1, 1, 1), (3, "a", 1, 2, 2), (4, "a", 1, 2, 3)]
    assert cap["R_exp"].rows(["#rid", "A", "#jid"]) == [
        (1, "a", 1), (3, "a", 1), (1, "a", 2), (3, "a", 2), (1, "a", 3), (3, "a", 3), (2, "b", 1)]
    assert cap["S_exp"].rows(["#sid", "A", "#jid"]) == [
        (1, "a", 1), (1, "a", 1), (3, "a", 2), (3, "a", 2), (4, "a", 3), (4, "a", 3), (2, "b", 1)]


def test_binary_join_needs_shared_attribute():
    s = Session()
    with pytest.raises(PlanError):
        binary_join(s.load(Schema.of("R", "A"), []), s.load(Schema.of("S", "B"), []))


def test_binary_join_empty_output():
    s = Session()
    out = binary_join(s.load(Schema.of("R", "A"), [(1,)]), s.load(Schema.of("S", "A"), [(2,)]))
    assert out.len == 0


@pytest.mark.parametrize("seed", range(20))
def test_multiway_join_matches_nested_loop(seed):
    rnd = random.Random(seed)
    sch = [Schema.of("R", "A", "B"), Schema.of("S", "B", "C"), Schema.of("T", "C", "D"), Schema.of("U", "B", "E")]
    datas = [[tuple(rnd.randint(0, 3) for _ in range(2)) for _ in range(rnd.randint(0, 12))] for _ in sch]
    T = JoinTree(tuple(sch), (None, 0, 1, 0))
    s = Session()
    out = multiway_join(T, [s.load(a, b) for a, b in zip(sch, datas)])
    expected = Counter(tuple(d[n] for n in out.schema.names) for d in nested_loop(sch, datas))
    assert Counter(out.rows()) == expected


def test_multiway_join_with_selections():
    rnd = random.Random(4)
    sch = [Schema.of("R", "A", "B"), Schema.of("S", "B", "C"), Schema.of("T", "C", "D")]
    datas = [[tuple(rnd.randint(0, 4) for _ in range(2)) for _ in range(15)] for _ in sch]
    preds = [Predicate.where(("A", ">=", 2)), None, Predicate.where(("D", "!=", 1))]
    s = Session()
    out = multiway_join(JoinTree.chain(sch), [s.load(a, b) for a, b in zip(sch, datas)], preds)
    filt = [[r for r in datas[0] if r[0] >= 2], datas[1], [r for r in datas[2] if r[1] != 1]]
    expected = Counter(tuple(d[n] for n in out.schema.names) for d in nested_loop(sch, filt))
    assert Counter(out.rows()) == expected


def test_full_degrees_on_star():
    s = Session()
    sch = [Schema.of("R", "A"), Schema.of("S1", "A", "x"), Schema.of("S2", "A", "y")]
    rels = [s.load(sch[0], [(1,)]), s.load(sch[1], [(1, 1), (1, 2)]), s.load(sch[2], [(1, 1), (1, 2), (1, 3)])]
    full, m = multiway_full_degrees(JoinTree(tuple(sch), (None, 0, 0)), rels)
    assert m == 6
    assert [f.rows([full_attr(i)]) for i, f in enumerate(full)] == [[(6,)], [(3,), (3,)], [(2,), (2,), (2,)]]


def test_join_tree_construction_and_checks():
    sch = [Schema.of("R", "A", "B"), Schema.of("S", "B", "C"), Schema.of("T", "C", "D")]
    T = JoinTree.from_edges(sch, 2, [(0, 1), (1, 2)])
    assert [x.name for x in T.schemas] == ["T", "S", "R"]
    assert T.parent == (None, 0, 1)
    assert T.edge_attrs(1) == ("C",)
    T.check_running_intersection()
    bad = JoinTree(tuple(sch), (None, 0, 0))  # R-S and R-T: T's C is missing from R
    with pytest.raises(PlanError):
        bad.check_running_intersection()
    with pytest.raises(PlanError):
        JoinTree(tuple(sch), (None, 2, 0))


def test_multiway_trace_fixed_by_sizes():
    sch = [Schema.of("R", "A", "B"), Schema.of("S", "B", "C"), Schema.of("T", "C", "D")]
    # both instances: sizes 4, 3, 4 and 8 join tuples
    one = [[(i, 0) for i in range(4)], [(0, 0), (5, 5), (6, 6)], [(0, 1), (0, 2), (7, 1), (8, 1)]]
    two = [[(0, 1), (1, 1), (2, 2), (3, 2)], [(1, 1), (2, 2), (9, 9)], [(1, 0), (1, 1), (2, 0), (2, 1)]]
    seen = set()
    for datas in (one, two):
        s = Session()
        out = multiway_join(JoinTree.chain(sch), [s.load(a, b) for a, b in zip(sch, datas)])
        assert out.len == 8
        seen.add((tuple(s.mem.layout), s.trace.digest()))
    assert len(seen) == 1
