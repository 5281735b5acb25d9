import random
from collections import defaultdict

from hypothesis import given, settings, strategies as st

from oblivq.memsim import Session
from oblivq.relmodel import Schema, str_attr
from oblivq.semijoin import degree, join_attrs, semijoin_agg

R_SCHEMA = Schema.of("R", "Id", str_attr("A", 4))
S_SCHEMA = Schema.of("S", str_attr("A", 4), "Y")


def test_sums_and_minimum_over_small_example():
    s = Session()
    R = s.load(R_SCHEMA, [(1, "a"), (2, "b")])
    S = s.load(S_SCHEMA, [("a", 2), ("b", 3), ("a", 4)])
    assert semijoin_agg(R, S, "X", "Y").rows() == [(1, "a", 6), (2, "b", 3)]
    assert semijoin_agg(R, S, "X", "Y", fn="min").rows() == [(1, "a", 2), (2, "b", 3)]
    assert semijoin_agg(R, S, "X", "Y", fn="max").rows() == [(1, "a", 4), (2, "b", 3)]


def test_unmatched_rows_get_zero_or_null():
    s = Session()
    R = s.load(R_SCHEMA, [(1, "z"), (2, None)])
    S = s.load(S_SCHEMA, [("a", 2), (None, 5)])
    assert semijoin_agg(R, S, "X", "Y").rows() == [(1, "z", 0), (2, None, 5)]
    assert semijoin_agg(R, S, "X", "Y", fn="min").rows()[0] == (1, "z", None)


def test_degree_of_join_example():
    s = Session()
    R = s.load(Schema.of("R", "Id", str_attr("A", 4)), [(1, "a"), (2, "b"), (3, "a")])
    S = s.load(Schema.of("S", "Sid", str_attr("A", 4)), [(1, "a"), (2, "b"), (3, "a"), (4, "a")])
    assert [r[-1] for r in degree(R, S, "N").rows()] == [3, 1, 3]
    assert [r[-1] for r in degree(S, R, "N").rows()] == [2, 1, 2, 2]
    assert join_attrs(R.schema, S.schema) == ("A",)


@settings(max_examples=40)
@given(st.lists(st.integers(0, 4), max_size=25), st.lists(st.tuples(st.integers(0, 4), st.integers(-9, 9)), max_size=25))
def test_sum_matches_reference(r_vals, s_rows):
    s = Session()
    R = s.load(Schema.of("R", "Id", "A"), list(enumerate(r_vals)))
    S = s.load(Schema.of("S", "A", "Y"), s_rows)
    sums = defaultdict(int)
    for a, y in s_rows:
        sums[a] += y
    assert semijoin_agg(R, S, "X", "Y").rows() == [(i, a, sums[a]) for i, a in enumerate(r_vals)]


def test_trace_fixed_by_sizes():
    rnd = random.Random(0)
    digests = set()
    for _ in range(5):
        s = Session()
        R = s.load(Schema.of("R", "Id", "A"), [(i, rnd.randint(0, 3)) for i in range(12)])
        S = s.load(Schema.of("S", "A", "Y"), [(rnd.randint(0, 6), rnd.randint(0, 9)) for _ in range(9)])
        semijoin_agg(R, S, "X", "Y")
        digests.add((tuple(s.mem.layout), s.trace.digest()))
    assert len(digests) == 1
