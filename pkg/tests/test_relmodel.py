import pytest
from hypothesis import given, strategies as st

from oblivq.errors import DomainMismatch, ParseError, UnknownAttribute
from oblivq.relmodel import Schema, Tuple, int_attr, restrict, str_attr, tuple_compare, value_key

texts = st.text(alphabet=st.characters(blacklist_characters="\x00", blacklist_categories=("Cs",)),
                max_size=8)
ints = st.integers(-(2**63), 2**63 - 1)


@given(st.lists(st.tuples(st.one_of(st.none(), texts), st.one_of(st.none(), ints)), max_size=20))
def test_encode_decode_roundtrip(rows):
    schema = Schema.of("R", str_attr("V"), "W")
    assert schema.decode_rows(schema.encode_rows(rows)) == rows


@given(st.lists(st.one_of(st.none(), st.integers(-1000, 1000)), min_size=2, max_size=30))
def test_int_words_order_matches_value_order(vals):
    schema = Schema.of("R", "A")
    mat = schema.encode_rows([(v,) for v in vals])
    by_words = sorted(range(len(vals)), key=lambda i: tuple(mat[i]))
    by_value = sorted(range(len(vals)), key=lambda i: value_key(vals[i]))
    assert [value_key(vals[i]) for i in by_words] == [value_key(vals[i]) for i in by_value]


@given(st.lists(st.text(alphabet="abcxyzé", max_size=10), min_size=2, max_size=20))
def test_string_words_order_matches_byte_order(vals):
    schema = Schema.of("R", str_attr("S", 24))
    mat = schema.encode_rows([(v,) for v in vals])
    by_words = sorted(vals, key=lambda v: tuple(schema.encode_rows([(v,)])[0]))
    assert [v.encode() for v in by_words] == sorted(v.encode() for v in vals)
    assert mat.shape == (len(vals), 1 + 4)


def test_null_below_int_below_str():
    assert value_key(None) < value_key(-(2**63)) < value_key("")


def test_over_width_string_rejected():
    schema = Schema.of("R", str_attr("S", 4))
    with pytest.raises(ParseError):
        schema.encode_rows([("hello",)])


def test_wrong_domain_rejected():
    with pytest.raises(DomainMismatch):
        Schema.of("R", "A").encode_rows([("x",)])
    with pytest.raises(OverflowError):
        Schema.of("R", "A").encode_rows([(2**63,)])


def test_schema_validation():
    with pytest.raises(DomainMismatch):
        Schema.of("R", "A", "A")
    with pytest.raises(DomainMismatch):
        Schema.of("R", "bad name")
    with pytest.raises(UnknownAttribute):
        Schema.of("R", "A", key=["B"])
    with pytest.raises(UnknownAttribute):
        Schema.of("R", "A").attr("B")


def test_schema_layout_and_projection():
    s = Schema.of("R", "A", str_attr("B", 10), "C")
    assert s.span("A") == (0, 2)
    assert s.span("B") == (2, 5)
    assert s.ncols == 7
    assert s.project(["C", "A"]).names == ("A", "C")
    assert s.union(Schema.of("S", "C", "D")).names == ("A", "B", "C", "D")


def test_tuple_restrict_and_compare():
    t = Tuple(("A", "B", "C"), (1, None, "x"))
    assert restrict(t, ["C", "A"]).values == (1, "x")
    with pytest.raises(UnknownAttribute):
        restrict(t, ["Z"])
    u = Tuple(("A", "B", "C"), (1, 0, "x"))
    assert tuple_compare(t, u, ["A", "B"]) < 0
    assert tuple_compare(t, u, [("B", "desc")]) > 0
    assert int_attr("A").ncols == 2
