"""Semi-join aggregation ``R.(X ⟵⋉ Agg(S.Y))`` and join degrees."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DomainMismatch
from .primitives import (_map, augment_many, gen_union, grouping_running_sum,
                         obl_filter, obl_project, Predicate)
from .relmodel import INT, RelHandle, Schema, int_attr, is_internal

_SRC = "#sj_src"
_Y = "#sj_y"


def join_attrs(R: Schema, S: Schema) -> tuple[str, ...]:
    """User attributes shared by both schemas, in R's order."""
    return tuple(n for n in R.shared(S) if not is_internal(n))


def semijoin_agg(R: RelHandle, S: RelHandle, X: str, Y: str, *,
                 on: Sequence[str] | None = None, fn: str = "sum") -> RelHandle:
    """For each R tuple, aggregate ``S.Y`` over the S tuples agreeing with it on ``on``.

    ``on`` defaults to the shared user attributes. ``fn`` is ``"sum"`` (an empty
    sum is 0), ``"min"`` or ``"max"`` (Null when nothing joins or every joining
    ``Y`` is Null). Output keeps R's sequence length and schema plus ``X``.
    """
    J = tuple(on) if on is not None else join_attrs(R.schema, S.schema)
    R.schema.require(J)
    S.schema.require(J)
    if S.schema.attr(Y).domain != INT:
        raise DomainMismatch(f"{Y} must be an int attribute")
    for a in J:
        if not R.schema.attr(a).compatible(S.schema.attr(a)):
            raise DomainMismatch(f"join attribute {a!r} has different domains")
    empty = None if fn in ("min", "max") else 0

    r_t = augment_many(R, {_SRC: lambda c: 1, _Y: lambda c: empty})
    # S̃: the join attributes and Y (renamed) plus the lineage flag, in one pass
    s_schema = Schema(S.schema.name, tuple(S.schema.attr(a) for a in J) + (int_attr(_Y), int_attr(_SRC)))
    spans = [(S.schema.span(a), s_schema.span(a)) for a in J]
    spans.append((S.schema.span(Y), s_schema.span(_Y)))
    dst_src, _ = s_schema.span(_SRC)

    def s_row(rows: np.ndarray) -> np.ndarray:
        out = np.zeros((len(rows), s_schema.ncols), dtype=np.int64)
        for (slo, shi), (dlo, dhi) in spans:
            out[:, dlo:dhi] = rows[:, slo:shi]
        out[:, dst_src:dst_src + 2] = (1, 0)
        return out

    s_t = _map(S, s_schema, s_row)
    U = gen_union(r_t, s_t)
    U = grouping_running_sum(U, J, [_SRC], _Y, X, fn=fn)
    U = obl_filter(U, Predicate.where((_SRC, "=", 1)), R.len)
    return obl_project(U, [*R.schema.names, X])


def degree(R: RelHandle, S: RelHandle, new_attr: str, *, on: Sequence[str] | None = None) -> RelHandle:
    """Number of S tuples joining each R tuple."""
    one = "#deg_one"
    S1 = augment_many(S, {one: lambda c: 1})
    return semijoin_agg(R, S1, new_attr, one, on=on)
