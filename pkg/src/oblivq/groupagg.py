"""Grouping aggregation over acyclic joins, selections as count masks, and
key/foreign-key pre-joins."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainMismatch, FkViolation, PlanError
from .join import (JoinTree, binary_join, bottom_up_counts, child_attr, down_attr,
                   mask_attr, prepare)
from .primitives import (Columns, Predicate, RowPredicate, augment, augment_many, checked_mul,
                         grouping_identity, grouping_running_sum, obl_filter, obl_project,
                         tm_fold)
from .relmodel import INT, ForeignKey, RelHandle, Schema, is_internal
from .semijoin import join_attrs, semijoin_agg

AGG_FUNCTIONS = ("SUM", "COUNT", "MIN", "MAX", "AVG")


@dataclass(frozen=True)
class AggSpec:
    """``fn(rel.attr)``; ``attr`` may be None for ``COUNT(*)``."""

    fn: str
    rel: int
    attr: str | None = None

    def __post_init__(self):
        fn = self.fn.upper()
        if fn not in AGG_FUNCTIONS:
            raise PlanError(f"unknown aggregate {self.fn!r}")
        object.__setattr__(self, "fn", fn)
        if self.attr is None and fn != "COUNT":
            raise PlanError(f"{fn} needs a target attribute")

    def output_names(self) -> list[str]:
        base = self.attr or "star"
        if self.fn == "AVG":
            return [f"sum_{base}", f"count_{base}"]
        return [f"{self.fn.lower()}_{base}"]


def apply_selections(T: JoinTree, rels: Sequence[RelHandle],
                     predicates: Sequence[Predicate | None]) -> list[RelHandle]:
    """Bottom-up counts with failing tuples contributing 0; sizes are untouched."""
    return bottom_up_counts(T, prepare(T, rels, predicates))


def _vals(c: Columns, name: str) -> np.ndarray:
    return np.where(c.present(name), c[name], 0)


def group_aggregate(T: JoinTree, rels: Sequence[RelHandle], G: Sequence[str], spec: AggSpec,
                    predicates: Sequence[Predicate | None] | None = None) -> RelHandle:
    """One row per G-group of the join (after selections) with the aggregate.

    Counts flow bottom-up; a partial aggregate flows from the aggregated
    relation up to the root. At an ancestor the partial sum over one child is
    multiplied by the counts of its other children, since each of those join
    combinations repeats it. MIN and MAX replace sums by running min/max and
    ignore tuples that take part in no join tuple. Groups without any join
    tuple produce no row.
    """
    G = list(G)
    T.schemas[0].require(G)
    a = spec.rel
    X = spec.attr
    if X is not None:
        attr = T.schemas[a].attr(X)
        if attr.domain != INT:
            raise DomainMismatch(f"aggregate target {X} must be an int attribute")
    rels = apply_selections(T, rels, predicates or [None] * len(T))

    fn = spec.fn
    run = {"SUM": "sum", "COUNT": "sum", "AVG": "sum", "MIN": "min", "MAX": "max"}[fn]
    # partial columns carried upwards: (name, kind) with kind sum/count/min/max
    parts = {"SUM": [("#sx", "sum")], "COUNT": [("#sc", "count")], "AVG": [("#sx", "sum"), ("#sc", "count")],
             "MIN": [("#sx", "min")], "MAX": [("#sx", "max")]}[fn]

    def at_target(c: Columns, kind: str):
        nd = c[down_attr(a)]
        if kind == "sum":
            return checked_mul(_vals(c, X), nd)
        if kind == "count":
            return nd if X is None else nd * c.present(X)
        ok = (nd > 0) & c.present(X)
        return c[X], ok

    rels[a] = augment_many(rels[a], {f"{p}{a}": (lambda c, k=k: at_target(c, k)) for p, k in parts})
    j = a
    while T.parent[j] is not None:
        i = T.parent[j]
        others = [child_attr(i, c) for c in T.children(i) if c != j] + [mask_attr(i)]
        for p, kind in parts:
            raw = f"{p}{i}_raw"
            rels[i] = semijoin_agg(rels[i], rels[j], raw, f"{p}{j}", on=T.edge_attrs(j),
                                   fn="sum" if kind in ("sum", "count") else kind)

            def lift(c: Columns, raw=raw, kind=kind, i=i, others=others):
                if kind in ("sum", "count"):
                    out = c[raw]
                    for o in others:
                        out = checked_mul(out, c[o])
                    return out
                return c[raw], c.present(raw) & (c[down_attr(i)] > 0)

            rels[i] = augment(rels[i], f"{p}{i}", lift)
        j = i

    root = rels[0]
    root = grouping_identity(root, G, (), "#idg")
    order = [("#idg", "desc")]
    root = grouping_running_sum(root, G, order, down_attr(0), "#rsn")
    out_cols = spec.output_names()
    for (p, kind), name in zip(parts, out_cols):
        root = grouping_running_sum(root, G, order, f"{p}0", name,
                                    fn="sum" if kind in ("sum", "count") else kind)
    first = RowPredicate(lambda c: (c["#idg"] == 1) & (c["#rsn"] > 0))
    groups = tm_fold(root, "count", where=first)
    root = obl_filter(root, first, groups)
    return obl_project(root, [*G, *out_cols])


def finalize_rows(rel: RelHandle, G: Sequence[str], spec: AggSpec) -> list[tuple]:
    """Client-side decoding of aggregate rows; AVG becomes sum / count."""
    rows = rel.rows([*G, *spec.output_names()])
    if spec.fn != "AVG":
        return rows
    k = len(G)
    return [(*r[:k], r[k] / r[k + 1] if r[k + 1] else None) for r in rows]


# --------------------------------------------------------------------------
# key / foreign-key pre-joins

@dataclass(frozen=True)
class FkStep:
    key_side: str
    fk_side: str
    merged: str


def _fk_edge(key_s: Schema, fk_s: Schema) -> bool:
    if not key_s.key:
        return False
    shared = set(join_attrs(key_s, fk_s))
    for fk in fk_s.foreign_keys:
        if fk.ref == key_s.name and set(fk.attrs) == set(key_s.key) == shared:
            return True
    return False


def merged_schema(key_s: Schema, fk_s: Schema, name: str) -> Schema:
    attrs = key_s.union(fk_s).attrs
    fks = tuple(fk for fk in fk_s.foreign_keys if fk.ref != key_s.name) + key_s.foreign_keys
    return Schema(name, attrs, fk_s.key, fks)


def fk_rewrite(schemas: Sequence[Schema]) -> tuple[list[FkStep], list[Schema]]:
    """Plan key/foreign-key pre-joins until none remain.

    Each step joins a key-side relation with a relation whose foreign key
    covers exactly the key and all shared attributes. The merged relation has
    the foreign-key side's size, inherits its key, and takes over foreign keys
    pointing at it; foreign keys pointing at the key side are dropped because
    its key is no longer unique in the merged relation.
    """
    current = list(schemas)
    steps: list[FkStep] = []
    changed = True
    while changed:
        changed = False
        for ki, key_s in enumerate(current):
            for fi, fk_s in enumerate(current):
                if ki == fi or not _fk_edge(key_s, fk_s):
                    continue
                name = f"{fk_s.name}+{key_s.name}"
                merged = merged_schema(key_s, fk_s, name)
                steps.append(FkStep(key_s.name, fk_s.name, name))
                rest = []
                for k, sch in enumerate(current):
                    if k in (ki, fi):
                        continue
                    fks = tuple(ForeignKey(fk.attrs, name) if fk.ref == fk_s.name else fk
                                for fk in sch.foreign_keys if fk.ref != key_s.name)
                    rest.append(Schema(sch.name, sch.attrs, sch.key, fks))
                current = [*rest[:min(ki, fi)], merged, *rest[min(ki, fi):]]
                changed = True
                break
            if changed:
                break
    return steps, current


def fk_join(key_side: RelHandle, fk_side: RelHandle, merged: Schema) -> RelHandle:
    """Materialize one key/foreign-key join; its size must equal the foreign-key side's."""
    out = binary_join(key_side, fk_side)
    if out.len != fk_side.len:
        raise FkViolation(f"{fk_side.schema.name} ⋈ {key_side.schema.name} has {out.len} rows, "
                          f"expected {fk_side.len}")
    return _rebrand(out, merged)


def _rebrand(R: RelHandle, schema: Schema) -> RelHandle:
    if R.schema.names != schema.names:
        R = obl_project(R, schema.names)
    return RelHandle(schema, R.arena, R.len, R.session)


def user_columns(schema: Schema) -> list[str]:
    return [n for n in schema.names if not is_internal(n)]


__all__ = ["AggSpec", "AGG_FUNCTIONS", "apply_selections", "group_aggregate", "finalize_rows",
           "FkStep", "fk_rewrite", "fk_join", "merged_schema"]
