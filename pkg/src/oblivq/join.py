"""Oblivious natural joins: the binary sort-expand-stitch join and its
generalization to acyclic multiway joins over a join tree."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .errors import InternalScheduleError, PlanError
from .expansion import expand
from .primitives import (Columns, Predicate, augment, augment_many, checked_mul,
                         grouping_identity, grouping_running_sum, obl_project, obl_sort,
                         stitch, tm_fold)
from .relmodel import RelHandle, Schema
from .semijoin import join_attrs, semijoin_agg


# --------------------------------------------------------------------------
# join trees

@dataclass(frozen=True)
class JoinTree:
    """Rooted tree over relation schemas, nodes numbered in pre-order (root 0)."""

    schemas: tuple[Schema, ...]
    parent: tuple[int | None, ...]

    def __post_init__(self):
        if len(self.schemas) != len(self.parent):
            raise PlanError("one parent entry per node is required")
        if self.schemas and self.parent[0] is not None:
            raise PlanError("node 0 must be the root")
        for i, p in enumerate(self.parent[1:], 1):
            if p is None or not 0 <= p < i:
                raise PlanError("nodes must be numbered in pre-order")

    @classmethod
    def from_edges(cls, schemas: Sequence[Schema], root: int, edges: Sequence[tuple[int, int]]) -> "JoinTree":
        """Build from undirected edges over ``schemas`` indices, renumbering in pre-order."""
        adj: dict[int, list[int]] = {i: [] for i in range(len(schemas))}
        for a, b in edges:
            adj[a].append(b)
            adj[b].append(a)
        order, parent_of = [], {root: None}
        stack = [root]
        while stack:
            v = stack.pop()
            order.append(v)
            for w in sorted(adj[v], reverse=True):
                if w not in parent_of:
                    parent_of[w] = v
                    stack.append(w)
        if len(order) != len(schemas):
            raise PlanError("join graph is disconnected")
        pos = {v: k for k, v in enumerate(order)}
        return cls(tuple(schemas[v] for v in order),
                   tuple(None if parent_of[v] is None else pos[parent_of[v]] for v in order))

    @classmethod
    def chain(cls, schemas: Sequence[Schema]) -> "JoinTree":
        return cls(tuple(schemas), tuple([None] + list(range(len(schemas) - 1))))

    def __len__(self) -> int:
        return len(self.schemas)

    def children(self, i: int) -> list[int]:
        return [j for j, p in enumerate(self.parent) if p == i]

    def edge_attrs(self, j: int) -> tuple[str, ...]:
        """Attributes shared by node ``j`` and its parent."""
        return join_attrs(self.schemas[self.parent[j]], self.schemas[j])

    def path(self, i: int, j: int) -> list[int]:
        up_i, v = [], i
        while v is not None:
            up_i.append(v)
            v = self.parent[v]
        up_j, v = [], j
        while v not in up_i:
            up_j.append(v)
            v = self.parent[v]
        return up_i[: up_i.index(v) + 1] + up_j[::-1]

    def check_running_intersection(self) -> None:
        """Every node on the path between two nodes holds their shared attributes."""
        for i, j in combinations(range(len(self)), 2):
            shared = set(join_attrs(self.schemas[i], self.schemas[j]))
            for k in self.path(i, j):
                missing = shared - set(self.schemas[k].names)
                if missing:
                    raise PlanError(
                        f"{self.schemas[k].name} lies between {self.schemas[i].name} and "
                        f"{self.schemas[j].name} but lacks {sorted(missing)}")


# --------------------------------------------------------------------------
# binary join

def binary_join(R: RelHandle, S: RelHandle, *, capture: dict | None = None) -> RelHandle:
    """``R ⋈ S``: degrees by semi-join, expand both sides, align, stitch.

    R's copies are numbered 1..degree; S tuples are numbered within their join
    value, and S's copies keep that number, so sorting both expansions by
    (join attributes, number) lines every R copy up with a distinct partner.
    The trace depends only on |R|, |S| and |R ⋈ S|. ``capture``, if given,
    receives the intermediate relations.
    """
    J = join_attrs(R.schema, S.schema)
    if not J:
        raise PlanError("binary join needs at least one shared attribute")
    Rt = grouping_identity(augment(R, "#n", lambda c: 1), (), (), "#rid")
    St = grouping_identity(augment(S, "#n", lambda c: 1), (), (), "#sid")
    Rt = semijoin_agg(Rt, St, "#ns", "#n", on=J)
    St = semijoin_agg(St, Rt, "#nr", "#n", on=J)
    St = grouping_identity(St, J, (), "#jid")
    R_exp = expand(Rt, "#ns")
    R_exp = grouping_identity(R_exp, ["#rid"], (), "#jid")
    S_exp = expand(St, "#nr")
    R_seq = obl_sort(R_exp, [*J, "#jid"])
    S_seq = obl_sort(S_exp, [*J, "#jid"])
    if capture is not None:
        capture.update(R_tilde=Rt, S_tilde=St, R_exp=R_seq, S_exp=S_seq)
    joined = stitch(R_seq, S_seq)
    return obl_project(joined, [*R.schema.names, *(n for n in S.schema.names if n not in R.schema)])


# --------------------------------------------------------------------------
# multiway join

def id_attr(i: int) -> str:
    return f"#id{i}"


def mask_attr(i: int) -> str:
    return f"#mk{i}"


def down_attr(i: int) -> str:
    return f"#nd{i}"


def child_attr(i: int, c: int) -> str:
    return f"#c{i}_{c}"


def up_attr(i: int) -> str:
    return f"#nu{i}"


def full_attr(i: int) -> str:
    return f"#nf{i}"


def _product(cols: Columns, names: Sequence[str]):
    out = np.ones(len(cols), dtype=np.int64)
    for n in names:
        out = checked_mul(out, cols[n])
    return out


def prepare(T: JoinTree, rels: Sequence[RelHandle], predicates: Sequence[Predicate | None] | None = None) -> list[RelHandle]:
    """Attach a positional id and the selection mask (1 keeps, 0 drops) to every node."""
    out = []
    for i, R in enumerate(rels):
        if R.schema.names != T.schemas[i].names:
            raise PlanError(f"relation {i} does not match the join tree schema")
        p = predicates[i] if predicates else None
        R = grouping_identity(R, (), (), id_attr(i))
        if p is None:
            R = augment(R, mask_attr(i), lambda c: 1)
        else:
            p.validate(R.schema)
            R = augment(R, mask_attr(i), lambda c, p=p: p.mask(c.schema, c.mat).astype(np.int64))
        out.append(R)
    return out


def bottom_up_counts(T: JoinTree, rels: list[RelHandle]) -> list[RelHandle]:
    """``#nd{i}``: join tuples each tuple takes part in within its own subtree."""
    rels = list(rels)
    for i in reversed(range(len(T))):
        kids = T.children(i)
        for c in kids:
            rels[i] = semijoin_agg(rels[i], rels[c], child_attr(i, c), down_attr(c), on=T.edge_attrs(c))
        names = [mask_attr(i), *(child_attr(i, c) for c in kids)]
        rels[i] = augment(rels[i], down_attr(i), lambda cols, names=names: _product(cols, names))
    return rels


def multiway_full_degrees(T: JoinTree, rels: Sequence[RelHandle],
                          predicates: Sequence[Predicate | None] | None = None) -> tuple[list[RelHandle], int]:
    """Per-tuple number of final join tuples containing it (``#nf{i}``), and the join size.

    ``#nu{i}`` counts the join tuples of everything outside node i's subtree
    that agree with a tuple; for a child it is the parent's ``#nu`` times the
    parent's mask and the sums of every other child, summed over matching
    parent tuples. The exclude-one products are built from prefix and suffix
    products, so zero counts need no special casing.
    """
    rels = bottom_up_counts(T, prepare(T, rels, predicates))
    rels[0] = augment(rels[0], up_attr(0), lambda c: 1)
    for i in range(len(T)):
        kids = T.children(i)
        if not kids:
            continue
        names = [child_attr(i, c) for c in kids]

        def outside(cols: Columns, i=i, names=names):
            base = checked_mul(cols[up_attr(i)], cols[mask_attr(i)])
            vals = [cols[n] for n in names]
            prefix = [base]
            for v in vals[:-1]:
                prefix.append(checked_mul(prefix[-1], v))
            suffix = [np.ones(len(cols), dtype=np.int64)]
            for v in reversed(vals[1:]):
                suffix.append(checked_mul(suffix[-1], v))
            suffix.reverse()
            return [checked_mul(p, s) for p, s in zip(prefix, suffix)]

        helper = {f"#v{i}_{c}": (lambda cols, k=k, f=outside: f(cols)[k]) for k, c in enumerate(kids)}
        rels[i] = augment_many(rels[i], helper)
        for c in kids:
            rels[c] = semijoin_agg(rels[c], rels[i], up_attr(c), f"#v{i}_{c}", on=T.edge_attrs(c))
    for i in range(len(T)):
        rels[i] = augment(rels[i], full_attr(i),
                          lambda cols, i=i: checked_mul(cols[up_attr(i)], cols[down_attr(i)]))
    m = tm_fold(rels[0], "sum", full_attr(0))
    return rels, m


def output_names(T: JoinTree) -> list[str]:
    names: list[str] = []
    for sch in T.schemas:
        names.extend(n for n in sch.names if n not in names)
    return names


def multiway_join(T: JoinTree, rels: Sequence[RelHandle],
                  predicates: Sequence[Predicate | None] | None = None) -> RelHandle:
    """Natural join of all tree nodes (after per-node selections).

    The root is expanded by its full degree. Each edge in pre-order then pairs
    the rows built so far with copies of the child: rows sharing the same
    combination of tuples are numbered and take labels ``(k-1) mod D`` where D
    is the number of child-subtree join tuples they agree with; every child
    tuple owns a contiguous label range of width ``#nd`` inside its join value
    and its copies cycle through that range. Sorting both sides by (join
    attributes, label) aligns them for stitching. Every intermediate has exactly
    m rows.
    """
    full, m = multiway_full_degrees(T, rels, predicates)
    E = expand(full[0], full_attr(0))
    combo = [id_attr(0)]
    for j in range(1, len(T)):
        i = T.parent[j]
        J = list(T.edge_attrs(j))
        D = child_attr(i, j)
        E = grouping_identity(E, combo, (), "#k")
        E = augment(E, "#slot", lambda c, D=D: (c["#k"] - 1) % c[D])
        E = obl_sort(E, [*J, "#slot"])

        C = grouping_running_sum(full[j], J, [id_attr(j)], down_attr(j), "#off")
        C = expand(C, full_attr(j))
        C = grouping_identity(C, [id_attr(j)], (), "#r")
        nd = down_attr(j)
        C = augment(C, "#slot",
                    lambda c, nd=nd: c["#off"] - c[nd] + (c["#r"] - 1) % c[nd])
        keep = [*T.schemas[j].names, id_attr(j), *(child_attr(j, g) for g in T.children(j)), "#slot"]
        C = obl_sort(obl_project(C, keep), [*J, "#slot"])
        if E.len != m or C.len != m:
            raise InternalScheduleError(f"edge {i}->{j}: sizes {E.len}, {C.len} differ from {m}")
        E = stitch(E, C)
        E = obl_project(E, [n for n in E.schema.names if n not in ("#k", "#slot")])
        combo.append(id_attr(j))
    return obl_project(E, output_names(T))
