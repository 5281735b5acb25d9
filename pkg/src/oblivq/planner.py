"""Query templates, join-tree construction and execution plans.

Planning only looks at schemas and the template, never at data, so two
databases with the same schema always get the same plan.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .errors import CyclicJoinError, PlanError, UnknownAttribute, UnsupportedGrouping
from .groupagg import AggSpec, FkStep, finalize_rows, fk_join, fk_rewrite, group_aggregate, merged_schema
from .join import JoinTree, binary_join, multiway_join
from .primitives import Atom, Predicate, obl_filter, obl_project, tm_fold
from .relmodel import RelHandle, Schema, is_internal
from .semijoin import join_attrs


# --------------------------------------------------------------------------
# templates

@dataclass(frozen=True)
class PredicateSkeleton:
    attr: str
    op: str
    const: Any  # a "?k" placeholder or a literal


@dataclass(frozen=True)
class QueryTemplate:
    relations: tuple[str, ...]
    predicates: Mapping[str, tuple[PredicateSkeleton, ...]] = field(default_factory=dict)
    group_by: tuple[str, ...] = ()
    agg: Mapping[str, str] | None = None
    project: tuple[str, ...] | None = None

    @classmethod
    def from_dict(cls, obj: Mapping) -> "QueryTemplate":
        rels = tuple(obj["relations"])
        if not rels:
            raise PlanError("a template needs at least one relation")
        preds = {}
        for rel, items in (obj.get("predicates") or {}).items():
            if rel not in rels:
                raise PlanError(f"predicate on unknown relation {rel!r}")
            preds[rel] = tuple(PredicateSkeleton(p["attr"], p["op"], p["const"]) for p in items)
        agg = obj.get("agg")
        if agg is not None:
            agg = {"fn": agg["fn"].upper(), "rel": agg["rel"], "attr": agg.get("attr")}
        group_by = tuple(obj.get("group_by") or ())
        if group_by and agg is None:
            raise PlanError("group_by needs an aggregate")
        project = obj.get("project")
        return cls(rels, preds, group_by, agg, tuple(project) if project else None)

    @classmethod
    def load(cls, path) -> "QueryTemplate":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def placeholders(self) -> list[str]:
        out = {p.const for ps in self.predicates.values() for p in ps
               if isinstance(p.const, str) and p.const.startswith("?")}
        return sorted(out)

    def bind(self, bindings: Mapping[str, Any]) -> dict[str, Predicate]:
        """Concrete predicates per relation; the constants stay in TM plan state."""
        missing = [p for p in self.placeholders() if p not in bindings]
        if missing:
            raise PlanError(f"unbound placeholders: {missing}")
        out = {}
        for rel, skel in self.predicates.items():
            atoms = []
            for p in skel:
                const = bindings[p.const] if isinstance(p.const, str) and p.const.startswith("?") else p.const
                atoms.append(Atom(p.attr, p.op, const))
            out[rel] = Predicate(tuple(atoms))
        return out


def parse_binding(text: str) -> tuple[str, Any]:
    """``"?1=5"`` -> ("?1", 5); values that are not integers stay strings."""
    key, sep, value = text.partition("=")
    if not sep or not key.startswith("?"):
        raise PlanError(f"bad binding {text!r}; expected ?k=value")
    try:
        return key, int(value)
    except ValueError:
        return key, value


# --------------------------------------------------------------------------
# join trees

def build_join_tree(schemas: Sequence[Schema], root: int = 0) -> JoinTree:
    """Join tree by ear removal; raises CyclicJoinError when none exists.

    An ear is a relation whose attributes shared with any other remaining
    relation all lie in one other relation (its witness); removing it links it
    to the witness. The result is re-rooted at ``root`` and independently
    re-checked for the running-intersection property.
    """
    if not schemas:
        raise PlanError("no relations to join")
    attrs = [set(n for n in s.names if not is_internal(n)) for s in schemas]
    alive = list(range(len(schemas)))
    edges: list[tuple[int, int]] = []
    while len(alive) > 1:
        for e in alive:
            others = [f for f in alive if f != e]
            shared = attrs[e] & set().union(*(attrs[f] for f in others))
            witness = next((f for f in others if shared <= attrs[f]), None)
            if witness is not None:
                edges.append((e, witness))
                alive.remove(e)
                break
        else:
            names = [schemas[i].name for i in alive]
            raise CyclicJoinError(f"join over {names} is cyclic; no join tree exists")
    tree = JoinTree.from_edges(schemas, root, edges)
    tree.check_running_intersection()
    return tree


# --------------------------------------------------------------------------
# plans

@dataclass
class Plan:
    template: QueryTemplate
    fk_steps: list[FkStep]
    base: dict[str, Schema]
    tree: JoinTree
    origin: dict[str, str]        # template relation -> tree node name holding it
    group_by: tuple[str, ...]
    agg: AggSpec | None
    project: tuple[str, ...] | None

    @property
    def node_names(self) -> list[str]:
        return [s.name for s in self.tree.schemas]

    @property
    def kind(self) -> str:
        if self.agg is not None:
            return "aggregate"
        return "select" if len(self.tree) == 1 else "join"

    def output_names(self) -> list[str]:
        if self.agg is not None:
            names = [*self.group_by, *self.agg.output_names()]
            return names[:-2] + [f"avg_{self.agg.attr}"] if self.agg.fn == "AVG" else names
        if self.project:
            return list(self.project)
        names: list[str] = []
        for s in self.tree.schemas:
            names.extend(n for n in s.names if n not in names)
        return names

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "fk_steps": [vars(s) for s in self.fk_steps],
            "tree": [{"node": s.name, "parent": None if p is None else self.tree.schemas[p].name,
                      "attrs": list(s.names),
                      "join_attrs": [] if p is None else list(self.tree.edge_attrs(i))}
                     for i, (s, p) in enumerate(zip(self.tree.schemas, self.tree.parent))],
            "selections": {rel: [vars(p) for p in ps] for rel, ps in self.template.predicates.items()},
            "group_by": list(self.group_by),
            "agg": None if self.agg is None else {"fn": self.agg.fn, "node": self.node_names[self.agg.rel],
                                                  "attr": self.agg.attr},
            "output": self.output_names(),
        }


def plan(template: QueryTemplate, schemas: Mapping[str, Schema]) -> Plan:
    """Validate the template, collapse key/foreign-key joins and build the join tree."""
    for rel in template.relations:
        if rel not in schemas:
            raise PlanError(f"unknown relation {rel!r}")
    base = {rel: schemas[rel] for rel in template.relations}
    for rel, skel in template.predicates.items():
        for p in skel:
            base[rel].attr(p.attr)
            Atom(p.attr, p.op, p.const)

    steps, current = fk_rewrite([base[r] for r in template.relations])
    origin = {r: r for r in template.relations}
    for st in steps:
        for r, holder in origin.items():
            if holder in (st.key_side, st.fk_side):
                origin[r] = st.merged

    G = tuple(template.group_by)
    root = 0
    if G:
        homes = [k for k, s in enumerate(current) if all(g in s for g in G)]
        if not homes:
            for g in G:
                if not any(g in s for s in current):
                    raise UnknownAttribute(f"grouping attribute {g!r} not in any relation")
            raise UnsupportedGrouping(
                f"grouping attributes {list(G)} span relations not connected by foreign keys; "
                "such queries reduce to set-intersection enumeration and are not supported")
        root = homes[0]
    tree = build_join_tree(current, root)
    index = {s.name: k for k, s in enumerate(tree.schemas)}

    agg = None
    if template.agg is not None:
        rel = template.agg["rel"]
        if rel not in origin:
            raise PlanError(f"aggregate over unknown relation {rel!r}")
        node = index[origin[rel]]
        attr = template.agg.get("attr")
        if attr is not None:
            base[rel].attr(attr)
        agg = AggSpec(template.agg["fn"], node, attr)
    if template.project:
        names = {n for s in tree.schemas for n in s.names}
        for n in template.project:
            if n not in names:
                raise UnknownAttribute(f"projection attribute {n!r} not in the join")
        if agg is not None:
            raise PlanError("projection lists do not apply to aggregate queries")
    return Plan(template, steps, base, tree, origin, G, agg, template.project)


# --------------------------------------------------------------------------
# execution

@dataclass
class Result:
    names: list[str]
    rows: list[tuple]
    relation: RelHandle


def execute(p: Plan, db: Mapping[str, RelHandle], bindings: Mapping[str, Any] | None = None) -> Result:
    """Run a plan over relations already resident in one session."""
    preds_by_rel = p.template.bind(bindings or {})
    handles = {r: db[r] for r in p.template.relations}
    schemas = dict(p.base)
    for st in p.fk_steps:
        merged = merged_schema(schemas[st.key_side], schemas[st.fk_side], st.merged)
        handles[st.merged] = fk_join(handles.pop(st.key_side), handles.pop(st.fk_side), merged)
        schemas[st.merged] = merged
    rels = [handles[s.name] for s in p.tree.schemas]

    node_preds: list[Predicate | None] = [None] * len(rels)
    for rel, pred in preds_by_rel.items():
        k = [s.name for s in p.tree.schemas].index(p.origin[rel])
        prev = node_preds[k]
        node_preds[k] = pred if prev is None else Predicate(prev.atoms + pred.atoms)
    has_preds = any(x is not None for x in node_preds)

    if p.agg is not None:
        out = group_aggregate(p.tree, rels, p.group_by, p.agg, node_preds if has_preds else None)
        return Result(p.output_names(), finalize_rows(out, p.group_by, p.agg), out)
    if len(rels) == 1:
        out = rels[0]
        if has_preds:
            count = tm_fold(out, "count", where=node_preds[0])
            out = obl_filter(out, node_preds[0], count)
    elif len(rels) == 2 and not has_preds and join_attrs(rels[0].schema, rels[1].schema):
        out = binary_join(rels[0], rels[1])
    else:
        out = multiway_join(p.tree, rels, node_preds if has_preds else None)
    names = p.output_names()
    if set(out.schema.names) != set(names):
        out = obl_project(out, names)
    return Result(names, out.rows(names), out)
