"""Random query instances shared by the module tests and the acceptance suite."""

from __future__ import annotations

import random

from oblivq.harness import CASES, oracle_eval, same_result
from oblivq.memsim import Session
from oblivq.planner import QueryTemplate, execute, plan
from oblivq.relmodel import Schema

AGG_FNS = ("SUM", "COUNT", "MIN", "MAX", "AVG")
ACCEPTANCE: dict[str, str] = {}  # criterion -> verdict line, echoed in the terminal summary


def record(criterion: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


ORACLE_CLASSES = ("semijoin_agg", "expand", "binary_join", "multiway_join", "group_aggregate",
                  "selection_join")


def _val(rnd, domain, null_rate):
    return None if rnd.random() < null_rate else rnd.randrange(domain)


def random_rows(rnd, arity, size, domain, null_rate=0.0):
    return [tuple(_val(rnd, domain, null_rate) for _ in range(arity)) for _ in range(size)]


def run_template(template: QueryTemplate, db, bindings=None, trace_mode="count"):
    schemas = {r: schema for r, (schema, _) in db.items()}
    s = Session(trace_mode=trace_mode)
    handles = {r: s.load(schema, rows) for r, (schema, rows) in db.items()}
    res = execute(plan(template, schemas), handles, bindings or {})
    return s, res.names, res.rows


def _binary(rnd, seed):
    R, S = Schema.of("R", "A", "B"), Schema.of("S", "A", "C")
    d = rnd.choice([3, 20, 100])
    db = {"R": (R, random_rows(rnd, 2, rnd.randint(0, 200), d, 0.05)),
          "S": (S, random_rows(rnd, 2, rnd.randint(0, 200), d, 0.05))}
    return QueryTemplate.from_dict({"relations": ["R", "S"]}), db, {}


def _chain(rnd, seed):
    sch = [Schema.of("R", "A", "B"), Schema.of("S", "B", "C"), Schema.of("T", "C", "D")]
    d = rnd.choice([10, 30, 100])
    db = {s.name: (s, random_rows(rnd, 2, rnd.randint(0, 100), d, 0.03)) for s in sch}
    order = ["R", "S", "T"] if seed % 2 else ["S", "T", "R"]
    return QueryTemplate.from_dict({"relations": order}), db, {}


def _groupagg(rnd, seed):
    fn = AGG_FNS[seed % len(AGG_FNS)]
    d = rnd.choice([5, 30, 100])
    if seed % 3 == 2:
        sch = [Schema.of("R", "G", "B"), Schema.of("S", "B", "C"), Schema.of("T", "C", "X")]
        rels, agg_rel = ["R", "S", "T"], "T"
        sizes = [rnd.randint(0, 80) for _ in sch]
    else:
        sch = [Schema.of("R", "G", "B"), Schema.of("S", "B", "X")]
        rels, agg_rel = ["R", "S"], "S"
        sizes = [rnd.randint(0, 200) for _ in sch]
    db = {s.name: (s, random_rows(rnd, 2, k, d, 0.05)) for s, k in zip(sch, sizes)}
    attr = None if fn == "COUNT" and seed % 2 else "X"
    t = {"relations": rels, "group_by": ["G"], "agg": {"fn": fn, "rel": agg_rel, "attr": attr}}
    bindings = {}
    if seed % 4 == 1:
        t["predicates"] = {"R": [{"attr": "B", "op": "<", "const": "?1"}]}
        bindings["?1"] = -1 if seed % 8 == 1 else rnd.randrange(d)
    return QueryTemplate.from_dict(t), db, bindings


def _selection(rnd, seed):
    R, S = Schema.of("R", "A", "B"), Schema.of("S", "A", "C")
    d = rnd.choice([5, 20, 100])
    db = {"R": (R, random_rows(rnd, 2, rnd.randint(0, 200), d, 0.05)),
          "S": (S, random_rows(rnd, 2, rnd.randint(0, 200), d, 0.05))}
    zero = seed % 5 == 0
    bindings = {"?1": -1 if zero else rnd.randrange(d), "?2": rnd.randrange(d)}
    if seed % 3 == 0:
        t = {"relations": ["R"], "predicates": {"R": [{"attr": "B", "op": "<=", "const": "?1"},
                                                      {"attr": "A", "op": "!=", "const": "?2"}]},
             "project": ["B"]}
    else:
        t = {"relations": ["R", "S"],
             "predicates": {"R": [{"attr": "B", "op": "<=", "const": "?1"}],
                            "S": [{"attr": "C", "op": ">=", "const": "?2"}]}}
    return QueryTemplate.from_dict(t), db, bindings


TEMPLATE_CLASSES = {"binary_join": _binary, "multiway_join": _chain, "group_aggregate": _groupagg,
                    "selection_join": _selection}


def oracle_case(cls: str, seed: int) -> tuple[bool, str]:
    """Run one random instance of ``cls`` through engine and oracle; returns (equal, summary)."""
    rnd = random.Random(1000 * seed + 17)
    if cls in TEMPLATE_CLASSES:
        template, db, bindings = TEMPLATE_CLASSES[cls](rnd, seed)
        _, names, rows = run_template(template, db, bindings)
        onames, orows = oracle_eval(db, template, bindings)
    else:
        case = CASES[cls]
        db = case.generate(rnd, rnd.randint(0, 400))
        _, names, rows = case.run(db, {}, trace_mode="count")
        onames, orows = case.oracle(db, {})
    ok = same_result(names, rows, onames, orows)
    return ok, f"{cls} seed={seed}: engine {len(rows)} rows, oracle {len(orows)} rows"
