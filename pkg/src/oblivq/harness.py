"""Ground-truth evaluation, matched instance pairs and the trace verifier.

Two databases form a matched pair when every relation has the same size on
both sides and the query output has the same size. An operation is judged
oblivious on a pair when both runs produce identical arena layouts and
bit-identical access traces.
"""

from __future__ import annotations

import math
import random
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import GenerationTimeout
from .expansion import expand
from .memsim import Session, first_divergence
from .planner import QueryTemplate, execute, plan
from .relmodel import RelHandle, Schema, value_key
from .semijoin import semijoin_agg

Database = dict  # relation name -> (Schema, list of row tuples)


# --------------------------------------------------------------------------
# oracle

_OPS = {
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


def _passes(row: dict, atoms) -> bool:
    for attr, op, const in atoms:
        v = row[attr]
        if v is None or type(v) is not type(const):
            return False
        if not _OPS[op](value_key(v), value_key(const)):
            return False
    return True


def oracle_join(db: Database, relations: Sequence[str], filters: Mapping[str, list] | None = None) -> list[dict]:
    """Hash-indexed nested-loop natural join (Null joins Null) after per-relation filters."""
    filters = filters or {}
    tables = {}
    for r in relations:
        schema, rows = db[r]
        dicts = [dict(zip(schema.names, row)) for row in rows]
        tables[r] = [d for d in dicts if _passes(d, filters.get(r, []))]
    todo = list(relations)
    first = todo.pop(0)
    result = [dict(d) for d in tables[first]]
    seen = set(db[first][0].names)
    while todo:
        # prefer a relation sharing attributes with what is joined so far
        nxt = next((r for r in todo if seen & set(db[r][0].names)), todo[0])
        todo.remove(nxt)
        shared = sorted(seen & set(db[nxt][0].names))
        index = defaultdict(list)
        for d in tables[nxt]:
            index[tuple(d[a] for a in shared)].append(d)
        out = []
        for left in result:
            for right in index.get(tuple(left[a] for a in shared), ()):
                merged = dict(left)
                merged.update(right)
                out.append(merged)
        result = out
        seen |= set(db[nxt][0].names)
    return result


def oracle_eval(db: Database, template: QueryTemplate, bindings: Mapping[str, Any] | None = None):
    """Evaluate a template directly; returns ``(column names, rows)``."""
    bindings = bindings or {}
    filters = {}
    for rel, skel in template.predicates.items():
        filters[rel] = [(p.attr, p.op, bindings.get(p.const, p.const) if isinstance(p.const, str) else p.const)
                        for p in skel]
    joined = oracle_join(db, template.relations, filters)
    if template.agg is not None:
        fn, attr = template.agg["fn"].upper(), template.agg.get("attr")
        G = list(template.group_by)
        groups: dict[tuple, list] = defaultdict(list)
        for d in joined:
            groups[tuple(d[g] for g in G)].append(None if attr is None else d[attr])
        rows = []
        for key, vals in groups.items():
            present = [v for v in vals if v is not None]
            if fn == "SUM":
                agg = sum(present)
            elif fn == "COUNT":
                agg = len(vals) if attr is None else len(present)
            elif fn == "AVG":
                agg = sum(present) / len(present) if present else None
            else:
                agg = (min if fn == "MIN" else max)(present) if present else None
            rows.append((*key, agg))
        return [*G, f"{fn.lower()}_{attr or 'star'}"], rows
    if template.project:
        names = list(template.project)
    else:
        names = []
        for r in template.relations:
            names.extend(n for n in db[r][0].names if n not in names)
    return names, [tuple(d[n] for n in names) for d in joined]


def same_result(names_a, rows_a, names_b, rows_b) -> bool:
    """Multiset equality after aligning columns by name; floats compared to 1e-9."""
    if sorted(names_a) != sorted(names_b):
        return False
    cols = sorted(names_a)

    def canon(names, rows):
        idx = [list(names).index(c) for c in cols]
        return Counter(tuple(round(v, 9) if isinstance(v, float) else v for v in (r[i] for i in idx))
                       for r in rows)

    return canon(names_a, rows_a) == canon(names_b, rows_b)


# --------------------------------------------------------------------------
# operation cases

@dataclass
class OpCase:
    """One verifiable operation: how to build instances, run the engine and check it."""

    name: str
    relations: dict[str, Schema]
    generate: Callable[[random.Random, int], Database]
    counterpart: Callable[[random.Random, Database, dict], tuple[Database, dict] | None]
    out_size: Callable[[Database, dict], int]
    template: QueryTemplate | None = None
    bindings: Callable[[random.Random], dict] = field(default=lambda rnd: {})
    direct: Callable[[Session, dict[str, RelHandle]], tuple[list[str], list[tuple]]] | None = None
    direct_oracle: Callable[[Database], tuple[list[str], list[tuple]]] | None = None

    def run(self, db: Database, bindings: dict, trace_mode: str = "digest", budget: int | None = None):
        s = Session(budget_words=budget, trace_mode=trace_mode)
        handles = {r: s.load(schema, rows) for r, (schema, rows) in db.items()}
        if self.direct is not None:
            names, rows = self.direct(s, handles)
        else:
            res = execute(plan(self.template, self.relations), handles, bindings)
            names, rows = res.names, res.rows
        return s, names, rows

    def oracle(self, db: Database, bindings: dict):
        if self.direct_oracle is not None:
            return self.direct_oracle(db)
        return oracle_eval(db, self.template, bindings)

    def signature(self, db: Database, bindings: dict) -> tuple:
        return (*(len(db[r][1]) for r in self.relations), self.out_size(db, bindings))


def _split(n: int, k: int) -> list[int]:
    return [n // k + (1 if i < n % k else 0) for i in range(k)]


def _shuffled(rnd: random.Random, rows: list) -> list:
    rows = list(rows)
    rnd.shuffle(rows)
    return rows


def _heavy_plus_matching(m: int, a: int, b: int) -> tuple[int, int, int] | None:
    """(k, l, r): one value with k×l matches plus r one-to-one matches, r+k ≤ a, r+l ≤ b."""
    best = None
    for k in range(1, a + 1):
        l = min(b, m // k)
        if l == 0:
            break
        r = m - k * l
        if r <= min(a - k, b - l):
            cand = (k, l, r)
            if best is None or k * l > best[0] * best[1]:
                best = cand
    if m == 0:
        return (0, 0, 0)
    return best


def _binary_join_case() -> OpCase:
    R, S = Schema.of("R", "A", "B"), Schema.of("S", "A", "C")

    def gen(rnd, n):
        a, b = _split(n, 2)
        d = max(1, n // 2)
        return {"R": (R, [(rnd.randrange(d), i) for i in range(a)]),
                "S": (S, [(rnd.randrange(d), i) for i in range(b)])}

    def out(db, _b):
        cs = Counter(r[0] for r in db["S"][1])
        return sum(cs[r[0]] for r in db["R"][1])

    def other(rnd, db, bindings):
        a, b, m = len(db["R"][1]), len(db["S"][1]), out(db, bindings)
        plan_ = _heavy_plus_matching(m, a, b)
        if plan_ is None:
            return None
        k, l, r = plan_
        ra = [0] * k + [1 + i for i in range(r)] + [10**6 + i for i in range(a - k - r)]
        sa = [0] * l + [1 + i for i in range(r)] + [2 * 10**6 + i for i in range(b - l - r)]
        return ({"R": (R, [(v, i) for i, v in enumerate(_shuffled(rnd, ra))]),
                 "S": (S, [(v, i) for i, v in enumerate(_shuffled(rnd, sa))])}, {})

    return OpCase("binary_join", {"R": R, "S": S}, gen, other, out,
                  template=QueryTemplate.from_dict({"relations": ["R", "S"]}))


def _chain_case() -> OpCase:
    R, S, T = Schema.of("R", "A", "B"), Schema.of("S", "B", "C"), Schema.of("T", "C", "D")

    def gen(rnd, n):
        a, b, c = _split(n, 3)
        d = max(1, n // 3)
        return {"R": (R, [(i, rnd.randrange(d)) for i in range(a)]),
                "S": (S, [(rnd.randrange(d), rnd.randrange(d)) for _ in range(b)]),
                "T": (T, [(rnd.randrange(d), i) for i in range(c)])}

    def out(db, _b):
        cr = Counter(r[1] for r in db["R"][1])
        ct = Counter(r[0] for r in db["T"][1])
        return sum(cr[b] * ct[c] for b, c in db["S"][1])

    def other(rnd, db, bindings):
        a, b, c = (len(db[x][1]) for x in "RST")
        m = out(db, bindings)
        if b == 0:
            return None
        if m == 0:
            k = l = r = 0
        else:
            plan_ = _heavy_plus_matching(m, a, c)
            if plan_ is None:
                return None
            k, l, r = plan_
            if r + 1 > b:
                return None
        s_rows = ([(0, 0)] if m else []) + [(1 + i, 1 + i) for i in range(r)]
        s_rows += [(3 * 10**6 + i, 4 * 10**6 + i) for i in range(b - len(s_rows))]
        rb = [0] * k + [1 + i for i in range(r)] + [10**6 + i for i in range(a - k - r)]
        tc = [0] * l + [1 + i for i in range(r)] + [2 * 10**6 + i for i in range(c - l - r)]
        return ({"R": (R, [(i, v) for i, v in enumerate(_shuffled(rnd, rb))]),
                 "S": (S, _shuffled(rnd, s_rows)),
                 "T": (T, [(v, i) for i, v in enumerate(_shuffled(rnd, tc))])}, {})

    return OpCase("multiway_join", {"R": R, "S": S, "T": T}, gen, other, out,
                  template=QueryTemplate.from_dict({"relations": ["R", "S", "T"]}))


def _groupagg_case() -> OpCase:
    R, S = Schema.of("R", "G", "B"), Schema.of("S", "B", "X")

    def gen(rnd, n):
        a, b = _split(n, 2)
        d = max(1, n // 2)
        return {"R": (R, [(rnd.randrange(max(1, a // 4)), rnd.randrange(d)) for _ in range(a)]),
                "S": (S, [(rnd.randrange(d), rnd.randrange(-50, 50)) for _ in range(b)])}

    def out(db, _b):
        bs = {r[0] for r in db["S"][1]}
        return len({g for g, b in db["R"][1] if b in bs})

    def other(rnd, db, bindings):
        a, b, g = len(db["R"][1]), len(db["S"][1]), out(db, bindings)
        if g and not b:
            return None
        # g groups all hanging off one S value, everything else misses
        rows = [(i, 0) for i in range(g)]
        rows += [(rnd.randrange(g), rnd.choice([0, 10**6 + i])) if g else (i, 10**6 + i)
                 for i in range(a - g)]
        s_rows = ([(0, rnd.randrange(-50, 50))] if g else []) + \
                 [(2 * 10**6 + i, rnd.randrange(-50, 50)) for i in range(b - (1 if g else 0))]
        return {"R": (R, _shuffled(rnd, rows)), "S": (S, _shuffled(rnd, s_rows))}, {}

    t = QueryTemplate.from_dict({"relations": ["R", "S"], "group_by": ["G"],
                                 "agg": {"fn": "SUM", "rel": "S", "attr": "X"}})
    return OpCase("group_aggregate", {"R": R, "S": S}, gen, other, out, template=t)


def _selection_join_case() -> OpCase:
    R, S = Schema.of("R", "A", "B"), Schema.of("S", "A", "C")

    def gen(rnd, n):
        a, b = _split(n, 2)
        d = max(1, n // 4)
        return {"R": (R, [(rnd.randrange(d), rnd.randrange(10)) for _ in range(a)]),
                "S": (S, [(rnd.randrange(d), i) for i in range(b)])}

    def out(db, bindings):
        cs = Counter(r[0] for r in db["S"][1])
        c = bindings["?1"]
        return sum(cs[a] for a, bv in db["R"][1] if bv <= c)

    def other(rnd, db, bindings):
        a, b, m = len(db["R"][1]), len(db["S"][1]), out(db, bindings)
        plan_ = _heavy_plus_matching(m, a, b)
        if plan_ is None:
            return None
        k, l, r = plan_
        cut = rnd.randrange(100, 200)
        passing = k + r
        ra = [(0, cut - 1)] * k + [(1 + i, cut) for i in range(r)]
        ra += [(rnd.randrange(1, r + 2) if r else 0, cut + 1 + rnd.randrange(5)) for _ in range(a - passing)]
        sa = [0] * l + [1 + i for i in range(r)] + [2 * 10**6 + i for i in range(b - l - r)]
        return ({"R": (R, _shuffled(rnd, ra)),
                 "S": (S, [(v, i) for i, v in enumerate(_shuffled(rnd, sa))])}, {"?1": cut})

    t = QueryTemplate.from_dict({"relations": ["R", "S"],
                                 "predicates": {"R": [{"attr": "B", "op": "<=", "const": "?1"}]}})
    return OpCase("selection_join", {"R": R, "S": S}, gen, other, out, template=t,
                  bindings=lambda rnd: {"?1": rnd.randrange(10)})


def _semijoin_case() -> OpCase:
    R, S = Schema.of("R", "Id", "A"), Schema.of("S", "A", "Y")

    def gen(rnd, n):
        a, b = _split(n, 2)
        d = max(1, rnd.choice([1, 2, n // 4, n]))
        return {"R": (R, [(i, rnd.randrange(d)) for i in range(a)]),
                "S": (S, [(rnd.randrange(d), rnd.randrange(100)) for _ in range(b)])}

    def run(s, h):
        out = semijoin_agg(h["R"], h["S"], "X", "Y")
        return ["Id", "A", "X"], out.rows(["Id", "A", "X"])

    def oracle(db):
        sums = defaultdict(int)
        for a, y in db["S"][1]:
            sums[a] += y
        return ["Id", "A", "X"], [(i, a, sums[a]) for i, a in db["R"][1]]

    return OpCase("semijoin_agg", {"R": R, "S": S}, gen,
                  lambda rnd, db, b: (gen(rnd, sum(len(v[1]) for v in db.values())), {}),
                  lambda db, b: len(db["R"][1]), direct=run, direct_oracle=oracle)


def _expand_case() -> OpCase:
    R = Schema.of("R", "A", "W")

    def gen(rnd, n):
        return {"R": (R, [(i, rnd.choice([0, 0, 1, 1, 2, 3, 5, 8])) for i in range(n)])}

    def other(rnd, db, _b):
        n, m = len(db["R"][1]), sum(w for _, w in db["R"][1])
        if n == 0:
            return db, {}
        # skewed: one record takes about half, the rest split at random cut points
        head = m // 2
        cuts = sorted(rnd.randrange(m - head + 1) for _ in range(n - 2)) if n > 1 else []
        parts = [b - a for a, b in zip([0, *cuts], [*cuts, m - head])] if n > 1 else []
        weights = [head, *parts] if n > 1 else [m]
        weights = _shuffled(rnd, weights)
        return {"R": (R, [(i, w) for i, w in enumerate(weights)])}, {}

    def run(s, h):
        out = expand(h["R"], "W")
        return ["A", "W"], out.rows()

    def oracle(db):
        return ["A", "W"], [r for r in db["R"][1] for _ in range(r[1])]

    return OpCase("expand", {"R": R}, gen, other, lambda db, b: sum(w for _, w in db["R"][1]),
                  direct=run, direct_oracle=oracle)


CASES: dict[str, OpCase] = {c.name: c for c in (
    _semijoin_case(), _expand_case(), _binary_join_case(), _chain_case(),
    _groupagg_case(), _selection_join_case())}


# --------------------------------------------------------------------------
# pairs

@dataclass
class InstancePair:
    op: str
    seed: int
    db1: Database
    db2: Database
    bindings1: dict = field(default_factory=dict)
    bindings2: dict = field(default_factory=dict)
    label: str = ""

    @property
    def pair_id(self) -> str:
        return self.label or f"{self.op}-{self.seed}"


def relabel(rnd: random.Random, db: Database, bindings: Mapping[str, Any], *,
            exempt: Sequence[str] = (), shift: int | None = None) -> tuple[Database, dict]:
    """Order-preserving shift of every int value plus a row shuffle.

    Equalities, comparisons against equally shifted constants, relation sizes
    and the output size all survive; aggregate values do not, which is the
    point. Attributes in ``exempt`` keep their values.
    """
    if shift is None:
        shift = rnd.randrange(1, 1000)
    out = {}
    for r, (schema, rows) in db.items():
        moved = [tuple(v + shift if isinstance(v, int) and name not in exempt else v
                       for name, v in zip(schema.names, row)) for row in rows]
        out[r] = (schema, _shuffled(rnd, moved))
    return out, {k: v + shift if isinstance(v, int) else v for k, v in bindings.items()}


def _relabel(rnd: random.Random, db: Database, bindings: dict) -> tuple[Database, dict]:
    return relabel(rnd, db, bindings, exempt=("W",))


def gen_matched_pair(op: str, n: int, seed: int, *, attempts: int = 8) -> InstancePair:
    """A random instance and a structurally different one with the same public sizes.

    The counterpart is built to hit the same output size directly (a single
    heavy join value plus one-to-one matches, a skewed weight vector, and so on)
    and checked against the oracle. If that is impossible the fallback is an
    order-preserving relabel with shuffled rows.
    """
    case = CASES[op]
    rnd = random.Random(seed)
    db1 = case.generate(rnd, n)
    b1 = case.bindings(rnd)
    target = case.signature(db1, b1)
    for _ in range(attempts):
        made = case.counterpart(rnd, db1, b1)
        if made is None:
            break
        db2, b2 = made
        b2 = b2 or dict(b1)
        if case.signature(db2, b2) == target:
            return InstancePair(op, seed, db1, db2, b1, b2)
    db2, b2 = _relabel(rnd, db1, b1)
    if case.signature(db2, b2) != target:
        raise GenerationTimeout(f"could not match {op} instance of size {n} (seed {seed})")
    return InstancePair(op, seed, db1, db2, b1, b2, label=f"{op}-{seed}-relabel")


def pair_sizes(count: int, n_max: int = 4096, n_min: int = 8) -> list[int]:
    """``count`` sizes spread log-uniformly over [n_min, n_max], largest included."""
    if count == 1:
        return [n_max]
    lo, hi = math.log2(n_min), math.log2(n_max)
    return [int(round(2 ** (lo + (hi - lo) * k / (count - 1)))) for k in range(count)]


def skew_contrast_pair() -> InstancePair:
    """Two 16×16 join instances with 16 output tuples each.

    Instance 1 pairs every R tuple with exactly one S tuple; instance 2 puts
    four R and four S tuples on one value (4×4 = 16) and nothing else matches.
    """
    R, S = Schema.of("R", "A", "B"), Schema.of("S", "A", "C")
    rnd = random.Random(1)
    a1 = list(range(16))
    s1 = _shuffled(rnd, a1)
    a2 = [7] * 4 + [100 + i for i in range(12)]
    s2 = [7] * 4 + [200 + i for i in range(12)]
    a2, s2 = _shuffled(rnd, a2), _shuffled(rnd, s2)
    db1 = {"R": (R, [(v, i) for i, v in enumerate(a1)]), "S": (S, [(v, i) for i, v in enumerate(s1)])}
    db2 = {"R": (R, [(v, i) for i, v in enumerate(a2)]), "S": (S, [(v, i) for i, v in enumerate(s2)])}
    return InstancePair("binary_join", 0, db1, db2, label="skew-contrast")


def bench_instance(n: int, seed: int = 0) -> Database:
    """Binary join input with |R| = |S| = n/2 and exactly n output tuples.

    Every join value occurs twice on each side, so each contributes four
    output tuples; rows are shuffled deterministically.
    """
    rnd = random.Random(seed)
    half = n // 2
    R, S = Schema.of("R", "A", "B"), Schema.of("S", "A", "C")
    ra = _shuffled(rnd, [i // 2 for i in range(half)])
    sa = _shuffled(rnd, [i // 2 for i in range(half)])
    return {"R": (R, [(v, i) for i, v in enumerate(ra)]), "S": (S, [(v, i) for i, v in enumerate(sa)])}


# --------------------------------------------------------------------------
# verification

@dataclass
class Verdict:
    pair_id: str
    seed: int
    op: str
    verdict: str
    first_divergence: int | None
    counter_high_water: tuple[int, int]
    tm_peak_words: tuple[int, int]
    oracle_match: bool
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.verdict == "Pass"

    def to_dict(self) -> dict:
        return asdict(self)


def _compare(s1: Session, s2: Session, rerun: Callable[[], tuple[Session, Session]]) -> tuple[bool, int | None, str]:
    if s1.mem.layout != s2.mem.layout:
        idx = next((k for k, (x, y) in enumerate(zip(s1.mem.layout, s2.mem.layout)) if x != y),
                   min(len(s1.mem.layout), len(s2.mem.layout)))
        detail = f"layout differs at arena {idx}"
    elif s1.trace.count == s2.trace.count and s1.trace.digest() == s2.trace.digest():
        return True, None, ""
    else:
        detail = "trace differs"
    f1, f2 = rerun()
    return False, first_divergence(f1.trace.codes(), f2.trace.codes()), detail


def verify_oblivious(pair: InstancePair, *, check_oracle: bool = True, budget_c: int | None = None) -> Verdict:
    """Run the operation on both sides and compare layouts and traces bit for bit."""
    case = CASES[pair.op]
    for db, b in ((pair.db1, pair.bindings1), (pair.db2, pair.bindings2)):
        if case.signature(db, b) != case.signature(pair.db1, pair.bindings1):
            raise ValueError(f"pair {pair.pair_id} is not size-matched")

    def budget(db):
        if budget_c is None:
            return None
        from .memsim import TmContext
        n = sum(len(rows) for _, rows in db.values())
        return TmContext.default_budget(n + case.out_size(db, pair.bindings1), budget_c)

    s1, n1, r1 = case.run(pair.db1, pair.bindings1, budget=budget(pair.db1))
    s2, n2, r2 = case.run(pair.db2, pair.bindings2, budget=budget(pair.db2))
    ok, idx, detail = _compare(s1, s2, lambda: (case.run(pair.db1, pair.bindings1, "full")[0],
                                                case.run(pair.db2, pair.bindings2, "full")[0]))
    oracle_ok = True
    if check_oracle:
        for db, b, names, rows in ((pair.db1, pair.bindings1, n1, r1), (pair.db2, pair.bindings2, n2, r2)):
            on, orows = case.oracle(db, b)
            oracle_ok &= same_result(names, rows, on, orows)
    return Verdict(pair.pair_id, pair.seed, pair.op, "Pass" if ok else "Fail", idx,
                   (s1.counter_high_water, s2.counter_high_water),
                   (s1.tm.peak_usage, s2.tm.peak_usage), oracle_ok, detail)


# --------------------------------------------------------------------------
# the non-oblivious foil

def foil_nested_loop_join(R: RelHandle, S: RelHandle, m: int) -> RelHandle:
    """Textbook nested-loop join that writes an output tuple as soon as a pair matches.

    The output arena is sized ``m`` in advance, exactly like the oblivious join,
    so only the placement of the writes among the reads can leak anything.
    """
    s = R.session
    J = [n for n in R.schema.names if n in S.schema]
    rj, sj = R.schema.cols(J), S.schema.cols(J)
    extra = [n for n in S.schema.names if n not in R.schema]
    out = s.new_relation(R.schema.union(S.schema), m)
    ecols = S.schema.cols(extra)
    k = 0
    for i in range(R.len):
        r = s.mem.read(R.arena, i)
        for j in range(S.len):
            t = s.mem.read(S.arena, j)
            if np.array_equal(r[rj], t[sj]):
                s.mem.write(out.arena, k, np.concatenate([r, t[ecols]]))
                k += 1
    return out


def verify_foil(pair: InstancePair) -> Verdict:
    """Same comparison as :func:`verify_oblivious` for the nested-loop foil."""

    def run(db, mode):
        s = Session(trace_mode=mode)
        h = {r: s.load(schema, rows) for r, (schema, rows) in db.items()}
        foil_nested_loop_join(h["R"], h["S"], CASES["binary_join"].out_size(db, {}))
        return s

    s1, s2 = run(pair.db1, "digest"), run(pair.db2, "digest")
    ok, idx, detail = _compare(s1, s2, lambda: (run(pair.db1, "full"), run(pair.db2, "full")))
    return Verdict(pair.pair_id, pair.seed, "foil_nested_loop_join", "Pass" if ok else "Fail", idx,
                   (0, 0), (s1.tm.peak_usage, s2.tm.peak_usage), True, detail)
