"""Command-line entry point.

Exit codes: 0 success, 2 verification failure, 3 plan rejected, 4 data error.
Bound constants are kept in memory for plan execution only; they are never
printed or written to any output file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import random
import sys
import time
from pathlib import Path

from . import harness, report, storage
from .errors import DomainMismatch, FkViolation, OblivqError, ParseError, PlanError, UnknownAttribute
from .memsim import Session, TmContext, export_trace
from .planner import PredicateSkeleton, QueryTemplate, execute, parse_binding, plan

EXIT_OK, EXIT_VERIFY, EXIT_PLAN, EXIT_DATA = 0, 2, 3, 4


class _Exit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"oblivq: {msg}", file=sys.stderr)


def _bindings(items) -> dict:
    out = {}
    for text in items or ():
        try:
            k, v = parse_binding(text)
        except PlanError as exc:
            raise _Exit(EXIT_DATA, str(exc)) from None
        out[k] = v
    return out


def _plan(template: QueryTemplate, schemas):
    try:
        return plan(template, schemas)
    except (PlanError, UnknownAttribute) as exc:
        raise _Exit(EXIT_PLAN, f"plan rejected: {type(exc).__name__}: {exc}") from None


def _load_template(path) -> QueryTemplate:
    try:
        return QueryTemplate.load(path)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise _Exit(EXIT_DATA, f"cannot read template {path}: {exc}") from None
    except PlanError as exc:
        raise _Exit(EXIT_PLAN, f"plan rejected: {exc}") from None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_result_csv(path, names, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _shadow_template(t: QueryTemplate, shift: int) -> QueryTemplate:
    preds = {rel: tuple(PredicateSkeleton(p.attr, p.op, p.const + shift)
                        if isinstance(p.const, int) and not isinstance(p.const, bool) else p
                        for p in ps)
             for rel, ps in t.predicates.items()}
    return dataclasses.replace(t, predicates=preds)


def _run_once(p, matrices, bindings, mode: str):
    s = Session(trace_mode=mode)
    handles = {name: s.load_matrix(schema, mat) for name, (schema, mat) in matrices.items()
               if name in p.template.relations}
    res = execute(p, handles, bindings)
    return s, res


# -- subcommands -------------------------------------------------------------

def cmd_ingest(a) -> int:
    manifest = storage.ingest(a.csv_dir, a.schema, a.out)
    for name, meta in manifest["relations"].items():
        print(f"{name}: {meta['rows']} rows, {meta['words_per_slot']} words per slot")
    return EXIT_OK


def cmd_plan(a) -> int:
    schemas = storage.load_schemas(a.schema) if a.schema else storage.read_manifest(a.db)
    p = _plan(_load_template(a.template), schemas)
    print(json.dumps(p.describe(), indent=2))
    return EXIT_OK


def cmd_run(a) -> int:
    template = _load_template(a.template)
    schemas = storage.read_manifest(a.db)
    p = _plan(template, schemas)
    bindings = _bindings(a.bind)
    matrices = storage.load_matrices(a.db)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    s, res = _run_once(p, matrices, bindings, "full")
    elapsed = time.perf_counter() - t0
    write_result_csv(out / "result.csv", res.names, res.rows)
    with open(out / "trace.jsonl", "w") as fh:
        export_trace(s, fh)

    sizes = {r: int(matrices[r][1].shape[0]) for r in template.relations}
    n, m = sum(sizes.values()), len(res.rows)
    budget = TmContext.default_budget(n + m, a.tm_c)
    stats = s.stats()
    stats.update(input_sizes=sizes, output_size=m, tm_budget_words=budget, seconds=round(elapsed, 4),
                 arena_capacities=[c for _, c in s.mem.layout])

    # a shuffled, value-shifted database with the same sizes must give the same trace
    rnd = random.Random(a.seed)
    db = {r: (schema, schema.decode_rows(mat)) for r, (schema, mat) in matrices.items()
          if r in template.relations}
    shift = rnd.randrange(1, 1000)
    shadow_db, shadow_bind = harness.relabel(rnd, db, bindings, shift=shift)
    shadow_p = dataclasses.replace(p, template=_shadow_template(template, shift))
    shadow_mats = {r: (schema, schema.encode_rows(rows)) for r, (schema, rows) in shadow_db.items()}
    shadow_s, shadow_res = _run_once(shadow_p, shadow_mats, shadow_bind, "digest")
    same = (shadow_s.mem.layout == s.mem.layout and shadow_s.trace.count == s.trace.count
            and shadow_s.trace.digest() == s.trace.digest())
    stats["shadow_trace_identical"] = same
    stats["tm_within_budget"] = s.tm.peak_usage <= budget
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")

    size_args = ", ".join(f"|{r}|={k}" for r, k in sizes.items())
    print(f"result: {m} rows -> {out / 'result.csv'}")
    print(f"UM accesses = f({size_args}, m={m}) = {s.trace.count}")
    print(f"TM peak = {s.tm.peak_usage} words (budget {a.tm_c}·⌈log2({n + m + 2})⌉ = {budget})")
    print(f"counter high-water = {s.counter_high_water}")
    if len(shadow_res.rows) != m:
        _err("shadow run produced a different output size")
        return EXIT_VERIFY
    if not same:
        _err("trace differs on a size-matched shadow database")
        return EXIT_VERIFY
    if s.tm.peak_usage > budget:
        _err(f"TM peak {s.tm.peak_usage} exceeds budget {budget}")
        return EXIT_VERIFY
    return EXIT_OK


def cmd_oracle_check(a) -> int:
    template = _load_template(a.template)
    p = _plan(template, storage.read_manifest(a.db))
    bindings = _bindings(a.bind)
    matrices = storage.load_matrices(a.db)
    _, res = _run_once(p, matrices, bindings, "count")
    db = {r: (schema, schema.decode_rows(mat)) for r, (schema, mat) in matrices.items()}
    names, rows = harness.oracle_eval(db, template, bindings)
    ok = harness.same_result(res.names, res.rows, names, rows)
    print(f"engine {len(res.rows)} rows, oracle {len(rows)} rows: {'match' if ok else 'MISMATCH'}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_verify(a) -> int:
    verdicts = []
    skipped = []
    if a.foil and not a.bundled and a.op != "binary_join":
        raise _Exit(EXIT_DATA, "the foil is a binary join; use --op binary_join")
    if a.bundled:
        pair = harness.skew_contrast_pair()
        verdicts.append(harness.verify_foil(pair) if a.foil else harness.verify_oblivious(pair))
    else:
        if a.op not in harness.CASES:
            raise _Exit(EXIT_DATA, f"unknown op {a.op!r}; choose from {sorted(harness.CASES)}")
        for k, n in enumerate(harness.pair_sizes(a.pairs, a.n_max)):
            seed = a.seed + k
            try:
                pair = harness.gen_matched_pair(a.op, n, seed)
            except harness.GenerationTimeout as exc:
                skipped.append({"seed": seed, "n": n, "reason": str(exc)})
                _err(f"skipped: {exc}")
                continue
            verdicts.append(harness.verify_foil(pair) if a.foil else
                            harness.verify_oblivious(pair, budget_c=a.tm_c))
    fails = [v for v in verdicts if not v.passed or not v.oracle_match]
    for v in verdicts:
        extra = "" if v.first_divergence is None else f" (first divergence at event {v.first_divergence})"
        print(f"{v.pair_id}: {v.verdict}{extra}")
    print(f"{len(verdicts) - len(fails)}/{len(verdicts)} passed, {len(skipped)} skipped")
    if a.report:
        Path(a.report).write_text(json.dumps({"verdicts": [v.to_dict() for v in verdicts],
                                              "skipped": skipped}, indent=2) + "\n")
    return EXIT_VERIFY if fails else EXIT_OK


def run_bench(exponents, seed: int = 0, tm_c: int = 64) -> list[dict]:
    """Binary join over ``bench_instance(2^e)``; the TM budget is enforced during each run."""
    rows = []
    case = harness.CASES["binary_join"]
    for e in exponents:
        n = 1 << e
        db = harness.bench_instance(n, seed)
        t0 = time.perf_counter()
        # the instance has exactly n output tuples, so the budget is known up front
        s, _, out = case.run(db, {}, trace_mode="count", budget=TmContext.default_budget(2 * n, tm_c))
        rows.append({"n": n, "R": len(db["R"][1]), "S": len(db["S"][1]), "m": len(out),
                     "um_accesses": s.trace.count, "tm_peak_words": s.tm.peak_usage,
                     "tm_budget_words": TmContext.default_budget(n + len(out), tm_c),
                     "counter_high_water": s.counter_high_water,
                     "seconds": round(time.perf_counter() - t0, 3)})
    return report.add_ratios(rows)


def cmd_bench(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_bench(range(a.min_exp, a.max_exp + 1), a.seed, a.tm_c)
    report.write_bench_csv(rows, out / "bench.csv")
    report.plot_bench(rows, out / "bench.png")
    for r in rows:
        print(f"n={r['n']:>6} m={r['m']:>6} accesses={r['um_accesses']:>11} ratio={r['ratio']!s:>6} "
              f"tm_peak={r['tm_peak_words']} t={r['seconds']}s")
    lo, hi = report.RATIO_BAND
    bad = [r for r in rows if r["ratio"] != "" and not lo <= r["ratio"] <= hi]
    over = [r for r in rows if r["tm_peak_words"] > r["tm_budget_words"]]
    print(f"wrote {out / 'bench.csv'} and {out / 'bench.png'}")
    return EXIT_VERIFY if bad or over else EXIT_OK


# -- wiring ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oblivq", description="Oblivious query processing over simulated memory.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("ingest", help="encode CSV files into a database directory")
    p.add_argument("--csv-dir", required=True)
    p.add_argument("--schema", required=True, help="JSON schema file")
    p.add_argument("--out", required=True, help="database directory to write")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("plan", help="show the execution plan without touching data")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--db")
    src.add_argument("--schema")
    p.add_argument("--template", required=True)
    p.set_defaults(fn=cmd_plan)

    for name, fn, text in (("run", cmd_run, "execute a query, export result, trace and stats"),
                           ("oracle-check", cmd_oracle_check, "compare the engine with a direct evaluator")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--db", required=True)
        p.add_argument("--template", required=True)
        p.add_argument("--bind", action="append", metavar="?k=VALUE")
        p.set_defaults(fn=fn)
        if name == "run":
            p.add_argument("--out", required=True)
            p.add_argument("--tm-c", type=int, default=64, help="TM budget constant c")
            p.add_argument("--seed", type=int, default=0, help="seed for the shadow instance")

    p = sub.add_parser("verify", help="check trace equality on matched instance pairs")
    p.add_argument("--bundled", choices=["skew-contrast"], help="use the bundled two-instance join pair")
    p.add_argument("--op", default="binary_join", help=f"one of {', '.join(harness.CASES)}")
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--n-max", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tm-c", type=int, default=64)
    p.add_argument("--foil", action="store_true", help="verify the non-oblivious nested-loop join instead")
    p.add_argument("--report", help="write the verdicts as JSON")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("bench", help="binary join access counts for n = 2^min..2^max")
    p.add_argument("--out", required=True)
    p.add_argument("--min-exp", type=int, default=10)
    p.add_argument("--max-exp", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tm-c", type=int, default=64)
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _Exit as exc:
        _err(str(exc))
        return exc.code
    except PlanError as exc:
        _err(f"plan rejected: {type(exc).__name__}: {exc}")
        return EXIT_PLAN
    except (ParseError, DomainMismatch, FkViolation, UnknownAttribute, OSError, json.JSONDecodeError) as exc:
        _err(f"data error: {type(exc).__name__}: {exc}")
        return EXIT_DATA
    except OblivqError as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
