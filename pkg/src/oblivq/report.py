"""Benchmark tables and figures."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

BENCH_FIELDS = ["n", "R", "S", "m", "um_accesses", "ratio", "tm_peak_words", "tm_budget_words",
                "counter_high_water", "seconds"]
RATIO_BAND = (2.0, 2.6)


def add_ratios(rows: list[dict]) -> list[dict]:
    """Access-count growth relative to the previous row (blank for the first)."""
    for prev, row in zip([None, *rows[:-1]], rows):
        row["ratio"] = "" if prev is None else round(row["um_accesses"] / prev["um_accesses"], 4)
    return rows


def write_bench_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in BENCH_FIELDS})


def plot_bench(rows: Sequence[dict], path) -> Path:
    """Access counts against n with an n log² n guide, and per-doubling growth."""
    ns = [r["n"] for r in rows]
    acc = [r["um_accesses"] for r in rows]
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))

    left.loglog(ns, acc, "o-", base=2, label="binary join")
    if ns:
        scale = acc[-1] / (ns[-1] * math.log2(ns[-1]) ** 2)
        left.loglog(ns, [scale * n * math.log2(n) ** 2 for n in ns], "--", base=2,
                    color="grey", label="c · n log² n")
    left.set_xlabel("n = |R| + |S|")
    left.set_ylabel("untrusted-memory accesses")
    left.legend()
    left.grid(True, which="both", alpha=0.3)

    pairs = [(r["n"], r["ratio"]) for r in rows if r.get("ratio") not in ("", None)]
    right.axhspan(*RATIO_BAND, color="tab:green", alpha=0.15, label="accepted band")
    if pairs:
        right.plot([n for n, _ in pairs], [x for _, x in pairs], "o-", label="growth per doubling")
    right.set_xscale("log", base=2)
    right.set_ylim(1.5, 3.0)
    right.set_xlabel("n")
    right.set_ylabel("accesses(n) / accesses(n/2)")
    right.legend()
    right.grid(True, alpha=0.3)

    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
