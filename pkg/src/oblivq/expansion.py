"""Oblivious expansion: replace every tuple by ``t[W]`` copies.

The output size ``m`` is public, individual weights are not. The pipeline
rounds weights up to powers of two, pads the total to exactly ``2m`` with one
dummy record, reorders the records into a prefix-heavy sequence whose shape is
computed from the rounded weight histogram alone, expands that sequence at a
fixed number of output slots per input step, and finally filters the surplus
copies away.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InternalScheduleError, NotPrefixHeavy
from .primitives import (Columns, RowPredicate, _map, augment, gen_union,
                         grouping_identity, obl_filter, obl_project, obl_sort, tm_fold)
from .relmodel import INT64_MAX, RelHandle, int_attr

_WT = "#x_wt"
_XID = "#x_id"
_SLOT = "#x_slot"
_RANK = "#x_rank"
COUNTER_WORDS = 2  # record id and remaining copies


# --------------------------------------------------------------------------
# pure schedules (everything here runs inside TM)

def round_pow2(w) -> np.ndarray:
    """``2^⌈log2 w⌉`` elementwise, with 0 mapped to 0."""
    w = np.asarray(w, dtype=np.int64)
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    x = np.maximum(w - 1, 0)
    bits = np.zeros_like(x)
    for shift in (32, 16, 8, 4, 2, 1):
        big = x >= (np.int64(1) << shift)
        bits += np.where(big, shift, 0)
        x = np.where(big, x >> shift, x)
    bits += x  # x is now 0 or 1
    out = np.where(w <= 1, w, np.int64(1) << np.minimum(bits, 62))
    if (w > (1 << 62)).any():
        raise OverflowError("rounded weight exceeds 64-bit range")
    return out


def is_prefix_heavy(weights: Sequence[int]) -> bool:
    w = [int(x) for x in weights]
    n, total = len(w), sum(w)
    prefix = 0
    for ell, x in enumerate(w, 1):
        prefix += x
        if prefix * n < ell * total:
            return False
    return True


def step_quota(n: int, total: int) -> np.ndarray:
    """Cumulative output after each input step: ``cum[i] = round(i · total / n)``.

    Rounding is half-up in exact integer arithmetic. Only ``n`` and ``total``
    enter, so the per-step output counts are public.
    """
    if n == 0:
        return np.zeros(1, dtype=np.int64)
    i = np.arange(n + 1, dtype=object)
    cum = (2 * i * total + n) // (2 * n)
    return np.array(cum.tolist(), dtype=np.int64)


@dataclass
class ExpandSchedule:
    source: np.ndarray            # record index feeding each output slot
    steps: list[list[int]]        # per input step, the record indices appended
    max_counters: int
    counters: list[dict[int, int]] | None = None  # after each step, when traced


def expand_schedule(weights: Sequence[int], *, trace_counters: bool = False) -> ExpandSchedule:
    """Run the prefix-heavy expansion loop over ``weights``.

    Each step first takes the current record if it fits the step's quota,
    otherwise parks it in a counter; the remaining quota is drawn from parked
    records, lowest index first.
    """
    w = [int(x) for x in weights]
    n, total = len(w), sum(w)
    cum = step_quota(n, total)
    counters: deque[list[int]] = deque()  # [index, remaining], oldest first
    steps: list[list[int]] = []
    snaps: list[dict[int, int]] | None = [] if trace_counters else None
    high = 0
    for i, wi in enumerate(w):
        quota = int(cum[i + 1] - cum[i])
        out: list[int] = []
        if wi <= quota:
            out.extend([i] * wi)
            quota -= wi
        else:
            counters.append([i, wi])
            high = max(high, len(counters))
        while quota > 0:
            if not counters:
                raise NotPrefixHeavy(f"step {i + 1} cannot produce its quota")
            head = counters[0]
            take = min(head[1], quota)
            out.extend([head[0]] * take)
            head[1] -= take
            quota -= take
            if head[1] == 0:
                counters.popleft()
        steps.append(out)
        if snaps is not None:
            snaps.append({k: c for k, c in counters})
    if counters:
        raise NotPrefixHeavy("copies left over after the last step")
    source = np.fromiter((k for s in steps for k in s), dtype=np.int64, count=total)
    return ExpandSchedule(source, steps, high, snaps)


@dataclass
class RoundedDistribution:
    """Histogram of rounded weights: class value -> number of records."""

    counts: dict[int, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(c * k for c, k in self.counts.items())

    @property
    def records(self) -> int:
        return sum(self.counts.values())

    @property
    def words(self) -> int:
        return 2 * len(self.counts)


def reorder_classes(dist: RoundedDistribution | Mapping[int, int]) -> list[int]:
    """Greedy class sequence that keeps every prefix at or above the average.

    At each position take the lightest remaining class that keeps the prefix
    average at least the overall average, else the heaviest remaining class.
    The fallback can never break the invariant: if even the heaviest class
    fell short, the remaining records could not reach the overall total.
    """
    counts = dict(dist.counts if isinstance(dist, RoundedDistribution) else dist)
    n = sum(counts.values())
    total = sum(c * k for c, k in counts.items())
    classes = sorted(c for c, k in counts.items() if k > 0)
    seq: list[int] = []
    prefix = 0
    for ell in range(1, n + 1):
        need = ell * total
        pick = None
        for c in classes:
            if (prefix + c) * n >= need:
                pick = c
                break
        if pick is None:
            pick = classes[-1]
        seq.append(pick)
        prefix += pick
        counts[pick] -= 1
        if counts[pick] == 0:
            classes.remove(pick)
    return seq


# --------------------------------------------------------------------------
# relation-level operations

def _peek_int(R: RelHandle, attr: str) -> np.ndarray:
    """Values of ``attr`` as TM sees them while streaming R in order.

    The schedule at step i only depends on records 1..i, which TM has read by
    then; computing it ahead of the traced pass is a simulation shortcut.
    """
    cols = Columns(R.schema, R.matrix())
    return np.where(cols.present(attr), cols[attr], 0)


def expand_prefix_heavy(R: RelHandle, W: str, *, trace_counters: bool = False):
    """Expand R (read in sequence order) by ``W``; R must be prefix-heavy in W.

    Step i reads record i and writes exactly ``cum[i] - cum[i-1]`` output slots.
    Returns ``(relation, schedule)``.
    """
    s = R.session
    weights = _peek_int(R, W)
    sched = expand_schedule(weights.tolist(), trace_counters=trace_counters)
    total = len(sched.source)
    cum = step_quota(R.len, total)
    out = s.new_relation(R.schema, total)
    with s.tm.hold(COUNTER_WORDS * sched.max_counters + 3, "expansion counters"):
        s.mem.fanout(R.arena, out.arena, R.len, cum, sched.source)
    s.counter_high_water = max(s.counter_high_water, sched.max_counters)
    return out, sched


def reorder_barely_prefix_heavy(R: RelHandle, W: str, Id: str, dist: RoundedDistribution) -> RelHandle:
    """Permute R so its ``W`` sequence follows :func:`reorder_classes`.

    Records are sorted by (class desc, Id asc); the k-th record of class c is
    sent to the k-th position where the greedy sequence places c; a second sort
    by that position realises the order. Both sorts and the slot pass depend
    only on |R|.
    """
    s = R.session
    seq = np.array(reorder_classes(dist), dtype=np.int64)
    if len(seq) != R.len:
        raise InternalScheduleError("distribution does not match relation size")
    if not is_prefix_heavy(seq.tolist()):
        raise InternalScheduleError("greedy class sequence is not prefix-heavy")
    # position of each record in (class desc, Id asc) order, replayed class by class
    target = np.lexsort((np.arange(len(seq)), -seq))
    with s.tm.hold(dist.words + 4, "reorder state"):
        ranked = obl_sort(R, [(W, "desc"), Id])

        def slot(rows: np.ndarray) -> np.ndarray:
            cols = Columns(ranked.schema, rows)
            if not np.array_equal(cols[W], seq[target]):
                raise InternalScheduleError("record weights disagree with the distribution")
            out = np.zeros((len(rows), rows.shape[1] + 2), dtype=np.int64)
            out[:, :-2] = rows
            out[:, -2] = 1
            out[:, -1] = target
            return out

        placed = _map(ranked, ranked.schema.extend(int_attr(_SLOT)), slot)
        ordered = obl_sort(placed, [_SLOT])
    return obl_project(ordered, R.schema.names)


def expand(R: RelHandle, W: str) -> RelHandle:
    """``Expand_W(R)``: ``t[W]`` copies of every tuple; trace fixed by (|R|, m)."""
    s = R.session
    schema = R.schema
    schema.attr(W)
    m = tm_fold(R, "sum", W)
    if m < 0:
        raise ValueError("weights must be non-negative")
    if m == 0:
        return s.new_relation(schema, 0)
    if 2 * m > INT64_MAX:
        raise OverflowError("expansion size exceeds 64-bit range")

    def rounded(c: Columns):
        w = np.where(c.present(W), c[W], 0)
        return round_pow2(w)

    Rt = augment(R, _WT, rounded)
    m_t = tm_fold(Rt, "sum", _WT)
    if not m_t < 2 * m:
        raise InternalScheduleError(f"rounded total {m_t} is not below {2 * m}")

    dummy = s.new_relation(Rt.schema, 1)
    row = np.zeros(Rt.schema.ncols, dtype=np.int64)
    w_lo, _ = Rt.schema.span(W)
    t_lo, _ = Rt.schema.span(_WT)
    row[w_lo:w_lo + 2] = (1, 0)
    row[t_lo:t_lo + 2] = (1, 2 * m - m_t)
    with s.tm.hold(1, "dummy"):
        s.mem.write(dummy.arena, 0, row)
    Rt = gen_union(Rt, dummy)

    dist = RoundedDistribution(tm_fold(Rt, "histogram", _WT))
    with s.tm.hold(dist.words, "rounded distribution"):
        Rt = grouping_identity(Rt, (), (), _XID)
        seq = reorder_barely_prefix_heavy(Rt, _WT, _XID, dist)
        wide, _ = expand_prefix_heavy(seq, _WT)
    wide = grouping_identity(wide, [_XID], (), _RANK)
    keep = RowPredicate(lambda c: c[_RANK] <= np.where(c.present(W), c[W], 0))
    out = obl_filter(wide, keep, m)
    return obl_project(out, schema.names)


__all__ = [
    "round_pow2", "is_prefix_heavy", "step_quota", "expand_schedule", "ExpandSchedule",
    "RoundedDistribution", "reorder_classes", "expand_prefix_heavy",
    "reorder_barely_prefix_heavy", "expand",
]
