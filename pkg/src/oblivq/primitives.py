"""Oblivious building blocks: sort, filter, projection, augmentation, grouping
identity, grouping running aggregates, generalized union, stitching and folds.

Every function's UM access sequence is a fixed function of its input and output
sizes. Data-dependent decisions happen on values already copied into TM.

Sorting is a bitonic network over a scratch arena padded to the next power of
two. ``pad`` puts padding rows last and the original position breaks any tie
left by the key, so the network's output order is unique.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainMismatch, SizeMismatch, StitchMismatch
from .relmodel import (INT, INT64_MAX, INT64_MIN, Attribute, RelHandle, Schema, int_attr,
                       normalize_key)

SORT_WORDS = 4  # two tuple registers, two slot indices
SCAN_WORDS = 4  # current tuple, previous group key, running state
_SAFE = float(2**62)


# --------------------------------------------------------------------------
# checked 64-bit arithmetic

def _exact_check(a, b, op, approx) -> None:
    suspect = np.flatnonzero(np.abs(approx) > _SAFE)
    for i in suspect:
        x = op(int(np.broadcast_to(a, approx.shape)[i]), int(np.broadcast_to(b, approx.shape)[i]))
        if not INT64_MIN <= x <= INT64_MAX:
            raise OverflowError(f"64-bit overflow: {x}")


def checked_mul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    approx = a.astype(np.float64) * b.astype(np.float64)
    _exact_check(a, b, operator.mul, np.atleast_1d(approx))
    with np.errstate(over="ignore"):
        return a * b


def checked_add(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    approx = a.astype(np.float64) + b.astype(np.float64)
    _exact_check(a, b, operator.add, np.atleast_1d(approx))
    with np.errstate(over="ignore"):
        return a + b


# --------------------------------------------------------------------------
# column access and predicates

class Columns:
    """Read-only decoded view of a block of rows, handed to per-tuple functions."""

    def __init__(self, schema: Schema, mat: np.ndarray):
        self.schema = schema
        self.mat = mat

    def __len__(self) -> int:
        return len(self.mat)

    def __getitem__(self, name: str) -> np.ndarray:
        attr = self.schema.attr(name)
        if attr.domain != INT:
            raise DomainMismatch(f"{name} is not an int attribute")
        lo, _ = self.schema.span(name)
        return self.mat[:, lo + 1]

    def present(self, name: str) -> np.ndarray:
        lo, _ = self.schema.span(name)
        return self.mat[:, lo] == 1

    def words(self, name: str) -> np.ndarray:
        lo, hi = self.schema.span(name)
        return self.mat[:, lo:hi]


def _lexsign(a: np.ndarray, b: np.ndarray, desc: np.ndarray | None = None) -> np.ndarray:
    """Row-wise lexicographic comparison of two equally shaped blocks: -1/0/1."""
    n, c = a.shape
    res = np.zeros(n, dtype=np.int8)
    for i in range(c - 1, -1, -1):
        x, y = a[:, i], b[:, i]
        s = (x > y).astype(np.int8) - (x < y).astype(np.int8)
        if desc is not None and desc[i]:
            s = -s
        res = np.where(s != 0, s, res)
    return res


_CMP = {
    "=": lambda s: s == 0,
    "!=": lambda s: s != 0,
    "<": lambda s: s < 0,
    "<=": lambda s: s <= 0,
    ">": lambda s: s > 0,
    ">=": lambda s: s >= 0,
}


@dataclass(frozen=True)
class Atom:
    attr: str
    op: str
    const: Any

    def __post_init__(self):
        if self.op not in _CMP:
            raise ValueError(f"unsupported comparison {self.op!r}")


@dataclass(frozen=True)
class Predicate:
    """Conjunction of ``attr <op> constant`` atoms; comparisons with Null are false.

    The constants are plan state held in TM; they are never written to UM.
    """

    atoms: tuple[Atom, ...] = ()

    @classmethod
    def where(cls, *atoms) -> "Predicate":
        return cls(tuple(a if isinstance(a, Atom) else Atom(*a) for a in atoms))

    def validate(self, schema: Schema) -> None:
        for a in self.atoms:
            attr = schema.attr(a.attr)
            schema.encode_value(attr, a.const)

    def mask(self, schema: Schema, mat: np.ndarray) -> np.ndarray:
        ok = np.ones(len(mat), dtype=bool)
        for a in self.atoms:
            attr = schema.attr(a.attr)
            lo, hi = schema.span(a.attr)
            const = np.array(schema.encode_value(attr, a.const), dtype=np.int64)
            block = mat[:, lo + 1:hi]
            sign = _lexsign(block, np.broadcast_to(const[1:], block.shape))
            ok &= (mat[:, lo] == 1) & _CMP[a.op](sign)
        return ok


class RowPredicate:
    """Predicate given as a vectorized function of :class:`Columns`."""

    def __init__(self, fn: Callable[[Columns], np.ndarray]):
        self.fn = fn

    def mask(self, schema: Schema, mat: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(Columns(schema, mat)), dtype=bool)


# --------------------------------------------------------------------------
# internal helpers

def _next_pow2(n: int) -> int:
    return 0 if n == 0 else 1 << (n - 1).bit_length()


def _key_columns(schema: Schema, key) -> tuple[list[int], list[bool]]:
    cols, desc = [], []
    for name, d in normalize_key(key):
        lo, hi = schema.span(name)
        cols.extend(range(lo, hi))
        desc.extend([d] * (hi - lo))
    return cols, desc


def _map(R: RelHandle, out_schema: Schema, fn: Callable[[np.ndarray], np.ndarray]) -> RelHandle:
    """One read and one write per slot, in order."""
    s = R.session
    out = s.new_relation(out_schema, R.len)
    with s.tm.hold(2, "map"):
        s.mem.stream(R.arena, out.arena, R.len, fn)
    return out


def _place(src: Schema, dst: Schema) -> Callable[[np.ndarray], np.ndarray]:
    """Row transform laying ``src`` attributes into ``dst`` layout; missing ones Null."""
    pairs = []
    for name in src.names:
        if name in dst:
            pairs.append((src.span(name), dst.span(name)))

    def fn(rows: np.ndarray) -> np.ndarray:
        out = np.zeros((len(rows), dst.ncols), dtype=np.int64)
        for (slo, shi), (dlo, dhi) in pairs:
            out[:, dlo:dhi] = rows[:, slo:shi]
        return out

    return fn


class _Scratch:
    """A sorted scratch arena: ``[pad, extras.., tuple.., rank]`` per slot."""

    def __init__(self, R: RelHandle, arena: int, n_extra: int):
        self.R = R
        self.arena = arena
        self.n_extra = n_extra

    def tuple_cols(self, rows: np.ndarray) -> np.ndarray:
        lo = 1 + self.n_extra
        return rows[:, lo:lo + self.R.schema.ncols]

    def extras(self, rows: np.ndarray) -> np.ndarray:
        return rows[:, 1:1 + self.n_extra]

    def copy_out(self, count: int, out_schema: Schema,
                 fn: Callable[[np.ndarray], np.ndarray]) -> RelHandle:
        s = self.R.session
        out = s.new_relation(out_schema, count)
        with s.tm.hold(SCAN_WORDS, "scan"):
            s.mem.stream(self.arena, out.arena, count, fn)
        s.mem.release(self.arena)
        return out


def _ranks(block: np.ndarray, cols: Sequence[int], desc: Sequence[bool]) -> np.ndarray:
    """Rank of every row under the comparator (row index breaks remaining ties)."""
    keys = [np.arange(len(block))]
    for c, d in zip(reversed(cols), reversed(desc)):
        col = block[:, c]
        keys.append(~col if d else col)  # bitwise not reverses order without overflow
    order = np.lexsort(keys)
    rank = np.empty(len(block), dtype=np.int64)
    rank[order] = np.arange(len(block))
    return rank


def _sort_scratch(R: RelHandle, key, *, extra: Callable[[np.ndarray], np.ndarray] | None = None,
                  n_extra: int = 0, tiebreak: str = "tuple") -> _Scratch:
    """Copy R into a padded scratch arena and run the bitonic network on it.

    Order: padding last, then ``extra`` columns ascending (computed in TM at
    copy-in), then ``key``, then the whole tuple ascending when ``tiebreak`` is
    ``"tuple"``, then original position.

    The comparator is a fixed total order on slot contents, so the simulation
    evaluates it once per row up front (the ``rank`` column) and every
    compare-exchange of the network compares two ranks. This changes neither
    the access sequence nor any comparison outcome.
    """
    s = R.session
    schema = R.schema
    n = R.len
    P = _next_pow2(n)
    ncols = schema.ncols
    width = 1 + n_extra + ncols + 1
    kcols, kdesc = _key_columns(schema, key)
    base = 1 + n_extra
    cmp_cols = [0, *range(1, 1 + n_extra), *(base + c for c in kcols)]
    cmp_desc = [False] * (1 + n_extra) + kdesc
    if tiebreak == "tuple":
        cmp_cols += [base + c for c in range(ncols)]
        cmp_desc += [False] * ncols
    elif tiebreak != "position":
        raise ValueError(f"unknown tiebreak {tiebreak!r}")

    arena = s.mem.alloc(width, P)

    def load(rows: np.ndarray) -> np.ndarray:
        out = np.zeros((len(rows), width), dtype=np.int64)
        if n_extra:
            out[:, 1:base] = extra(rows)
        out[:, base:base + ncols] = rows
        return out

    def swap(lo: np.ndarray, hi: np.ndarray, ascending: np.ndarray) -> np.ndarray:
        bigger = lo[:, -1] > hi[:, -1]
        return np.where(ascending, bigger, ~bigger)

    with s.tm.hold(SORT_WORDS, "sort"):
        s.mem.stream(R.arena, arena, n, load)
        if P > n:
            pads = np.zeros((P - n, width), dtype=np.int64)
            pads[:, 0] = 1
            s.mem.fill(arena, n, pads)
        if P:
            block = s.mem._data[arena]
            block[:, -1] = _ranks(block, cmp_cols, cmp_desc)
        k = 2
        while k <= P:
            j = k // 2
            while j >= 1:
                s.mem.exchange_stage(arena, j, k, swap)
                j //= 2
            k *= 2
    return _Scratch(R, arena, n_extra)


def _group_starts(rows: np.ndarray, gcols: Sequence[int]) -> np.ndarray:
    n = len(rows)
    starts = np.zeros(n, dtype=bool)
    if n:
        starts[0] = True
        if gcols:
            g = rows[:, list(gcols)]
            starts[1:] = (g[1:] != g[:-1]).any(axis=1)
    return starts


def _segmented(values: np.ndarray, present: np.ndarray, starts: np.ndarray, fn: str):
    """Inclusive running aggregate restarted at every group start.

    Returns ``(values, present)``; Null inputs are skipped. A running sum over
    only Nulls is 0; a running min/max over only Nulls is Null.
    """
    n = len(values)
    if fn == "sum":
        v = np.where(present, values, 0)
        if float(np.abs(v.astype(np.float64)).sum()) < _SAFE:
            cs = np.cumsum(v)
            first = np.maximum.accumulate(np.where(starts, np.arange(n), 0)) if n else np.zeros(0, int)
            out = cs - cs[first] + v[first]
            return out.astype(np.int64), np.ones(n, dtype=bool)
        out, acc = [], 0
        for x, st in zip(v.tolist(), starts.tolist()):
            acc = x if st else acc + x
            if not INT64_MIN <= acc <= INT64_MAX:
                raise OverflowError(f"64-bit overflow in running sum: {acc}")
            out.append(acc)
        return np.array(out, dtype=np.int64), np.ones(n, dtype=bool)
    if fn not in ("min", "max"):
        raise ValueError(f"unknown running aggregate {fn!r}")
    pick = min if fn == "min" else max
    out_v = np.zeros(n, dtype=np.int64)
    out_p = np.zeros(n, dtype=bool)
    acc = None
    for i, (x, p, st) in enumerate(zip(values.tolist(), present.tolist(), starts.tolist())):
        if st:
            acc = None
        if p:
            acc = x if acc is None else pick(acc, x)
        if acc is not None:
            out_v[i] = acc
            out_p[i] = True
    return out_v, out_p


def _set_int(mat: np.ndarray, schema: Schema, name: str, values, present=None) -> None:
    lo, _ = schema.span(name)
    values = np.broadcast_to(np.asarray(values, dtype=np.int64), (len(mat),))
    if present is None:
        mat[:, lo] = 1
        mat[:, lo + 1] = values
    else:
        present = np.broadcast_to(np.asarray(present, dtype=bool), (len(mat),))
        mat[:, lo] = present
        mat[:, lo + 1] = np.where(present, values, 0)


def _as_attr(a: Attribute | str) -> Attribute:
    return a if isinstance(a, Attribute) else int_attr(a)


# --------------------------------------------------------------------------
# public primitives

def obl_sort(R: RelHandle, key) -> RelHandle:
    """Sort by ``key``; ties fall back to the whole tuple, ascending in schema order."""
    R.schema.require(n for n, _ in normalize_key(key))
    scr = _sort_scratch(R, key, tiebreak="tuple")
    return scr.copy_out(R.len, R.schema, scr.tuple_cols)


def obl_filter(R: RelHandle, p, out_len: int) -> RelHandle:
    """``σ_p(R)`` given its size: sort satisfying tuples first, copy ``out_len``."""
    if not 0 <= out_len <= R.len:
        raise SizeMismatch(f"out_len {out_len} outside [0, {R.len}]")
    schema = R.schema

    def flag(rows: np.ndarray) -> np.ndarray:
        return (~p.mask(schema, rows)).astype(np.int64)[:, None]

    scr = _sort_scratch(R, [], extra=flag, n_extra=1, tiebreak="tuple")
    if out_len < R.len:
        # the first slot past the cut must hold a failing tuple
        with R.session.tm.hold(1, "filter check"):
            nxt = R.session.mem.read(scr.arena, out_len)
        if not scr.extras(nxt[None, :])[0, 0]:
            raise SizeMismatch(f"more than {out_len} tuples satisfy the filter")

    def take(rows: np.ndarray) -> np.ndarray:
        if scr.extras(rows)[:, 0].any():
            raise SizeMismatch(f"fewer than {out_len} tuples satisfy the filter")
        return scr.tuple_cols(rows)

    return scr.copy_out(out_len, schema, take)


def obl_project(R: RelHandle, attrs: Iterable[str]) -> RelHandle:
    """Duplicate-preserving projection; attributes keep schema order."""
    out_schema = R.schema.project(attrs)
    return _map(R, out_schema, _place(R.schema, out_schema))


def rename(R: RelHandle, mapping: Mapping[str, str]) -> RelHandle:
    out_schema = R.schema.rename(dict(mapping))
    return _map(R, out_schema, lambda rows: rows)


def augment_many(R: RelHandle, new: Mapping[Attribute | str, Callable[[Columns], Any]]) -> RelHandle:
    """``R.(A1 ← f1).(A2 ← f2)...`` in a single pass.

    Each function receives the :class:`Columns` of the tuples seen so far
    (including earlier new columns) and returns an int array, a scalar, ``None``
    for Null, or a ``(values, present)`` pair.
    """
    attrs = [(_as_attr(a), f) for a, f in new.items()]
    out_schema = R.schema.extend(*(a for a, _ in attrs))
    ncols_in = R.schema.ncols

    def fn(rows: np.ndarray) -> np.ndarray:
        out = np.zeros((len(rows), out_schema.ncols), dtype=np.int64)
        out[:, :ncols_in] = rows
        for a, f in attrs:
            if a.domain != INT:
                raise DomainMismatch("augmented attributes must be int")
            res = f(Columns(out_schema, out))
            if res is None:
                continue
            if isinstance(res, tuple):
                _set_int(out, out_schema, a.name, *res)
            else:
                _set_int(out, out_schema, a.name, res)
        return out

    return _map(R, out_schema, fn)


def augment(R: RelHandle, new_attr: Attribute | str, f: Callable[[Columns], Any]) -> RelHandle:
    """``R.(new_attr ← f)``: one pass adding a derived column."""
    return augment_many(R, {new_attr: f})


def _running(R: RelHandle, G: Sequence[str], O, new_attr: Attribute | str,
             compute: Callable[[Columns, np.ndarray], tuple]) -> RelHandle:
    schema = R.schema
    schema.require(G)
    key = [*G, *normalize_key(O)]
    schema.require(n for n, _ in normalize_key(key))
    out_schema = schema.extend(_as_attr(new_attr))
    name = _as_attr(new_attr).name
    gcols = schema.cols(G)
    ncols = schema.ncols

    def finish(rows: np.ndarray) -> np.ndarray:
        out = np.zeros((len(rows), out_schema.ncols), dtype=np.int64)
        out[:, :ncols] = rows
        starts = _group_starts(rows, gcols)
        _set_int(out, out_schema, name, *compute(Columns(schema, rows), starts))
        return out

    if not key:
        s = R.session
        out = s.new_relation(out_schema, R.len)
        with s.tm.hold(SCAN_WORDS, "scan"):
            s.mem.stream(R.arena, out.arena, R.len, finish)
        return out
    scr = _sort_scratch(R, key, tiebreak="position")
    return scr.copy_out(R.len, out_schema, lambda rows: finish(scr.tuple_cols(rows)))


def grouping_identity(R: RelHandle, G: Sequence[str] = (), O=(), new_attr: Attribute | str = "#id") -> RelHandle:
    """``R.(new_attr ← ID_G^O)``: ids 1, 2, ... within each G-group in O order.

    Ties within (G, O) keep the current sequence order; with G and O both empty
    the ids simply number the current sequence and no sort is needed.
    """
    def ids(cols: Columns, starts: np.ndarray):
        n = len(cols)
        idx = np.arange(n)
        first = np.maximum.accumulate(np.where(starts, idx, 0)) if n else idx
        return idx - first + 1, None

    return _running(R, G, O, new_attr, ids)


def grouping_running_sum(R: RelHandle, G: Sequence[str], O, src_attr: str,
                         new_attr: Attribute | str, fn: str = "sum") -> RelHandle:
    """``R.(new_attr ← RSum_G^O(src_attr))``; ``fn`` may also be ``"min"``/``"max"``."""
    R.schema.attr(src_attr)

    def run(cols: Columns, starts: np.ndarray):
        return _segmented(cols[src_attr], cols.present(src_attr), starts, fn)

    return _running(R, G, O, new_attr, run)


def gen_union(R: RelHandle, S: RelHandle) -> RelHandle:
    """``R ∪̄ S``: R's tuples then S's, each padded with Null on the other's attributes."""
    s = R.session
    out_schema = R.schema.union(S.schema)
    out = s.new_relation(out_schema, R.len + S.len)
    with s.tm.hold(2, "union"):
        s.mem.stream(R.arena, out.arena, R.len, _place(R.schema, out_schema))
        s.mem.stream(S.arena, out.arena, S.len, _place(S.schema, out_schema), dst_start=R.len)
    return out


def stitch(R: RelHandle, S: RelHandle) -> RelHandle:
    """Positional concatenation of two equal-length sequences."""
    if R.len != S.len:
        raise StitchMismatch(f"cannot stitch sequences of length {R.len} and {S.len}")
    s = R.session
    out_schema = R.schema.union(S.schema)
    shared = R.schema.shared(S.schema)
    rcols, scols = R.schema.cols(shared), S.schema.cols(shared)
    place_r, place_s = _place(R.schema, out_schema), _place(S.schema, out_schema)

    def join(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if shared:
            bad = np.flatnonzero((a[:, rcols] != b[:, scols]).any(axis=1))
            if len(bad):
                raise StitchMismatch(f"sequences disagree on {list(shared)} at position {int(bad[0])}")
        out = place_r(a)
        extra = [c for c in S.schema.names if c not in R.schema]
        for name in extra:
            slo, shi = S.schema.span(name)
            dlo, dhi = out_schema.span(name)
            out[:, dlo:dhi] = b[:, slo:shi]
        return out

    out = s.new_relation(out_schema, R.len)
    with s.tm.hold(3, "stitch"):
        s.mem.zip_stream(R.arena, S.arena, out.arena, R.len, join)
    return out


def tm_fold(R: RelHandle, fold: str, attr: str | None = None, where=None):
    """Fold ``R`` into a TM-resident result: ``"sum"``, ``"count"`` or ``"histogram"``.

    Reads every slot once and writes nothing. ``where`` (a predicate) restricts
    which tuples contribute.
    """
    s = R.session
    if fold not in ("sum", "count", "histogram"):
        raise ValueError(f"unknown fold {fold!r}")
    if fold != "count":
        R.schema.attr(attr)
    with s.tm.hold(3, "fold"):
        rows = s.mem.scan(R.arena, R.len)
        cols = Columns(R.schema, rows)
        keep = np.ones(len(rows), dtype=bool) if where is None else where.mask(R.schema, rows)
        if fold == "count":
            return int(keep.sum())
        vals = cols[attr][keep & cols.present(attr)]
        if fold == "sum":
            total = sum(vals.tolist())
            if not INT64_MIN <= total <= INT64_MAX:
                raise OverflowError(f"64-bit overflow in sum: {total}")
            return total
        classes, counts = np.unique(vals, return_counts=True)
        # two words per bin: class value and count
        with s.tm.hold(2 * len(classes), "histogram"):
            pass
        return {int(c): int(k) for c, k in zip(classes, counts)}
