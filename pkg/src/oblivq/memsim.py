"""Two-tier memory model: traced untrusted arenas and a budgeted trusted scratchpad.

Untrusted memory (UM) is a list of arenas, each a block of fixed-width slots.
Every slot read or write appends one access event to the session trace before
any data moves. The vectorized access patterns below (``stream``,
``exchange_stage``, ``fanout`` ...) emit exactly the events a slot-at-a-time
loop would, in the same order; they exist only so the simulation runs at numpy
speed.

Events are packed into one int64 each: ``slot << 21 | arena << 1 | op`` with
``op`` 0 for read and 1 for write. The canonical serialization used for the
digest is the little-endian byte string of that packed sequence.
"""

from __future__ import annotations

import hashlib
import json
import math
from contextlib import contextmanager
from typing import Callable, Iterator, NamedTuple

import numpy as np

from .errors import OutOfBounds, TmBudgetExceeded
from .relmodel import RelHandle, Schema

READ = 0
WRITE = 1
_ARENA_SHIFT = 1
_SLOT_SHIFT = 21
MAX_ARENAS = 1 << 20
DEFAULT_TM_CONSTANT = 64


class AccessEvent(NamedTuple):
    op: str
    arena: int
    slot: int


def encode_events(op: int, arena: int, slots) -> np.ndarray:
    slots = np.asarray(slots, dtype=np.int64)
    return (slots << _SLOT_SHIFT) | (arena << _ARENA_SHIFT) | op


def decode_event(code: int) -> AccessEvent:
    code = int(code)
    return AccessEvent("W" if code & 1 else "R", (code >> _ARENA_SHIFT) & (MAX_ARENAS - 1),
                       code >> _SLOT_SHIFT)


class Trace:
    """Append-only record of UM accesses.

    ``mode`` controls what is retained: ``"full"`` keeps every event,
    ``"digest"`` keeps a running SHA-256 and the count, ``"count"`` only counts.
    """

    def __init__(self, mode: str = "digest"):
        if mode not in ("full", "digest", "count"):
            raise ValueError(f"unknown trace mode {mode!r}")
        self.mode = mode
        self._hash = hashlib.sha256()
        self._chunks: list[np.ndarray] = []
        self.count = 0

    def append(self, codes: np.ndarray) -> None:
        if not len(codes):
            return
        codes = np.ascontiguousarray(codes, dtype="<i8")
        self.count += len(codes)
        if self.mode == "count":
            return
        self._hash.update(codes.tobytes())
        if self.mode == "full":
            self._chunks.append(codes)

    def __len__(self) -> int:
        return self.count

    def digest(self) -> str:
        if self.mode == "count":
            raise ValueError("count-only traces carry no digest")
        return self._hash.hexdigest()

    def codes(self) -> np.ndarray:
        if self.mode != "full":
            raise ValueError("events are only retained in full mode")
        if not self._chunks:
            return np.zeros(0, dtype=np.int64)
        if len(self._chunks) > 1:
            self._chunks = [np.concatenate(self._chunks)]
        return self._chunks[0]

    def __iter__(self) -> Iterator[AccessEvent]:
        for c in self.codes():
            yield decode_event(c)

    def events(self) -> list[AccessEvent]:
        return list(self)


def trace_digest(trace: Trace) -> str:
    """SHA-256 hex digest of the canonical event serialization."""
    return trace.digest()


def first_divergence(a: np.ndarray, b: np.ndarray) -> int | None:
    """Index of the first differing event, or None if the sequences are equal."""
    n = min(len(a), len(b))
    diff = np.flatnonzero(a[:n] != b[:n])
    if len(diff):
        return int(diff[0])
    return None if len(a) == len(b) else n


class UntrustedMemory:
    def __init__(self, trace: Trace | None = None):
        self.trace = trace if trace is not None else Trace()
        self._data: list[np.ndarray] = []
        self.layout: list[tuple[int, int]] = []

    # -- allocation and untraced client-side access ---------------------------
    def alloc(self, ncols: int, capacity: int) -> int:
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        arena = len(self._data)
        if arena >= MAX_ARENAS:
            raise OverflowError("arena id space exhausted")
        self._data.append(np.zeros((capacity, ncols), dtype=np.int64))
        self.layout.append((arena, capacity))
        return arena

    def capacity(self, arena: int) -> int:
        return self._data[arena].shape[0]

    def slot_width(self, arena: int) -> int:
        return 8 * self._data[arena].shape[1]

    def load(self, arena: int, mat: np.ndarray) -> None:
        """Place an at-rest database relation; not part of the execution trace."""
        self._data[arena][: len(mat)] = mat

    def peek(self, arena: int) -> np.ndarray:
        return self._data[arena].copy()

    def release(self, arena: int) -> None:
        """Drop a scratch arena's backing store; its id stays in the layout log."""
        self._data[arena] = self._data[arena][:0]

    # -- single-slot access ---------------------------------------------------
    def _check(self, arena: int, lo: int, hi: int) -> None:
        cap = self._data[arena].shape[0]
        if lo < 0 or hi > cap:
            raise OutOfBounds(f"slots [{lo}, {hi}) outside arena {arena} of capacity {cap}")

    def read(self, arena: int, slot: int) -> np.ndarray:
        self._check(arena, slot, slot + 1)
        self.trace.append(encode_events(READ, arena, [slot]))
        return self._data[arena][slot].copy()

    def write(self, arena: int, slot: int, row) -> None:
        self._check(arena, slot, slot + 1)
        self.trace.append(encode_events(WRITE, arena, [slot]))
        self._data[arena][slot] = row

    # -- vectorized access patterns -------------------------------------------
    def scan(self, arena: int, n: int, start: int = 0) -> np.ndarray:
        """Read slots ``start .. start+n-1`` in order."""
        self._check(arena, start, start + n)
        self.trace.append(encode_events(READ, arena, np.arange(start, start + n)))
        return self._data[arena][start:start + n].copy()

    def fill(self, arena: int, start: int, rows: np.ndarray) -> None:
        """Write ``rows`` to consecutive slots from ``start``."""
        n = len(rows)
        self._check(arena, start, start + n)
        self.trace.append(encode_events(WRITE, arena, np.arange(start, start + n)))
        self._data[arena][start:start + n] = rows

    def stream(self, src: int, dst: int, n: int, fn: Callable[[np.ndarray], np.ndarray],
               src_start: int = 0, dst_start: int = 0) -> None:
        """For each i: read ``src[src_start+i]``, write ``fn`` of it to ``dst[dst_start+i]``."""
        self._check(src, src_start, src_start + n)
        self._check(dst, dst_start, dst_start + n)
        ev = np.empty((n, 2), dtype=np.int64)
        ev[:, 0] = encode_events(READ, src, np.arange(src_start, src_start + n))
        ev[:, 1] = encode_events(WRITE, dst, np.arange(dst_start, dst_start + n))
        self.trace.append(ev.ravel())
        out = fn(self._data[src][src_start:src_start + n].copy())
        self._data[dst][dst_start:dst_start + n] = out

    def zip_stream(self, a: int, b: int, dst: int, n: int,
                   fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> None:
        """For each i: read ``a[i]``, read ``b[i]``, write ``fn`` of the pair to ``dst[i]``."""
        self._check(a, 0, n)
        self._check(b, 0, n)
        self._check(dst, 0, n)
        idx = np.arange(n)
        ev = np.empty((n, 3), dtype=np.int64)
        ev[:, 0] = encode_events(READ, a, idx)
        ev[:, 1] = encode_events(READ, b, idx)
        ev[:, 2] = encode_events(WRITE, dst, idx)
        self.trace.append(ev.ravel())
        self._data[dst][:n] = fn(self._data[a][:n].copy(), self._data[b][:n].copy())

    def exchange_stage(self, arena: int, j: int, k: int,
                       swap: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]) -> None:
        """One stage of a bitonic network over the whole (power-of-two) arena.

        Slot ``i`` is paired with ``i ^ j`` for every ``i`` with bit ``j`` clear;
        pairs run in increasing ``i``. Each pair is read low then high and both
        slots are written back, swapped or not. ``swap(lo, hi, ascending)``
        returns the boolean mask of pairs to exchange.
        """
        data = self._data[arena]
        P, ncols = data.shape
        blocks = P // (2 * j)
        lo_idx = np.arange(P).reshape(blocks, 2, j)[:, 0, :].ravel()
        hi_idx = lo_idx + j
        ev = np.empty((len(lo_idx), 4), dtype=np.int64)
        ev[:, 0] = encode_events(READ, arena, lo_idx)
        ev[:, 1] = encode_events(READ, arena, hi_idx)
        ev[:, 2] = encode_events(WRITE, arena, lo_idx)
        ev[:, 3] = encode_events(WRITE, arena, hi_idx)
        self.trace.append(ev.ravel())

        view = data.reshape(blocks, 2, j, ncols)
        lo = view[:, 0].reshape(-1, ncols)
        hi = view[:, 1].reshape(-1, ncols)
        ascending = np.repeat(((np.arange(blocks) * 2 * j) & k) == 0, j)
        mask = swap(lo, hi, ascending)
        if mask.any():
            tmp = lo[mask].copy()
            lo[mask] = hi[mask]
            hi[mask] = tmp
            view[:, 0] = lo.reshape(blocks, j, ncols)
            view[:, 1] = hi.reshape(blocks, j, ncols)

    def fanout(self, src: int, dst: int, n: int, cum: np.ndarray, src_index: np.ndarray) -> None:
        """Step i reads ``src[i]`` then writes ``dst[cum[i] .. cum[i+1]-1]``.

        ``cum`` has ``n + 1`` entries and must itself be a function of public
        sizes only; ``src_index[t]`` names the record whose copy lands in output
        slot ``t`` (decided inside TM).
        """
        total = int(cum[-1]) if n else 0
        self._check(src, 0, n)
        self._check(dst, 0, total)
        ev = np.empty(n + total, dtype=np.int64)
        read_pos = np.arange(n) + cum[:n]
        is_read = np.zeros(n + total, dtype=bool)
        is_read[read_pos] = True
        ev[read_pos] = encode_events(READ, src, np.arange(n))
        ev[~is_read] = encode_events(WRITE, dst, np.arange(total))
        self.trace.append(ev)
        if total:
            self._data[dst][:total] = self._data[src][src_index]


class TmContext:
    """Capacity-accounted trusted scratchpad.

    Usage is measured in words, where a word holds either one scalar or one
    tuple register. Every primitive declares what it keeps resident.
    """

    def __init__(self, budget_words: int | None = None):
        self.budget_words = budget_words
        self.used = 0
        self.peak_usage = 0

    @staticmethod
    def default_budget(n_plus_m: int, c: int = DEFAULT_TM_CONSTANT) -> int:
        return c * math.ceil(math.log2(n_plus_m + 2))

    def alloc(self, words: int, what: str = "") -> None:
        self.used += words
        if self.budget_words is not None and self.used > self.budget_words:
            used = self.used
            self.used -= words
            raise TmBudgetExceeded(
                f"TM allocation of {words} words{' for ' + what if what else ''} "
                f"needs {used} > budget {self.budget_words}")
        if self.used > self.peak_usage:
            self.peak_usage = self.used

    def free(self, words: int) -> None:
        self.used -= words
        assert self.used >= 0, "TM accounting underflow"

    @contextmanager
    def hold(self, words: int, what: str = ""):
        self.alloc(words, what)
        try:
            yield
        finally:
            self.free(words)


class Session:
    """One query execution: a UM arena set, its trace, and a TM context."""

    def __init__(self, budget_words: int | None = None, trace_mode: str = "digest"):
        self.trace = Trace(trace_mode)
        self.mem = UntrustedMemory(self.trace)
        self.tm = TmContext(budget_words)
        self.counter_high_water = 0

    def load(self, schema: Schema, rows) -> RelHandle:
        return self.load_matrix(schema, schema.encode_rows(rows))

    def load_matrix(self, schema: Schema, mat: np.ndarray) -> RelHandle:
        if mat.shape[1:] != (schema.ncols,):
            raise ValueError(f"matrix shape {mat.shape} does not fit schema {schema.name}")
        arena = self.mem.alloc(schema.ncols, len(mat))
        self.mem.load(arena, mat)
        return RelHandle(schema, arena, len(mat), self)

    def new_relation(self, schema: Schema, length: int) -> RelHandle:
        return RelHandle(schema, self.mem.alloc(schema.ncols, length), length, self)

    def stats(self) -> dict:
        return {
            "um_accesses": self.trace.count,
            "tm_peak_words": self.tm.peak_usage,
            "tm_budget_words": self.tm.budget_words,
            "counter_high_water": self.counter_high_water,
            "arenas": len(self.mem.layout),
        }


def export_trace(session: Session, fh) -> None:
    """Write the layout header then one JSON object per event."""
    fh.write(json.dumps({"arenas": [list(x) for x in session.mem.layout]}) + "\n")
    codes = session.trace.codes()
    step = 1 << 16
    for start in range(0, len(codes), step):
        chunk = codes[start:start + step]
        ops = np.where(chunk & 1, "W", "R")
        arenas = (chunk >> _ARENA_SHIFT) & (MAX_ARENAS - 1)
        slots = chunk >> _SLOT_SHIFT
        fh.write("".join(f'{{"op":"{o}","arena":{a},"slot":{s}}}\n'
                         for o, a, s in zip(ops.tolist(), arenas.tolist(), slots.tolist())))


def read_trace(fh) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Inverse of :func:`export_trace`: returns the layout log and packed events."""
    header = json.loads(fh.readline())
    layout = [tuple(x) for x in header["arenas"]]
    codes = []
    for line in fh:
        if line.strip():
            ev = json.loads(line)
            codes.append((ev["slot"] << _SLOT_SHIFT) | (ev["arena"] << _ARENA_SHIFT)
                         | (WRITE if ev["op"] == "W" else READ))
    return layout, np.array(codes, dtype=np.int64)
