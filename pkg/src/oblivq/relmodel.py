"""Schemas, values, tuples and relation handles.

Every relation instance lives in one untrusted-memory arena as a sequence of
fixed-width slots. A slot is a row of signed 64-bit words; each attribute owns a
contiguous run of words:

* ``int`` attribute: ``[present, value]``
* ``str`` attribute: ``[present, w_1 .. w_k]`` with the UTF-8 bytes packed
  big-endian, seven bytes per word, zero padded.

Seven-byte packing keeps every word non-negative, so comparing the word vectors
lexicographically as signed integers reproduces byte-wise string order. The
leading ``present`` word puts Null below every non-null value.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import DomainMismatch, ParseError, UnknownAttribute

INT = "int"
STR = "str"
DEFAULT_STR_WIDTH = 32
INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_BYTES_PER_WORD = 7


def value_key(v: Any) -> tuple:
    """Sort key realising the Value order Null < Int < Str."""
    if v is None:
        return (0,)
    if isinstance(v, bool):
        raise TypeError("bool is not a supported value")
    if isinstance(v, int):
        return (1, v)
    if isinstance(v, str):
        return (2, v.encode("utf-8"))
    raise TypeError(f"unsupported value {v!r}")


def is_internal(name: str) -> bool:
    """Bookkeeping attributes carry a ``#`` prefix that user names cannot use."""
    return name.startswith("#")


@dataclass(frozen=True)
class Attribute:
    name: str
    domain: str = INT
    width: int = 8

    def __post_init__(self):
        if self.domain not in (INT, STR):
            raise DomainMismatch(f"unknown domain {self.domain!r} for {self.name}")
        if self.domain == STR and self.width <= 0:
            raise DomainMismatch(f"string width must be positive for {self.name}")

    @property
    def ncols(self) -> int:
        if self.domain == INT:
            return 2
        return 1 + math.ceil(self.width / _BYTES_PER_WORD)

    def compatible(self, other: "Attribute") -> bool:
        return self.domain == other.domain and (self.domain == INT or self.width == other.width)


def int_attr(name: str) -> Attribute:
    return Attribute(name, INT, 8)


def str_attr(name: str, width: int = DEFAULT_STR_WIDTH) -> Attribute:
    return Attribute(name, STR, width)


@dataclass(frozen=True)
class ForeignKey:
    attrs: tuple[str, ...]
    ref: str


@dataclass(frozen=True)
class Schema:
    name: str
    attrs: tuple[Attribute, ...]
    key: tuple[str, ...] | None = None
    foreign_keys: tuple[ForeignKey, ...] = ()
    _offsets: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        names = [a.name for a in self.attrs]
        if len(set(names)) != len(names):
            raise DomainMismatch(f"duplicate attribute names in schema {self.name}: {names}")
        for n in names:
            if not (is_internal(n) or _NAME_RE.match(n)):
                raise DomainMismatch(f"invalid attribute name {n!r}")
        for n in self.key or ():
            if n not in names:
                raise UnknownAttribute(f"key attribute {n!r} not in {self.name}")
        for fk in self.foreign_keys:
            for n in fk.attrs:
                if n not in names:
                    raise UnknownAttribute(f"foreign key attribute {n!r} not in {self.name}")
        offsets, pos = {}, 0
        for a in self.attrs:
            offsets[a.name] = (pos, pos + a.ncols)
            pos += a.ncols
        object.__setattr__(self, "_offsets", offsets)

    @classmethod
    def of(cls, name: str, *attrs: Attribute | str, key=None, foreign_keys=()) -> "Schema":
        """Shorthand: bare strings become int attributes."""
        built = tuple(int_attr(a) if isinstance(a, str) else a for a in attrs)
        fks = tuple(fk if isinstance(fk, ForeignKey) else ForeignKey(tuple(fk[0]), fk[1])
                    for fk in foreign_keys)
        return cls(name, built, tuple(key) if key else None, fks)

    # -- structure -----------------------------------------------------------
    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attrs)

    @property
    def arity(self) -> int:
        return len(self.attrs)

    @property
    def ncols(self) -> int:
        return sum(a.ncols for a in self.attrs)

    @property
    def slot_width(self) -> int:
        return 8 * self.ncols

    def __contains__(self, name: str) -> bool:
        return name in self._offsets

    def attr(self, name: str) -> Attribute:
        for a in self.attrs:
            if a.name == name:
                return a
        raise UnknownAttribute(f"{name!r} not in schema {self.name}{list(self.names)}")

    def require(self, names: Iterable[str]) -> None:
        for n in names:
            if n not in self._offsets:
                raise UnknownAttribute(f"{n!r} not in schema {self.name}{list(self.names)}")

    def span(self, name: str) -> tuple[int, int]:
        try:
            return self._offsets[name]
        except KeyError:
            raise UnknownAttribute(f"{name!r} not in schema {self.name}{list(self.names)}") from None

    def cols(self, names: Iterable[str]) -> list[int]:
        out: list[int] = []
        for n in names:
            lo, hi = self.span(n)
            out.extend(range(lo, hi))
        return out

    def project(self, names: Iterable[str], name: str | None = None) -> "Schema":
        wanted = set(names)
        self.require(wanted)
        return Schema(name or self.name, tuple(a for a in self.attrs if a.name in wanted))

    def drop(self, names: Iterable[str]) -> "Schema":
        gone = set(names)
        return Schema(self.name, tuple(a for a in self.attrs if a.name not in gone))

    def extend(self, *attrs: Attribute) -> "Schema":
        for a in attrs:
            if a.name in self:
                raise DomainMismatch(f"attribute {a.name!r} already in schema {self.name}")
        return Schema(self.name, self.attrs + tuple(attrs), self.key, self.foreign_keys)

    def rename(self, mapping: dict[str, str]) -> "Schema":
        self.require(mapping)
        return Schema(self.name, tuple(Attribute(mapping.get(a.name, a.name), a.domain, a.width)
                                       for a in self.attrs))

    def union(self, other: "Schema", name: str | None = None) -> "Schema":
        extra = []
        for a in other.attrs:
            if a.name in self:
                if not self.attr(a.name).compatible(a):
                    raise DomainMismatch(f"attribute {a.name!r} has different domains")
            else:
                extra.append(a)
        return Schema(name or self.name, self.attrs + tuple(extra))

    def shared(self, other: "Schema") -> tuple[str, ...]:
        return tuple(n for n in self.names if n in other)

    def user_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if not is_internal(n))

    # -- encoding ------------------------------------------------------------
    def encode_value(self, attr: Attribute, v: Any) -> list[int]:
        if v is None:
            return [0] * attr.ncols
        if attr.domain == INT:
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise DomainMismatch(f"{attr.name}: expected int, got {v!r}")
            v = int(v)
            if not INT64_MIN <= v <= INT64_MAX:
                raise OverflowError(f"{attr.name}: {v} outside signed 64-bit range")
            return [1, v]
        if not isinstance(v, str):
            raise DomainMismatch(f"{attr.name}: expected str, got {v!r}")
        raw = v.encode("utf-8")
        if len(raw) > attr.width:
            raise ParseError(f"{attr.name}: string of {len(raw)} bytes exceeds width {attr.width}")
        if b"\x00" in raw:
            raise ParseError(f"{attr.name}: NUL bytes are not allowed")
        raw = raw.ljust((attr.ncols - 1) * _BYTES_PER_WORD, b"\x00")
        words = [int.from_bytes(raw[i:i + _BYTES_PER_WORD], "big")
                 for i in range(0, len(raw), _BYTES_PER_WORD)]
        return [1, *words]

    def encode_rows(self, rows: Iterable[Sequence[Any]]) -> np.ndarray:
        encoded = []
        for row in rows:
            if len(row) != self.arity:
                raise DomainMismatch(f"row {row!r} has arity {len(row)}, schema {self.name} has {self.arity}")
            words: list[int] = []
            for a, v in zip(self.attrs, row):
                words.extend(self.encode_value(a, v))
            encoded.append(words)
        if not encoded:
            return np.zeros((0, self.ncols), dtype=np.int64)
        return np.array(encoded, dtype=np.int64)

    def decode_rows(self, mat: np.ndarray) -> list[tuple]:
        out = []
        for row in mat.tolist():
            vals = []
            for a in self.attrs:
                lo, hi = self._offsets[a.name]
                if row[lo] == 0:
                    vals.append(None)
                elif a.domain == INT:
                    vals.append(row[lo + 1])
                else:
                    raw = b"".join(w.to_bytes(_BYTES_PER_WORD, "big") for w in row[lo + 1:hi])
                    vals.append(raw.rstrip(b"\x00").decode("utf-8"))
            out.append(tuple(vals))
        return out


@dataclass(frozen=True)
class Tuple:
    """A tuple over named attributes; plain values (None, int, str)."""

    attrs: tuple[str, ...]
    values: tuple

    def __post_init__(self):
        if len(self.attrs) != len(self.values):
            raise DomainMismatch("tuple arity does not match its attribute list")

    def __getitem__(self, name: str):
        try:
            return self.values[self.attrs.index(name)]
        except ValueError:
            raise UnknownAttribute(f"{name!r} not in tuple attributes {list(self.attrs)}") from None

    def as_dict(self) -> dict:
        return dict(zip(self.attrs, self.values))


def restrict(t: Tuple, attrs: Iterable[str]) -> Tuple:
    """``t[attrs]``: the tuple restricted to ``attrs``, kept in ``t``'s attribute order."""
    wanted = set(attrs)
    missing = wanted.difference(t.attrs)
    if missing:
        raise UnknownAttribute(f"{sorted(missing)} not in tuple attributes {list(t.attrs)}")
    keep = [i for i, a in enumerate(t.attrs) if a in wanted]
    return Tuple(tuple(t.attrs[i] for i in keep), tuple(t.values[i] for i in keep))


def normalize_key(key) -> list[tuple[str, bool]]:
    """Accept ``["A", ("B", "desc")]`` style keys; returns ``[(name, descending)]``."""
    out = []
    for item in key:
        if isinstance(item, str):
            out.append((item, False))
        else:
            name, direction = item
            if isinstance(direction, bool):
                out.append((name, direction))
            elif direction in ("asc", "desc"):
                out.append((name, direction == "desc"))
            else:
                raise ValueError(f"bad sort direction {direction!r}")
    return out


def tuple_compare(t1: Tuple, t2: Tuple, key) -> int:
    """Lexicographic comparison under the Value order; -1, 0 or 1."""
    for name, desc in normalize_key(key):
        a, b = value_key(t1[name]), value_key(t2[name])
        if a != b:
            c = -1 if a < b else 1
            return -c if desc else c
    return 0


class RelHandle:
    """A relation instance resident in one untrusted-memory arena."""

    __slots__ = ("schema", "arena", "len", "session")

    def __init__(self, schema: Schema, arena: int, length: int, session):
        self.schema = schema
        self.arena = arena
        self.len = length
        self.session = session

    def __len__(self) -> int:
        return self.len

    def __repr__(self) -> str:
        return f"RelHandle({self.schema.name}{list(self.schema.names)}, arena={self.arena}, len={self.len})"

    def matrix(self) -> np.ndarray:
        """Raw slot contents, read outside the trace (client-side decryption)."""
        return self.session.mem.peek(self.arena)[: self.len]

    def rows(self, attrs: Sequence[str] | None = None) -> list[tuple]:
        rows = self.schema.decode_rows(self.matrix())
        if attrs is None:
            return rows
        idx = [self.schema.names.index(a) for a in attrs]
        return [tuple(r[i] for i in idx) for r in rows]

    def tuples(self) -> list[Tuple]:
        names = self.schema.names
        return [Tuple(names, r) for r in self.rows()]
