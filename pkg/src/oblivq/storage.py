"""On-disk databases: CSV ingestion into fixed-width relation files plus a manifest.

Schema file (JSON)::

    {"R": {"attrs": ["A", {"name": "N", "type": "str", "width": 16}],
           "key": ["A"], "foreign_keys": [{"attrs": ["A"], "ref": "S"}]}}

A bare attribute name means an int attribute. Each relation is stored as
``<name>.bin``, the raw little-endian int64 words of its encoded slots, and
``manifest.json`` records schemas, row counts and SHA-256 checksums.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import DomainMismatch, ParseError
from .relmodel import INT, STR, Attribute, ForeignKey, Schema

MANIFEST = "manifest.json"


def schema_from_json(name: str, obj: Mapping) -> Schema:
    attrs = []
    for a in obj["attrs"]:
        if isinstance(a, str):
            attrs.append(Attribute(a, INT, 8))
        else:
            dom = a.get("type", INT)
            attrs.append(Attribute(a["name"], dom, int(a.get("width", 8 if dom == INT else 32))))
    fks = tuple(ForeignKey(tuple(fk["attrs"]), fk["ref"]) for fk in obj.get("foreign_keys", ()))
    key = obj.get("key")
    return Schema(name, tuple(attrs), tuple(key) if key else None, fks)


def schema_to_json(schema: Schema) -> dict:
    out: dict[str, Any] = {"attrs": [{"name": a.name, "type": a.domain, "width": a.width} for a in schema.attrs]}
    if schema.key:
        out["key"] = list(schema.key)
    if schema.foreign_keys:
        out["foreign_keys"] = [{"attrs": list(fk.attrs), "ref": fk.ref} for fk in schema.foreign_keys]
    return out


def load_schemas(path) -> dict[str, Schema]:
    with open(path) as fh:
        obj = json.load(fh)
    return {name: schema_from_json(name, spec) for name, spec in obj.items()}


def _parse_cell(attr: Attribute, text: str, where: str):
    if text == "":
        return None
    if attr.domain == STR:
        return text
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{where}: {text!r} is not an integer") from None


def read_csv(path, schema: Schema) -> list[tuple]:
    """Rows of one CSV file; the header must name exactly the schema's attributes."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row") from None
        if sorted(header) != sorted(schema.names):
            raise ParseError(f"{path}: header {header} does not match attributes {list(schema.names)}")
        order = [header.index(n) for n in schema.names]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            row = []
            for a, k in zip(schema.attrs, order):
                where = f"{path}:{lineno}, column {a.name}"
                v = _parse_cell(a, rec[k], where)
                try:
                    schema.encode_value(a, v)
                except (ParseError, DomainMismatch, OverflowError) as exc:
                    raise ParseError(f"{path}:{lineno}: {exc}") from None
                row.append(v)
            rows.append(tuple(row))
    return rows


def write_database(out_dir, relations: Mapping[str, tuple[Schema, list]]) -> dict:
    """Encode and store relations; returns the manifest written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"relations": {}}
    for name in sorted(relations):
        schema, rows = relations[name]
        raw = schema.encode_rows(rows).astype("<i8").tobytes()
        (out / f"{name}.bin").write_bytes(raw)
        manifest["relations"][name] = {"schema": schema_to_json(schema), "rows": len(rows),
                                       "words_per_slot": schema.ncols,
                                       "sha256": hashlib.sha256(raw).hexdigest()}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def ingest(csv_dir, schema_file, out_dir) -> dict:
    """Read ``<name>.csv`` for every relation in the schema file and store the database."""
    schemas = load_schemas(schema_file)
    rels = {}
    for name, schema in schemas.items():
        path = Path(csv_dir) / f"{name}.csv"
        if not path.exists():
            raise ParseError(f"missing CSV for relation {name}: {path}")
        rels[name] = (schema, read_csv(path, schema))
    return write_database(out_dir, rels)


def read_manifest(db_dir) -> dict[str, Schema]:
    """Schemas only; never opens the relation files."""
    path = Path(db_dir) / MANIFEST
    if not path.exists():
        raise ParseError(f"no manifest in {db_dir}")
    obj = json.loads(path.read_text())
    return {name: schema_from_json(name, meta["schema"]) for name, meta in obj["relations"].items()}


def load_matrices(db_dir) -> dict[str, tuple[Schema, np.ndarray]]:
    db_dir = Path(db_dir)
    obj = json.loads((db_dir / MANIFEST).read_text())
    out = {}
    for name, meta in obj["relations"].items():
        schema = schema_from_json(name, meta["schema"])
        raw = (db_dir / f"{name}.bin").read_bytes()
        if hashlib.sha256(raw).hexdigest() != meta["sha256"]:
            raise ParseError(f"{name}.bin does not match its manifest checksum")
        mat = np.frombuffer(raw, dtype="<i8").astype(np.int64).reshape(meta["rows"], schema.ncols)
        out[name] = (schema, mat)
    return out


def load_database(db_dir) -> dict[str, tuple[Schema, list[tuple]]]:
    """Decoded rows per relation, the form the oracle and generators use."""
    return {name: (schema, schema.decode_rows(mat)) for name, (schema, mat) in load_matrices(db_dir).items()}
