"""Embedding and label tables.

Embeddings are CSV files with header ``id,dim0,...,dim{D-1}``; labels are
CSV files with header ``id,label``.  Floats are written with 17 significant
digits so that a save/parse roundtrip is bit-exact.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadValue, DuplicateId, ParseError

FLOAT_FMT = ".17g"


def _check_ids(ids):
    seen = set()
    for id_ in ids:
        if not isinstance(id_, str) or not id_:
            raise ParseError(f"ids must be non-empty strings, got {id_!r}")
        if id_ in seen:
            raise DuplicateId(id_)
        seen.add(id_)


@dataclass(frozen=True)
class EmbeddingSet:
    """``n`` row vectors in R^D with stable string ids (row i <-> ids[i])."""

    ids: list
    vectors: np.ndarray
    source_tag: str = ""

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=float)
        if vectors.ndim != 2 or vectors.shape[1] < 1:
            raise ParseError(f"vectors must be an n x D matrix with D >= 1, got shape {vectors.shape}")
        if len(self.ids) != vectors.shape[0]:
            raise ParseError(f"{len(self.ids)} ids for {vectors.shape[0]} rows")
        _check_ids(self.ids)
        bad = np.argwhere(~np.isfinite(vectors))
        if len(bad):
            r, c = bad[0]
            raise BadValue("non-finite value", row=int(r) + 1, col=int(c))
        vectors.setflags(write=False)
        object.__setattr__(self, "ids", list(self.ids))
        object.__setattr__(self, "vectors", vectors)

    @property
    def n(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def index_of(self):
        return {id_: i for i, id_ in enumerate(self.ids)}

    def subset(self, ids):
        """Rows for ``ids`` in the given order."""
        lookup = self.index_of()
        rows = [lookup[i] for i in ids]
        return EmbeddingSet(list(ids), self.vectors[rows], self.source_tag)


@dataclass(frozen=True)
class LabelVector:
    ids: list
    labels: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.ids) != len(self.labels):
            raise ParseError(f"{len(self.ids)} ids for {len(self.labels)} labels")
        _check_ids(self.ids)
        for lab in self.labels:
            if int(lab) != lab or lab < 0:
                raise ParseError(f"labels must be non-negative integers, got {lab!r}")
        object.__setattr__(self, "ids", list(self.ids))
        object.__setattr__(self, "labels", [int(x) for x in self.labels])

    def __len__(self):
        return len(self.ids)

    def as_dict(self):
        return dict(zip(self.ids, self.labels))


def _parse_float(text, row, col):
    try:
        value = float(text)
    except ValueError:
        raise BadValue(f"not a number: {text!r}", row=row, col=col) from None
    if not math.isfinite(value):
        raise BadValue("non-finite value", row=row, col=col)
    return value


def read_matrix_csv(path, id_column="id"):
    """Read an ``id,<col0>,<col1>,...`` table; returns (ids, matrix, header).

    Data rows are numbered from 1 in error messages.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row") from None
        if not header or header[0].strip() != id_column:
            raise ParseError(f"{path}: first header column must be {id_column!r}")
        width = len(header)
        ids, rows = [], []
        seen = set()
        for r, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != width:
                raise ParseError(f"expected {width} fields, got {len(rec)}", row=r)
            id_ = rec[0].strip()
            if not id_:
                raise ParseError("empty id", row=r)
            if id_ in seen:
                raise DuplicateId(id_)
            seen.add(id_)
            ids.append(id_)
            rows.append([_parse_float(t, r, c) for c, t in enumerate(rec[1:])])
    matrix = np.array(rows, dtype=float).reshape(len(rows), width - 1)
    return ids, matrix, header


def write_matrix_csv(path, ids, matrix, prefix="c", header=None):
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    if header is None:
        header = ["id"] + [f"{prefix}{j}" for j in range(matrix.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for id_, row in zip(ids, matrix):
            w.writerow([id_] + [format(float(v), FLOAT_FMT) for v in row])


def parse_embedding_table(path, expected_dim=None, source_tag=None):
    ids, vectors, _ = read_matrix_csv(path)
    if vectors.shape[1] < 1:
        raise ParseError(f"{path}: no dimension columns")
    if expected_dim is not None and vectors.shape[1] != expected_dim:
        raise ParseError(f"{path}: expected D={expected_dim}, file has D={vectors.shape[1]}")
    return EmbeddingSet(ids, vectors, str(path) if source_tag is None else source_tag)


def save_embedding_table(path, emb):
    write_matrix_csv(path, emb.ids, emb.vectors, prefix="dim")


def parse_labels(path, column="label"):
    ids, labels = [], []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row") from None
        if len(header) != 2 or header[0] != "id":
            raise ParseError(f"{path}: header must be 'id,{column}'")
        for r, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != 2:
                raise ParseError(f"expected 2 fields, got {len(rec)}", row=r)
            id_, text = rec[0].strip(), rec[1].strip()
            if id_ in seen:
                raise DuplicateId(id_)
            seen.add(id_)
            if not text.isdigit():
                raise ParseError(f"label must be a non-negative integer, got {text!r}", row=r)
            ids.append(id_)
            labels.append(int(text))
    return LabelVector(ids, labels)


def save_labels(path, labels, column="label"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", column])
        for id_, lab in zip(labels.ids, labels.labels):
            w.writerow([id_, int(lab)])


def resolve(base, path):
    path = Path(path)
    return path if path.is_absolute() else Path(base) / path
