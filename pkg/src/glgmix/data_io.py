"""Long-format CSV ingestion, per-cluster design assembly, and model specs.

A dataset is a sequence of clusters, each holding a count vector, the
matching design rows, and per-row log-exposure offsets.  The reader is
deliberately small: covariates must already be numeric, interactions are
elementwise products of two columns, and the only transform applied is the
optional intercept column of ones.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    DataFormatError,
    DomainError,
    EmptyFileError,
    FieldParseError,
    MissingColumnError,
    RaggedRowError,
    ResponseValueError,
)

INTERCEPT_NAME = "intercept"


def _interaction_name(a, b):
    return f"{a}:{b}"


@dataclass(frozen=True)
class ModelSpec:
    """Mapping from CSV columns to a regression design.

    ``interactions`` lists pairs of column names whose elementwise product
    becomes an extra design column; ``offset`` names a column entering the
    linear predictor with coefficient fixed at 1.  Categorical covariates
    must be pre-encoded numerically.
    """

    response: str
    cluster: str
    covariates: tuple = ()
    interactions: tuple = ()
    offset: str | None = None
    add_intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(
            self, "interactions", tuple((a, b) for a, b in self.interactions)
        )
        names = self.design_names()
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise DataFormatError(f"duplicate design terms: {dupes}")

    def design_names(self):
        """Design column names, in matrix order."""
        names = [INTERCEPT_NAME] if self.add_intercept else []
        names.extend(self.covariates)
        names.extend(_interaction_name(a, b) for a, b in self.interactions)
        return tuple(names)

    def required_columns(self):
        """CSV columns the spec needs, first appearance order, no repeats."""
        cols = [self.response, self.cluster, *self.covariates]
        for a, b in self.interactions:
            cols.extend((a, b))
        if self.offset is not None:
            cols.append(self.offset)
        return tuple(dict.fromkeys(cols))

    def to_mapping(self):
        """JSON-ready dict with the documented keys."""
        return {
            "response": self.response,
            "cluster": self.cluster,
            "covariates": list(self.covariates),
            "interactions": [list(pair) for pair in self.interactions],
            "offset": self.offset,
            "intercept": self.add_intercept,
        }

    @classmethod
    def from_mapping(cls, obj):
        """Build a spec from a dict with keys response, cluster, covariates,
        interactions, offset, intercept (the last four optional)."""
        if not isinstance(obj, dict):
            raise DataFormatError("model spec must be a JSON object")
        known = {"response", "cluster", "covariates", "interactions", "offset", "intercept"}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise DataFormatError(f"unknown model spec keys: {unknown}")
        for key in ("response", "cluster"):
            if not isinstance(obj.get(key), str) or not obj[key]:
                raise DataFormatError(f"model spec key {key!r} must be a nonempty string")
        interactions = obj.get("interactions", ())
        try:
            interactions = tuple((a, b) for a, b in interactions)
        except (TypeError, ValueError):
            raise DataFormatError("interactions must be a list of column-name pairs") from None
        return cls(
            response=obj["response"],
            cluster=obj["cluster"],
            covariates=tuple(obj.get("covariates", ())),
            interactions=interactions,
            offset=obj.get("offset"),
            add_intercept=bool(obj.get("intercept", True)),
        )

    @classmethod
    def from_json_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"invalid model spec JSON: {exc}") from exc
        return cls.from_mapping(obj)


@dataclass(frozen=True)
class ClusterData:
    """One cluster's counts, design rows, and log-exposure offsets."""

    id: str
    y: np.ndarray
    X: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.int64)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        offset = np.asarray(self.offset, dtype=float)
        if y.ndim != 1 or y.size < 1:
            raise DomainError(f"cluster {self.id!r}: y must be a nonempty vector")
        if np.any(y < 0):
            raise DomainError(f"cluster {self.id!r}: counts must be nonnegative")
        if X.shape != (y.size, X.shape[1]) or X.shape[1] < 1:
            raise DomainError(f"cluster {self.id!r}: X must be ({y.size}, p) with p >= 1")
        if offset.shape != (y.size,):
            raise DomainError(f"cluster {self.id!r}: offset length must match y")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(offset))):
            raise DomainError(f"cluster {self.id!r}: X and offset must be finite")
        for name, arr in (("y", y), ("X", X), ("offset", offset)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def m(self):
        """Number of observations in the cluster."""
        return self.y.size

    @property
    def p(self):
        """Number of design columns."""
        return self.X.shape[1]


@dataclass(frozen=True)
class Dataset:
    """An immutable collection of clusters sharing one design layout."""

    clusters: tuple
    column_names: tuple

    def __post_init__(self):
        clusters = tuple(self.clusters)
        names = tuple(str(n) for n in self.column_names)
        if not clusters:
            raise DomainError("dataset needs at least one cluster")
        ids = [c.id for c in clusters]
        if len(set(ids)) != len(ids):
            raise DomainError("cluster ids must be unique")
        p = clusters[0].p
        if any(c.p != p for c in clusters):
            raise DomainError("all clusters must share the same design width")
        if len(names) != p:
            raise DomainError(f"expected {p} column names, got {len(names)}")
        object.__setattr__(self, "clusters", clusters)
        object.__setattr__(self, "column_names", names)

    @property
    def n_clusters(self):
        return len(self.clusters)

    @property
    def n_obs(self):
        return sum(c.m for c in self.clusters)

    @property
    def p(self):
        return len(self.column_names)


def _parse_count(text, row, column):
    s = text.strip()
    try:
        value = int(s)
    except ValueError:
        raise ResponseValueError(
            f"response must be a nonnegative integer, got {text!r}", row=row, column=column
        ) from None
    if value < 0:
        raise ResponseValueError(
            f"response must be nonnegative, got {value}", row=row, column=column
        )
    return value


def _parse_number(text, row, column):
    try:
        value = float(text)
    except ValueError:
        raise FieldParseError(
            f"could not parse {text!r} as a number", row=row, column=column
        ) from None
    if not np.isfinite(value):
        raise FieldParseError(f"non-finite value {text!r}", row=row, column=column)
    return value


def read_csv(path, spec):
    """Read a long-format CSV into a :class:`Dataset` under ``spec``.

    Rows are grouped by the cluster column, keeping file order within each
    cluster and first-appearance order across clusters.  The result is a
    pure function of the file bytes and the spec.

    Raises
    ------
    EmptyFileError, MissingColumnError, RaggedRowError,
    ResponseValueError, FieldParseError
        Each names the offending row (1-based, header = row 1) and column.
    """
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header == []:
            raise EmptyFileError("file is empty: no header row")
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise DataFormatError(f"duplicate column names in header: {header}", row=1)
        index = {name: i for i, name in enumerate(header)}

        missing = [c for c in spec.required_columns() if c not in index]
        if missing:
            raise MissingColumnError(
                f"column(s) not in header: {missing}", row=1, column=missing[0]
            )

        numeric_cols = [c for c in spec.required_columns()
                        if c not in (spec.response, spec.cluster)]
        groups = {}  # cluster id -> list of (y, design row, offset)
        n_fields = len(header)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue  # blank line
            if len(row) != n_fields:
                raise RaggedRowError(
                    f"expected {n_fields} fields, got {len(row)}", row=line
                )
            y = _parse_count(row[index[spec.response]], line, spec.response)
            cid = row[index[spec.cluster]].strip()
            values = {c: _parse_number(row[index[c]], line, c) for c in numeric_cols}
            xrow = [1.0] if spec.add_intercept else []
            xrow.extend(values[c] for c in spec.covariates)
            xrow.extend(values[a] * values[b] for a, b in spec.interactions)
            off = values[spec.offset] if spec.offset is not None else 0.0
            groups.setdefault(cid, []).append((y, xrow, off))

    if not groups:
        raise EmptyFileError("file has a header but no data rows")

    clusters = tuple(
        ClusterData(
            id=cid,
            y=np.array([r[0] for r in rows], dtype=np.int64),
            X=np.array([r[1] for r in rows], dtype=float),
            offset=np.array([r[2] for r in rows], dtype=float),
        )
        for cid, rows in groups.items()
    )
    return Dataset(clusters=clusters, column_names=spec.design_names())


# Reserved header names used by write_csv.
_WRITE_RESPONSE = "y"
_WRITE_CLUSTER = "cluster"
_WRITE_OFFSET = "offset"


def write_csv(dataset, path):
    """Write ``dataset`` in the format :func:`read_csv` understands.

    Design columns are written verbatim (the intercept column included), so
    the returned :class:`ModelSpec` re-reads the file into a structurally
    identical dataset: same ids, counts, design, and offsets.
    """
    reserved = {_WRITE_RESPONSE, _WRITE_CLUSTER, _WRITE_OFFSET}
    clash = sorted(reserved & set(dataset.column_names))
    if clash:
        raise DataFormatError(f"design column names collide with reserved names: {clash}")

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([_WRITE_CLUSTER, _WRITE_RESPONSE, *dataset.column_names, _WRITE_OFFSET])
        for c in dataset.clusters:
            for j in range(c.m):
                # repr() keeps the full float precision for exact round-trips
                writer.writerow(
                    [c.id, int(c.y[j]), *(repr(float(v)) for v in c.X[j]), repr(float(c.offset[j]))]
                )
    return ModelSpec(
        response=_WRITE_RESPONSE,
        cluster=_WRITE_CLUSTER,
        covariates=dataset.column_names,
        offset=_WRITE_OFFSET,
        add_intercept=False,
    )


def ungroup(dataset):
    """Regroup so every observation is its own (singleton) cluster.

    Turns a clustered dataset into the independence layout used by the
    univariate negative binomial fit.  New ids extend the old ones with a
    running observation counter, so they stay unique.
    """
    clusters = []
    k = 0
    for c in dataset.clusters:
        for j in range(c.m):
            k += 1
            clusters.append(
                ClusterData(
                    id=f"{c.id}#{k}",
                    y=c.y[j : j + 1],
                    X=c.X[j : j + 1],
                    offset=c.offset[j : j + 1],
                )
            )
    return Dataset(clusters=tuple(clusters), column_names=dataset.column_names)
