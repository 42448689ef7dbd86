"""Study data for cluster randomized trials: representation, CSV I/O, validation.

A study is stored column-wise. Per-cluster arrays (``cluster_ids``, ``z``)
have length J and per-unit arrays (``cluster``, ``d``, ``y``, ``x``) have
length N, where ``cluster[k]`` is the position of unit k's cluster.
"""
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

RESERVED = ("cluster_id", "z", "d", "y")


class DataValidationError(ValueError):
    """Raised when input data violate the study-data contract.

    ``rule`` is a short machine-readable tag naming the violated rule.
    """

    def __init__(self, rule, message):
        super().__init__(message)
        self.rule = rule


@dataclass(frozen=True)
class Unit:
    cluster_id: object
    d: int
    y: float
    x: tuple = ()


@dataclass(frozen=True)
class Cluster:
    id: object
    z: int
    units: tuple = ()


@dataclass(frozen=True)
class Violation:
    rule: str
    where: str
    message: str


@dataclass(frozen=True, eq=False)
class StudyData:
    cluster_ids: tuple
    z: np.ndarray
    cluster: np.ndarray
    d: np.ndarray
    y: np.ndarray
    x: np.ndarray
    covariate_names: tuple = ()
    sizes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        z = np.asarray(self.z)
        cluster = np.asarray(self.cluster, dtype=np.intp)
        d = np.asarray(self.d)
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(y), -1)
        if x.shape[0] != len(y) or len(d) != len(y) or len(cluster) != len(y):
            raise ValueError("per-unit arrays must share their length")
        if x.shape[1] != len(self.covariate_names):
            raise ValueError("covariate_names must name every column of x")
        if len(z) != len(self.cluster_ids):
            raise ValueError("z must have one entry per cluster")
        for name, arr in (("z", z), ("cluster", cluster), ("d", d), ("y", y), ("x", x)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "cluster_ids", tuple(self.cluster_ids))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        sizes = np.bincount(cluster, minlength=len(z))
        sizes.setflags(write=False)
        object.__setattr__(self, "sizes", sizes)

    @property
    def J(self):
        return len(self.z)

    @property
    def m(self):
        return int(np.sum(self.z == 1))

    @property
    def N(self):
        return len(self.y)

    @property
    def unit_z(self):
        """Assignment of each unit's cluster."""
        return self.z[self.cluster]

    @property
    def clusters(self):
        """The study as a tuple of :class:`Cluster` objects."""
        out = []
        for j, cid in enumerate(self.cluster_ids):
            idx = np.flatnonzero(self.cluster == j)
            units = tuple(
                Unit(cid, int(self.d[k]), float(self.y[k]), tuple(float(v) for v in self.x[k]))
                for k in idx
            )
            out.append(Cluster(cid, int(self.z[j]), units))
        return tuple(out)

    @classmethod
    def from_clusters(cls, clusters: Sequence[Cluster], covariate_names=()):
        ids, z, cl, d, y, x = [], [], [], [], [], []
        for j, c in enumerate(clusters):
            ids.append(c.id)
            z.append(c.z)
            for u in c.units:
                cl.append(j)
                d.append(u.d)
                y.append(u.y)
                x.append(u.x)
        p = len(covariate_names)
        return cls(tuple(ids), np.array(z, dtype=int), np.array(cl, dtype=np.intp),
                   np.array(d), np.array(y, dtype=float),
                   np.array(x, dtype=float).reshape(len(y), p), tuple(covariate_names))

    def design(self, covariates=None, intercept=True):
        """Covariate matrix, optionally restricted to ``covariates`` and with a
        leading column of ones."""
        if covariates is None:
            cols = self.x
        else:
            cols = self.x[:, [self.column_index(c) for c in covariates]]
        if intercept:
            cols = np.column_stack([np.ones(self.N), cols])
        return cols

    def column_index(self, name):
        try:
            return self.covariate_names.index(name)
        except ValueError:
            raise DataValidationError("missing-column", f"no covariate column named {name!r}") from None

    def covariate(self, name):
        return self.x[:, self.column_index(name)]

    def with_outcome(self, y):
        return StudyData(self.cluster_ids, self.z, self.cluster, self.d, y, self.x,
                         self.covariate_names)

    def with_assignment(self, z):
        return StudyData(self.cluster_ids, z, self.cluster, self.d, self.y, self.x,
                         self.covariate_names)

    def take_clusters(self, index):
        """New study made of the clusters at positions ``index`` (repeats allowed).

        Repeated clusters become distinct clusters named ``(original_id, k)``.
        """
        index = np.asarray(index, dtype=np.intp)
        order = np.argsort(self.cluster, kind="stable")
        starts = np.concatenate([[0], np.cumsum(self.sizes)])
        unit_idx = np.concatenate([order[starts[j]:starts[j + 1]] for j in index])
        new_cluster = np.repeat(np.arange(len(index)), self.sizes[index])
        ids = tuple((self.cluster_ids[j], k) for k, j in enumerate(index))
        return StudyData(ids, self.z[index], new_cluster, self.d[unit_idx], self.y[unit_idx],
                         self.x[unit_idx], self.covariate_names)


def validate(data: StudyData):
    """List every violated invariant of ``data``; empty when the data are usable."""
    out = []
    z = np.asarray(data.z)
    bad_z = np.flatnonzero(~np.isin(z, (0, 1)))
    for j in bad_z:
        out.append(Violation("non-binary-assignment", f"cluster {data.cluster_ids[j]!r}",
                             f"z={z[j]!r} is not 0/1"))
    for k in np.flatnonzero(~np.isin(data.d, (0, 1))):
        out.append(Violation("non-binary-receipt",
                             f"cluster {data.cluster_ids[data.cluster[k]]!r}, unit {k}",
                             f"d={data.d[k]!r} is not 0/1"))
    for k in np.flatnonzero(~np.isfinite(data.y)):
        out.append(Violation("non-finite-outcome",
                             f"cluster {data.cluster_ids[data.cluster[k]]!r}, unit {k}",
                             f"y={data.y[k]!r} is not finite"))
    bad_x = np.argwhere(~np.isfinite(data.x))
    for k, col in bad_x:
        out.append(Violation("non-finite-covariate",
                             f"cluster {data.cluster_ids[data.cluster[k]]!r}, unit {k}",
                             f"covariate {data.covariate_names[col]!r} is not finite"))
    for j in np.flatnonzero(data.sizes == 0):
        out.append(Violation("empty-cluster", f"cluster {data.cluster_ids[j]!r}",
                             "cluster has no units"))
    m = int(np.sum(z == 1))
    if m == 0 or m == data.J:
        arm = "control" if m == data.J else "treated"
        out.append(Violation("one-arm-empty", "study",
                             f"the {arm} arm has no clusters (J={data.J}, m={m})"))
    return out


def _parse_binary(value, column, line):
    try:
        v = float(value)
    except ValueError:
        raise DataValidationError(f"non-binary-{column}",
                                  f"line {line}: {column}={value!r} is not 0/1") from None
    if v not in (0.0, 1.0):
        raise DataValidationError(f"non-binary-{column}",
                                  f"line {line}: {column}={value!r} is not 0/1")
    return int(v)


def _parse_real(value, column, line):
    try:
        v = float(value)
    except ValueError:
        raise DataValidationError("non-numeric", f"line {line}: {column}={value!r} is not a number") from None
    if not math.isfinite(v):
        raise DataValidationError("non-finite", f"line {line}: {column}={value!r} is not finite")
    return v


def load_csv(path):
    """Read a one-row-per-unit CSV into :class:`StudyData`.

    The header must contain ``cluster_id``, ``z``, ``d`` and ``y``; every other
    column is a covariate, kept in file order. Clusters are numbered in order
    of first appearance.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise DataValidationError("empty-file", f"{path}: file is empty")
        header = [h.strip() for h in header]
        missing = [c for c in RESERVED if c not in header]
        if missing:
            raise DataValidationError("missing-column", f"{path}: missing column(s) {missing}")
        pos = {c: header.index(c) for c in RESERVED}
        cov_pos = [i for i, h in enumerate(header) if h not in RESERVED]
        cov_names = tuple(header[i] for i in cov_pos)

        index_of, ids, z = {}, [], []
        cl, d, y, x = [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataValidationError("ragged-row", f"line {line}: expected {len(header)} fields, got {len(row)}")
            if any(not c.strip() for c in row):
                raise DataValidationError("empty-cell", f"line {line}: empty cell")
            cid = row[pos["cluster_id"]].strip()
            zi = _parse_binary(row[pos["z"]], "assignment", line)
            if cid not in index_of:
                index_of[cid] = len(ids)
                ids.append(cid)
                z.append(zi)
            elif z[index_of[cid]] != zi:
                raise DataValidationError("inconsistent-assignment",
                                          f"line {line}: inconsistent assignment within cluster {cid!r}")
            cl.append(index_of[cid])
            d.append(_parse_binary(row[pos["d"]], "receipt", line))
            y.append(_parse_real(row[pos["y"]], "y", line))
            x.append([_parse_real(row[i], header[i], line) for i in cov_pos])
    if not y:
        raise DataValidationError("empty-file", f"{path}: no data rows")
    return StudyData(tuple(ids), np.array(z, dtype=int), np.array(cl, dtype=np.intp),
                     np.array(d, dtype=int), np.array(y, dtype=float),
                     np.array(x, dtype=float).reshape(len(y), len(cov_names)), cov_names)


def write_csv(data: StudyData, path):
    """Write ``data`` in the format read by :func:`load_csv`."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(RESERVED) + list(data.covariate_names))
        for k in range(data.N):
            j = data.cluster[k]
            cid = data.cluster_ids[j]
            if isinstance(cid, tuple):
                cid = "_".join(str(p) for p in cid)
            w.writerow([cid, int(data.z[j]), int(data.d[k]), repr(float(data.y[k]))]
                       + [repr(float(v)) for v in data.x[k]])
