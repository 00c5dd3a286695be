"""Multi-graph adjacency construction and spatial autocorrelation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .errors import (
    DuplicateStation,
    MissingField,
    SchemaError,
    ShapeMismatch,
    ZeroDistance,
    ZeroVariance,
    ZeroWeightSum,
)

KINDS = ("Con", "Net", "Euc", "Func")


@dataclass
class StationTable:
    """Station metadata.

    ``edges`` is a list of ``(src_id, dst_id, network_distance_m)``; it
    defines both direct connectivity and the network used for shortest paths.
    """

    station_ids: list
    coords: np.ndarray | None = None
    edges: list = field(default_factory=list)
    functional: np.ndarray | None = None
    functional_names: list = field(default_factory=list)

    def __post_init__(self):
        self.station_ids = [str(s) for s in self.station_ids]
        if len(set(self.station_ids)) != len(self.station_ids):
            seen = set()
            dup = next(s for s in self.station_ids if s in seen or seen.add(s))
            raise DuplicateStation(f"station id {dup!r} appears more than once")
        n = len(self.station_ids)
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.float64)
            if self.coords.shape != (n, 2):
                raise ShapeMismatch(f"coords must be ({n}, 2), got {self.coords.shape}")
        if self.functional is not None:
            self.functional = np.asarray(self.functional, dtype=np.float64)
            if self.functional.ndim != 2 or self.functional.shape[0] != n:
                raise ShapeMismatch("functional vectors must be one row per station")
        index = self.index
        for src, dst, dist in self.edges:
            if str(src) not in index or str(dst) not in index:
                raise MissingField(f"edge ({src}, {dst}) references an unknown station")
            if not dist > 0:
                raise ZeroDistance(f"edge ({src}, {dst}) has non-positive network distance {dist}")

    @property
    def index(self):
        return {s: i for i, s in enumerate(self.station_ids)}

    def __len__(self):
        return len(self.station_ids)

    def permuted(self, order) -> "StationTable":
        order = list(order)
        return StationTable(
            [self.station_ids[i] for i in order],
            None if self.coords is None else self.coords[order],
            list(self.edges),
            None if self.functional is None else self.functional[order],
            list(self.functional_names),
        )


def _sym_normalize(a_tilde):
    d = a_tilde.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return a_tilde * inv_sqrt[:, None] * inv_sqrt[None, :]


@dataclass
class AdjacencySet:
    """Named adjacency matrices.

    ``raw[r]`` is A_r (zero diagonal), ``matrices[r]`` is A_r + I and
    ``norms[r]`` the symmetric normalisation D^-1/2 (A_r + I) D^-1/2.
    """

    names: list
    raw: list
    matrices: list = field(init=False)
    norms: list = field(init=False)

    def __post_init__(self):
        self.raw = [np.asarray(a, dtype=np.float64) for a in self.raw]
        if len(self.raw) != len(self.names):
            raise ShapeMismatch("one matrix per name")
        for name, a in zip(self.names, self.raw):
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise ShapeMismatch(f"{name} must be square")
            if np.any(a < 0) or not np.allclose(a, a.T, rtol=0, atol=1e-12):
                raise ShapeMismatch(f"{name} must be symmetric and nonnegative")
        self.matrices = [a + np.eye(a.shape[0]) for a in self.raw]
        self.norms = [_sym_normalize(a) for a in self.matrices]

    @property
    def n_nodes(self):
        return self.raw[0].shape[0]

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name):
        return self.raw[self.names.index(name)]

    def neighborhood_mask(self, percentile: float | None = None):
        """Boolean S x S attention mask: union over graphs, plus self.

        With ``percentile`` set, a weighted graph only contributes pairs whose
        weight is in the top ``percentile`` percent of its positive
        off-diagonal weights (i.e. the closest pairs).
        """
        n = self.n_nodes
        mask = np.eye(n, dtype=bool)
        off = ~np.eye(n, dtype=bool)
        for a in self.raw:
            nz = (a > 0) & off
            if percentile is not None and not np.all(a[nz] == 1.0) and nz.any():
                cut = np.percentile(a[nz], 100.0 - percentile)
                nz &= a >= cut
            mask |= nz
        return mask

    def permuted(self, order) -> "AdjacencySet":
        order = np.asarray(order)
        return AdjacencySet(list(self.names), [a[np.ix_(order, order)] for a in self.raw])

    def export_csv(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, a in zip(self.names, self.raw):
            path = directory / f"adjacency_{name}.csv"
            np.savetxt(path, a, delimiter=",", fmt="%.17g")
            paths.append(path)
        return paths


def _inverse_distance(dist, label):
    n = dist.shape[0]
    off = ~np.eye(n, dtype=bool)
    if np.any(dist[off] == 0):
        i, j = np.argwhere((dist == 0) & off)[0]
        raise ZeroDistance(f"{label}: stations {i} and {j} are at distance 0")
    with np.errstate(divide="ignore"):
        w = np.where(off & np.isfinite(dist), 1.0 / dist, 0.0)
    return w


def _minmax(f):
    lo, hi = f.min(axis=0), f.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (f - lo) / span


def build_adjacency(table: StationTable, kinds=KINDS) -> AdjacencySet:
    """Build the requested subset of {Con, Net, Euc, Func} (all when ``kinds`` is None).

    Net uses shortest-path distance over the edge list (pairs in different
    components get weight 0).  Func uses min-max normalised functional
    vectors.  Coincident stations raise :class:`ZeroDistance`.
    """
    n = len(table)
    if n < 2:
        raise MissingField("need at least two stations")
    requested = set(KINDS if kinds is None else kinds)
    unknown = requested - set(KINDS)
    if unknown or not requested:
        raise MissingField(f"unknown or empty adjacency kinds: {sorted(unknown)}")
    kinds = [k for k in KINDS if k in requested]
    index = table.index
    raw = []
    for kind in kinds:
        if kind in ("Con", "Net"):
            if not table.edges:
                raise MissingField(f"{kind} needs network edges")
            rows = [index[s] for s, _, _ in table.edges]
            cols = [index[d] for _, d, _ in table.edges]
            dist = np.array([float(x) for _, _, x in table.edges])
        if kind == "Con":
            a = np.zeros((n, n))
            a[rows, cols] = 1.0
            a[cols, rows] = 1.0
            np.fill_diagonal(a, 0.0)
        elif kind == "Net":
            g = csr_matrix((np.concatenate([dist, dist]), (rows + cols, cols + rows)), shape=(n, n))
            a = _inverse_distance(shortest_path(g, method="D", directed=False), "Net")
        elif kind == "Euc":
            if table.coords is None:
                raise MissingField("Euc needs coordinates")
            diff = table.coords[:, None, :] - table.coords[None, :, :]
            a = _inverse_distance(np.sqrt((diff**2).sum(axis=-1)), "Euc")
        else:
            if table.functional is None:
                raise MissingField("Func needs functional vectors")
            f = _minmax(table.functional)
            diff = f[:, None, :] - f[None, :, :]
            a = _inverse_distance(np.sqrt((diff**2).sum(axis=-1)), "Func")
        raw.append(a)
    return AdjacencySet(kinds, raw)


# ---------------------------------------------------------------------------
# Moran's I


def morans_i(values, weights) -> float:
    """Global Moran's I with raw (not row-standardised) weights."""
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (v.size, v.size):
        raise ShapeMismatch(f"weights {w.shape} do not match {v.size} values")
    total = w.sum()
    if total <= 0:
        raise ZeroWeightSum("weights sum to zero")
    dev = v - v.mean()
    denom = np.dot(dev, dev)
    if denom <= 1e-300 or np.all(v == v[0]):
        raise ZeroVariance("values have zero variance")
    return float(v.size / total * (dev @ w @ dev) / denom)


@dataclass
class MoranSeries:
    values: np.ndarray
    times: np.ndarray
    skipped: int

    @property
    def mean(self):
        return float(self.values.mean()) if self.values.size else float("nan")


def morans_histogram(demand, adj: AdjacencySet) -> dict:
    """Moran's I of every time slice under every adjacency matrix.

    ``demand`` is a T x S array (or a panel exposing ``.demand``).
    Constant slices are skipped and counted.
    """
    y = np.asarray(getattr(demand, "demand", demand), dtype=np.float64)
    out = {}
    for name, w in zip(adj.names, adj.raw):
        vals, times, skipped = [], [], 0
        for t, row in enumerate(y):
            try:
                vals.append(morans_i(row, w))
                times.append(t)
            except ZeroVariance:
                skipped += 1
        out[name] = MoranSeries(np.array(vals), np.array(times, dtype=int), skipped)
    return out


# ---------------------------------------------------------------------------
# CSV ingestion


def read_station_csv(stations_path, edges_path=None) -> StationTable:
    """Read ``stations.csv`` (station_id, x, y, functional...) and optional edges."""
    with open(stations_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("station_id", "x", "y"):
            if col not in header:
                raise SchemaError(f"{stations_path}: missing column {col!r}")
        func_cols = [c for c in header if c not in ("station_id", "x", "y")]
        ids, coords, func = [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                ids.append(row["station_id"])
                coords.append([float(row["x"]), float(row["y"])])
                func.append([float(row[c]) for c in func_cols])
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{stations_path}:{lineno}: {exc}") from None
    edges = []
    if edges_path is not None and Path(edges_path).exists():
        with open(edges_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for col in ("src", "dst", "network_distance_m"):
                if col not in (reader.fieldnames or []):
                    raise SchemaError(f"{edges_path}: missing column {col!r}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    edges.append((row["src"], row["dst"], float(row["network_distance_m"])))
                except ValueError as exc:
                    raise SchemaError(f"{edges_path}:{lineno}: {exc}") from None
    functional = np.array(func) if func_cols else None
    return StationTable(ids, np.array(coords), edges, functional, func_cols)


def write_station_csv(table: StationTable, stations_path, edges_path=None):
    with open(stations_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "x", "y"] + list(table.functional_names))
        for i, sid in enumerate(table.station_ids):
            row = [sid, repr(float(table.coords[i, 0])), repr(float(table.coords[i, 1]))]
            if table.functional is not None:
                row += [repr(float(v)) for v in table.functional[i]]
            w.writerow(row)
    if edges_path is not None:
        with open(edges_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["src", "dst", "network_distance_m"])
            for src, dst, dist in table.edges:
                w.writerow([src, dst, repr(float(dist))])
