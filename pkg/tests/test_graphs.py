import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.sparse.csgraph import floyd_warshall

from probgnn.errors import (
    DuplicateStation,
    MissingField,
    ShapeMismatch,
    ZeroDistance,
    ZeroVariance,
    ZeroWeightSum,
)
from probgnn.graphs import (
    AdjacencySet,
    StationTable,
    build_adjacency,
    morans_histogram,
    morans_i,
    read_station_csv,
    write_station_csv,
)


def line_table():
    ids = ["a", "b", "c", "d"]
    coords = np.array([[0.0, 0.0], [100.0, 0.0], [300.0, 0.0], [300.0, 400.0]])
    edges = [("a", "b", 120.0), ("b", "c", 250.0), ("c", "d", 500.0)]
    func = np.array([[1.0, 10.0], [2.0, 10.0], [4.0, 30.0], [3.0, 20.0]])
    return StationTable(ids, coords, edges, func, ["pop", "jobs"])


def brute_moran(x, w):
    n = len(x)
    xbar = sum(x) / n
    num = sum(w[i][j] * (x[i] - xbar) * (x[j] - xbar) for i in range(n) for j in range(n))
    den = sum((xi - xbar) ** 2 for xi in x)
    return n / sum(map(sum, w)) * num / den


def test_adjacency_kinds():
    adj = build_adjacency(line_table())
    assert adj.names == ["Con", "Net", "Euc", "Func"]
    np.testing.assert_array_equal(adj["Con"], [[0, 1, 0, 0], [1, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 0]])
    assert adj["Net"][0, 2] == pytest.approx(1 / 370.0)
    assert adj["Net"][0, 3] == pytest.approx(1 / 870.0)
    assert adj["Euc"][2, 3] == pytest.approx(1 / 400.0)
    assert adj["Euc"][0, 3] == pytest.approx(1 / 500.0)
    # min-max scaled functional vectors: a=(0,0) and c=(1,1)
    assert adj["Func"][0, 2] == pytest.approx(1 / np.sqrt(2))
    for a in adj.raw:
        assert np.all(np.diag(a) == 0)
        np.testing.assert_array_equal(a, a.T)


def test_net_matches_floyd_warshall_oracle():
    rng = np.random.default_rng(5)
    n = 8
    ids = [f"s{i}" for i in range(n)]
    edges = [(ids[i], ids[i + 1], float(rng.uniform(50, 500))) for i in range(n - 1)]
    edges += [(ids[0], ids[5], 90.0), (ids[2], ids[7], 40.0)]
    table = StationTable(ids, rng.uniform(0, 1000, size=(n, 2)), edges)
    d = np.full((n, n), np.inf)
    for s, t, dist in edges:
        i, j = ids.index(s), ids.index(t)
        d[i, j] = d[j, i] = min(d[i, j], dist)
    ref = floyd_warshall(np.where(np.isfinite(d), d, 0), directed=False)
    net = build_adjacency(table, ["Net"])["Net"]
    off = ~np.eye(n, dtype=bool)
    np.testing.assert_allclose(net[off], 1.0 / ref[off], rtol=1e-12)


def test_disconnected_pairs_get_zero_weight():
    table = StationTable(["a", "b", "c"], np.eye(3)[:, :2], [("a", "b", 10.0)])
    net = build_adjacency(table, ["Net"])["Net"]
    assert net[0, 2] == 0 and net[0, 1] == pytest.approx(0.1)


def test_symmetric_normalisation():
    adj = build_adjacency(line_table(), ["Con"])
    n = adj.norms[0]
    a_tilde = adj["Con"] + np.eye(4)
    d = a_tilde.sum(axis=1)
    np.testing.assert_allclose(n, a_tilde / np.sqrt(np.outer(d, d)), rtol=1e-14)
    # the largest eigenvalue of the normalised operator is 1
    assert np.max(np.linalg.eigvalsh(n)) == pytest.approx(1.0)


@given(perm=st.permutations(range(4)))
def test_permutation_equivariance(perm):
    table = line_table()
    adj = build_adjacency(table)
    padj = build_adjacency(table.permuted(perm))
    for a, b in zip(adj.raw, padj.raw):
        np.testing.assert_allclose(a[np.ix_(perm, perm)], b, rtol=1e-13)


def test_neighborhood_mask():
    adj = build_adjacency(line_table(), ["Con"])
    mask = adj.neighborhood_mask()
    np.testing.assert_array_equal(mask, (adj["Con"] > 0) | np.eye(4, dtype=bool))
    full = build_adjacency(line_table(), ["Euc"])
    assert full.neighborhood_mask().all()
    sparse = full.neighborhood_mask(percentile=30)
    assert sparse.sum() < 16 and np.all(np.diag(sparse))


def test_validation_errors():
    with pytest.raises(DuplicateStation):
        StationTable(["a", "a"], np.zeros((2, 2)))
    with pytest.raises(MissingField):
        StationTable(["a", "b"], np.zeros((2, 2)), [("a", "z", 1.0)])
    with pytest.raises(ZeroDistance):
        StationTable(["a", "b"], np.zeros((2, 2)), [("a", "b", 0.0)])
    with pytest.raises(ZeroDistance):
        build_adjacency(StationTable(["a", "b"], np.zeros((2, 2))), ["Euc"])
    with pytest.raises(MissingField):
        build_adjacency(line_table(), ["Bus"])
    with pytest.raises(MissingField):
        build_adjacency(StationTable(["a", "b"], np.eye(2)), ["Con"])
    with pytest.raises(ShapeMismatch):
        AdjacencySet(["x"], [np.array([[0, 1], [0, 0]])])


def test_station_csv_round_trip(tmp_path):
    table = line_table()
    write_station_csv(table, tmp_path / "s.csv", tmp_path / "e.csv")
    back = read_station_csv(tmp_path / "s.csv", tmp_path / "e.csv")
    assert back.station_ids == table.station_ids
    np.testing.assert_array_equal(back.coords, table.coords)
    np.testing.assert_array_equal(back.functional, table.functional)
    assert back.edges == table.edges


def test_adjacency_export(tmp_path):
    adj = build_adjacency(line_table())
    paths = adj.export_csv(tmp_path)
    for name, path in zip(adj.names, paths):
        np.testing.assert_array_equal(np.loadtxt(path, delimiter=","), adj[name])


# --- Moran's I -------------------------------------------------------------

@given(seed=st.integers(0, 2**31))
def test_morans_i_matches_double_loop(seed):
    r = np.random.default_rng(seed)
    w = r.uniform(size=(10, 10)) * (r.uniform(size=(10, 10)) < 0.5)
    w = w + w.T
    np.fill_diagonal(w, 0)
    if w.sum() == 0:
        w[0, 1] = w[1, 0] = 1
    x = r.normal(size=10)
    assert morans_i(x, w) == pytest.approx(brute_moran(x.tolist(), w.tolist()), abs=1e-12)


def test_morans_i_checkerboard():
    assert morans_i([1.0, -1.0], [[0, 1], [1, 0]]) == pytest.approx(-1.0, abs=1e-15)


def test_morans_i_errors():
    with pytest.raises(ZeroVariance):
        morans_i([2.0, 2.0, 2.0], np.ones((3, 3)))
    with pytest.raises(ZeroWeightSum):
        morans_i([1.0, 2.0], np.zeros((2, 2)))
    with pytest.raises(ShapeMismatch):
        morans_i([1.0, 2.0], np.ones((3, 3)))


def test_histogram_skips_constant_slices():
    adj = build_adjacency(line_table(), ["Con"])
    y = np.array([[1.0, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0], [4.0, 1.0, 3.0, 2.0]])
    series = morans_histogram(y, adj)["Con"]
    assert series.skipped == 1
    np.testing.assert_array_equal(series.times, [0, 2])
    assert series.values[0] == pytest.approx(morans_i(y[0], adj["Con"]))
