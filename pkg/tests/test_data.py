import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from probgnn.data import (
    DemandPanel,
    FeaturePanel,
    SyntheticSpec,
    compute_stats,
    export_csv,
    generate,
    ingest_csv,
    load_directory,
    make_batch,
    make_splits,
    min_mean_demand_filter,
    normalize,
    residual_channel,
    window_batch,
)
from probgnn.errors import (
    EmptySplit,
    InsufficientHistory,
    InvalidSpec,
    NegativeDemand,
    OverlappingWindows,
    SchemaError,
)
from probgnn.graphs import StationTable

WEEK = 7 * 24


def small_spec(**kw):
    return SyntheticSpec(n_stations=4, n_steps=3 * WEEK, **kw)


# --- generator -------------------------------------------------------------

def test_generate_is_deterministic():
    a, b = generate(small_spec(seed=9)), generate(small_spec(seed=9))
    np.testing.assert_array_equal(a.demand.demand, b.demand.demand)
    np.testing.assert_array_equal(a.features.features, b.features.features)
    assert not np.array_equal(a.demand.demand, generate(small_spec(seed=10)).demand.demand)


def test_heteroskedasticity_law_holds():
    syn = generate(small_spec(sigma_intercept=0.5, sigma_slope=0.3))
    np.testing.assert_allclose(syn.truth.scale, 0.5 + 0.3 * syn.mean)
    flat = generate(small_spec(sigma_slope=0.0))
    np.testing.assert_array_equal(flat.truth.scale, 0.5)


def test_per_cell_variance_matches_law_across_seeds():
    spec = dict(n_stations=3, n_steps=4, periods_per_day=2, sigma_intercept=0.5, sigma_slope=0.3)
    z = []
    for seed in range(10_000):
        syn = generate(SyntheticSpec(seed=seed, **spec))
        z.append((syn.demand.demand - syn.mean) / syn.truth.scale)
    var = np.var(np.array(z), axis=0)
    cells = [(0, 0), (1, 1), (3, 2)]
    for t, s in cells:
        assert var[t, s] == pytest.approx(1.0, rel=0.05)


@pytest.mark.parametrize("noise", ["poisson", "truncated_gaussian"])
def test_count_and_truncated_supports(noise):
    syn = generate(small_spec(noise=noise))
    y = syn.demand.demand
    assert np.all(y >= 0)
    if noise == "poisson":
        np.testing.assert_array_equal(y, np.round(y))


def test_overdispersed_counts():
    syn = generate(SyntheticSpec(n_stations=10, n_steps=3000, noise="poisson", dispersion=3.0))
    resid = syn.demand.demand - syn.mean
    ratio = (resid**2).sum() / syn.mean.sum()
    assert ratio == pytest.approx(3.0, rel=0.05)
    assert syn.truth.family == "HetG"


def test_shift_windows_scale_the_mean():
    syn = generate(small_spec(shift_windows=[("half", 0.5), ("tenth", 0.1)], shift_length=WEEK))
    assert syn.windows == {"half": (3 * WEEK, 4 * WEEK), "tenth": (4 * WEEK, 5 * WEEK)}
    assert syn.demand.n_steps == 5 * WEEK and syn.main_end == 3 * WEEK
    base = syn.mean[2 * WEEK:3 * WEEK]
    np.testing.assert_allclose(syn.mean[3 * WEEK:4 * WEEK], 0.5 * base)
    np.testing.assert_allclose(syn.mean[4 * WEEK:], 0.1 * base)


def test_residual_channel_is_demand_minus_last_week():
    syn = generate(small_spec())
    r = residual_channel(syn.demand.demand, 24)
    np.testing.assert_array_equal(r[:WEEK], 0)
    np.testing.assert_allclose(r[WEEK:], syn.demand.demand[WEEK:] - syn.demand.demand[:-WEEK])
    np.testing.assert_array_equal(syn.features.features[..., 0], r)


def test_spec_validation():
    with pytest.raises(InvalidSpec):
        SyntheticSpec.from_dict({"n_stations": 3, "colour": "red"})
    with pytest.raises(InvalidSpec):
        generate(SyntheticSpec(sigma_intercept=0.0))
    with pytest.raises(InvalidSpec):
        generate(SyntheticSpec(noise="cauchy"))
    spec = SyntheticSpec.from_dict({"shift_windows": [["a", 0.5]], "n_steps": 500})
    assert spec.shift_windows == [("a", 0.5)]
    assert SyntheticSpec.from_dict(spec.to_dict()) == spec


# --- panels and splits -----------------------------------------------------

def test_negative_demand_names_the_cell():
    with pytest.raises(NegativeDemand, match="timestamp 1, station b"):
        DemandPanel(np.array([[1.0, 2.0], [3.0, -1.0]]), 24, ["a", "b"])


def test_week_of_history_is_excluded():
    panel = DemandPanel(np.ones((4 * WEEK, 2)), 24, ["a", "b"])
    splits = make_splits(panel, windows={"train": (WEEK, 2 * WEEK), "validation": (2 * WEEK, 3 * WEEK),
                                         "test": (3 * WEEK, 4 * WEEK)})
    assert splits.train == (WEEK, 2 * WEEK)
    with pytest.raises(InsufficientHistory):
        make_splits(panel, windows={"train": (0, WEEK), "validation": (WEEK, 2 * WEEK), "test": (2 * WEEK, 3 * WEEK)})
    fr = make_splits(panel, fractions=(1, 1, 1), lookback=3)
    assert fr.train[0] == WEEK + 3 and fr.test[1] == 4 * WEEK


@given(cuts=st.lists(st.integers(WEEK + 2, 3 * WEEK), min_size=2, max_size=2, unique=True))
def test_explicit_windows_partition_exactly(cuts):
    a, b = sorted(cuts)
    panel = DemandPanel(np.ones((3 * WEEK, 1)), 24, ["a"])
    splits = make_splits(panel, windows={"train": (WEEK + 2, a), "validation": (a, b), "test": (b, 3 * WEEK)},
                         lookback=2)
    idx = np.concatenate([splits.indices(n) for n in ("train", "validation", "test")])
    np.testing.assert_array_equal(idx, np.arange(WEEK + 2, 3 * WEEK))


@given(f=st.tuples(st.floats(0.1, 1), st.floats(0.1, 1), st.floats(0.1, 1)), lookback=st.integers(0, 6))
def test_fraction_windows_are_contiguous(f, lookback):
    panel = DemandPanel(np.ones((3 * WEEK, 1)), 24, ["a"])
    s = make_splits(panel, fractions=f, lookback=lookback)
    assert s.train[0] == WEEK + lookback
    assert s.train[1] == s.validation[0] and s.validation[1] == s.test[0] and s.test[1] == 3 * WEEK


def test_overlap_and_empty_split():
    panel = DemandPanel(np.ones((3 * WEEK, 1)), 24, ["a"])
    with pytest.raises(OverlappingWindows):
        make_splits(panel, windows={"train": (WEEK, 2 * WEEK), "validation": (2 * WEEK - 5, 2 * WEEK + 10),
                                    "test": (2 * WEEK + 10, 3 * WEEK)})
    empty = make_splits(panel, windows={"train": (WEEK, 2 * WEEK), "validation": (2 * WEEK, 2 * WEEK),
                                        "test": (2 * WEEK, 3 * WEEK)})
    with pytest.raises(EmptySplit):
        compute_stats(FeaturePanel(np.ones((3 * WEEK, 1, 1)), ["x"], np.zeros((3 * WEEK, 2))), empty.validation)


def test_normalize_uses_train_statistics_only():
    r = np.random.default_rng(0)
    x = r.normal(5, 2, size=(100, 3, 2))
    x[:, :, 1] = 7.0
    x[60:, :, 0] += 100.0  # a shift after the train window survives normalisation
    feats = FeaturePanel(x, ["a", "const"], np.zeros((100, 2)))
    stats = compute_stats(feats, (0, 50))
    z = normalize(feats, stats).features
    np.testing.assert_allclose(z[:50, :, 0].mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(z[:50, :, 0].std(axis=0), 1, rtol=1e-12)
    np.testing.assert_array_equal(z[:, :, 1], 0)
    assert z[60:, :, 0].mean() > 20


def test_make_batch_offsets():
    syn = generate(small_spec())
    idx = np.array([WEEK + 5, 2 * WEEK])
    b = make_batch(syn.demand, syn.features, idx, lookback=3)
    np.testing.assert_array_equal(b.recent[0], syn.features.features[WEEK + 2:WEEK + 5])
    np.testing.assert_array_equal(b.last_week, syn.demand.demand[idx - WEEK])
    np.testing.assert_array_equal(b.y, syn.demand.demand[idx])
    np.testing.assert_array_equal(b.tod, idx % 24)
    with pytest.raises(InsufficientHistory):
        make_batch(syn.demand, syn.features, [WEEK + 1], lookback=3)
    assert len(window_batch(syn.demand, syn.features, compute_stats(syn.features, (WEEK, 2 * WEEK)),
                            (2 * WEEK, 2 * WEEK + 10), 3)) == 10


def test_min_mean_demand_filter():
    panel = DemandPanel(np.array([[1.0, 40.0, 31.0], [1.0, 20.0, 29.0]]), 24, ["a", "b", "c"])
    np.testing.assert_array_equal(min_mean_demand_filter(panel, 29.0), [1, 2])
    np.testing.assert_array_equal(min_mean_demand_filter(panel, 29.0, window=(0, 1)), [1, 2])
    np.testing.assert_array_equal(min_mean_demand_filter(panel, 30.5, window=(1, 2)), [])


# --- CSV -------------------------------------------------------------------

def fixture_panel():
    demand = DemandPanel(np.array([[0.0, 1.5], [2.25, 3.0], [0.1, 7.0], [1.0 / 3.0, 2.0]]), 2, ["s1", "s2"])
    feats = FeaturePanel(np.arange(16.0).reshape(4, 2, 2) / 7.0, ["residual", "other"], np.arange(8.0).reshape(4, 2))
    stations = StationTable(["s1", "s2"], np.array([[0.0, 0.0], [3.0, 4.0]]), [("s1", "s2", 6.5)],
                            np.array([[1.0], [2.0]]), ["pop"])
    return demand, feats, stations


def test_csv_round_trip_is_bit_exact(tmp_path):
    demand, feats, stations = fixture_panel()
    export_csv(tmp_path, demand, feats, stations)
    d2, f2, s2, meta = load_directory(tmp_path)
    np.testing.assert_array_equal(d2.demand, demand.demand)
    np.testing.assert_array_equal(f2.features, feats.features)
    np.testing.assert_array_equal(f2.weather, feats.weather)
    assert f2.channels == feats.channels and s2.station_ids == stations.station_ids
    assert meta["periods_per_day"] == 2


def test_ingest_rejects_negative_cell(tmp_path):
    demand, feats, stations = fixture_panel()
    export_csv(tmp_path, demand, feats, stations)
    rows = list(csv.reader(open(tmp_path / "demand.csv")))
    rows[3][2] = "-4"
    with open(tmp_path / "demand.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    with pytest.raises(NegativeDemand, match="demand.csv:4.*timestamp 1, station s1"):
        ingest_csv(tmp_path / "demand.csv", tmp_path / "features.csv", tmp_path / "stations.csv")


def test_ingest_rejects_missing_column(tmp_path):
    demand, feats, stations = fixture_panel()
    export_csv(tmp_path, demand, feats, stations)
    text = (tmp_path / "demand.csv").read_text().replace("station_id", "stop")
    (tmp_path / "demand.csv").write_text(text)
    with pytest.raises(SchemaError, match="station_id"):
        ingest_csv(tmp_path / "demand.csv", tmp_path / "features.csv", tmp_path / "stations.csv")


def test_ingest_rejects_missing_cell(tmp_path):
    demand, feats, stations = fixture_panel()
    export_csv(tmp_path, demand, feats, stations)
    lines = (tmp_path / "demand.csv").read_text().splitlines()
    (tmp_path / "demand.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(SchemaError, match="missing cell"):
        ingest_csv(tmp_path / "demand.csv", tmp_path / "features.csv", tmp_path / "stations.csv")
