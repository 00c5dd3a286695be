"""Demand/feature panels, CSV ingestion, temporal splits, and the synthetic generator.

CSV layouts (UTF-8, comma separated, header row)::

    demand.csv    timestamp_index, station_id, demand
    features.csv  timestamp_index, station_id, channel, value
    weather.csv   timestamp_index, precip_dev, temp_dev
    stations.csv  station_id, x, y, <functional columns...>
    edges.csv     src, dst, network_distance_m

Rows may come in any order; every (timestamp, station) cell must be present.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import minimum_spanning_tree

from .distributions import DistParams, sample
from .errors import (
    EmptySplit,
    InsufficientHistory,
    InvalidSpec,
    NegativeDemand,
    OverlappingWindows,
    SchemaError,
    ShapeMismatch,
)
from .graphs import StationTable, read_station_csv, write_station_csv

DAYS_PER_WEEK = 7
NOISE_FAMILIES = ("gaussian", "truncated_gaussian", "laplace", "poisson")


@dataclass
class DemandPanel:
    demand: np.ndarray
    periods_per_day: int
    station_ids: list
    timestamps: np.ndarray | None = None
    allow_negative: bool = False

    def __post_init__(self):
        self.demand = np.asarray(self.demand, dtype=np.float64)
        if self.demand.ndim != 2 or self.demand.shape[1] != len(self.station_ids):
            raise ShapeMismatch(f"demand must be T x {len(self.station_ids)}, got {self.demand.shape}")
        if self.periods_per_day < 1:
            raise InvalidSpec("periods_per_day must be positive")
        if self.timestamps is None:
            self.timestamps = np.arange(self.demand.shape[0])
        self.timestamps = np.asarray(self.timestamps, dtype=int)
        if not self.allow_negative and np.any(self.demand < 0):
            t, s = np.argwhere(self.demand < 0)[0]
            raise NegativeDemand(
                f"negative demand {self.demand[t, s]} at timestamp {self.timestamps[t]}, "
                f"station {self.station_ids[s]}"
            )

    @property
    def n_steps(self):
        return self.demand.shape[0]

    @property
    def n_stations(self):
        return self.demand.shape[1]

    @property
    def steps_per_week(self):
        return DAYS_PER_WEEK * self.periods_per_day

    def time_of_day(self, t):
        return np.asarray(self.timestamps[t]) % self.periods_per_day


@dataclass
class FeaturePanel:
    features: np.ndarray
    channels: list
    weather: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.weather = np.asarray(self.weather, dtype=np.float64)
        if self.features.ndim != 3 or self.features.shape[2] != len(self.channels):
            raise ShapeMismatch(f"features must be T x S x {len(self.channels)}")
        if self.weather.shape != (self.features.shape[0], 2):
            raise ShapeMismatch("weather must be T x 2")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.weather))):
            raise SchemaError("features must be finite")


@dataclass
class SplitPanels:
    """Index windows ``(start, stop)`` (half-open) into the panel's time axis."""

    train: tuple
    validation: tuple
    test: tuple
    extra: dict = field(default_factory=dict)
    first_valid: int = 0

    def windows(self) -> dict:
        out = {"train": self.train, "validation": self.validation, "test": self.test}
        out.update(self.extra)
        return out

    def indices(self, name) -> np.ndarray:
        start, stop = self.windows()[name]
        return np.arange(start, stop)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# ---------------------------------------------------------------------------
# splits and normalisation


def make_splits(panel: DemandPanel, fractions=None, windows=None, lookback=0, extra=None, end=None):
    """Temporal train/validation/test windows.

    Give either ``fractions`` (train, validation, test shares of the usable
    range) or explicit ``windows``.  The first week plus ``lookback`` steps are
    history only: residual features there are undefined, so no window may
    start before ``first_valid``.  ``end`` caps the range that fractions
    partition (extra windows may lie beyond it).
    """
    first_valid = panel.steps_per_week + int(lookback)
    end = panel.n_steps if end is None else int(end)
    if (fractions is None) == (windows is None):
        raise InvalidSpec("give exactly one of fractions or windows")
    if fractions is not None:
        fr = np.asarray(fractions, dtype=np.float64)
        if fr.shape != (3,) or np.any(fr < 0) or fr.sum() <= 0:
            raise InvalidSpec(f"fractions must be three nonnegative shares, got {fractions}")
        usable = end - first_valid
        if usable <= 0:
            raise InsufficientHistory(f"need more than {first_valid} steps, panel ends at {end}")
        fr = fr / fr.sum()
        n_train = int(np.floor(fr[0] * usable))
        n_val = int(np.floor(fr[1] * usable))
        a = first_valid
        windows = {
            "train": (a, a + n_train),
            "validation": (a + n_train, a + n_train + n_val),
            "test": (a + n_train + n_val, end),
        }
    named = dict(windows)
    for key in ("train", "validation", "test"):
        if key not in named:
            raise InvalidSpec(f"missing window {key!r}")
    named.update(extra or {})
    spans = []
    for name, (start, stop) in named.items():
        start, stop = int(start), int(stop)
        if start > stop or start < 0 or stop > panel.n_steps:
            raise InvalidSpec(f"window {name} = ({start}, {stop}) outside [0, {panel.n_steps}]")
        if start < first_valid and stop > start:
            raise InsufficientHistory(
                f"window {name} starts at {start}, before the first step with full history ({first_valid})"
            )
        named[name] = (start, stop)
        if stop > start:
            spans.append((start, stop, name))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise OverlappingWindows(f"windows {n0} and {n1} overlap")
    tr, va, te = named.pop("train"), named.pop("validation"), named.pop("test")
    if tr[1] > va[0] and va[1] > va[0]:
        raise OverlappingWindows("validation must follow train")
    return SplitPanels(tr, va, te, named, first_valid)


def compute_stats(features: FeaturePanel, window) -> NormStats:
    """Per-station, per-channel mean/std over ``window`` (train only)."""
    start, stop = window
    if stop <= start:
        raise EmptySplit("cannot compute statistics on an empty window")
    x = features.features[start:stop]
    return NormStats(x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6))


def normalize(features: FeaturePanel, stats: NormStats) -> FeaturePanel:
    """z-score every channel with the given (train) statistics."""
    z = (features.features - stats.mean[None]) / stats.std[None]
    return FeaturePanel(z, list(features.channels), features.weather.copy())


def train_mean_demand(panel: DemandPanel, splits: SplitPanels) -> float:
    start, stop = splits.train
    if stop <= start:
        raise EmptySplit("train window is empty")
    return float(panel.demand[start:stop].mean())


@dataclass
class Batch:
    """Model inputs for a set of target steps.

    recent     (B, lookback, S, d) normalised features of the preceding steps
    last_week  (B, S) raw demand one week before each target
    weather    (B, 2) precipitation / temperature deviations at the target
    tod        (B,) time-of-day index of the target
    y          (B, S) targets
    """

    recent: np.ndarray
    last_week: np.ndarray
    weather: np.ndarray
    tod: np.ndarray
    y: np.ndarray
    index: np.ndarray

    def __len__(self):
        return self.y.shape[0]

    def subset(self, rows) -> "Batch":
        return Batch(self.recent[rows], self.last_week[rows], self.weather[rows],
                     self.tod[rows], self.y[rows], self.index[rows])

    def with_demand_scale(self, factor) -> "Batch":
        return Batch(self.recent, self.last_week * factor, self.weather, self.tod, self.y * factor, self.index)


def make_batch(panel: DemandPanel, features: FeaturePanel, indices, lookback: int) -> Batch:
    """Assemble inputs for target steps ``indices`` from already-normalised features."""
    idx = np.asarray(indices, dtype=int)
    if idx.size and (idx.min() < panel.steps_per_week + lookback or idx.max() >= panel.n_steps):
        raise InsufficientHistory("targets need a full week plus the lookback of history")
    offsets = np.arange(-lookback, 0)
    window = idx[:, None] + offsets[None, :]
    return Batch(
        recent=features.features[window],
        last_week=panel.demand[idx - panel.steps_per_week],
        weather=features.weather[idx],
        tod=panel.time_of_day(idx),
        y=panel.demand[idx],
        index=idx,
    )


def window_batch(panel: DemandPanel, features: FeaturePanel, stats: NormStats, window, lookback: int) -> Batch:
    """Batch for the target range ``window`` using previously recorded train statistics."""
    start, stop = window
    if stop <= start:
        raise EmptySplit(f"window {window} is empty")
    return make_batch(panel, normalize(features, stats), np.arange(start, stop), lookback)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Knobs of the synthetic generator.

    Noise scale follows sigma = sigma_intercept + sigma_slope * mu.  For the
    Laplace family that sigma is the standard deviation (b = sigma / sqrt 2).
    For the poisson family ``dispersion`` is the variance-to-mean ratio;
    values above 1 draw negative-binomial counts.
    ``shift_windows`` appends ``shift_length``-step blocks after the main
    horizon, each with its mean demand multiplied by the given factor.
    """

    n_stations: int = 20
    n_steps: int = 3000
    periods_per_day: int = 24
    seed: int = 0
    spatial_strength: float = 0.6
    kernel_length_m: float = 2500.0
    base_low: float = 8.0
    base_high: float = 30.0
    daily_amplitude: float = 0.5
    weekly_amplitude: float = 0.2
    noise: str = "gaussian"
    sigma_intercept: float = 0.5
    sigma_slope: float = 0.3
    dispersion: float = 1.0
    weather_effect: float = 0.0
    ar_coefficient: float = 0.95
    shift_windows: list = field(default_factory=list)
    shift_length: int = 336
    area_m: float = 10000.0

    def validate(self):
        if self.n_stations < 2 or self.n_steps < 1 or self.periods_per_day < 1:
            raise InvalidSpec("need n_stations >= 2, n_steps >= 1, periods_per_day >= 1")
        if self.noise not in NOISE_FAMILIES:
            raise InvalidSpec(f"noise must be one of {NOISE_FAMILIES}, got {self.noise!r}")
        if not self.sigma_intercept > 0 or self.sigma_slope < 0:
            raise InvalidSpec("heteroskedasticity law needs intercept > 0 and slope >= 0")
        if not 0 <= self.daily_amplitude < 1 or not 0 <= self.weekly_amplitude < 1:
            raise InvalidSpec("cycle amplitudes must lie in [0, 1)")
        if not 0 < self.base_low <= self.base_high:
            raise InvalidSpec("need 0 < base_low <= base_high")
        if not 0 <= self.spatial_strength <= 1:
            raise InvalidSpec("spatial_strength must lie in [0, 1]")
        if self.dispersion < 1:
            raise InvalidSpec("dispersion must be >= 1")
        if self.shift_length < 1:
            raise InvalidSpec("shift_length must be positive")
        for item in self.shift_windows:
            name, mult = item
            if not float(mult) > 0:
                raise InvalidSpec(f"shift multiplier for {name!r} must be positive")
        return self

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        if "shift_windows" in d:
            d["shift_windows"] = [tuple(x) for x in d["shift_windows"]]
        return cls(**d).validate()

    def to_dict(self):
        d = asdict(self)
        d["shift_windows"] = [list(x) for x in self.shift_windows]
        return d


@dataclass
class SyntheticData:
    demand: DemandPanel
    features: FeaturePanel
    stations: StationTable
    truth: DistParams
    mean: np.ndarray
    windows: dict
    main_end: int


def _stations(spec: SyntheticSpec, rng):
    n = spec.n_stations
    min_sep = spec.area_m / (4.0 * np.sqrt(n))
    coords = []
    while len(coords) < n:
        c = rng.uniform(0, spec.area_m, size=2)
        if all(np.hypot(*(c - o)) >= min_sep for o in coords):
            coords.append(c)
    coords = np.array(coords)
    dist = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
    tree = minimum_spanning_tree(dist).toarray()
    pairs = {tuple(sorted(p)) for p in zip(*np.nonzero(tree))}
    nearest = np.argsort(dist, axis=1)[:, 1]
    pairs |= {tuple(sorted((i, int(j)))) for i, j in enumerate(nearest)}
    ids = [f"s{i:03d}" for i in range(n)]
    edges = [(ids[i], ids[j], float(dist[i, j] * rng.uniform(1.1, 1.5))) for i, j in sorted(pairs)]
    return ids, coords, dist, edges


def generate(spec: SyntheticSpec) -> SyntheticData:
    """Seeded synthetic panel with known per-cell ground-truth distributions."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, ppd = spec.n_stations, spec.periods_per_day
    ids, coords, dist, edges = _stations(spec, rng)

    base = rng.uniform(spec.base_low, spec.base_high, size=n)
    phase = rng.uniform(-0.5, 0.5, size=n)
    kernel = np.exp(-0.5 * (dist / spec.kernel_length_m) ** 2)
    kernel /= kernel.sum(axis=1, keepdims=True)
    smooth = (1.0 - spec.spatial_strength) * np.eye(n) + spec.spatial_strength * kernel

    shifts = [(str(name), float(m)) for name, m in spec.shift_windows]
    total = spec.n_steps + spec.shift_length * len(shifts)
    t = np.arange(total)
    tod = t % ppd
    dow = (t // ppd) % DAYS_PER_WEEK
    daily = 1.0 + spec.daily_amplitude * np.sin(2 * np.pi * tod[:, None] / ppd + phase[None, :] - np.pi / 2)
    weekly = np.where(dow >= 5, 1.0 - spec.weekly_amplitude, 1.0)[:, None]
    clean = (base[None, :] * daily * weekly) @ smooth.T

    weather = np.zeros((total, 2))
    innov = rng.normal(size=(total, 2)) * np.sqrt(1.0 - spec.ar_coefficient**2)
    for k in range(1, total):
        weather[k] = spec.ar_coefficient * weather[k - 1] + innov[k]
    mu = clean * np.maximum(1.0 + spec.weather_effect * weather[:, :1], 0.05)

    windows = {}
    for k, (name, mult) in enumerate(shifts):
        start = spec.n_steps + k * spec.shift_length
        mu[start:start + spec.shift_length] *= mult
        windows[name] = (start, start + spec.shift_length)
    mu = np.maximum(mu, 0.0)
    sigma = spec.sigma_intercept + spec.sigma_slope * mu

    noise_rng = np.random.default_rng([spec.seed, 1])
    if spec.noise == "gaussian":
        y = mu + sigma * noise_rng.standard_normal(mu.shape)
        truth = DistParams.hetg(mu, sigma)
    elif spec.noise == "laplace":
        b = sigma / np.sqrt(2.0)
        y = noise_rng.laplace(mu, b)
        truth = DistParams.lap(mu, b)
    elif spec.noise == "truncated_gaussian":
        truth = DistParams.tg(mu, sigma)
        y = sample(truth, noise_rng)
    else:
        rate = np.maximum(mu, 1e-6)
        if spec.dispersion == 1.0:
            y = noise_rng.poisson(rate).astype(np.float64)
            truth = DistParams.pois(rate)
        else:
            p = 1.0 / spec.dispersion
            y = noise_rng.negative_binomial(rate * p / (1.0 - p), p).astype(np.float64)
            # moment-matched stand-in; the true law is negative binomial
            truth = DistParams.hetg(rate, np.sqrt(spec.dispersion * rate))

    residual = residual_channel(y, ppd)
    supply = clean / clean.mean()
    features = FeaturePanel(np.stack([residual, supply], axis=-1), ["residual", "service_frequency"], weather)

    func = np.column_stack([
        base * rng.uniform(80, 120, size=n),
        base * rng.uniform(30, 90, size=n),
        rng.uniform(0.05, 0.6, size=n),
        rng.poisson(base / 2.0) + rng.uniform(0, 1, size=n),
    ])
    stations = StationTable(ids, coords, edges, func, ["population", "jobs", "pct_low_income", "shops"])
    panel = DemandPanel(y, ppd, ids, allow_negative=spec.noise in ("gaussian", "laplace"))
    return SyntheticData(panel, features, stations, truth, mu, windows, spec.n_steps)


def residual_channel(demand: np.ndarray, periods_per_day: int) -> np.ndarray:
    week = DAYS_PER_WEEK * periods_per_day
    out = np.zeros_like(demand)
    out[week:] = demand[week:] - demand[:-week]
    return out


# ---------------------------------------------------------------------------
# CSV I/O


def export_csv(directory, panel: DemandPanel, features: FeaturePanel, stations: StationTable, meta=None):
    """Write the documented CSV set plus ``meta.json`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "demand.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_index", "station_id", "demand"])
        for t, ts in enumerate(panel.timestamps):
            for s, sid in enumerate(panel.station_ids):
                w.writerow([int(ts), sid, repr(float(panel.demand[t, s]))])
    with open(d / "features.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_index", "station_id", "channel", "value"])
        for t, ts in enumerate(panel.timestamps):
            for s, sid in enumerate(panel.station_ids):
                for c, ch in enumerate(features.channels):
                    w.writerow([int(ts), sid, ch, repr(float(features.features[t, s, c]))])
    with open(d / "weather.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_index", "precip_dev", "temp_dev"])
        for t, ts in enumerate(panel.timestamps):
            w.writerow([int(ts), repr(float(features.weather[t, 0])), repr(float(features.weather[t, 1]))])
    write_station_csv(stations, d / "stations.csv", d / "edges.csv")
    info = {"periods_per_day": panel.periods_per_day, "allow_negative": panel.allow_negative}
    info.update(meta or {})
    (d / "meta.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(header, cols, path):
    for col in cols:
        if col not in (header or []):
            raise SchemaError(f"{path}: missing column {col!r}")


def ingest_csv(demand_path, features_path, stations_path, weather_path=None, edges_path=None,
               periods_per_day=None, allow_negative=False):
    """Read and validate a panel; returns (DemandPanel, FeaturePanel, StationTable).

    ``periods_per_day`` defaults to the value in a sibling ``meta.json``.
    Missing weather means zero deviations.
    """
    stations = read_station_csv(stations_path, edges_path)
    sindex = stations.index
    if periods_per_day is None:
        meta_path = Path(demand_path).with_name("meta.json")
        if not meta_path.exists():
            raise SchemaError("periods_per_day not given and no meta.json next to demand.csv")
        periods_per_day = int(json.loads(meta_path.read_text())["periods_per_day"])

    cells = {}
    with open(demand_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _require(reader.fieldnames, ("timestamp_index", "station_id", "demand"), demand_path)
        for lineno, row in enumerate(reader, start=2):
            try:
                key = (int(row["timestamp_index"]), row["station_id"])
                value = float(row["demand"])
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{demand_path}:{lineno}: {exc}") from None
            if key[1] not in sindex:
                raise SchemaError(f"{demand_path}:{lineno}: unknown station {key[1]!r}")
            if value < 0 and not allow_negative:
                raise NegativeDemand(f"{demand_path}:{lineno}: negative demand {value} at "
                                     f"timestamp {key[0]}, station {key[1]}")
            cells[key] = value
    times = sorted({k[0] for k in cells})
    tindex = {t: i for i, t in enumerate(times)}
    demand = np.full((len(times), len(stations)), np.nan)
    for (t, s), v in cells.items():
        demand[tindex[t], sindex[s]] = v
    if np.isnan(demand).any():
        t, s = np.argwhere(np.isnan(demand))[0]
        raise SchemaError(f"{demand_path}: missing cell timestamp {times[t]}, station {stations.station_ids[s]}")

    chan_cells = defaultdict(dict)
    with open(features_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _require(reader.fieldnames, ("timestamp_index", "station_id", "channel", "value"), features_path)
        for lineno, row in enumerate(reader, start=2):
            try:
                t, s = int(row["timestamp_index"]), row["station_id"]
                chan_cells[row["channel"]][(t, s)] = float(row["value"])
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{features_path}:{lineno}: {exc}") from None
            if t not in tindex or s not in sindex:
                raise SchemaError(f"{features_path}:{lineno}: cell ({t}, {s}) not in demand panel")
    channels = list(chan_cells)
    feats = np.full(demand.shape + (len(channels),), np.nan)
    for c, ch in enumerate(channels):
        for (t, s), v in chan_cells[ch].items():
            feats[tindex[t], sindex[s], c] = v
    if np.isnan(feats).any():
        t, s, c = np.argwhere(np.isnan(feats))[0]
        raise SchemaError(f"{features_path}: missing value for channel {channels[c]!r} at "
                          f"timestamp {times[t]}, station {stations.station_ids[s]}")

    weather = np.zeros((len(times), 2))
    if weather_path is not None and Path(weather_path).exists():
        with open(weather_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            _require(reader.fieldnames, ("timestamp_index", "precip_dev", "temp_dev"), weather_path)
            for lineno, row in enumerate(reader, start=2):
                try:
                    t = int(row["timestamp_index"])
                    weather[tindex[t]] = [float(row["precip_dev"]), float(row["temp_dev"])]
                except (KeyError, TypeError, ValueError) as exc:
                    raise SchemaError(f"{weather_path}:{lineno}: {exc}") from None

    panel = DemandPanel(demand, periods_per_day, stations.station_ids, np.array(times), allow_negative)
    return panel, FeaturePanel(feats, channels, weather), stations


def load_directory(directory):
    """Ingest a directory written by :func:`export_csv`; returns (panel, features, stations, meta)."""
    d = Path(directory)
    missing = [n for n in ("demand.csv", "features.csv", "stations.csv") if not (d / n).is_file()]
    if missing:
        raise SchemaError(f"{d} lacks {', '.join(missing)}")
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    panel, features, stations = ingest_csv(
        d / "demand.csv", d / "features.csv", d / "stations.csv",
        weather_path=d / "weather.csv", edges_path=d / "edges.csv",
        periods_per_day=meta.get("periods_per_day"), allow_negative=meta.get("allow_negative", False),
    )
    return panel, features, stations, meta


def min_mean_demand_filter(panel: DemandPanel, threshold: float, window=None):
    """Indices of stations whose mean demand (over ``window``) exceeds ``threshold``."""
    start, stop = window if window is not None else (0, panel.n_steps)
    return np.flatnonzero(panel.demand[start:stop].mean(axis=0) > threshold)
