"""The full probabilistic GNN: spatial encoder -> LSTM -> decoder, plus history and weather terms.

Slot 0 of every component feeds the location (or Poisson rate), slot 1 the
raw scale.  The three components are summed in raw space and the head's link
is applied once::

    raw = recent + w_h * last_week + W_p[tod] * precip + W_t[tod] * temp
    mu = raw[..., 0];   sigma = softplus(raw[..., 1]) + 1e-3
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import NormStats
from .distributions import FAMILIES, DistParams, point_prediction
from .errors import CheckpointError, DropoutDisabled, InvalidSpec, ShapeMismatch, UnknownTimeOfDay
from .graphs import AdjacencySet
from .spatial import ACTIVATIONS, GatLayer, GcnLayer
from .temporal import Decoder, LstmStack, decode, lstm_forward

CHECKPOINT_FORMAT = "probgnn-checkpoint/1"
SCALE_FLOOR = 1e-3
RATE_FLOOR = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    spatial: str = "GCN"
    head: str = "HetG"
    lookback: int = 2
    spatial_layers: int = 1
    width: int = 16
    lstm_layers: int = 1
    heads: int = 4
    dropout: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    activation: str = "relu"
    homog_multiple: float = 0.5
    tg_mean: str = "truncated"
    gat_percentile: float | None = None

    def __post_init__(self):
        if self.spatial not in ("GCN", "GAT"):
            raise InvalidSpec(f"spatial must be GCN or GAT, got {self.spatial!r}")
        if self.head not in FAMILIES:
            raise InvalidSpec(f"head must be one of {FAMILIES}, got {self.head!r}")
        if self.lookback < 1:
            raise InvalidSpec("lookback must be >= 1")
        if self.width < 1 or self.spatial_layers < 1 or self.lstm_layers < 1 or self.heads < 1:
            raise InvalidSpec("width, layer counts and heads must be >= 1")
        if not 0 <= self.dropout < 1:
            raise InvalidSpec("dropout must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidSpec("weight_decay must be >= 0")
        if not self.homog_multiple > 0:
            raise InvalidSpec("homog_multiple must be positive")
        if self.activation not in ACTIVATIONS:
            raise InvalidSpec(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")
        if self.tg_mean not in ("truncated", "location"):
            raise InvalidSpec(f"tg_mean must be 'truncated' or 'location', got {self.tg_mean!r}")
        if self.gat_percentile is not None and not 0 <= self.gat_percentile < 100:
            raise InvalidSpec("gat_percentile must lie in [0, 100)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        return replace(self, **changes)

    @property
    def label(self):
        return f"{self.head}-{self.spatial}"


class ProbGnn:
    def __init__(self, config: ModelConfig, adjacency: AdjacencySet, n_channels: int,
                 periods_per_day: int, homog_c: float | None = None):
        self.config = config
        self.adjacency = adjacency
        self.n_stations = adjacency.n_nodes
        self.n_channels = n_channels
        self.periods_per_day = periods_per_day
        self.homog_c = homog_c
        self.norm_stats = None
        rng = np.random.default_rng([config.seed, 0])
        S, H = self.n_stations, config.width

        self.spatial_layers = []
        d_in = n_channels
        if config.spatial == "GCN":
            for _ in range(config.spatial_layers):
                self.spatial_layers.append(
                    GcnLayer(d_in, H, len(adjacency), config.activation, config.dropout, rng))
                d_in = H
        else:
            mask = adjacency.neighborhood_mask(config.gat_percentile)
            for k in range(config.spatial_layers):
                last = k == config.spatial_layers - 1
                layer = GatLayer(d_in, H, mask, config.heads, concat=not last,
                                 activation=config.activation, dropout=config.dropout, rng=rng)
                self.spatial_layers.append(layer)
                d_in = layer.out_features
        self.lstm = LstmStack(S * d_in, H, config.lstm_layers, rng)
        self.decoder = Decoder(H, S, rng)
        # history weights start at exactly (1, 0): last week's demand is the prior for
        # the location; random weights here would multiply raw demand into the scale
        self.decoder.w_history.data[...] = 0.0
        self.decoder.b_history.data.reshape(S, 2)[:, 0] = 1.0
        self.weather_p = Tensor(np.zeros((periods_per_day, S, 2)), requires_grad=True)
        self.weather_t = Tensor(np.zeros((periods_per_day, S, 2)), requires_grad=True)
        self.dropout_rng = np.random.default_rng([config.seed, 1])

    # parameters -----------------------------------------------------------
    def parameters(self) -> dict:
        params = {}
        for k, layer in enumerate(self.spatial_layers):
            for name, p in layer.parameters().items():
                params[f"spatial{k}.{name}"] = p
        for name, p in self.lstm.parameters().items():
            params[f"lstm.{name}"] = p
        for name, p in self.decoder.parameters().items():
            params[f"decoder.{name}"] = p
        params["weather.precip"] = self.weather_p
        params["weather.temp"] = self.weather_t
        return params

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict):
        params = self.parameters()
        if set(state) != set(params):
            raise CheckpointError("parameter names do not match the model layout")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise CheckpointError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, p in sorted(self.parameters().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # forward --------------------------------------------------------------
    def forward(self, batch, training=False, rng=None) -> DistParams:
        return forward(self, batch, training=training, rng=rng)

    def predict(self, batch, chunk=512) -> DistParams:
        """Eval-mode parameters as plain arrays, computed in chunks."""
        parts = [self.forward(batch.subset(slice(i, i + chunk))).detach() for i in range(0, len(batch), chunk)]
        return concat_params(parts)

    def init_scale(self, spread):
        """Start the scale slot at ``spread`` (scalar or per station) instead of softplus(0)."""
        target = np.maximum(np.broadcast_to(np.asarray(spread, dtype=np.float64), (self.n_stations,)) - SCALE_FLOOR, 1e-3)
        raw = target + np.log(-np.expm1(-target))  # inverse softplus
        self.decoder.b_recent.data.reshape(self.n_stations, 2)[:, 1] = raw

    def point(self, params: DistParams):
        return point_prediction(params, tg_mean=self.config.tg_mean)


def forward(model: ProbGnn, batch, training=False, rng=None) -> DistParams:
    cfg = model.config
    recent = np.asarray(batch.recent, dtype=np.float64)
    if recent.ndim != 4 or recent.shape[1:] != (cfg.lookback, model.n_stations, model.n_channels):
        raise ShapeMismatch(
            f"recent must be (B, {cfg.lookback}, {model.n_stations}, {model.n_channels}), got {recent.shape}")
    tod = np.asarray(batch.tod, dtype=int)
    if np.any(tod < 0) or np.any(tod >= model.periods_per_day):
        raise UnknownTimeOfDay(f"time-of-day index outside [0, {model.periods_per_day})")
    if training and rng is None:
        rng = model.dropout_rng
    B, L, S = recent.shape[0], cfg.lookback, model.n_stations

    x = Tensor(recent.reshape(B * L, S, model.n_channels))
    for layer in model.spatial_layers:
        if cfg.spatial == "GCN":
            x = layer(x, model.adjacency, training=training, rng=rng)
        else:
            x = layer(x, training=training, rng=rng)
    x = ad.reshape(x, (B, L, S * x.shape[-1]))
    h_last = lstm_forward(model.lstm, x)
    recent_part, hist_weights = decode(model.decoder, h_last)

    last_week = np.asarray(batch.last_week, dtype=np.float64)[:, :, None]
    weather = np.asarray(batch.weather, dtype=np.float64)
    raw = ad.add(recent_part, ad.mul(hist_weights, last_week))
    if np.any(weather != 0):
        wp = ad.mul(model.weather_p[tod], weather[:, 0][:, None, None])
        wt = ad.mul(model.weather_t[tod], weather[:, 1][:, None, None])
        raw = ad.add(raw, ad.add(wp, wt))
    return _apply_head(model, raw[..., 0], raw[..., 1])


def _apply_head(model, loc_raw, scale_raw) -> DistParams:
    head = model.config.head
    if head == "Pois":
        return DistParams.pois(ad.add(ad.softplus(loc_raw), RATE_FLOOR))
    if head == "HomoG":
        if model.homog_c is None:
            raise InvalidSpec("HomoG head needs homog_c (set from the train-window mean)")
        return DistParams.homog(loc_raw, model.homog_c)
    scale = ad.add(ad.softplus(scale_raw), SCALE_FLOOR)
    if head == "TG":
        return DistParams.tg(loc_raw, scale)
    if head == "Lap":
        return DistParams.lap(loc_raw, scale)
    # HetG, and GEns members
    return DistParams.hetg(loc_raw, scale)


def concat_params(parts) -> DistParams:
    first = parts[0]
    loc = np.concatenate([p.loc for p in parts])
    scale = None if first.scale is None else np.concatenate([p.scale for p in parts])
    members = None
    if first.members is not None:
        members = [(np.concatenate([p.members[k][0] for p in parts]),
                    np.concatenate([p.members[k][1] for p in parts])) for k in range(len(first.members))]
    return DistParams(first.family, loc, scale, first.c, members)


def mc_dropout_predict(model: ProbGnn, batch, passes: int = 50, seed=0, reuse_masks=False):
    """Mean and variance of point predictions over stochastic dropout passes.

    With ``reuse_masks`` every pass restarts the same rng stream, so all
    passes share masks (variance exactly 0).
    """
    if model.config.dropout <= 0:
        raise DropoutDisabled("MC dropout needs a model trained with dropout > 0")
    if passes < 2:
        raise InvalidSpec("need at least two passes")
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(passes):
        r = np.random.default_rng(seed) if reuse_masks else rng
        params = model.forward(batch, training=True, rng=r).detach()
        draws.append(model.point(params))
    draws = np.stack(draws)
    return draws.mean(axis=0), draws.var(axis=0)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ProbGnn, path, extra=None):
    """Write an ``.npz``: parameters, adjacency and a JSON header with config and stats."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "n_channels": model.n_channels,
        "periods_per_day": model.periods_per_day,
        "homog_c": model.homog_c,
        "adjacency_names": list(model.adjacency.names),
        "norm_stats": None if model.norm_stats is None else model.norm_stats.to_dict(),
        "parameter_shapes": {k: list(p.shape) for k, p in model.parameters().items()},
    }
    meta.update(extra or {})
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    for name, a in zip(model.adjacency.names, model.adjacency.raw):
        arrays[f"adj/{name}"] = a
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: unsupported format {meta.get('format')!r}")
            adj = AdjacencySet(meta["adjacency_names"], [z[f"adj/{n}"] for n in meta["adjacency_names"]])
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    model = ProbGnn(ModelConfig.from_dict(meta["config"]), adj, meta["n_channels"],
                    meta["periods_per_day"], meta["homog_c"])
    model.load_state_dict(state)
    if meta.get("norm_stats") is not None:
        model.norm_stats = NormStats.from_dict(meta["norm_stats"])
    return model, meta
