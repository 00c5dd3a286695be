"""NLL minimisation, early stopping, grid search and deep ensembles."""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import Batch, DemandPanel, FeaturePanel, NormStats, SplitPanels, compute_stats, make_batch, normalize, train_mean_demand
from .distributions import DistParams, ensemble, nll
from .errors import DivergedLoss, EmptySplit, InvalidSpec, NonFinite, ProbGnnError
from .graphs import AdjacencySet
from .model import ModelConfig, ProbGnn

DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class TrainSpec:
    lr: float = 1e-3
    max_epochs: int = 100
    batch_size: int = 1
    patience: int = 10
    weight_decay: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise InvalidSpec("lr must be >= 0")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise InvalidSpec("max_epochs, batch_size and patience must be >= 1")
        if self.weight_decay is not None and self.weight_decay < 0:
            raise InvalidSpec("weight_decay must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSpec(f"unknown train spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PreparedData:
    """Everything a training worker needs; arrays are read-only by convention."""

    adjacency: AdjacencySet
    periods_per_day: int
    n_channels: int
    lookback: int
    stats: NormStats
    ybar: float
    batches: dict

    @property
    def train(self) -> Batch:
        return self.batches["train"]

    @property
    def validation(self) -> Batch:
        return self.batches["validation"]


def prepare(panel: DemandPanel, features: FeaturePanel, splits: SplitPanels,
            adjacency: AdjacencySet, lookback: int) -> PreparedData:
    """Normalise with train-window statistics and build one Batch per window."""
    if splits.first_valid < panel.steps_per_week + lookback:
        raise InvalidSpec(f"splits were made for a shorter lookback than {lookback}")
    stats = compute_stats(features, splits.train)
    normed = normalize(features, stats)
    batches = {name: make_batch(panel, normed, splits.indices(name), lookback)
               for name in splits.windows()}
    return PreparedData(adjacency, panel.periods_per_day, len(features.channels), lookback,
                        stats, train_mean_demand(panel, splits), batches)


def build_model(config: ModelConfig, data: PreparedData) -> ProbGnn:
    if config.lookback != data.lookback:
        raise InvalidSpec(f"config lookback {config.lookback} != prepared lookback {data.lookback}")
    c = config.homog_multiple * data.ybar if config.head == "HomoG" else None
    model = ProbGnn(config, data.adjacency, data.n_channels, data.periods_per_day, homog_c=c)
    model.norm_stats = data.stats
    # seasonal-naive residuals give a sensible starting width for every head
    resid = data.train.y - data.train.last_week
    model.init_scale(resid.std(axis=0) / np.sqrt(2.0))
    return model


class AdamW:
    """Adam with decoupled weight decay (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainReport:
    train_nll: list = field(default_factory=list)
    val_nll: list = field(default_factory=list)
    best_epoch: int = 0
    wall_clock: float = 0.0
    checksum: str = ""

    @property
    def best_val_nll(self):
        return min(self.val_nll) if self.val_nll else math.inf

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_nll", "val_nll"])
            for k, (a, b) in enumerate(zip(self.train_nll, self.val_nll), start=1):
                w.writerow([k, repr(a), repr(b)])

    def summary(self):
        return {
            "epochs": len(self.train_nll),
            "best_epoch": self.best_epoch,
            "best_val_nll": self.best_val_nll,
            "final_train_nll": self.train_nll[-1] if self.train_nll else None,
            "checksum": self.checksum,
            "wall_clock_s": self.wall_clock,
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _check_loss(value, epoch):
    if not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise DivergedLoss(f"NLL diverged at epoch {epoch}: {value!r}")


def evaluate_nll(model: ProbGnn, batch: Batch, chunk=512) -> float:
    """Per-observation NLL in eval mode."""
    total = 0.0
    for i in range(0, len(batch), chunk):
        part = batch.subset(slice(i, i + chunk))
        total += nll(model.forward(part), part.y).item()
    return total / batch.y.size


def train(model: ProbGnn, data: PreparedData, spec: TrainSpec) -> TrainReport:
    """AdamW on mean per-cell NLL with early stopping on validation NLL.

    A batch is ``batch_size`` contiguous target steps (default one step's
    full graph); batch order is reshuffled every epoch.

    Parameters are restored to the best-validation epoch before returning.
    """
    if len(data.train) == 0:
        raise EmptySplit("train window is empty")
    if len(data.validation) == 0:
        raise EmptySplit("validation window is empty")
    start = time.perf_counter()
    wd = model.config.weight_decay if spec.weight_decay is None else spec.weight_decay
    params = model.parameters()
    opt = AdamW(params.values(), lr=spec.lr, weight_decay=wd)
    order_rng = np.random.default_rng([spec.seed, 2])
    model.dropout_rng = np.random.default_rng([spec.seed, 3])
    report = TrainReport()
    best_state, stale = model.state_dict(), 0
    n = len(data.train)
    starts = np.arange(0, n, spec.batch_size)
    for epoch in range(1, spec.max_epochs + 1):
        total, cells = 0.0, 0
        for i in order_rng.permutation(starts):
            part = data.train.subset(slice(i, i + spec.batch_size))
            try:
                loss = nll(model.forward(part, training=True), part.y, reduction="mean")
            except NonFinite as exc:
                raise DivergedLoss(f"non-finite forward pass at epoch {epoch}: {exc}") from None
            _check_loss(loss.item(), epoch)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += loss.item() * part.y.size
            cells += part.y.size
        report.train_nll.append(total / cells)
        try:
            val = evaluate_nll(model, data.validation)
        except NonFinite as exc:
            raise DivergedLoss(f"non-finite validation pass at epoch {epoch}: {exc}") from None
        _check_loss(val, epoch)
        report.val_nll.append(val)
        if val <= min(report.val_nll):
            report.best_epoch = epoch
            best_state, stale = model.state_dict(), 0
        else:
            stale += 1
            if stale >= spec.patience:
                break
    model.load_state_dict(best_state)
    report.checksum = model.checksum()
    report.wall_clock = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# grid search and ensembles


def derive_seed(root: int, index: int) -> int:
    return int(np.random.SeedSequence([int(root), int(index)]).generate_state(1)[0])


@dataclass
class TrialResult:
    index: int
    config: ModelConfig
    spec: TrainSpec
    val_nll: float
    report: TrainReport | None = None
    state: dict | None = field(default=None, repr=False)
    homog_c: float | None = None
    error: str | None = None

    def restore(self, data: PreparedData) -> ProbGnn:
        if self.state is None:
            raise ProbGnnError(f"trial {self.index} failed: {self.error}")
        model = build_model(self.config, data)
        model.homog_c = self.homog_c
        model.load_state_dict(self.state)
        return model


_WORKER_DATA = None


def _init_worker(data):
    global _WORKER_DATA
    _WORKER_DATA = data


def _run_trial(job):
    index, config, spec = job
    data = _WORKER_DATA
    try:
        model = build_model(config, data)
        report = train(model, data, spec)
    except (ProbGnnError, DivergedLoss) as exc:
        return TrialResult(index, config, spec, math.inf, error=f"{type(exc).__name__}: {exc}")
    return TrialResult(index, config, spec, report.best_val_nll, report, model.state_dict(), model.homog_c)


def _run_jobs(jobs_list, data, jobs):
    if jobs <= 1 or len(jobs_list) <= 1:
        _init_worker(data)
        try:
            return [_run_trial(j) for j in jobs_list]
        finally:
            _init_worker(None)
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(data,)) as pool:
        return list(pool.map(_run_trial, jobs_list))


def grid_search(grid, data: PreparedData, spec: TrainSpec, jobs: int = 1, root_seed: int = 0, indices=None):
    """Train every grid entry and rank by best validation NLL (ascending).

    Entries are ModelConfigs or ``(ModelConfig, TrainSpec)`` pairs.  Trial i
    is seeded from ``(root_seed, i)`` regardless of ``jobs``; ``indices``
    overrides the trial numbers when a grid is run in pieces.  Failed trials
    rank last with ``val_nll = inf`` and an ``error`` message.
    """
    grid = list(grid)
    if not grid:
        raise InvalidSpec("grid is empty")
    indices = range(len(grid)) if indices is None else list(indices)
    if len(indices) != len(grid):
        raise InvalidSpec("indices must match the grid length")
    jobs_list = []
    for i, entry in zip(indices, grid):
        config, trial_spec = entry if isinstance(entry, tuple) else (entry, spec)
        seed = derive_seed(root_seed, i)
        jobs_list.append((i, config.replace(seed=seed), replace(trial_spec, seed=seed)))
    results = _run_jobs(jobs_list, data, jobs)
    return sorted(results, key=lambda r: (r.val_nll, r.index))


def homog_search(config: ModelConfig, data: PreparedData, spec: TrainSpec,
                 multiples=(0.25, 0.5, 0.75, 1.0), jobs: int = 1, root_seed: int = 0):
    """Grid over the fixed HomoG scale c = multiple * mean(train demand)."""
    grid = [config.replace(head="HomoG", homog_multiple=m) for m in multiples]
    return grid_search(grid, data, spec, jobs=jobs, root_seed=root_seed)


class Ensemble:
    """Uniform Gaussian mixture of trained HetG members, moment matched."""

    def __init__(self, models):
        self.models = list(models)
        if not self.models:
            raise InvalidSpec("ensemble needs members")

    @property
    def config(self):
        return self.models[0].config.replace(head="GEns")

    def member_params(self, batch):
        return [m.predict(batch) for m in self.models]

    def predict(self, batch) -> DistParams:
        return ensemble([(p.loc, p.scale) for p in self.member_params(batch)])

    def point(self, params):
        return np.asarray(params.loc).copy()


@dataclass
class EnsembleResult:
    members: list
    runs: list
    ensemble: Ensemble
    params: DistParams
    window: str


def train_ensemble(config: ModelConfig, k: int, data: PreparedData, spec: TrainSpec,
                   n_runs: int | None = None, jobs: int = 1, root_seed: int = 0,
                   identical_seeds: bool = False, window: str = "test") -> EnsembleResult:
    """Train ``n_runs`` (>= k) HetG runs, keep the k best by validation NLL, mix them."""
    if k < 2:
        raise InvalidSpec("an ensemble needs k >= 2")
    n_runs = k if n_runs is None else n_runs
    if n_runs < k:
        raise InvalidSpec("n_runs must be >= k")
    if config.head not in ("HetG", "GEns"):
        raise InvalidSpec("ensemble members use the HetG head")
    member = config.replace(head="HetG")
    jobs_list = []
    for i in range(n_runs):
        seed = derive_seed(root_seed, 0 if identical_seeds else i)
        jobs_list.append((i, member.replace(seed=seed), replace(spec, seed=seed)))
    runs = sorted(_run_jobs(jobs_list, data, jobs), key=lambda r: (r.val_nll, r.index))
    good = [r for r in runs if r.error is None]
    if len(good) < k:
        raise DivergedLoss(f"only {len(good)} of {n_runs} ensemble runs finished")
    top = good[:k]
    ens = Ensemble([r.restore(data) for r in top])
    return EnsembleResult(top, runs, ens, ens.predict(data.batches[window]), window)
