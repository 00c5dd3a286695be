"""The six predictive distribution families and their math.

A :class:`DistParams` carries per-cell parameters for one family.  Fields
may hold numpy arrays or autodiff :class:`~probgnn.autodiff.Tensor` objects;
:func:`nll` stays differentiable in the latter case, while CDF, quantile and
sampling always work on plain arrays.

Field usage per family::

    HomoG  loc=mu   scale=c (broadcast)   c=global constant
    HetG   loc=mu   scale=sigma
    TG     loc=mu   scale=sigma           normal left-truncated at 0
    Lap    loc=mu   scale=b
    Pois   loc=lambda
    GEns   loc=mu*  scale=sigma*          members=[(mu_k, sigma_k), ...]
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, EmptyEnsemble, InvalidSpec, POutOfRange, ProbGnnError, ShapeMismatch

FAMILIES = ("HomoG", "Pois", "HetG", "TG", "Lap", "GEns")
GAUSSIAN_LIKE = ("HomoG", "HetG", "GEns")
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
_SQRT2 = math.sqrt(2.0)


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class DistParams:
    family: str
    loc: object = None
    scale: object = None
    c: float | None = None
    members: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ProbGnnError(f"unknown family {self.family!r}")
        if self.loc is None:
            raise ProbGnnError(f"{self.family} needs a location/rate")
        if self.family == "Pois":
            if np.any(_arr(self.loc) <= 0):
                raise DomainError("Poisson rate must be positive")
            return
        if self.scale is None:
            raise ProbGnnError(f"{self.family} needs a scale")
        if np.any(_arr(self.scale) <= 0):
            raise DomainError(f"{self.family} scale must be positive")

    # constructors ---------------------------------------------------------
    @classmethod
    def homog(cls, mu, c: float):
        c = float(c)
        if c <= 0:
            raise DomainError("HomoG constant must be positive")
        return cls("HomoG", loc=mu, scale=np.full(np.shape(_arr(mu)), c), c=c)

    @classmethod
    def hetg(cls, mu, sigma):
        return cls("HetG", loc=mu, scale=sigma)

    @classmethod
    def tg(cls, mu, sigma):
        return cls("TG", loc=mu, scale=sigma)

    @classmethod
    def lap(cls, mu, b):
        return cls("Lap", loc=mu, scale=b)

    @classmethod
    def pois(cls, rate):
        return cls("Pois", loc=rate)

    # accessors ------------------------------------------------------------
    @property
    def mu(self):
        return self.loc

    @property
    def sigma(self):
        return self.scale

    @property
    def rate(self):
        return self.loc

    @property
    def b(self):
        return self.scale

    @property
    def shape(self):
        return np.shape(_arr(self.loc))

    def detach(self) -> "DistParams":
        """Same parameters as plain arrays (no autodiff graph)."""
        members = None
        if self.members is not None:
            members = [(_arr(m).copy(), _arr(s).copy()) for m, s in self.members]
        scale = None if self.scale is None else _arr(self.scale).copy()
        return DistParams(self.family, _arr(self.loc).copy(), scale, self.c, members)

    def select(self, index) -> "DistParams":
        """Sub-panel, e.g. ``params.select(slice(0, 10))`` for the first 10 rows."""
        p = self.detach()
        members = None if p.members is None else [(m[index], s[index]) for m, s in p.members]
        scale = None if p.scale is None else p.scale[index]
        return DistParams(p.family, p.loc[index], scale, p.c, members)


# ---------------------------------------------------------------------------
# log density / NLL


def _check_targets(family, y):
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise DomainError("targets must be finite")
    if family in ("Pois", "TG") and np.any(y < 0):
        idx = tuple(int(i) for i in np.argwhere(y < 0)[0])
        raise DomainError(f"{family} needs nonnegative targets; y{list(idx)}={y[idx]}")
    if family == "Pois" and np.any(y != np.round(y)):
        raise DomainError("Poisson needs integer targets")
    return y


def log_density(params: DistParams, y) -> Tensor:
    """Elementwise log density (log pmf for Poisson) as a Tensor."""
    fam = params.family
    y = _check_targets(fam, y)
    if np.shape(y) != params.shape:
        raise ShapeMismatch(f"targets {np.shape(y)} vs params {params.shape}")
    loc = ad.constant(params.loc)
    if fam == "Pois":
        return ad.mul(y, ad.log(loc)) - loc - special.gammaln(y + 1.0)
    if fam == "HomoG":
        z = ad.scalar_mul(ad.sub(y, loc), 1.0 / params.c)
        return ad.scalar_mul(ad.square(z), -0.5) - (math.log(params.c) + _HALF_LOG_2PI)
    scale = ad.constant(params.scale)
    if fam == "Lap":
        return -ad.absolute(ad.sub(y, loc)) / scale - ad.log(ad.scalar_mul(scale, 2.0))
    z = ad.div(ad.sub(y, loc), scale)
    out = ad.scalar_mul(ad.square(z), -0.5) - ad.log(scale) - _HALF_LOG_2PI
    if fam == "TG":
        # normaliser 1 - Phi(-mu/sigma) = Phi(mu/sigma)
        out = out - ad.log_ndtr(ad.div(loc, scale))
    return out


def nll(params: DistParams, y, reduction: str = "sum") -> Tensor:
    """Negative log-likelihood, summed (default) or averaged over cells."""
    logp = log_density(params, y)
    total = ad.tsum(logp)
    if reduction == "mean":
        return ad.scalar_mul(total, -1.0 / logp.data.size)
    if reduction != "sum":
        raise InvalidSpec(f"unknown reduction {reduction!r}")
    return -total


# ---------------------------------------------------------------------------
# CDF


def _ndtr(z):
    return 0.5 * special.erfc(-z / _SQRT2)


def _ndtr_upper(z):
    return 0.5 * special.erfc(z / _SQRT2)


def cdf(params: DistParams, y):
    """P(Y <= y) per cell; ``y`` broadcasts against the parameter panel."""
    fam = params.family
    y = np.asarray(y, dtype=np.float64)
    loc = _arr(params.loc)
    if fam == "Pois":
        k = np.floor(y)
        out = special.gammaincc(np.maximum(k, 0.0) + 1.0, loc)
        return np.where(y < 0, 0.0, out)
    scale = _arr(params.scale)
    if fam == "Lap":
        d = (y - loc) / scale
        return np.where(d < 0, 0.5 * np.exp(np.minimum(d, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(d, 0.0)))
    z = (y - loc) / scale
    if fam == "TG":
        a = -loc / scale
        tail0 = _ndtr_upper(a)
        out = (tail0 - _ndtr_upper(z)) / tail0
        return np.where(y < 0, 0.0, np.clip(out, 0.0, 1.0))
    return _ndtr(z)


def _pdf(params: DistParams, y):
    fam = params.family
    loc, scale = _arr(params.loc), _arr(params.scale)
    z = (y - loc) / scale
    dens = np.exp(-0.5 * z * z) / (scale * math.sqrt(2 * math.pi))
    if fam == "TG":
        dens = np.where(y < 0, 0.0, dens / _ndtr_upper(-loc / scale))
    return dens


# ---------------------------------------------------------------------------
# quantiles


def _check_p(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(~(p > 0)) or np.any(~(p < 1)):
        raise POutOfRange(f"probability must lie in (0, 1), got {p.min()}..{p.max()}")
    return p


def _root_find(params: DistParams, p, tol=1e-12, max_iter=200):
    """Safeguarded Newton on the monotone CDF, vectorised over cells."""
    loc = _arr(params.loc)
    scale = _arr(params.scale)
    loc, scale, p = np.broadcast_arrays(loc, scale, p)
    lo = loc - 40.0 * scale
    hi = loc + 40.0 * scale
    if params.family == "TG":
        lo = np.zeros_like(loc)
        hi = np.maximum(loc, 0.0) + 40.0 * scale
    x = np.clip(loc, lo, hi).astype(np.float64)
    for _ in range(max_iter):
        f = cdf(params, x) - p
        if np.all(np.abs(f) <= tol):
            break
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        dens = _pdf(params, x)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = x - f / dens
        bad = ~np.isfinite(step) | (step <= lo) | (step >= hi)
        x = np.where(bad, 0.5 * (lo + hi), step)
    return x


def _poisson_quantile(rate, p):
    rate, p = np.broadcast_arrays(rate, p)
    z = special.ndtri(p)
    k = np.maximum(np.floor(rate + z * np.sqrt(rate)) - 2.0, 0.0)
    while True:
        low = special.gammaincc(k + 1.0, rate) < p
        if not low.any():
            break
        k = k + low
    while True:
        prev_ok = (k > 0) & (special.gammaincc(np.maximum(k, 1.0), rate) >= p)
        if not prev_ok.any():
            break
        k = k - prev_ok
    return k


def quantile(params: DistParams, p):
    """Inverse CDF.  Poisson returns the smallest k with CDF(k) >= p."""
    p = _check_p(p)
    fam = params.family
    loc = _arr(params.loc)
    if fam == "Pois":
        return _poisson_quantile(loc, p)
    if fam == "Lap":
        b = _arr(params.scale)
        d = p - 0.5
        return loc - b * np.sign(d) * np.log1p(-2.0 * np.abs(d))
    return _root_find(params, p)


# ---------------------------------------------------------------------------
# ensembles


def ensemble(members) -> DistParams:
    """Moment-matched Gaussian for a uniform mixture of K Gaussian members.

    mu* = mean(mu_k);  sigma*^2 = mean(sigma_k^2 + mu_k^2) - mu*^2.
    The variance is accumulated in the centred form mean(sigma_k^2) +
    mean((mu_k - mu*)^2), which is the same quantity without cancellation.
    Means are taken relative to the first member, so identical members give
    exactly zero spread.
    Works on Tensors, so it can sit inside a differentiable loss.
    """
    members = list(members)
    if not members:
        raise EmptyEnsemble("ensemble needs at least one member")
    shape = np.shape(_arr(members[0][0]))
    for m, s in members:
        if np.shape(_arr(m)) != shape or np.shape(_arr(s)) != shape:
            raise ShapeMismatch("ensemble members must share one panel shape")
    as_tensor = any(isinstance(x, Tensor) for pair in members for x in pair)
    k = 1.0 / len(members)
    ref = ad.constant(members[0][0])
    dev = [ad.sub(m, ref) for m, _ in members]
    mean_dev = ad.scalar_mul(_sum_tensors(dev), k)
    mu = ad.add(ref, mean_dev)
    data_var = ad.scalar_mul(_sum_tensors([ad.square(ad.constant(s)) for _, s in members]), k)
    model_var = ad.scalar_mul(_sum_tensors([ad.square(ad.sub(d, mean_dev)) for d in dev]), k)
    sigma = _sqrt(ad.add(data_var, model_var))
    if not as_tensor:
        mu, sigma = mu.data, sigma.data
        members = [(_arr(m), _arr(s)) for m, s in members]
    return DistParams("GEns", loc=mu, scale=sigma, members=members)


def _sum_tensors(ts):
    out = ts[0]
    for t in ts[1:]:
        out = ad.add(out, t)
    return out


def _sqrt(t: Tensor) -> Tensor:
    return ad.exp(ad.scalar_mul(ad.log(t), 0.5))


def decompose_uncertainty(members):
    """Split ensemble variance into (model_var, data_var, total_var) panels.

    data_var is the mean member variance, model_var the spread of member
    means; total_var equals the ensemble variance and model + data = total.
    """
    members = [(_arr(m), _arr(s)) for m, s in members]
    if len(members) < 2:
        raise EmptyEnsemble("decomposition needs at least two members")
    mus = np.stack([m for m, _ in members])
    sig2 = np.stack([s * s for _, s in members])
    dev = mus - mus[0]
    data_var = sig2.mean(axis=0)
    model_var = ((dev - dev.mean(axis=0)) ** 2).mean(axis=0)
    return model_var, data_var, data_var + model_var


# ---------------------------------------------------------------------------
# sampling and point predictions


def sample(params: DistParams, rng_seed, size: int | None = None):
    """Inverse-transform draws.  ``size`` adds a leading replicate axis."""
    rng = np.random.default_rng(rng_seed)
    shape = params.shape if size is None else (size,) + params.shape
    u = rng.random(shape)
    # keep u strictly inside (0, 1)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    return quantile(params, u)


def point_prediction(params: DistParams, tg_mean: str = "truncated"):
    """Distribution mean per cell.

    For TG, ``tg_mean="location"`` returns mu instead of the truncated mean.
    """
    loc = _arr(params.loc)
    if params.family != "TG" or tg_mean == "location":
        return loc.copy()
    if tg_mean != "truncated":
        raise InvalidSpec(f"tg_mean must be 'truncated' or 'location', got {tg_mean!r}")
    scale = _arr(params.scale)
    alpha = -loc / scale
    # phi(alpha) / (1 - Phi(alpha)) in log space
    hazard = np.exp(-0.5 * alpha * alpha - _HALF_LOG_2PI - special.log_ndtr(-alpha))
    return loc + scale * hazard


def variance(params: DistParams):
    """Per-cell predictive variance."""
    loc = _arr(params.loc)
    if params.family == "Pois":
        return loc.copy()
    scale = _arr(params.scale)
    if params.family == "Lap":
        return 2.0 * scale * scale
    if params.family == "TG":
        alpha = -loc / scale
        hazard = np.exp(-0.5 * alpha * alpha - _HALF_LOG_2PI - special.log_ndtr(-alpha))
        return scale * scale * (1.0 + alpha * hazard - hazard * hazard)
    return scale * scale


# ---------------------------------------------------------------------------
# CSV export

_PARAM_COLUMNS = {
    "HomoG": ("mu", "sigma"),
    "HetG": ("mu", "sigma"),
    "TG": ("mu", "sigma"),
    "GEns": ("mu", "sigma"),
    "Lap": ("mu", "b"),
    "Pois": ("rate",),
}


def export_params_csv(params: DistParams, path, station_ids=None, timestamps=None):
    """Write ``station, time, family, <params>`` rows (one per cell).

    GEns panels also carry ``mu_k``/``sigma_k`` member columns.
    """
    p = params.detach()
    n_time, n_station = p.shape
    station_ids = station_ids if station_ids is not None else [str(i) for i in range(n_station)]
    timestamps = timestamps if timestamps is not None else list(range(n_time))
    cols = list(_PARAM_COLUMNS[p.family])
    extra = []
    if p.members is not None:
        for k in range(len(p.members)):
            extra += [f"mu_{k}", f"sigma_{k}"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station", "time", "family"] + cols + extra)
        for t in range(n_time):
            for s in range(n_station):
                vals = [p.loc[t, s]] if p.family == "Pois" else [p.loc[t, s], p.scale[t, s]]
                for m, sd in p.members or ():
                    vals += [m[t, s], sd[t, s]]
                w.writerow([station_ids[s], timestamps[t], p.family] + [repr(float(v)) for v in vals])
