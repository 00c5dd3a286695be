import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from probgnn.autodiff import Tensor, backward, check_parameters
from probgnn.distributions import (
    DistParams,
    cdf,
    decompose_uncertainty,
    ensemble,
    export_params_csv,
    log_density,
    nll,
    point_prediction,
    quantile,
    sample,
    variance,
)
from probgnn.errors import DomainError, EmptyEnsemble, InvalidSpec, POutOfRange, ShapeMismatch

mus = st.floats(-5, 5)
sigmas = st.floats(0.3, 4)
probs = st.floats(1e-6, 1 - 1e-6)


def oracle(params):
    """scipy frozen distribution for a scalar DistParams."""
    mu = float(np.asarray(params.loc))
    if params.family == "Pois":
        return stats.poisson(mu)
    s = float(np.asarray(params.scale))
    if params.family == "Lap":
        return stats.laplace(mu, s)
    if params.family == "TG":
        return stats.truncnorm(-mu / s, np.inf, loc=mu, scale=s)
    return stats.norm(mu, s)


def build(family, mu, s):
    if family == "HomoG":
        return DistParams.homog(np.array(mu), s)
    if family == "Pois":
        return DistParams.pois(np.array(abs(mu) + 0.5))
    return DistParams(family, np.array(mu), np.array(s))


CONTINUOUS = ["HomoG", "HetG", "TG", "Lap"]


# --- anchor values ---------------------------------------------------------

def test_reference_values():
    assert nll(DistParams.hetg(np.zeros(1), np.ones(1)), [0.0]).item() == pytest.approx(0.918939, abs=1e-6)
    assert nll(DistParams.pois(np.ones(1)), [0.0]).item() == pytest.approx(1.0, abs=1e-12)
    assert nll(DistParams.lap(np.zeros(1), np.ones(1)), [0.0]).item() == pytest.approx(math.log(2), abs=1e-12)
    # TG at mu=0 keeps half the mass, so the density doubles
    assert nll(DistParams.tg(np.zeros(1), np.ones(1)), [0.5]).item() == pytest.approx(
        nll(DistParams.hetg(np.zeros(1), np.ones(1)), [0.5]).item() - math.log(2), abs=1e-12)
    g = DistParams.hetg(np.zeros(1), np.ones(1))
    assert quantile(g, [0.975])[0] == pytest.approx(1.959964, abs=1e-6)
    assert quantile(g, [0.75])[0] == pytest.approx(0.674490, abs=1e-6)
    assert quantile(DistParams.lap(np.zeros(1), np.ones(1)), [0.975])[0] == pytest.approx(2.995732, abs=1e-6)
    assert point_prediction(DistParams.tg(np.zeros(1), np.ones(1)))[0] == pytest.approx(0.797885, abs=1e-6)


# --- oracle comparisons ----------------------------------------------------

@pytest.mark.parametrize("family", CONTINUOUS + ["Pois"])
@given(mu=mus, s=sigmas, y=st.floats(0, 8))
def test_log_density_and_cdf_match_scipy(family, mu, s, y):
    p = build(family, mu, s)
    if family == "Pois":
        y = float(round(y))
    ref = oracle(p)
    logp = log_density(p, np.array(y)).data
    expected = ref.logpmf(y) if family == "Pois" else ref.logpdf(y)
    assert logp == pytest.approx(expected, rel=1e-9, abs=1e-9)
    assert cdf(p, y) == pytest.approx(ref.cdf(y), rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("family", CONTINUOUS)
@given(mu=mus, s=sigmas, p=probs)
def test_quantile_round_trip(family, mu, s, p):
    params = build(family, mu, s)
    x = quantile(params, np.array(p))
    assert cdf(params, x) == pytest.approx(p, abs=1e-8)


@pytest.mark.parametrize("rate", [0.3, 4.0, 18.0, 120.0])
def test_poisson_quantile_is_smallest_k(rate):
    params = DistParams.pois(np.full(200, rate))
    p = np.linspace(0.001, 0.999, 200)
    k = quantile(params, p)
    assert np.all(cdf(params, k) >= p)
    assert np.all((k == 0) | (cdf(params, k - 1) < p))
    np.testing.assert_array_equal(k, stats.poisson(rate).ppf(p))


@pytest.mark.parametrize("family", CONTINUOUS)
def test_density_integrates_to_one(family):
    p = build(family, 0.7, 1.3)
    f = lambda y: math.exp(log_density(p, np.array(y)).item()) if family != "TG" or y >= 0 else 0.0
    lo = 0.0 if family == "TG" else -40.0
    total = sum(integrate.quad(f, a, b, limit=200)[0] for a, b in [(lo, 0.7), (0.7, 40.0)])
    assert total == pytest.approx(1.0, abs=1e-6)


def test_poisson_pmf_sums_to_one():
    p = DistParams.pois(np.full(400, 7.5))
    k = np.arange(400.0)
    assert np.exp(log_density(p, k).data).sum() == pytest.approx(1.0, abs=1e-12)


def test_tg_has_no_mass_below_zero():
    p = DistParams.tg(np.array([0.1, -2.0, 5.0]), np.ones(3))
    np.testing.assert_array_equal(cdf(p, -1e-9), 0.0)
    assert np.all(quantile(p, np.full(3, 1e-6)) >= 0)


@pytest.mark.parametrize("family", ["HetG", "TG", "Lap"])
def test_point_prediction_and_variance_match_scipy(family):
    p = build(family, 0.4, 1.7)
    ref = oracle(p)
    assert point_prediction(p) == pytest.approx(ref.mean(), rel=1e-10)
    assert variance(p) == pytest.approx(ref.var(), rel=1e-9)
    if family == "TG":
        assert point_prediction(p, tg_mean="location") == pytest.approx(0.4)


# --- gradients -------------------------------------------------------------

@pytest.mark.parametrize("family", ["HetG", "TG", "Lap"])
def test_nll_gradient_wrt_parameters(family, rng):
    loc = Tensor(rng.uniform(0.5, 3, size=(3, 4)), requires_grad=True)
    scale = Tensor(rng.uniform(0.5, 2, size=(3, 4)), requires_grad=True)
    y = rng.uniform(0.1, 4, size=(3, 4))
    y = np.where(np.abs(y - loc.data) < 1e-3, y + 0.01, y)  # Laplace kink
    err = check_parameters(lambda: nll(DistParams(family, loc, scale), y), [loc, scale])
    assert err < 1e-6


def test_poisson_nll_gradient(rng):
    rate = Tensor(rng.uniform(0.5, 5, size=(2, 5)), requires_grad=True)
    y = rng.poisson(3, size=(2, 5)).astype(float)
    assert check_parameters(lambda: nll(DistParams.pois(rate), y), [rate]) < 1e-6
    rate.zero_grad()
    backward(nll(DistParams.pois(rate), y))
    np.testing.assert_allclose(rate.grad, 1 - y / rate.data, rtol=1e-12)


@given(c=st.floats(0.1, 10), seed=st.integers(0, 2**31))
def test_homog_gradient_is_scaled_residual(c, seed):
    r = np.random.default_rng(seed)
    mu = Tensor(r.normal(size=(4, 3)) * 5, requires_grad=True)
    y = r.normal(size=(4, 3)) * 5
    backward(nll(DistParams.homog(mu, c), y))
    np.testing.assert_allclose(mu.grad, (mu.data - y) / c**2, rtol=1e-13, atol=1e-15)


# --- ensembles -------------------------------------------------------------

def test_two_member_ensemble_moments():
    e = ensemble([(np.zeros(1), np.ones(1)), (np.full(1, 2.0), np.ones(1))])
    assert e.family == "GEns"
    assert e.loc[0] == pytest.approx(1.0)
    assert e.scale[0] ** 2 == pytest.approx(2.0)


@given(seed=st.integers(0, 2**31), k=st.integers(2, 6))
def test_decomposition_identity(seed, k):
    r = np.random.default_rng(seed)
    members = [(r.normal(size=(3, 2)) * 10, r.uniform(0.1, 3, size=(3, 2))) for _ in range(k)]
    model_var, data_var, total = decompose_uncertainty(members)
    assert np.all(model_var >= 0) and np.all(data_var > 0)
    np.testing.assert_allclose(model_var + data_var, total, rtol=1e-12)
    np.testing.assert_allclose(ensemble(members).scale ** 2, total, rtol=1e-12)


def test_ensemble_of_tensors_is_differentiable(rng):
    m1 = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    m2 = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    s1 = Tensor(rng.uniform(0.5, 1.5, size=(2, 3)), requires_grad=True)
    s2 = Tensor(rng.uniform(0.5, 1.5, size=(2, 3)), requires_grad=True)
    y = rng.normal(size=(2, 3))
    assert check_parameters(lambda: nll(ensemble([(m1, s1), (m2, s2)]), y), [m1, m2, s1, s2]) < 1e-6


def test_identical_members_have_zero_model_variance():
    m = np.arange(6.0).reshape(2, 3)
    model_var, _, _ = decompose_uncertainty([(m, np.ones((2, 3)))] * 4)
    assert np.all(model_var == 0)


# --- sampling --------------------------------------------------------------

@pytest.mark.parametrize("family", ["HetG", "TG", "Lap", "Pois"])
def test_sampling_matches_moments_and_is_seeded(family):
    p = build(family, 1.5, 2.0)
    draws = sample(p, 7, size=100_000)
    np.testing.assert_array_equal(draws, sample(p, 7, size=100_000))
    ref = oracle(p)
    assert draws.mean() == pytest.approx(ref.mean(), abs=4 * ref.std() / math.sqrt(draws.size))
    if family == "Pois":
        assert np.all(draws == np.round(draws))
    if family == "TG":
        assert draws.min() >= 0


# --- errors and export -----------------------------------------------------

def test_errors():
    g = DistParams.hetg(np.zeros(2), np.ones(2))
    with pytest.raises(POutOfRange):
        quantile(g, [0.0, 0.5])
    with pytest.raises(POutOfRange):
        quantile(g, [0.5, 1.0])
    with pytest.raises(DomainError):
        nll(DistParams.pois(np.ones(2)), [1.0, -1.0])
    with pytest.raises(DomainError):
        nll(DistParams.pois(np.ones(2)), [1.0, 0.5])
    with pytest.raises(DomainError):
        nll(DistParams.tg(np.ones(1), np.ones(1)), [-0.1])
    with pytest.raises(DomainError):
        DistParams.hetg(np.zeros(1), np.zeros(1))
    with pytest.raises(DomainError):
        DistParams.homog(np.zeros(1), 0.0)
    with pytest.raises(ShapeMismatch):
        nll(g, [1.0, 2.0, 3.0])
    with pytest.raises(EmptyEnsemble):
        ensemble([])
    with pytest.raises(EmptyEnsemble):
        decompose_uncertainty([(np.zeros(1), np.ones(1))])
    with pytest.raises(InvalidSpec):
        nll(g, [0.0, 0.0], reduction="median")


def test_mean_reduction():
    g = DistParams.hetg(np.zeros(4), np.ones(4))
    y = np.array([0.0, 1.0, -1.0, 2.0])
    assert nll(g, y, reduction="mean").item() == pytest.approx(nll(g, y).item() / 4, rel=1e-14)


def test_export_params_csv(tmp_path):
    members = [(np.zeros((2, 2)), np.ones((2, 2))), (np.ones((2, 2)), np.ones((2, 2)))]
    path = tmp_path / "p.csv"
    export_params_csv(ensemble(members), path, ["a", "b"], [10, 11])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["station", "time", "family", "mu", "sigma", "mu_0", "sigma_0", "mu_1", "sigma_1"]
    assert rows[1][:3] == ["a", "10", "GEns"] and float(rows[1][3]) == 0.5
    assert len(rows) == 5
