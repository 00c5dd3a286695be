import numpy as np
import pytest

from probgnn.autodiff import Tensor, backward
from probgnn import autodiff as ad
from probgnn.errors import DivergedLoss, EmptySplit, InvalidSpec
from probgnn.model import ModelConfig
from probgnn.training import (
    AdamW,
    TrainSpec,
    build_model,
    derive_seed,
    evaluate_nll,
    grid_search,
    homog_search,
    train,
    train_ensemble,
)

SMALL = dict(width=4, lookback=2)


def reference_adam(x0, grad, steps, lr, wd=0.0, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = x0.copy(), np.zeros_like(x0), np.zeros_like(x0)
    for t in range(1, steps + 1):
        g = grad(x)
        x = x - lr * wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return x


@pytest.mark.parametrize("wd", [0.0, 0.1])
def test_adamw_matches_reference(wd):
    target = np.array([1.0, -2.0, 0.5])
    x = Tensor(np.zeros(3), requires_grad=True)
    opt = AdamW([x], lr=0.05, weight_decay=wd)
    for _ in range(25):
        opt.zero_grad()
        backward(ad.tsum(ad.square(ad.sub(x, target))))
        opt.step()
    expected = reference_adam(np.zeros(3), lambda z: 2 * (z - target), 25, 0.05, wd)
    np.testing.assert_allclose(x.data, expected, rtol=1e-14, atol=0 if wd else 1e-300)


def test_zero_lr_leaves_parameters_and_curve_flat(tiny):
    data = tiny[3]
    model = build_model(ModelConfig(**SMALL), data)
    before = model.checksum()
    report = train(model, data, TrainSpec(lr=0.0, max_epochs=3, patience=5))
    assert model.checksum() == before
    assert len(set(report.val_nll)) == 1
    np.testing.assert_allclose(report.train_nll, report.train_nll[0], rtol=1e-12)


def test_training_descends_and_restores_best(tiny):
    data = tiny[3]
    model = build_model(ModelConfig(**SMALL), data)
    report = train(model, data, TrainSpec(lr=3e-3, max_epochs=12, patience=3))
    assert report.train_nll[-1] < report.train_nll[0]
    assert report.best_val_nll == min(report.val_nll)
    assert len(report.val_nll) <= 12
    assert evaluate_nll(model, data.validation) == pytest.approx(report.best_val_nll, rel=1e-12)
    assert report.checksum == model.checksum()


def test_training_is_deterministic(tiny):
    data = tiny[3]
    spec = TrainSpec(max_epochs=3, patience=3, seed=5)
    a = build_model(ModelConfig(dropout=0.2, **SMALL), data)
    b = build_model(ModelConfig(dropout=0.2, **SMALL), data)
    ra, rb = train(a, data, spec), train(b, data, spec)
    assert ra.checksum == rb.checksum
    assert ra.val_nll == rb.val_nll


def test_report_exports(tiny, tmp_path):
    data = tiny[3]
    report = train(build_model(ModelConfig(**SMALL), data), data, TrainSpec(max_epochs=2))
    report.to_csv(tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_nll,val_nll" and len(rows) == 3
    report.to_json(tmp_path / "r.json")
    assert "best_epoch" in (tmp_path / "r.json").read_text()


def test_train_spec_validation():
    with pytest.raises(InvalidSpec):
        TrainSpec(lr=-1.0)
    with pytest.raises(InvalidSpec):
        TrainSpec(patience=0)
    with pytest.raises(InvalidSpec):
        TrainSpec.from_dict({"lr": 1e-3, "momentum": 0.9})


def test_empty_split_is_rejected(tiny):
    data = tiny[3]
    model = build_model(ModelConfig(**SMALL), data)
    empty = data.train.subset(slice(0, 0))
    broken = type(data)(**{**data.__dict__, "batches": {**data.batches, "train": empty}})
    with pytest.raises(EmptySplit):
        train(model, broken, TrainSpec(max_epochs=1))


def test_divergence_is_reported(tiny):
    data = tiny[3]
    model = build_model(ModelConfig(head="HomoG", homog_multiple=1e-9, **SMALL), data)
    with pytest.raises(DivergedLoss):
        train(model, data, TrainSpec(max_epochs=1))


# --- grid search -----------------------------------------------------------

def test_grid_of_one_and_flat_loss_ranks_last(tiny):
    data = tiny[3]
    cfg = ModelConfig(**SMALL)
    spec = TrainSpec(lr=3e-3, max_epochs=4, patience=4)
    (only,) = grid_search([cfg], data, spec)
    assert only.index == 0 and np.isfinite(only.val_nll)
    ranked = grid_search([(cfg, TrainSpec(lr=0.0, max_epochs=4)), (cfg, spec)], data, spec)
    assert [r.index for r in ranked] == [1, 0]


def test_grid_is_reproducible_across_jobs(tiny):
    data = tiny[3]
    grid = [ModelConfig(**SMALL), ModelConfig(head="Lap", **SMALL), ModelConfig(dropout=0.3, **SMALL)]
    spec = TrainSpec(max_epochs=2, patience=2)
    serial = grid_search(grid, data, spec, root_seed=9)
    again = grid_search(grid, data, spec, root_seed=9)
    pooled = grid_search(grid, data, spec, jobs=2, root_seed=9)
    key = lambda rs: [(r.index, r.val_nll, r.report.checksum) for r in rs]
    assert key(serial) == key(again) == key(pooled)
    assert serial[0].config.seed == derive_seed(9, serial[0].index)
    restored = serial[0].restore(data)
    assert restored.checksum() == serial[0].report.checksum


def test_homog_search_covers_multiples(tiny):
    data = tiny[3]
    results = homog_search(ModelConfig(**SMALL), data, TrainSpec(max_epochs=2))
    assert sorted(r.config.homog_multiple for r in results) == [0.25, 0.5, 0.75, 1.0]
    best = results[0].restore(data)
    assert best.homog_c == pytest.approx(best.config.homog_multiple * data.ybar)


# --- ensembles -------------------------------------------------------------

def test_identical_seed_members_have_no_model_variance(tiny):
    data = tiny[3]
    res = train_ensemble(ModelConfig(**SMALL), 3, data, TrainSpec(max_epochs=2), identical_seeds=True)
    from probgnn.distributions import decompose_uncertainty
    members = [(p.loc, p.scale) for p in res.ensemble.member_params(data.batches["test"])]
    model_var, _, _ = decompose_uncertainty(members)
    assert np.all(model_var == 0)


def test_ensemble_equals_mixture_of_members(tiny):
    from probgnn.distributions import ensemble
    data = tiny[3]
    res = train_ensemble(ModelConfig(**SMALL), 2, data, TrainSpec(max_epochs=2), n_runs=3, root_seed=4)
    assert len(res.members) == 2 and len(res.runs) == 3
    assert res.members[0].val_nll <= res.members[1].val_nll <= res.runs[2].val_nll
    batch = data.batches["test"]
    ref = ensemble([(m.predict(batch).loc, m.predict(batch).scale) for m in res.ensemble.models])
    assert res.params.family == "GEns"
    np.testing.assert_array_equal(res.params.loc, ref.loc)
    np.testing.assert_array_equal(res.params.scale, ref.scale)
    with pytest.raises(InvalidSpec):
        train_ensemble(ModelConfig(**SMALL), 1, data, TrainSpec(max_epochs=1))
    with pytest.raises(InvalidSpec):
        train_ensemble(ModelConfig(head="Pois", **SMALL), 2, data, TrainSpec(max_epochs=1))


@pytest.mark.slow
def test_long_run_ends_below_first_epoch(tiny):
    data = tiny[3]
    model = build_model(ModelConfig(**SMALL), data)
    report = train(model, data, TrainSpec(max_epochs=200, patience=200))
    assert len(report.train_nll) == 200
    assert report.train_nll[-1] < report.train_nll[0]
