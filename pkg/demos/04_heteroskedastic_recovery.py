"""A heteroskedastic head against a fixed-variance head on noise that grows with demand.

Smaller than the acceptance run (10 stations) so it finishes in a few minutes.
"""
from probgnn.data import SyntheticSpec, generate, make_splits
from probgnn.evaluation import evaluate, evaluate_model
from probgnn.graphs import build_adjacency
from probgnn.model import ModelConfig
from probgnn.training import TrainSpec, build_model, homog_search, prepare, train

syn = generate(SyntheticSpec(n_stations=10, n_steps=3000, sigma_intercept=0.5, sigma_slope=0.3))
splits = make_splits(syn.demand, fractions=(0.5, 0.1, 0.4), lookback=2, end=syn.main_end)
data = prepare(syn.demand, syn.features, splits, build_adjacency(syn.stations), 2)
test = data.batches["test"]

truth = evaluate(syn.truth.select(test.index), test.y)
het = build_model(ModelConfig(head="HetG"), data)
train(het, data, TrainSpec(max_epochs=40))
hom = homog_search(ModelConfig(), data, TrainSpec(max_epochs=40))[0]

rows = [("truth", truth), ("HetG", evaluate_model(het, test)),
        (f"HomoG c={hom.config.homog_multiple}ybar", evaluate_model(hom.restore(data), test))]
print(f"{'model':18} {'nll/obs':>8} {'CE':>7} {'PICP':>6} {'MPIW':>7} {'MAE':>6}")
for name, r in rows:
    print(f"{name:18} {r.nll_per_obs:8.4f} {r.calibration_error:7.4f} {r.picp:6.3f} {r.mpiw:7.2f} {r.mae:6.2f}")
