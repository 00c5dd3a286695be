"""Model uncertainty two ways: disagreement of trained members and dropout at test time."""
import numpy as np

from probgnn.data import SyntheticSpec, generate, make_splits
from probgnn.distributions import decompose_uncertainty
from probgnn.evaluation import evaluate_model
from probgnn.graphs import build_adjacency
from probgnn.model import ModelConfig, mc_dropout_predict
from probgnn.training import TrainSpec, build_model, prepare, train, train_ensemble

syn = generate(SyntheticSpec(n_stations=8, n_steps=800))
splits = make_splits(syn.demand, fractions=(0.6, 0.2, 0.2), lookback=2, end=syn.main_end)
data = prepare(syn.demand, syn.features, splits, build_adjacency(syn.stations), 2)
test = data.batches["test"]
spec = TrainSpec(max_epochs=15, patience=5)

res = train_ensemble(ModelConfig(width=8), 3, data, spec, n_runs=4, root_seed=1)
model_var, data_var, total = decompose_uncertainty([(p.loc, p.scale) for p in res.ensemble.member_params(test)])
print("kept runs", [m.index for m in res.members], "of", len(res.runs))
print(f"share of variance from member disagreement: {model_var.sum() / total.sum():.3%}")
r = evaluate_model(res.ensemble, test)
print(f"ensemble test NLL/obs {r.nll_per_obs:.4f}  PICP {r.picp:.3f}")

dropped = build_model(ModelConfig(width=8, dropout=0.3), data)
train(dropped, data, spec)
mean, var = mc_dropout_predict(dropped, test, passes=50, seed=0)
print(f"MC dropout: mean predictive std across passes {np.sqrt(var).mean():.3f}")
