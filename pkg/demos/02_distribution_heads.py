"""The six output families: likelihood, intervals and point forecasts for one cell."""
import numpy as np

from probgnn.distributions import DistParams, ensemble, nll, point_prediction, quantile, variance

y = np.array([1.0])
heads = {
    "HomoG": DistParams.homog(np.array([2.0]), 1.5),
    "Pois": DistParams.pois(np.array([2.0])),
    "HetG": DistParams.hetg(np.array([2.0]), np.array([1.5])),
    "TG": DistParams.tg(np.array([2.0]), np.array([1.5])),
    "Lap": DistParams.lap(np.array([2.0]), np.array([1.5])),
    "GEns": ensemble([(np.array([1.5]), np.array([1.0])), (np.array([2.5]), np.array([1.2]))]),
}
print(f"{'head':6} {'nll(y=1)':>9} {'mean':>7} {'var':>7} {'2.5%':>7} {'97.5%':>7}")
for name, p in heads.items():
    lo, hi = quantile(p, [0.025])[0], quantile(p, [0.975])[0]
    print(f"{name:6} {nll(p, y).item():9.4f} {point_prediction(p)[0]:7.3f} {variance(p)[0]:7.3f} {lo:7.3f} {hi:7.3f}")
# the truncated head never puts interval mass below zero
print("TG lower bound stays >= 0:", quantile(heads["TG"], [0.025])[0] >= 0)
