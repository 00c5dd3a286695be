"""Multi-graph GCN and multi-head GAT layers.

Both layers accept node features shaped ``(..., S, d_in)``; leading axes are
treated as a batch (time steps, lookback positions).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyNeighborhood, InvalidSpec, ShapeMismatch

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "identity": lambda x: x,
}


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def dropout(x: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or no rng is given."""
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, keep)


def _activation(kind):
    try:
        return ACTIVATIONS[kind]
    except KeyError:
        raise InvalidSpec(f"unknown activation {kind!r}") from None


class GcnLayer:
    """h' = act(sum_r norm_r h W_r), one weight matrix per adjacency."""

    def __init__(self, d_in, d_out, n_graphs, activation="relu", dropout=0.0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in, self.d_out = d_in, d_out
        self.activation = activation
        self.dropout = dropout
        self.weights = [uniform_init(rng, (d_in, d_out), d_in) for _ in range(n_graphs)]
        _activation(activation)

    def parameters(self):
        return {f"W{r}": w for r, w in enumerate(self.weights)}

    def __call__(self, h, adj, training=False, rng=None):
        return gcn_forward(self, h, adj, training=training, rng=rng)


def gcn_forward(layer: GcnLayer, h, adj, training=False, rng=None) -> Tensor:
    """``adj`` is an :class:`~probgnn.graphs.AdjacencySet` or a list of normalised matrices."""
    norms = getattr(adj, "norms", adj)
    if len(norms) != len(layer.weights):
        raise ShapeMismatch(f"layer has {len(layer.weights)} graph weights, got {len(norms)} matrices")
    h = ad.constant(h)
    if h.shape[-1] != layer.d_in:
        raise ShapeMismatch(f"expected {layer.d_in} input features, got {h.shape[-1]}")
    out = None
    for norm, w in zip(norms, layer.weights):
        term = ad.matmul(ad.matmul(norm, h), w)
        out = term if out is None else ad.add(out, term)
    out = _activation(layer.activation)(out)
    if training:
        out = dropout(out, layer.dropout, rng)
    return out


class GatLayer:
    """Multi-head additive attention restricted to a neighbourhood mask.

    Scores are e_ij = leaky_relu(a_self . W h_i + a_nbr . W h_j); hidden
    layers concatenate heads, output layers (``concat=False``) average them.
    """

    def __init__(self, d_in, d_out, mask, heads=4, concat=True, activation="relu",
                 dropout=0.0, slope=0.2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        mask = np.asarray(mask, dtype=bool).copy()
        np.fill_diagonal(mask, True)
        if not np.all(mask.any(axis=1)):
            raise EmptyNeighborhood("every node needs at least one neighbour")
        self.mask = mask
        self.d_in, self.d_out, self.heads = d_in, d_out, heads
        self.concat = concat
        self.activation = activation
        self.dropout = dropout
        self.slope = slope
        self.weights = [uniform_init(rng, (d_in, d_out), d_in) for _ in range(heads)]
        self.a_self = [uniform_init(rng, (d_out, 1), d_out) for _ in range(heads)]
        self.a_nbr = [uniform_init(rng, (d_out, 1), d_out) for _ in range(heads)]
        _activation(activation)

    @property
    def out_features(self):
        return self.d_out * self.heads if self.concat else self.d_out

    def parameters(self):
        params = {}
        for k in range(self.heads):
            params[f"W{k}"] = self.weights[k]
            params[f"a_self{k}"] = self.a_self[k]
            params[f"a_nbr{k}"] = self.a_nbr[k]
        return params

    def __call__(self, h, training=False, rng=None, return_attention=False):
        return gat_forward(self, h, training=training, rng=rng, return_attention=return_attention)


def gat_forward(layer: GatLayer, h, training=False, rng=None, return_attention=False):
    h = ad.constant(h)
    n = layer.mask.shape[0]
    if h.shape[-1] != layer.d_in or h.shape[-2] != n:
        raise ShapeMismatch(f"expected (..., {n}, {layer.d_in}), got {h.shape}")
    outs, attn = [], []
    for w, a_s, a_n in zip(layer.weights, layer.a_self, layer.a_nbr):
        wh = ad.matmul(h, w)
        scores = ad.add(ad.matmul(wh, a_s), ad.transpose(ad.matmul(wh, a_n)))
        alpha = ad.softmax_rows(ad.leaky_relu(scores, layer.slope), mask=layer.mask)
        attn.append(alpha.data)
        outs.append(ad.matmul(alpha, wh))
    if layer.concat:
        out = ad.concat(outs, axis=-1)
    else:
        out = outs[0]
        for o in outs[1:]:
            out = ad.add(out, o)
        out = ad.scalar_mul(out, 1.0 / layer.heads)
    out = _activation(layer.activation)(out)
    if training:
        out = dropout(out, layer.dropout, rng)
    if return_attention:
        return out, attn
    return out
