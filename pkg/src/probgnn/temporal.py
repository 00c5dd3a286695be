"""LSTM encoder over the lookback window and the linear decoder."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatch
from .spatial import uniform_init


class LstmStack:
    """Stacked LSTM; gate order in the fused weights is (input, forget, cell, output)."""

    def __init__(self, input_size, hidden_size, num_layers=1, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.w_x, self.w_h, self.bias = [], [], []
        h4 = 4 * hidden_size
        for layer in range(num_layers):
            d_in = input_size if layer == 0 else hidden_size
            self.w_x.append(uniform_init(rng, (d_in, h4), hidden_size))
            self.w_h.append(uniform_init(rng, (hidden_size, h4), hidden_size))
            b = rng.uniform(-1, 1, size=h4) / np.sqrt(hidden_size)
            b[hidden_size:2 * hidden_size] = 1.0
            self.bias.append(Tensor(b, requires_grad=True))

    def parameters(self):
        params = {}
        for k in range(self.num_layers):
            params[f"w_x{k}"] = self.w_x[k]
            params[f"w_h{k}"] = self.w_h[k]
            params[f"b{k}"] = self.bias[k]
        return params


def lstm_forward(stack: LstmStack, sequence) -> Tensor:
    """Run the stack over ``sequence`` shaped (lookback, F) or (B, lookback, F).

    Returns the top layer's hidden state after the last step.
    """
    seq = ad.constant(sequence)
    squeeze = seq.ndim == 2
    if squeeze:
        seq = ad.reshape(seq, (1,) + seq.shape)
    if seq.ndim != 3:
        raise ShapeMismatch(f"sequence must be (B, lookback, F), got {seq.shape}")
    batch, steps, feat = seq.shape
    if steps < 1:
        raise ShapeMismatch("lookback must be at least 1")
    if feat != stack.input_size:
        raise ShapeMismatch(f"expected {stack.input_size} input features, got {feat}")
    H = stack.hidden_size
    inputs = [seq[:, t, :] for t in range(steps)]
    for k in range(stack.num_layers):
        projected = ad.add(ad.matmul(ad.concat(inputs, axis=0), stack.w_x[k]), stack.bias[k])
        h = c = None
        outputs = []
        for t in range(steps):
            z = projected[t * batch:(t + 1) * batch]
            if h is not None:
                z = ad.add(z, ad.matmul(h, stack.w_h[k]))
            i = ad.sigmoid(z[:, 0:H])
            f = ad.sigmoid(z[:, H:2 * H])
            g = ad.tanh(z[:, 2 * H:3 * H])
            o = ad.sigmoid(z[:, 3 * H:4 * H])
            c = ad.mul(i, g) if c is None else ad.add(ad.mul(f, c), ad.mul(i, g))
            h = ad.mul(o, ad.tanh(c))
            outputs.append(h)
        inputs = outputs
    out = inputs[-1]
    return out[0] if squeeze else out


class Decoder:
    """Two linear maps from the last hidden state: recent parameters and history weights."""

    def __init__(self, hidden_size, n_stations, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_stations = n_stations
        out = 2 * n_stations
        self.w_recent = uniform_init(rng, (hidden_size, out), hidden_size)
        self.b_recent = Tensor(np.zeros(out), requires_grad=True)
        self.w_history = uniform_init(rng, (hidden_size, out), hidden_size)
        self.b_history = Tensor(np.zeros(out), requires_grad=True)

    def parameters(self):
        return {
            "w_recent": self.w_recent,
            "b_recent": self.b_recent,
            "w_history": self.w_history,
            "b_history": self.b_history,
        }


def decode(dec: Decoder, h_last):
    """Return ``(recent, history_weights)``, each shaped (..., S, 2).

    Slot 0 feeds the location parameter, slot 1 the raw scale.
    """
    h = ad.constant(h_last)
    if h.shape[-1] != dec.w_recent.shape[0]:
        raise ShapeMismatch(f"decoder expects {dec.w_recent.shape[0]} features, got {h.shape[-1]}")
    lead = h.shape[:-1]
    recent = ad.add(ad.matmul(_as_matrix(h), dec.w_recent), dec.b_recent)
    hist = ad.add(ad.matmul(_as_matrix(h), dec.w_history), dec.b_history)
    shape = lead + (dec.n_stations, 2)
    return ad.reshape(recent, shape), ad.reshape(hist, shape)


def _as_matrix(h):
    return h if h.ndim >= 2 else ad.reshape(h, (1, h.shape[0]))
