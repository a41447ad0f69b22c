"""Numpy LSTM and feed-forward binary classifiers with hand-written gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .training import TrainConfig, TrainHistory, TrainingError, fit

_EPS = 1e-12


class DimensionError(ValueError):
    """Input shape does not match the model."""


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bce_from_logits(logit, y):
    return float(np.mean(np.logaddexp(0.0, logit) - y * logit))


def _prob(logit):
    return np.clip(_sigmoid(logit), _EPS, 1.0 - _EPS)


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _params_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def _check_labels(y):
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return y


# --------------------------------------------------------------------------- LSTM

@dataclass
class LstmModel:
    """Single-layer LSTM whose last hidden state feeds one logistic unit.

    Gate blocks in ``Wx``/``Wh``/``b`` are ordered input, forget, output,
    cell candidate.
    """

    input_dim: int
    hidden_dim: int
    params: dict
    trained_epochs: int = 0
    history: TrainHistory | None = field(default=None, compare=False)

    kind = "lstm"

    def __eq__(self, other):
        return (isinstance(other, LstmModel) and (self.input_dim, self.hidden_dim, self.trained_epochs)
                == (other.input_dim, other.hidden_dim, other.trained_epochs)
                and _params_equal(self.params, other.params))

    @classmethod
    def init(cls, input_dim=7, hidden_dim=16, rng=None, zero=False):
        D, H = input_dim, hidden_dim
        if zero:
            p = {"Wx": np.zeros((D, 4 * H)), "Wh": np.zeros((H, 4 * H)), "b": np.zeros(4 * H),
                 "w_out": np.zeros(H), "b_out": np.zeros(1)}
            return cls(D, H, p)
        rng = np.random.default_rng(0) if rng is None else rng
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0
        p = {
            "Wx": _glorot(rng, D, 4 * H, (D, 4 * H)),
            "Wh": _glorot(rng, H, 4 * H, (H, 4 * H)),
            "b": b,
            "w_out": _glorot(rng, H, 1, (H,)),
            "b_out": np.zeros(1),
        }
        return cls(D, H, p)

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 3 or X.shape[2] != self.input_dim:
            raise DimensionError(f"expected (batch, steps, {self.input_dim}) input, got {X.shape}")
        return X

    def predict_proba(self, X):
        """Probabilities for a batch of sequences shaped (batch, steps, features)."""
        X = self._check(X)
        return _prob(_lstm_logits(self.params, X))

    def predict(self, seq) -> float:
        seq = np.asarray(seq, dtype=float)
        if seq.ndim != 2:
            raise DimensionError(f"expected (steps, {self.input_dim}) sequence, got {seq.shape}")
        return float(self.predict_proba(seq[None])[0])

    def hyperparams(self):
        return {"input_dim": self.input_dim, "hidden_dim": self.hidden_dim,
                "trained_epochs": self.trained_epochs}


def _lstm_forward(p, X, keep=True):
    B, T, _ = X.shape
    H = p["Wh"].shape[0]
    xz = X @ p["Wx"] + p["b"]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    cache = []
    for t in range(T):
        z = xz[:, t] + h @ p["Wh"]
        s = _sigmoid(z[:, :3 * H])
        i, f, o = s[:, :H], s[:, H:2 * H], s[:, 2 * H:]
        g = np.tanh(z[:, 3 * H:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        if keep:
            cache.append((h_prev, c_prev, i, f, o, g, tc))
    logit = h @ p["w_out"] + p["b_out"][0]
    return logit, h, cache


def _lstm_logits(p, X):
    return _lstm_forward(p, X, keep=False)[0]


def lstm_loss(p, X, y):
    return _bce_from_logits(_lstm_logits(p, X), y)


def lstm_loss_and_grad(p, X, y):
    B, T, D = X.shape
    H = p["Wh"].shape[0]
    logit, h, cache = _lstm_forward(p, X)
    loss = _bce_from_logits(logit, y)
    dlogit = (_sigmoid(logit) - y) / B
    grads = {"w_out": h.T @ dlogit, "b_out": np.array([dlogit.sum()])}
    dh = np.outer(dlogit, p["w_out"])
    dc = np.zeros((B, H))
    dz_all = np.empty((B, T, 4 * H))
    dWh = np.zeros_like(p["Wh"])
    WhT = p["Wh"].T
    for t in range(T - 1, -1, -1):
        h_prev, c_prev, i, f, o, g, tc = cache[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = dz_all[:, t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = do * o * (1.0 - o)
        dz[:, 3 * H:] = dc * i * (1.0 - g * g)
        dc = dc * f
        dWh += h_prev.T @ dz
        dh = dz @ WhT
    grads["Wx"] = X.reshape(B * T, D).T @ dz_all.reshape(B * T, 4 * H)
    grads["Wh"] = dWh
    grads["b"] = dz_all.sum(axis=(0, 1))
    return loss, grads


def lstm_train(train, valid, cfg: TrainConfig | None = None, hidden_dim=16) -> LstmModel:
    """Train an LSTM on ``train = (X, y)`` with X shaped (n, steps, features).

    Returns the snapshot with the lowest validation loss.
    """
    cfg = cfg or TrainConfig()
    X, y = train
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        raise TrainingError("empty training dataset")
    if X.ndim != 3:
        raise DimensionError(f"expected (n, steps, features) array, got {X.shape}")
    y = _check_labels(y)
    Xv, yv = (None, None) if valid is None else (np.asarray(valid[0], dtype=float), _check_labels(valid[1]))
    rng = np.random.default_rng(cfg.seed)
    model = LstmModel.init(X.shape[2], hidden_dim, rng)
    best, hist, _ = fit(model.params, lstm_loss_and_grad, lstm_loss, X, y, Xv, yv, cfg, rng)
    model.params = best
    model.trained_epochs = hist.best_epoch
    model.history = hist
    return model


def lstm_predict(m: LstmModel, seq) -> float:
    return m.predict(seq)


# --------------------------------------------------------------------------- MLP

@dataclass
class MlpModel:
    """Fully connected net: rectifier hidden layers, logistic output."""

    layer_sizes: list
    params: dict
    trained_epochs: int = 0
    history: TrainHistory | None = field(default=None, compare=False)

    kind = "mlp"

    def __eq__(self, other):
        return (isinstance(other, MlpModel) and list(self.layer_sizes) == list(other.layer_sizes)
                and self.trained_epochs == other.trained_epochs and _params_equal(self.params, other.params))

    @classmethod
    def init(cls, layer_sizes, rng=None, zero=False):
        sizes = [int(s) for s in layer_sizes]
        if sizes[-1] != 1:
            raise ValueError("output layer must have a single unit")
        rng = np.random.default_rng(0) if rng is None else rng
        p = {}
        for j, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            p[f"W{j}"] = np.zeros((a, b)) if zero else _glorot(rng, a, b, (a, b))
            p[f"b{j}"] = np.zeros(b)
        return cls(sizes, p)

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    def predict_proba(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DimensionError(f"expected (batch, {self.input_dim}) input, got {X.shape}")
        return _prob(_mlp_forward(self.params, X)[0])

    def predict(self, x) -> float:
        return float(self.predict_proba(np.asarray(x, dtype=float)[None])[0])

    def hyperparams(self):
        return {"layer_sizes": list(self.layer_sizes), "trained_epochs": self.trained_epochs}


def _n_layers(p):
    return len(p) // 2


def _mlp_forward(p, X):
    acts = [X]
    a = X
    L = _n_layers(p)
    for j in range(L):
        z = a @ p[f"W{j}"] + p[f"b{j}"]
        if j < L - 1:
            a = np.maximum(z, 0.0)
            acts.append(a)
        else:
            return z[:, 0], acts


def mlp_loss(p, X, y):
    return _bce_from_logits(_mlp_forward(p, X)[0], y)


def mlp_loss_and_grad(p, X, y):
    logit, acts = _mlp_forward(p, X)
    loss = _bce_from_logits(logit, y)
    delta = ((_sigmoid(logit) - y) / len(X))[:, None]
    grads = {}
    for j in range(_n_layers(p) - 1, -1, -1):
        a = acts[j]
        grads[f"W{j}"] = a.T @ delta
        grads[f"b{j}"] = delta.sum(axis=0)
        if j > 0:
            delta = (delta @ p[f"W{j}"].T) * (a > 0)
    return loss, grads


def mlp_train(train, valid, cfg: TrainConfig | None = None, hidden=(128, 128)) -> MlpModel:
    cfg = cfg or TrainConfig()
    X, y = train
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        raise TrainingError("empty training dataset")
    if X.ndim != 2:
        raise DimensionError(f"expected (n, features) array, got {X.shape}")
    y = _check_labels(y)
    Xv, yv = (None, None) if valid is None else (np.asarray(valid[0], dtype=float), _check_labels(valid[1]))
    rng = np.random.default_rng(cfg.seed)
    model = MlpModel.init([X.shape[1], *hidden, 1], rng)
    best, hist, _ = fit(model.params, mlp_loss_and_grad, mlp_loss, X, y, Xv, yv, cfg, rng)
    model.params = best
    model.trained_epochs = hist.best_epoch
    model.history = hist
    return model


def mlp_predict(m: MlpModel, x) -> float:
    return m.predict(x)
