"""JSON model documents: ``{"kind", "hyperparams", "weights"}``.

Weights are stored as ``{"name", "shape", "data"}`` entries holding flat
row-major arrays.  Floats are written with ``repr`` precision, so a model
survives a round trip bit for bit.
"""
from __future__ import annotations

import json
import math

import numpy as np

from .forest import RandomForestModel, Tree
from .nn import LstmModel, MlpModel
from .training import TrainHistory


class ModelFormatError(ValueError):
    pass


def _pack(name, arr):
    a = np.asarray(arr)
    flat = a.ravel().tolist()
    if a.dtype.kind == "f" and not all(math.isfinite(v) for v in flat):
        raise ModelFormatError(f"non-finite values in {name}")
    return {"name": name, "shape": list(a.shape), "data": flat}


def _unpack(entry, dtype=float):
    try:
        a = np.asarray(entry["data"], dtype=dtype).reshape(entry["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"weight {entry.get('name', '?')!r}: {e}") from None
    if not np.all(np.isfinite(a)):
        raise ModelFormatError(f"non-finite values in {entry.get('name', '?')}")
    return a


def model_to_dict(m) -> dict:
    if isinstance(m, LstmModel) or isinstance(m, MlpModel):
        doc = {"kind": m.kind, "hyperparams": m.hyperparams(),
               "weights": [_pack(k, v) for k, v in m.params.items()]}
        if m.history is not None:
            doc["history"] = m.history.to_dict()
        return doc
    if isinstance(m, RandomForestModel):
        weights = []
        for j, t in enumerate(m.trees):
            for k in ("feature", "threshold", "left", "right", "value"):
                weights.append(_pack(f"tree{j}.{k}", getattr(t, k)))
        return {"kind": "rf", "hyperparams": m.hyperparams(), "weights": weights}
    raise TypeError(f"cannot serialise {type(m).__name__}")


def model_from_dict(doc: dict):
    kind = doc.get("kind")
    hp = doc.get("hyperparams", {})
    w = {e["name"]: e for e in doc.get("weights", [])}
    if kind == "lstm":
        params = {k: _unpack(e) for k, e in w.items()}
        m = LstmModel(int(hp["input_dim"]), int(hp["hidden_dim"]), params, int(hp.get("trained_epochs", 0)))
    elif kind == "mlp":
        params = {k: _unpack(e) for k, e in w.items()}
        m = MlpModel([int(s) for s in hp["layer_sizes"]], params, int(hp.get("trained_epochs", 0)))
    elif kind == "rf":
        trees = []
        for j in range(int(hp["n_trees"])):
            trees.append(Tree(
                _unpack(w[f"tree{j}.feature"], np.int64), _unpack(w[f"tree{j}.threshold"]),
                _unpack(w[f"tree{j}.left"], np.int64), _unpack(w[f"tree{j}.right"], np.int64),
                _unpack(w[f"tree{j}.value"])))
        return RandomForestModel(int(hp["n_features"]), trees, int(hp["seed"]), int(hp["min_leaf"]),
                                 str(hp["max_features"]), bool(hp["bootstrap"]))
    else:
        raise ModelFormatError(f"unknown model kind {kind!r}")
    if "history" in doc:
        m.history = TrainHistory.from_dict(doc["history"])
    _check_shapes(m)
    return m


def _check_shapes(m):
    p = m.params
    if isinstance(m, LstmModel):
        D, H = m.input_dim, m.hidden_dim
        want = {"Wx": (D, 4 * H), "Wh": (H, 4 * H), "b": (4 * H,), "w_out": (H,), "b_out": (1,)}
    else:
        s = m.layer_sizes
        want = {}
        for j, (a, b) in enumerate(zip(s[:-1], s[1:])):
            want[f"W{j}"] = (a, b)
            want[f"b{j}"] = (b,)
    got = {k: tuple(v.shape) for k, v in p.items()}
    if got != want:
        raise ModelFormatError(f"weight shapes {got} inconsistent with hyperparameters {want}")


def save_model(m, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(m), fh)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
