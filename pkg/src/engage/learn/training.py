"""Mini-batch gradient training loop shared by the LSTM and MLP models."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    """Raised for empty datasets or diverged training."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 100
    validation_check_every: int = 5
    early_stop_patience: int = 3
    seed: int = 0
    optimizer: str = "sgd"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.validation_check_every < 1:
            raise ValueError("validation_check_every must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainHistory:
    """Losses at every checkpoint; epoch 0 is the untrained model."""

    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    best_epoch: int = 0

    def to_dict(self):
        return {
            "epochs": list(self.epochs),
            "train_loss": list(self.train_loss),
            "valid_loss": list(self.valid_loss),
            "best_epoch": self.best_epoch,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["epochs"]), list(d["train_loss"]), list(d["valid_loss"]), int(d["best_epoch"]))


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _sgd_step(params, grads, lr):
    for k, g in grads.items():
        params[k] -= lr * g


def fit(params, loss_and_grad, loss, X, y, Xv, yv, cfg: TrainConfig, rng):
    """Train ``params`` in place and return ``(best_params, history, epochs_run)``.

    ``loss_and_grad(params, Xb, yb)`` returns the mean binary cross-entropy of a
    batch and its gradient dict; ``loss(params, X, y)`` only the loss.  A
    validation check runs at epoch 0, every ``validation_check_every`` epochs
    and after the last epoch.  Training stops once ``early_stop_patience``
    consecutive checks fail to improve the best validation loss, and the
    parameters of the best check are returned.  Without a validation set the
    final parameters are returned.
    """
    n = len(X)
    if n == 0:
        raise TrainingError("empty training dataset")
    has_valid = Xv is not None and len(Xv) > 0
    hist = TrainHistory()
    opt = _Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else None

    def check(epoch):
        tl = float(loss(params, X, y))
        if not np.isfinite(tl):
            raise TrainingError(f"training diverged at epoch {epoch}: loss={tl}")
        vl = float(loss(params, Xv, yv)) if has_valid else tl
        hist.epochs.append(epoch)
        hist.train_loss.append(tl)
        hist.valid_loss.append(vl)
        log.debug("epoch %d train=%.6f valid=%.6f", epoch, tl, vl)
        return vl

    best_loss = check(0)
    best = {k: v.copy() for k, v in params.items()}
    stale = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_loss, grads = loss_and_grad(params, X[idx], y[idx])
            if not np.isfinite(batch_loss):
                raise TrainingError(f"training diverged at epoch {epoch}: loss={batch_loss}")
            if opt is None:
                _sgd_step(params, grads, cfg.learning_rate)
            else:
                opt.step(params, grads)
        if epoch % cfg.validation_check_every == 0 or epoch == cfg.max_epochs:
            vl = check(epoch)
            if not has_valid or vl < best_loss:
                best_loss = vl
                best = {k: v.copy() for k, v in params.items()}
                hist.best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    return best, hist, epoch
