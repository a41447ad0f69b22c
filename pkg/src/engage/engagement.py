"""Latent-character engagement model.

Each annotation ``(annotator i, behaviour state x, engaged y)`` is explained by
a character ``k`` drawn from the annotator's distribution ``theta[i]``; the
character perceives state ``x`` as engaged with probability ``phi[k, x]``.
The probability that annotator ``i`` judges state ``x`` engaged is
``sum_k theta[i, k] * phi[k, x]``.

Parameters are MAP estimates from EM with add-one smoothing (a symmetric
Dirichlet(2) prior on each theta row and a Beta(2, 2) prior on each phi
entry).  ``loglik_trace`` records the penalised log-likelihood, which EM
never decreases.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import BehaviorState

SIGNALS = ("nod", "laughter", "backchannel", "gaze")


@dataclass(frozen=True)
class AnnotationRecord:
    annotator_id: str
    state: BehaviorState
    engaged: int
    turn_ref: Optional[str] = None


def encode_state(b: BehaviorState, context_enabled: bool = False) -> int:
    return b.encode(context_enabled)


def n_states(context_enabled):
    return 32 if context_enabled else 16


@dataclass
class EngagementModel:
    K: int
    annotator_ids: list
    theta: np.ndarray
    phi: np.ndarray
    state_prior: np.ndarray
    context_enabled: bool = False
    loglik_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        self.state_prior = np.asarray(self.state_prior, dtype=float)
        S = n_states(self.context_enabled)
        if self.theta.shape != (len(self.annotator_ids), self.K) or self.phi.shape != (self.K, S):
            raise ValueError("theta/phi shapes inconsistent with K, annotators and state count")
        if self.state_prior.shape != (S,):
            raise ValueError(f"state_prior must have {S} entries")
        self._index = {a: i for i, a in enumerate(self.annotator_ids)}

    @property
    def n_states(self):
        return n_states(self.context_enabled)

    def annotator_index(self, annotator_id):
        try:
            return self._index[annotator_id]
        except KeyError:
            raise KeyError(f"unknown annotator {annotator_id!r}") from None

    @property
    def population_weights(self) -> np.ndarray:
        return self.theta.mean(axis=0)

    def to_dict(self):
        return {
            "K": self.K,
            "annotator_ids": list(self.annotator_ids),
            "theta": self.theta.tolist(),
            "phi": self.phi.tolist(),
            "state_prior": self.state_prior.tolist(),
            "context_enabled": self.context_enabled,
            "loglik_trace": [float(v) for v in self.loglik_trace],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["K"]), list(d["annotator_ids"]), d["theta"], d["phi"], d["state_prior"],
                   bool(d["context_enabled"]), list(d.get("loglik_trace", [])))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _arrays(records, context_enabled, annotator_ids):
    idx = {a: i for i, a in enumerate(annotator_ids)}
    a = np.array([idx[r.annotator_id] for r in records], dtype=np.int64)
    x = np.array([r.state.encode(context_enabled) for r in records], dtype=np.int64)
    y = np.array([r.engaged for r in records], dtype=float)
    return a, x, y


def _record_lik(theta, phi, a, x, y):
    px = phi[:, x].T  # (N, K)
    return theta[a] * np.where(y[:, None] == 1, px, 1.0 - px)


def log_likelihood(m: EngagementModel, records) -> float:
    """Plain data log-likelihood of ``records`` under the model."""
    a, x, y = _arrays(records, m.context_enabled, m.annotator_ids)
    return float(np.log(_record_lik(m.theta, m.phi, a, x, y).sum(axis=1)).sum())


def _objective(theta, phi, a, x, y):
    ll = np.log(_record_lik(theta, phi, a, x, y).sum(axis=1)).sum()
    return float(ll + np.log(theta).sum() + np.log(phi).sum() + np.log1p(-phi).sum())


def _em(a, x, y, n_ann, K, S, theta, phi, tol, max_iter):
    trace = [_objective(theta, phi, a, x, y)]
    for _ in range(max_iter):
        lik = _record_lik(theta, phi, a, x, y)
        r = lik / lik.sum(axis=1, keepdims=True)
        counts = np.zeros((n_ann, K))
        np.add.at(counts, a, r)
        theta = (counts + 1.0) / (counts.sum(axis=1, keepdims=True) + K)
        pos = np.zeros((K, S))
        tot = np.zeros((K, S))
        np.add.at(pos.T, x, r * y[:, None])
        np.add.at(tot.T, x, r)
        phi = (pos + 1.0) / (tot + 2.0)
        trace.append(_objective(theta, phi, a, x, y))
        if trace[-1] - trace[-2] < tol:
            break
    return theta, phi, trace


def fit_em(records: Sequence[AnnotationRecord], K=3, seed=0, restarts=10, context_enabled=None,
           tol=1e-6, max_iter=500) -> EngagementModel:
    """Fit theta/phi by EM from ``restarts`` seeded initialisations; keep the best."""
    records = list(records)
    if not records:
        raise ValueError("no annotation records")
    if K < 1:
        raise ValueError("K must be >= 1")
    if context_enabled is None:
        context_enabled = records[0].state.prev_engaged is not None
    annotator_ids = sorted({r.annotator_id for r in records})
    a, x, y = _arrays(records, context_enabled, annotator_ids)
    S = n_states(context_enabled)
    n_ann = len(annotator_ids)
    best = None
    for rs in range(max(1, restarts)):
        rng = np.random.default_rng([seed, rs])
        theta0 = rng.dirichlet(np.ones(K), size=n_ann)
        phi0 = rng.uniform(0.1, 0.9, size=(K, S))
        theta, phi, trace = _em(a, x, y, n_ann, K, S, theta0, phi0, tol, max_iter)
        if best is None or trace[-1] > best[2][-1]:
            best = (theta, phi, trace)
    theta, phi, trace = best
    # state prior over distinct (turn, state) observations
    seen = {}
    for r, xi in zip(records, x):
        seen[(r.turn_ref, int(xi)) if r.turn_ref is not None else len(seen)] = int(xi)
    counts = np.bincount(np.fromiter(seen.values(), dtype=np.int64), minlength=S).astype(float)
    prior = (counts + 1.0) / (counts.sum() + S)
    return EngagementModel(K, annotator_ids, theta, phi, prior, context_enabled, trace)


def posterior(m: EngagementModel, annotator_id, x: int) -> float:
    if not 0 <= x < m.n_states:
        raise ValueError(f"state index {x} outside 0..{m.n_states - 1}")
    i = m.annotator_index(annotator_id)
    return float(m.theta[i] @ m.phi[:, x])


def _consistent_states(observed: BehaviorState, context_enabled):
    """State indices agreeing with every non-None field of ``observed``."""
    fields = list(SIGNALS) + (["prev_engaged"] if context_enabled else [])
    out = []
    for x in range(n_states(context_enabled)):
        full = BehaviorState.decode(x, context_enabled)
        if all(getattr(observed, f) is None or bool(getattr(observed, f)) == getattr(full, f) for f in fields):
            out.append(x)
    return out


def predict_live(m: EngagementModel, observed: BehaviorState, weights=None) -> float:
    """Engagement probability for an unknown viewer.

    Character weights default to the mean theta row.  Unobserved signals (None
    fields) are marginalised with the state prior restricted to the states
    consistent with what was observed.
    """
    pi = m.population_weights if weights is None else np.asarray(weights, dtype=float)
    xs = _consistent_states(observed, m.context_enabled)
    w = m.state_prior[xs]
    w = w / w.sum()
    return float(w @ (pi @ m.phi[:, xs]))


def partial_state(**bits) -> BehaviorState:
    """A BehaviorState where unspecified signals are None (unobserved)."""
    vals = {f: bits.get(f) for f in (*SIGNALS, "prev_engaged")}
    return BehaviorState(**vals)


def predict_session_with_context(m: EngagementModel, states: Sequence[BehaviorState],
                                 annotator_id=None) -> list:
    """Filter a session's turns in order, feeding back ``p >= 0.5`` as the previous engagement.

    The first turn uses prev_engaged = 0.  With ``annotator_id`` the annotator's
    own character weights replace the population weights.
    """
    if not m.context_enabled:
        raise ValueError("model was fitted without context")
    weights = None if annotator_id is None else m.theta[m.annotator_index(annotator_id)]
    out = []
    prev = False
    for s in states:
        p = predict_live(m, s.with_prev(prev), weights)
        out.append(p)
        prev = p >= 0.5
    return out


def predict_session(m: EngagementModel, states: Sequence[BehaviorState], annotator_id=None) -> list:
    """Per-turn engagement; context models are filtered, others scored independently."""
    if m.context_enabled:
        return predict_session_with_context(m, states, annotator_id)
    weights = None if annotator_id is None else m.theta[m.annotator_index(annotator_id)]
    return [predict_live(m, s.with_prev(None), weights) for s in states]


def all_states(context_enabled=False):
    """Every state in index order."""
    return [BehaviorState.decode(x, context_enabled) for x in range(n_states(context_enabled))]
