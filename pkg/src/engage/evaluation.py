"""Metrics, baselines, session-level cross-validation and per-task evaluators."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np

from .core import robot_turns
from .engagement import fit_em, posterior, predict_session_with_context
from .gaze import GazeGeometry, gaze_label_from_flags, looking_flags
from .ipu import classify_session, train_ipu_classifier
from .learn import TrainConfig
from .nod import (NodEventConfig, detect_turn_events, extract_nod_features, in_intervals, match_events,
                  score_frames, train_nod_detector)
from .pipeline import annotation_records, detect_states, true_turn_state

log = logging.getLogger(__name__)


class Metrics(NamedTuple):
    precision: float
    recall: float
    f1: float
    accuracy: Optional[float]

    def to_dict(self):
        return self._asdict()


def binary_metrics(tp, fp, fn, tn=0) -> Metrics:
    """Precision, recall, F1 and accuracy with zero for every 0/0 case."""
    if min(tp, fp, fn, tn) < 0:
        raise ValueError("counts must be non-negative")
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    total = tp + fp + fn + tn
    acc = (tp + tn) / total if total else 0.0
    return Metrics(float(p), float(r), float(f1), float(acc))


def f1_from_pr(p, r) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


def counts(pred, labels):
    pred = np.asarray(pred, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    return (int((pred & labels).sum()), int((pred & ~labels).sum()), int((~pred & labels).sum()),
            int((~pred & ~labels).sum()))


def always_positive_baseline(labels) -> Metrics:
    labels = np.asarray(labels, dtype=bool)
    return binary_metrics(*counts(np.ones(len(labels), dtype=bool), labels))


def pr_auc(scores, labels) -> float:
    """Average precision: sum of recall increments times precision at each distinct threshold."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("PR-AUC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # final index of each tie group
    tp = np.cumsum(y)[last]
    k = last + 1
    precision = tp / k
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


# --------------------------------------------------------------------------- folds

def parse_folds(spec: str, n: int) -> int:
    """Number of folds for ``loso`` or ``kfold:K`` over ``n`` sessions."""
    if n < 2:
        raise ValueError("cross-validation needs at least 2 sessions")
    if spec == "loso":
        return n
    if spec.startswith("kfold:"):
        try:
            k = int(spec.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad fold spec {spec!r}") from None
        if not 2 <= k <= n:
            raise ValueError(f"cannot make {k} folds from {n} sessions")
        return k
    raise ValueError(f"bad fold spec {spec!r}; use 'loso' or 'kfold:K'")


def fold_indices(n: int, spec: str) -> list:
    """``(train, valid, test)`` index lists per fold.

    Sessions are cut into contiguous test groups as evenly as possible; each
    fold validates on the ``len(test)`` sessions that follow its test group,
    wrapping around, and trains on the rest.
    """
    k = parse_folds(spec, n)
    groups = [list(g) for g in np.array_split(np.arange(n), k)]
    out = []
    for g in groups:
        nv = min(len(g), n - len(g) - 1) if n - len(g) > 1 else 0
        valid = [(g[-1] + 1 + j) % n for j in range(nv)]
        test = set(g)
        train = [i for i in range(n) if i not in test and i not in valid]
        out.append((train, valid, g))
    return out


# --------------------------------------------------------------------------- reports

@dataclass
class FoldResult:
    counts: tuple = (0, 0, 0, 0)
    scores: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    baseline_counts: Optional[tuple] = None
    extra: dict = field(default_factory=dict)


def _metrics_dict(c, with_accuracy=True):
    m = binary_metrics(*c).to_dict()
    if not with_accuracy:
        m["accuracy"] = None
    return m


@dataclass
class EvalReport:
    task: str
    folds: list = field(default_factory=list)
    pooled: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {"task": self.task, "meta": self.meta, "pooled": self.pooled, "baseline": self.baseline,
                "folds": self.folds}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def table(self) -> str:
        """Plain-text table: one row per model, P/R/F1/Acc columns and PR-AUC when scored."""
        rows = []
        if self.baseline:
            rows.append(("Baseline (always positive)", self.baseline))
        rows.append((self.meta.get("model", self.task), self.pooled))
        head = f"{'Model':<32}{'Prec.':>8}{'Rec.':>8}{'F1':>8}{'Acc.':>8}{'PR-AUC':>9}"
        lines = [head, "-" * len(head)]

        def fmt(v, w=8):
            return f"{v:{w}.3f}" if isinstance(v, (int, float)) else "-".rjust(w)

        for name, m in rows:
            lines.append(f"{name:<32}{fmt(m.get('precision'))}{fmt(m.get('recall'))}{fmt(m.get('f1'))}"
                         f"{fmt(m.get('accuracy'))}{fmt(m.get('pr_auc'), 9)}")
        return "\n".join(lines)


def cross_validate(sessions, spec, train_fn: Callable, eval_fn: Callable, task="task",
                   with_accuracy=True) -> EvalReport:
    """Session-level cross-validation; metrics are pooled over all test folds.

    ``train_fn(train_sessions, valid_sessions)`` returns a model and
    ``eval_fn(model, test_sessions)`` a FoldResult.
    """
    sessions = list(sessions)
    report = EvalReport(task, meta={"folds": spec, "n_sessions": len(sessions)})
    pooled = np.zeros(4, dtype=np.int64)
    base = np.zeros(4, dtype=np.int64)
    has_base = False
    scores, labels = [], []
    for j, (tr, va, te) in enumerate(fold_indices(len(sessions), spec)):
        log.info("%s fold %d: %d train, %d valid, %d test", task, j, len(tr), len(va), len(te))
        model = train_fn([sessions[i] for i in tr], [sessions[i] for i in va])
        res = eval_fn(model, [sessions[i] for i in te])
        pooled += res.counts
        fold = {"fold": j, "train": [sessions[i].session_id for i in tr],
                "valid": [sessions[i].session_id for i in va], "test": [sessions[i].session_id for i in te],
                "counts": list(map(int, res.counts)), "metrics": _metrics_dict(res.counts, with_accuracy),
                **res.extra}
        if res.baseline_counts is not None:
            base += res.baseline_counts
            has_base = True
        if res.scores:
            scores += list(res.scores)
            labels += list(res.labels)
            if any(res.labels):
                fold["metrics"]["pr_auc"] = pr_auc(res.scores, res.labels)
        report.folds.append(fold)
    report.pooled = _metrics_dict(tuple(pooled), with_accuracy)
    report.pooled["counts"] = [int(v) for v in pooled]
    if scores and any(labels):
        report.pooled["pr_auc"] = pr_auc(scores, labels)
    if has_base:
        report.baseline = _metrics_dict(tuple(base), True)
    return report


# --------------------------------------------------------------------------- nod

def _robot_mask(s, ts):
    return in_intervals(ts, [(t.t_start_ms, t.t_end_ms - 1) for t in robot_turns(s)])


def nod_frame_counts(det, sessions):
    """Frame-wise counts over robot-turn frames that carry a score."""
    c = np.zeros(4, dtype=np.int64)
    base = np.zeros(4, dtype=np.int64)
    for s in sessions:
        feats = extract_nod_features((s.timestamps(), s.angles()), det.events.history_len)
        sc = score_frames(det, feats, det.events.window_len)
        keep = _robot_mask(s, feats.timestamps) & ~np.isnan(sc)
        y = in_intervals(feats.timestamps[keep], s.nod_truth)
        c += counts(sc[keep] >= det.threshold, y)
        base += counts(np.ones(len(y), dtype=bool), y)
    return tuple(int(v) for v in c), tuple(int(v) for v in base)


def nod_event_counts(det, sessions):
    """Event-wise (tp, fp, fn, 0) with detection restricted to robot turns."""
    tp = fp = fn = 0
    for s in sessions:
        detected = []
        for turn in robot_turns(s):
            detected += detect_turn_events(det, s, turn)
        detected = _merge_touching(detected)
        truth = [iv for iv in s.nod_truth
                 if any(iv[0] < t.t_end_ms and iv[1] >= t.t_start_ms for t in robot_turns(s))]
        a, b, c = match_events(detected, truth)
        tp, fp, fn = tp + a, fp + b, fn + c
    return tp, fp, fn, 0


def _merge_touching(events):
    out = []
    for a, b in sorted(events):
        if out and a <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


def frame_wise_eval(det, sessions) -> EvalReport:
    c, base = nod_frame_counts(det, sessions)
    return EvalReport("nod-frame", pooled={**_metrics_dict(c), "counts": list(c)}, baseline=_metrics_dict(base),
                      meta={"model": "LSTM (frame-wise)"})


def event_wise_eval(det, sessions, cfg: NodEventConfig | None = None) -> EvalReport:
    if cfg is not None:
        det.events = cfg
    c = nod_event_counts(det, sessions)
    _, base = nod_frame_counts(det, sessions)
    return EvalReport("nod-event", pooled={**_metrics_dict(c, False), "counts": list(c)},
                      baseline=_metrics_dict(base), meta={"model": "LSTM (event-wise)"})


def evaluate_nod(sessions, spec, cfg: TrainConfig | None = None, **train_kw) -> EvalReport:
    def train(tr, va):
        return train_nod_detector(tr, va, cfg, **train_kw)

    def ev(det, te):
        ev_c = nod_event_counts(det, te)
        fr_c, base = nod_frame_counts(det, te)
        return FoldResult(ev_c, baseline_counts=base,
                          extra={"frame_counts": list(fr_c), "frame_metrics": _metrics_dict(fr_c)})

    rep = cross_validate(sessions, spec, train, ev, "nod", with_accuracy=False)
    fr = np.sum([f["frame_counts"] for f in rep.folds], axis=0)
    rep.meta["frame_wise"] = {**_metrics_dict(tuple(int(v) for v in fr)), "counts": [int(v) for v in fr]}
    rep.meta["model"] = "LSTM (event-wise)"
    rep.meta["baseline_note"] = "frame-wise always-positive"
    return rep


# --------------------------------------------------------------------------- IPU tasks

def ipu_fold_result(bundle, sessions, kind, lexicon) -> FoldResult:
    sc, lab = [], []
    for s in sessions:
        ipus = sorted(s.ipus, key=lambda u: u.t_start_ms)
        sc += list(classify_session(bundle, ipus, lexicon))
        lab += [u.label == kind for u in ipus]
    sc = np.asarray(sc)
    lab = np.asarray(lab, dtype=bool)
    return FoldResult(counts(sc >= bundle.threshold, lab), list(map(float, sc)), list(map(bool, lab)),
                      counts(np.ones(len(lab), dtype=bool), lab))


def evaluate_ipu(sessions, kind, feature_mode, spec, lexicon, cfg: TrainConfig | None = None,
                 n_trees=56) -> EvalReport:
    def train(tr, va):
        return train_ipu_classifier([list(s.ipus) for s in tr], kind, feature_mode, cfg, lexicon,
                                    [list(s.ipus) for s in va] or None, n_trees)

    def ev(bundle, te):
        return ipu_fold_result(bundle, te, kind, lexicon)

    rep = cross_validate(sessions, spec, train, ev, kind)
    rep.meta["model"] = ("DNN" if kind == "laughter" else "Random forest") + f" ({feature_mode})"
    rep.meta["feature_mode"] = feature_mode
    return rep


# --------------------------------------------------------------------------- gaze

def evaluate_gaze(sessions, geom: GazeGeometry) -> EvalReport:
    """Geometric per-turn gaze labels against ground truth (no training involved)."""
    pred, truth = [], []
    for s in sessions:
        if s.gaze_truth is None:
            continue
        ts, ang, pos = s.timestamps(), s.angles(), s.head_positions()
        for t in robot_turns(s):
            truth.append(true_turn_state(s, t, geom).gaze)
            pred.append(_gaze_only(ts, ang, pos, t, geom))
    c = counts(pred, truth)
    base = counts(np.ones(len(truth), dtype=bool), truth)
    return EvalReport("gaze", pooled={**_metrics_dict(c), "counts": list(c)}, baseline=_metrics_dict(base),
                      meta={"model": "Head-ray vs sphere", "n_turns": len(truth)})


def _gaze_only(ts, ang, pos, turn, geom):
    lo, hi = np.searchsorted(ts, [turn.t_start_ms, turn.t_end_ms], side="left")
    return gaze_label_from_flags(ts[lo:hi], looking_flags(pos[lo:hi], ang[lo:hi], geom), geom, turn)


# --------------------------------------------------------------------------- engagement

def engagement_scores(m, sessions, states_by_session):
    """Per-annotation scores and labels for annotated robot turns."""
    sc, lab = [], []
    for s, states in zip(sessions, states_by_session):
        turns = robot_turns(s)
        pos = {t.turn_id: k for k, t in enumerate(turns)}
        by_ann = {}
        for a in s.annotations:
            if a.turn_id in pos:
                by_ann.setdefault(a.annotator_id, []).append(a)
        for ann_id in sorted(by_ann):
            if ann_id not in m.annotator_ids:
                continue
            if m.context_enabled:
                probs = predict_session_with_context(m, states, ann_id)
            else:
                probs = [posterior(m, ann_id, st.with_prev(None).encode()) for st in states]
            for a in by_ann[ann_id]:
                sc.append(probs[pos[a.turn_id]])
                lab.append(bool(a.engaged))
    return sc, lab


def evaluate_engagement(sessions, states_by_session, spec, K=3, seed=0, context=False, restarts=10) -> EvalReport:
    """Cross-validated PR-AUC of the latent-character model for the given per-turn states."""
    sessions = list(sessions)
    lookup = {s.session_id: st for s, st in zip(sessions, states_by_session)}

    def train(tr, va):
        recs = annotation_records(tr + va, [lookup[s.session_id] for s in tr + va], context)
        return fit_em(recs, K, seed, restarts, context_enabled=context)

    def ev(m, te):
        sc, lab = engagement_scores(m, te, [lookup[s.session_id] for s in te])
        pred = np.asarray(sc) >= 0.5
        return FoldResult(counts(pred, lab), sc, lab, counts(np.ones(len(lab), dtype=bool), lab))

    rep = cross_validate(sessions, spec, train, ev, "engagement")
    rep.meta.update({"model": f"Latent character K={K}" + (" + context" if context else ""), "K": K,
                     "context": context})
    return rep


def detected_states_for(det, sessions, geom):
    return [detect_states(det, s, geom) for s in sessions]


__all__ = [
    "EvalReport", "FoldResult", "Metrics", "always_positive_baseline", "binary_metrics", "counts",
    "cross_validate", "detected_states_for", "engagement_scores", "evaluate_engagement", "evaluate_gaze",
    "evaluate_ipu", "evaluate_nod", "event_wise_eval", "f1_from_pr", "fold_indices", "frame_wise_eval",
    "parse_folds", "pr_auc",
]
