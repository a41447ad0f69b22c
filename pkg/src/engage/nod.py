"""Head-nod detection from 30 Hz head pose.

Each frame gets seven features: instantaneous |yaw|, |roll| and |pitch|
speeds, plus pitch statistics over the last 15 frames (mean speed, mean
signed velocity, acceleration and range).  Windows of 30 consecutive feature
frames are classified by an LSTM and the label of a window is the nod state
of its final frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Session, robot_turns
from .learn import LstmModel, ModelFormatError, TrainConfig, lstm_train, model_from_dict, model_to_dict
from .learn.nn import DimensionError

N_FEATURES = 7
FEATURE_NAMES = ("yaw_speed", "roll_speed", "pitch_speed", "pitch_mean_speed",
                 "pitch_mean_velocity", "pitch_acceleration", "pitch_range")


@dataclass(frozen=True)
class NodEventConfig:
    min_event_ms: int = 300
    window_len: int = 30
    history_len: int = 15

    def __post_init__(self):
        if self.min_event_ms <= 0:
            raise ValueError("min_event_ms must be > 0")


@dataclass
class NodFeatures:
    """Feature rows for raw frames ``history_len`` onwards, with their timestamps."""

    values: np.ndarray
    timestamps: np.ndarray

    def __len__(self):
        return len(self.values)


def extract_nod_features(frames, history_len=15) -> NodFeatures:
    """Compute the seven nod features for every frame that has a full history.

    ``frames`` is a sequence of PoseFrame or a tuple ``(timestamps_ms, angles)``
    with angles shaped (n, 3) as yaw, roll, pitch.
    """
    if isinstance(frames, tuple) and len(frames) == 2 and isinstance(frames[0], np.ndarray):
        ts, ang = frames
    else:
        ts = np.array([f.timestamp_ms for f in frames], dtype=np.int64)
        ang = np.array([(f.yaw_deg, f.roll_deg, f.pitch_deg) for f in frames], dtype=float).reshape(-1, 3)
    n = len(ts)
    H = history_len
    if n < H + 1:
        raise ValueError(f"need at least {H + 1} frames, got {n}")
    ts = np.asarray(ts, dtype=np.int64)
    dt = np.diff(ts) / 1000.0
    vel = np.diff(ang, axis=0) / dt[:, None]  # vel[j] belongs to frame j+1
    speed = np.abs(vel)
    pitch_v = vel[:, 2]
    pitch = ang[:, 2]

    # frame t uses velocities of frames t-H+1..t, i.e. vel indices t-H..t-1
    win_v = sliding_window_view(pitch_v, H)  # row r covers frames r+1..r+H
    win_p = sliding_window_view(pitch[1:], H)
    out = np.empty((n - H, N_FEATURES))
    out[:, 0:3] = speed[H - 1:]
    out[:, 3] = np.abs(win_v).mean(axis=1)
    out[:, 4] = win_v.mean(axis=1)
    span = (ts[H:] - ts[1:n - H + 1]) / 1000.0
    out[:, 5] = (win_v[:, -1] - win_v[:, 0]) / span
    out[:, 6] = win_p.max(axis=1) - win_p.min(axis=1)
    return NodFeatures(out, ts[H:].copy())


def in_intervals(timestamps, intervals) -> np.ndarray:
    """Boolean mask of timestamps inside any closed interval."""
    ts = np.asarray(timestamps)
    mask = np.zeros(len(ts), dtype=bool)
    for a, b in intervals:
        lo = int(np.searchsorted(ts, a, side="left"))
        hi = int(np.searchsorted(ts, b, side="right"))
        mask[lo:hi] = True
    return mask


def make_windows(features: NodFeatures, truth=(), window_len=30):
    """Stride-1 windows over the feature frames.

    Returns ``(X, y, end_timestamps)`` with X shaped (n - window_len + 1,
    window_len, 7); a window is positive iff its final frame lies in a
    ground-truth nod interval (bounds inclusive).
    """
    n = len(features)
    if n < window_len:
        raise ValueError(f"need at least {window_len} feature frames, got {n}")
    X = sliding_window_view(features.values, window_len, axis=0).transpose(0, 2, 1)
    end_ts = features.timestamps[window_len - 1:]
    y = in_intervals(end_ts, truth).astype(float)
    return X, y, end_ts


@dataclass
class NodDetector:
    """LSTM plus the feature standardisation it was trained with."""

    model: LstmModel
    mean: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    std: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))
    threshold: float = 0.5
    events: NodEventConfig = field(default_factory=NodEventConfig)

    kind = "nod"

    def predict_proba(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 3 or X.shape[2] != N_FEATURES:
            raise DimensionError(f"expected (batch, steps, {N_FEATURES}) windows, got {X.shape}")
        return self.model.predict_proba((X - self.mean) / self.std)

    def to_dict(self):
        doc = model_to_dict(self.model)
        doc["features"] = {
            "kind": "nod",
            "names": list(FEATURE_NAMES),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "threshold": float(self.threshold),
            "min_event_ms": self.events.min_event_ms,
            "window_len": self.events.window_len,
            "history_len": self.events.history_len,
        }
        return doc

    @classmethod
    def from_dict(cls, doc):
        f = doc.get("features")
        if f is None or f.get("kind") != "nod":
            raise ModelFormatError("not a nod detector document")
        model = model_from_dict(doc)
        if not isinstance(model, LstmModel) or model.input_dim != N_FEATURES:
            raise ModelFormatError(f"nod detector needs an LSTM over {N_FEATURES} features")
        ev = NodEventConfig(int(f["min_event_ms"]), int(f["window_len"]), int(f["history_len"]))
        return cls(model, np.asarray(f["mean"], dtype=float), np.asarray(f["std"], dtype=float),
                   float(f["threshold"]), ev)


def score_frames(m, features: NodFeatures, window_len=30, batch=4096) -> np.ndarray:
    """Per-feature-frame nod probability; frames without a full window get NaN."""
    scores = np.full(len(features), np.nan)
    if len(features) < window_len:
        return scores
    X, _, _ = make_windows(features, (), window_len)
    out = [m.predict_proba(X[i:i + batch]) for i in range(0, len(X), batch)]
    scores[window_len - 1:] = np.concatenate(out)
    return scores


def extract_nod_events(scores, timestamps, cfg: NodEventConfig = NodEventConfig(), threshold=0.5) -> list:
    """Maximal above-threshold runs lasting at least ``cfg.min_event_ms``.

    A run of frames covers ``[first timestamp, timestamp of the frame after the
    run)``; the last frame of the stream covers one median frame gap.
    """
    s = np.asarray(scores, dtype=float)
    ts = np.asarray(timestamps, dtype=np.int64)
    if len(s) != len(ts):
        raise ValueError("scores and timestamps differ in length")
    if len(s) == 0:
        return []
    on = np.zeros(len(s) + 2, dtype=np.int8)
    on[1:-1] = s >= threshold  # NaN compares False
    edges = np.diff(on)
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)  # exclusive frame index
    gap = int(np.median(np.diff(ts))) if len(ts) > 1 else 33
    events = []
    for a, b in zip(starts, stops):
        t0 = int(ts[a])
        t1 = int(ts[b]) if b < len(ts) else int(ts[-1]) + gap
        if t1 - t0 >= cfg.min_event_ms:
            events.append((t0, t1))
    return events


def _check_intervals(iv, what):
    for a, b in iv:
        if b < a:
            raise ValueError(f"{what}: interval ({a}, {b}) ends before it starts")
    for p, q in zip(iv, iv[1:]):
        if q[0] <= p[1]:
            raise ValueError(f"{what}: intervals {p} and {q} overlap or are unordered")


def _overlaps(a, b):
    return a[0] <= b[1] and b[0] <= a[1]


def match_events(detected, truth):
    """One-to-one overlap matching in time order -> ``(tp, fp, fn)``."""
    detected, truth = list(detected), list(truth)
    _check_intervals(detected, "detected")
    _check_intervals(truth, "truth")
    tp = 0
    j = 0  # truths before j end before the current detection starts, or are matched
    matched = [False] * len(truth)
    for d in detected:
        while j < len(truth) and (matched[j] or truth[j][1] < d[0]):
            j += 1
        if j < len(truth) and _overlaps(d, truth[j]):
            matched[j] = True
            tp += 1
    return tp, len(detected) - tp, len(truth) - tp


# --------------------------------------------------------------------------- training

def session_windows(s: Session, robot_only=True, window_len=30):
    """Windows of one session, restricted to final frames inside robot turns."""
    feats = extract_nod_features((s.timestamps(), s.angles()))
    X, y, end_ts = make_windows(feats, s.nod_truth, window_len)
    if robot_only:
        keep = in_intervals(end_ts, [(t.t_start_ms, t.t_end_ms - 1) for t in robot_turns(s)])
        return X[keep], y[keep], end_ts[keep]
    return X, y, end_ts


def _stack(sessions, max_windows, rng):
    Xs, ys = [], []
    for s in sessions:
        X, y, _ = session_windows(s)
        Xs.append(X)
        ys.append(y)
    X = np.concatenate(Xs) if Xs else np.empty((0, 30, N_FEATURES))
    y = np.concatenate(ys) if ys else np.empty(0)
    if max_windows is not None and len(X) > max_windows:
        idx = np.sort(rng.choice(len(X), size=max_windows, replace=False))
        X, y = X[idx], y[idx]
    return np.ascontiguousarray(X), y


def train_nod_detector(train_sessions, valid_sessions, cfg: TrainConfig | None = None,
                       max_train_windows=20000, max_valid_windows=5000, hidden_dim=16) -> NodDetector:
    """Train a nod LSTM on robot-turn windows of the given sessions.

    Windows are randomly subsampled to the given caps (seeded by ``cfg.seed``)
    to bound training time; features are standardised with training statistics.
    """
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng([cfg.seed, 1])
    X, y = _stack(train_sessions, max_train_windows, rng)
    Xv, yv = _stack(valid_sessions, max_valid_windows, rng)
    flat = X.reshape(-1, N_FEATURES)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std[std < 1e-9] = 1.0
    model = lstm_train(((X - mean) / std, y), ((Xv - mean) / std, yv) if len(Xv) else None, cfg, hidden_dim)
    return NodDetector(model, mean, std)


def turn_has_nod(det, s: Session, turn) -> bool:
    """Whether a nod event is detected using only frames inside the turn and the
    history that precedes them."""
    return bool(detect_turn_events(det, s, turn))


def detect_turn_events(det, s: Session, turn) -> list:
    return detect_events_between(det, s.timestamps(), s.angles(), turn.t_start_ms, turn.t_end_ms)


def detect_events_between(det, ts_all, angles, t_start_ms, t_end_ms) -> list:
    """Nod events in ``[t_start_ms, t_end_ms)`` from frames before ``t_end_ms`` only.

    Frames preceding the interval supply feature history and window context, so
    scores near the start are not truncated.
    """
    H, W = det.events.history_len, det.events.window_len
    lo = int(np.searchsorted(ts_all, t_start_ms, side="left"))
    hi = int(np.searchsorted(ts_all, t_end_ms, side="left"))
    start = max(0, lo - (H + W - 1))
    if hi - start < H + W:
        return []
    feats = extract_nod_features((np.asarray(ts_all[start:hi]), np.asarray(angles[start:hi])), H)
    scores = score_frames(det, feats, W)
    keep = feats.timestamps >= t_start_ms
    return extract_nod_events(scores[keep], feats.timestamps[keep], det.events, det.threshold)
