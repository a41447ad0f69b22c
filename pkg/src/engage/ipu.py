"""Per-IPU prosodic and linguistic features and the laughter/backchannel classifiers."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DataError, IpuRecord
from .learn import TrainConfig, mlp_train, model_from_dict, model_to_dict, rf_train
from .learn.nn import DimensionError

EMBED_DIM = 40
N_POS = 10
N_HISTORY = 5
N_PROSODIC = 14
N_LINGUISTIC = N_HISTORY + EMBED_DIM + N_POS
PROSODIC_NAMES = (
    "duration_s", "voiced_unvoiced_intensity_ratio",
    "pitch_mean", "pitch_median", "pitch_slope", "pitch_min", "pitch_max", "pitch_range",
    "intensity_mean", "intensity_median", "intensity_slope", "intensity_min", "intensity_max", "intensity_range",
)
FEATURE_MODES = ("prosody_only", "prosody_plus_linguistic")
KINDS = ("laughter", "backchannel")


class ModelMismatchError(ValueError):
    """A model or bundle does not fit the features it is given."""


# --------------------------------------------------------------------------- lexicon

@dataclass
class Lexicon:
    vectors: dict
    pos_tags: tuple

    def __post_init__(self):
        if len(self.pos_tags) != N_POS:
            raise DataError(f"POS inventory must list exactly {N_POS} tags, got {len(self.pos_tags)}")
        self._pos_index = {t: i for i, t in enumerate(self.pos_tags)}

    def pos_index(self, tag):
        try:
            return self._pos_index[tag]
        except KeyError:
            raise DataError(f"POS tag {tag!r} not in the {N_POS}-tag inventory") from None

    @classmethod
    def load(cls, lexicon_path, pos_path=None) -> "Lexicon":
        lexicon_path = Path(lexicon_path)
        pos_path = Path(pos_path) if pos_path else lexicon_path.with_name("pos_tags.txt")
        vectors = {}
        with open(lexicon_path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    o = json.loads(line)
                    v = np.asarray(o["vector"], dtype=float)
                    key = str(o["embedding_id"])
                except (ValueError, KeyError, TypeError):
                    raise DataError("malformed lexicon entry", lexicon_path, n) from None
                if v.shape != (EMBED_DIM,) or not np.all(np.isfinite(v)):
                    raise DataError(f"embedding must hold {EMBED_DIM} finite floats", lexicon_path, n)
                vectors[key] = v
        tags = tuple(t.strip() for t in pos_path.read_text(encoding="utf-8").splitlines() if t.strip())
        return cls(vectors, tags)

    def save(self, lexicon_path, pos_path=None):
        lexicon_path = Path(lexicon_path)
        pos_path = Path(pos_path) if pos_path else lexicon_path.with_name("pos_tags.txt")
        with open(lexicon_path, "w", encoding="utf-8") as fh:
            for k, v in self.vectors.items():
                fh.write(json.dumps({"embedding_id": k, "vector": [float(x) for x in v]}) + "\n")
        pos_path.write_text("\n".join(self.pos_tags) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------- features

def _slope(t, v):
    if len(v) < 2:
        return 0.0
    tc = t - t.mean()
    den = float(tc @ tc)
    return float(tc @ (v - v.mean()) / den) if den > 0 else 0.0


def extract_prosodic(ipu: IpuRecord) -> np.ndarray:
    """The 14 prosodic features of one IPU, ordered as ``PROSODIC_NAMES``.

    Pitch statistics use voiced frames (f0 > 0) only; an IPU without voiced
    frames gets zeros for them.  Slopes are least-squares fits against frame
    time in seconds.  The voiced/unvoiced ratio compares mean linear energy
    (10^(dB/10)) and is 0 when either frame set is empty.
    """
    f0 = np.asarray(ipu.f0_hz, dtype=float)
    inten = np.asarray(ipu.intensity_db, dtype=float)
    if len(f0) == 0 or len(inten) == 0:
        raise ValueError(f"IPU {ipu.ipu_id}: empty prosody track")
    t = np.arange(len(f0)) * (ipu.hop_ms / 1000.0)
    voiced = f0 > 0
    out = np.zeros(N_PROSODIC)
    out[0] = ipu.duration_ms / 1000.0
    if voiced.any() and (~voiced).any():
        energy = 10.0 ** (inten / 10.0)
        out[1] = energy[voiced].mean() / energy[~voiced].mean()
    if voiced.any():
        fv = f0[voiced]
        out[2:8] = fv.mean(), np.median(fv), _slope(t[voiced], fv), fv.min(), fv.max(), fv.max() - fv.min()
    out[8:14] = (inten.mean(), np.median(inten), _slope(t, inten), inten.min(), inten.max(),
                 inten.max() - inten.min())
    return out


def extract_linguistic(ipu: IpuRecord, history: Sequence[float], lexicon: Lexicon) -> np.ndarray:
    """55 linguistic features: 5 previous-IPU classifications, a 40-d normalised
    mean token embedding and a 10-bin POS histogram.

    ``history`` is chronological; only the last five entries are used and
    missing ones are zero-filled at the front.
    """
    out = np.zeros(N_LINGUISTIC)
    hist = [float(h) for h in list(history)[-N_HISTORY:]]
    out[N_HISTORY - len(hist):N_HISTORY] = hist
    if ipu.tokens:
        vecs = [lexicon.vectors.get(tok.embedding_id) for tok in ipu.tokens]
        mean = np.mean([v if v is not None else np.zeros(EMBED_DIM) for v in vecs], axis=0)
        norm = np.linalg.norm(mean)
        if norm > 0:
            out[N_HISTORY:N_HISTORY + EMBED_DIM] = mean / norm
        counts = np.zeros(N_POS)
        for tok in ipu.tokens:
            counts[lexicon.pos_index(tok.pos)] += 1
        out[N_HISTORY + EMBED_DIM:] = counts / counts.sum()
    return out


def ipu_features(ipu, history, lexicon, feature_mode) -> np.ndarray:
    p = extract_prosodic(ipu)
    if feature_mode == "prosody_only":
        return p
    if feature_mode == "prosody_plus_linguistic":
        return np.concatenate([p, extract_linguistic(ipu, history, lexicon)])
    raise ValueError(f"unknown feature mode {feature_mode!r}")


def feature_dim(feature_mode):
    return N_PROSODIC if feature_mode == "prosody_only" else N_PROSODIC + N_LINGUISTIC


# --------------------------------------------------------------------------- classifiers

@dataclass
class IpuClassifierBundle:
    kind: str
    feature_mode: str
    model: object
    mean: np.ndarray
    std: np.ndarray
    threshold: float = 0.5
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = feature_dim(self.feature_mode)
        if getattr(self.model, "input_dim", d) != d or len(self.mean) != d or len(self.std) != d:
            raise ModelMismatchError(f"{self.feature_mode} needs {d} features; model/statistics disagree")

    def predict_features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.mean):
            raise DimensionError(f"expected (n, {len(self.mean)}) features, got {X.shape}")
        return self.model.predict_proba((X - self.mean) / self.std)

    def to_dict(self):
        doc = model_to_dict(self.model)
        doc["features"] = {
            "kind": self.kind,
            "mode": self.feature_mode,
            "threshold": self.threshold,
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "split": {"prosodic": N_PROSODIC, "previous_labels": N_HISTORY, "embedding": EMBED_DIM,
                      "pos_histogram": N_POS} if self.feature_mode != "prosody_only" else {"prosodic": N_PROSODIC},
            **self.meta,
        }
        return doc

    @classmethod
    def from_dict(cls, doc):
        f = doc.get("features")
        if f is None:
            raise ModelMismatchError("model document has no 'features' block")
        model = model_from_dict(doc)
        meta = {k: v for k, v in f.items() if k not in ("kind", "mode", "threshold", "mean", "std", "split")}
        return cls(f["kind"], f["mode"], model, np.asarray(f["mean"], dtype=float),
                   np.asarray(f["std"], dtype=float), float(f.get("threshold", 0.5)), meta)


def gold_label(ipu: IpuRecord, kind) -> int:
    return int(ipu.label == kind)


def _session_matrix(ipus, kind, feature_mode, lexicon):
    """Features with teacher-forced history (gold labels of the preceding IPUs)."""
    rows, labels, hist = [], [], []
    for u in ipus:
        rows.append(ipu_features(u, hist, lexicon, feature_mode))
        y = gold_label(u, kind)
        labels.append(y)
        hist.append(float(y))
    return rows, labels


def build_matrix(sessions_ipus, kind, feature_mode, lexicon):
    X, y = [], []
    for ipus in sessions_ipus:
        r, l = _session_matrix(ipus, kind, feature_mode, lexicon)
        X += r
        y += l
    d = feature_dim(feature_mode)
    return (np.asarray(X, dtype=float).reshape(-1, d), np.asarray(y, dtype=float))


def train_ipu_classifier(corpus, kind, feature_mode, cfg: TrainConfig | None = None, lexicon=None,
                         valid=None, n_trees=56, hidden=(128, 128)) -> IpuClassifierBundle:
    """Train a laughter MLP or a backchannel random forest.

    ``corpus`` and ``valid`` are lists of per-session IPU sequences in time
    order.  Without ``valid`` the MLP holds out the last tenth of the training
    sessions for early stopping.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown classifier kind {kind!r}")
    if feature_mode not in FEATURE_MODES:
        raise ValueError(f"unknown feature mode {feature_mode!r}")
    if feature_mode != "prosody_only" and lexicon is None:
        raise ValueError("linguistic features need a lexicon")
    cfg = cfg or TrainConfig()
    corpus = [list(s) for s in corpus]
    if kind == "laughter" and valid is None and len(corpus) >= 2:
        n_valid = max(1, len(corpus) // 10)
        corpus, valid = corpus[:-n_valid], corpus[-n_valid:]
    X, y = build_matrix(corpus, kind, feature_mode, lexicon)
    if len(np.unique(y)) < 2:
        raise ValueError(f"{kind} corpus contains a single class")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-9] = 1.0
    Z = (X - mean) / std
    if kind == "laughter":
        vd = None
        if valid:
            Xv, yv = build_matrix(valid, kind, feature_mode, lexicon)
            vd = ((Xv - mean) / std, yv)
        model = mlp_train((Z, y), vd, cfg, hidden)
    else:
        model = rf_train((Z, y), n_trees, cfg.seed)
    return IpuClassifierBundle(kind, feature_mode, model, mean, std)


def classify_ipu(bundle: IpuClassifierBundle, ipu: IpuRecord, history, lexicon=None) -> float:
    x = ipu_features(ipu, history, lexicon, bundle.feature_mode)
    return float(bundle.predict_features(x[None])[0])


def classify_session(bundle: IpuClassifierBundle, ipus, lexicon=None) -> np.ndarray:
    """Sequential inference: the history holds earlier outputs thresholded at 0.5."""
    probs, hist = [], []
    for u in ipus:
        p = classify_ipu(bundle, u, hist, lexicon)
        probs.append(p)
        hist.append(1.0 if p >= bundle.threshold else 0.0)
    return np.asarray(probs)
