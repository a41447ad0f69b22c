"""Per-turn fusion of the four detectors and the engagement model.

Ground-truth and detected behaviour states are computed per robot turn.  The
streaming replay feeds frames and IPUs in time order and reuses the same
per-turn functions as the batch path, so both emit identical values.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import BehaviorState, DataError, Session, Turn, ipus_in_turn, robot_turns
from .engagement import AnnotationRecord, EngagementModel, predict_live, predict_session
from .gaze import GazeGeometry, gaze_label_from_flags, looking_flags
from .ipu import IpuClassifierBundle, Lexicon, ModelMismatchError, classify_ipu
from .learn import ModelFormatError
from .nod import NodDetector, detect_events_between

log = logging.getLogger(__name__)

MODEL_FILES = {"nod": "nod.json", "laughter": "laughter.json", "backchannel": "backchannel.json",
               "engagement": "engagement.json"}


# --------------------------------------------------------------------------- truth

def _turn_span(ts, turn: Turn):
    return np.searchsorted(ts, [turn.t_start_ms, turn.t_end_ms], side="left")


def true_turn_state(s: Session, turn: Turn, geom: GazeGeometry) -> BehaviorState:
    """State from the session's ground truth.

    Without per-frame gaze truth the geometric detector stands in for it.
    """
    nod = any(a < turn.t_end_ms and b >= turn.t_start_ms for a, b in s.nod_truth)
    ipus = ipus_in_turn(s, turn)
    laughter = any(u.label == "laughter" for u in ipus)
    backchannel = any(u.label == "backchannel" for u in ipus)
    ts = s.timestamps()
    lo, hi = _turn_span(ts, turn)
    if s.gaze_truth is not None:
        flags = np.asarray(s.gaze_truth[lo:hi], dtype=bool)
    else:
        flags = looking_flags(s.head_positions()[lo:hi], s.angles()[lo:hi], geom)
    gaze = gaze_label_from_flags(ts[lo:hi], flags, geom, turn)
    return BehaviorState(nod, laughter, backchannel, gaze)


def true_states(s: Session, geom: GazeGeometry) -> list:
    return [true_turn_state(s, t, geom) for t in robot_turns(s)]


# --------------------------------------------------------------------------- detectors

@dataclass
class DetectorSet:
    nod: NodDetector
    laughter: IpuClassifierBundle
    backchannel: IpuClassifierBundle
    engagement: Optional[EngagementModel] = None
    lexicon: Optional[Lexicon] = None

    def __post_init__(self):
        if self.laughter.kind != "laughter" or self.backchannel.kind != "backchannel":
            raise ModelMismatchError("laughter/backchannel bundles are swapped or mislabelled")
        needs_lex = "prosody_plus_linguistic" in (self.laughter.feature_mode, self.backchannel.feature_mode)
        if needs_lex and self.lexicon is None:
            raise ModelMismatchError("linguistic feature mode needs a lexicon in the model directory")

    @classmethod
    def load(cls, model_dir) -> "DetectorSet":
        d = Path(model_dir)
        docs = {}
        for key, name in MODEL_FILES.items():
            p = d / name
            if not p.is_file():
                if key == "engagement":
                    continue
                raise DataError(f"missing {name}", d)
            try:
                docs[key] = json.loads(p.read_text(encoding="utf-8"))
            except ValueError as e:
                raise DataError(f"malformed JSON: {e}", p) from None
        lex = Lexicon.load(d / "lexicon.jsonl", d / "pos_tags.txt") if (d / "lexicon.jsonl").is_file() else None
        eng = EngagementModel.from_dict(docs["engagement"]) if "engagement" in docs else None
        return cls(NodDetector.from_dict(docs["nod"]), IpuClassifierBundle.from_dict(docs["laughter"]),
                   IpuClassifierBundle.from_dict(docs["backchannel"]), eng, lex)


def load_model_file(path):
    """Any trained artefact by its document shape."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "theta" in doc:
        return EngagementModel.from_dict(doc)
    f = doc.get("features", {})
    if f.get("kind") == "nod":
        return NodDetector.from_dict(doc)
    if f.get("kind") in ("laughter", "backchannel"):
        return IpuClassifierBundle.from_dict(doc)
    raise ModelFormatError(f"{path}: unrecognised model document")


def save_json(obj, path):
    Path(path).write_text(json.dumps(obj) + "\n", encoding="utf-8")


def detected_turn_state(det: DetectorSet, ts, angles, positions, turn: Turn, ipu_probs, geom) -> BehaviorState:
    """Fuse detector outputs for one turn.

    ``ts``/``angles``/``positions`` hold frames up to at least the turn end;
    ``ipu_probs`` lists ``(ipu, p_laughter, p_backchannel)`` for the IPUs that
    start inside the turn.
    """
    nod = bool(detect_events_between(det.nod, ts, angles, turn.t_start_ms, turn.t_end_ms))
    laughter = any(pl >= det.laughter.threshold for _, pl, _ in ipu_probs)
    backchannel = any(pb >= det.backchannel.threshold for _, _, pb in ipu_probs)
    lo, hi = _turn_span(ts, turn)
    flags = looking_flags(positions[lo:hi], angles[lo:hi], geom)
    gaze = gaze_label_from_flags(ts[lo:hi], flags, geom, turn)
    return BehaviorState(nod, laughter, backchannel, gaze)


class _IpuTracker:
    """Sequential IPU classification with thresholded running history."""

    def __init__(self, det: DetectorSet):
        self.det = det
        self.hist_l = []
        self.hist_b = []

    def push(self, u):
        d = self.det
        pl = classify_ipu(d.laughter, u, self.hist_l, d.lexicon)
        pb = classify_ipu(d.backchannel, u, self.hist_b, d.lexicon)
        self.hist_l.append(1.0 if pl >= d.laughter.threshold else 0.0)
        self.hist_b.append(1.0 if pb >= d.backchannel.threshold else 0.0)
        return u, pl, pb


def detect_states(det: DetectorSet, s: Session, geom: GazeGeometry) -> list:
    tracker = _IpuTracker(det)
    probs = [tracker.push(u) for u in sorted(s.ipus, key=lambda u: u.t_start_ms)]
    ts, ang, pos = s.timestamps(), s.angles(), s.head_positions()
    out = []
    for turn in robot_turns(s):
        inside = [p for p in probs if turn.t_start_ms <= p[0].t_start_ms < turn.t_end_ms]
        out.append(detected_turn_state(det, ts, ang, pos, turn, inside, geom))
    return out


def state_line(turn_id, state: BehaviorState, engagement) -> str:
    obj = {"turn_id": turn_id, "nod": bool(state.nod), "laughter": bool(state.laughter),
           "backchannel": bool(state.backchannel), "gaze": bool(state.gaze),
           "engagement": None if engagement is None else float(engagement)}
    return json.dumps(obj)


def detect_session(det: DetectorSet, s: Session, geom: GazeGeometry) -> list:
    """states.jsonl lines, one per robot turn."""
    states = detect_states(det, s, geom)
    probs = predict_session(det.engagement, states) if det.engagement is not None else [None] * len(states)
    return [state_line(t.turn_id, st, p) for t, st, p in zip(robot_turns(s), states, probs)]


# --------------------------------------------------------------------------- replay

def replay_session(det: DetectorSet, s: Session, geom: GazeGeometry, speed=1.0, emit=print,
                   clock=time.monotonic, sleep=time.sleep) -> list:
    """Stream a session in simulated time and emit one line per completed robot turn.

    Frames arrive at their timestamps and IPUs at their end times; a turn is
    emitted once time passes its end and every IPU starting inside it has
    arrived.  ``speed`` 0 disables pacing.  Returns per-turn emission latencies
    in ms of simulated time past the turn end.
    """
    if speed < 0:
        raise ValueError("speed must be >= 0")
    ts_all, ang_all, pos_all = s.timestamps(), s.angles(), s.head_positions()
    ipus = sorted(s.ipus, key=lambda u: (u.t_end_ms, u.t_start_ms))
    turns = robot_turns(s)
    # events: (time, order, kind, payload); turns close after same-time frames and IPUs
    events = [(int(t), 0, "frame", i) for i, t in enumerate(ts_all)]
    events += [(u.t_end_ms, 1, "ipu", u) for u in ipus]
    for k, t in enumerate(turns):
        last_ipu_end = max([u.t_end_ms for u in ipus_in_turn(s, t)], default=t.t_end_ms)
        events.append((max(t.t_end_ms, last_ipu_end), 2, "turn", k))
    events.sort(key=lambda e: (e[0], e[1], e[3] if e[2] != "ipu" else e[3].t_start_ms))

    tracker = _IpuTracker(det)
    got = []
    n_frames = 0
    prev = False
    latencies = []
    t0 = clock()
    for t_sim, _, kind, payload in events:
        if speed > 0:
            wait = t_sim / 1000.0 / speed - (clock() - t0)
            if wait > 0:
                sleep(wait)
        if kind == "frame":
            n_frames = payload + 1
        elif kind == "ipu":
            got.append(tracker.push(payload))
        else:
            turn = turns[payload]
            inside = [p for p in got if turn.t_start_ms <= p[0].t_start_ms < turn.t_end_ms]
            st = detected_turn_state(det, ts_all[:n_frames], ang_all[:n_frames], pos_all[:n_frames], turn,
                                     inside, geom)
            p = None
            if det.engagement is not None:
                if det.engagement.context_enabled:
                    p = predict_live(det.engagement, st.with_prev(prev))
                    prev = p >= 0.5
                else:
                    p = predict_live(det.engagement, st.with_prev(None))
            emit(state_line(turn.turn_id, st, p))
            if speed > 0:
                latencies.append((clock() - t0) * 1000.0 * speed - turn.t_end_ms)
    if latencies:
        log.info("replay latency past turn end: median %.1f ms, max %.1f ms (simulated)",
                 float(np.median(latencies)), float(np.max(latencies)))
    return latencies


# --------------------------------------------------------------------------- annotations

def annotation_records(sessions, states_by_session, context_enabled=False) -> list:
    """AnnotationRecords pairing each annotation with its turn's state.

    In context mode the previous-engagement bit is the same annotator's label
    on the preceding robot turn (0 for the first turn or when missing).
    """
    out = []
    for s, states in zip(sessions, states_by_session):
        turns = robot_turns(s)
        if len(states) != len(turns):
            raise ValueError(f"session {s.session_id}: {len(states)} states for {len(turns)} robot turns")
        pos = {t.turn_id: k for k, t in enumerate(turns)}
        labels = {(a.annotator_id, a.turn_id): a.engaged for a in s.annotations}
        for a in s.annotations:
            k = pos.get(a.turn_id)
            if k is None:
                continue
            st = states[k]
            if context_enabled:
                prev = labels.get((a.annotator_id, turns[k - 1].turn_id), 0) if k > 0 else 0
                st = st.with_prev(bool(prev))
            else:
                st = st.with_prev(None)
            out.append(AnnotationRecord(a.annotator_id, st, int(a.engaged), f"{s.session_id}/{a.turn_id}"))
    return out
