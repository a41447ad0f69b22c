"""Synthetic conversation sessions with known ground truth for every signal.

Sessions alternate robot turns (the user listens) and short user turns.  The
generator draws

* turn counts and lengths from log-normals matched to a median and IQR,
* nods inside robot turns as damped pitch oscillations whose total duration
  hits the target nod-frame rate,
* listener and speaker IPUs with class-conditional prosody and tokens,
* gaze segments toward or away from the robot's head, with sustained
  (10 s and longer) looking in a calibrated share of the long robot turns,
* engagement annotations from known character parameters.

``separability`` scales every class difference: at 0 nods have no amplitude
and laughter/backchannel IPUs are distributed like ordinary speech.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.signal import lfilter
from scipy.stats import norm

from .core import Annotation, IpuRecord, PoseFrame, Session, Token, Turn, robot_turns, write_session
from .engagement import SIGNALS, AnnotationRecord
from .gaze import GazeGeometry
from .ipu import EMBED_DIM, Lexicon
from .pipeline import true_states

POS_TAGS = ("noun", "verb", "adjective", "adverb", "particle", "auxiliary", "interjection", "conjunction",
            "demonstrative", "special")
_GENERAL_POS_P = np.array([0.30, 0.20, 0.08, 0.07, 0.20, 0.08, 0.02, 0.02, 0.02, 0.01])
N_GENERAL_WORDS = 300
BACKCHANNEL_WORDS = ("un", "ee", "hai", "sou", "naruhodo")
LAUGH_WORDS = ("hahaha", "fufu", "ehehe")
FRAME_MS = 1000.0 / 30.0


def lognormal_sigma(median, iqr):
    """Log-normal shape parameter whose quartiles are ``median * exp(+-0.6745 sigma)``."""
    return math.asinh(iqr / (2.0 * median)) / norm.ppf(0.75)


@dataclass
class SynthConfig:
    n_sessions: int = 50
    robot_turns_median: float = 38
    robot_turns_iqr: float = 8.5
    turn_len_median_s: float = 4.89
    turn_len_iqr_s: float = 7.03
    turn_len_max_s: float = 60.0
    user_turn_median_s: float = 2.5
    user_turn_sigma: float = 0.6
    nod_len_median_s: float = 0.74
    nod_len_iqr_s: float = 0.50
    nod_frame_rate: float = 0.115
    laughter_rate: float = 0.063
    backchannel_rate: float = 0.262
    gaze_turn_rate: float = 0.171
    listener_ipu_rate_hz: float = 0.3
    n_annotators: int = 12
    n_characters: int = 3
    theta_star: Optional[list] = None
    phi_star: Optional[list] = None
    separability: float = 0.8
    seed: int = 0

    def __post_init__(self):
        for name in ("nod_frame_rate", "laughter_rate", "backchannel_rate", "gaze_turn_rate"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.laughter_rate + self.backchannel_rate >= 1:
            raise ValueError("laughter_rate + backchannel_rate must be < 1")
        if not 0 <= self.separability <= 1:
            raise ValueError("separability must lie in [0, 1]")
        for name in ("robot_turns_median", "turn_len_median_s", "user_turn_median_s", "nod_len_median_s",
                     "robot_turns_iqr", "turn_len_iqr_s", "nod_len_iqr_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.n_sessions < 1 or self.n_annotators < 1 or self.n_characters < 1:
            raise ValueError("n_sessions, n_annotators and n_characters must be >= 1")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self):
        return asdict(self)

    # -- derived quantities
    @property
    def turn_len_sigma(self):
        return lognormal_sigma(self.turn_len_median_s, self.turn_len_iqr_s)

    def sustained_gaze_prob(self):
        """Probability that a long-enough robot turn gets a sustained gaze run."""
        p_long = norm.sf(math.log(_SUSTAIN_MIN_TURN_S / self.turn_len_median_s) / self.turn_len_sigma)
        q = self.gaze_turn_rate / p_long
        if q > 1:
            raise ValueError(f"infeasible gaze rate {self.gaze_turn_rate}: only {p_long:.3f} of turns are "
                             f"long enough for a 10 s gaze")
        return q

    def true_theta(self):
        if self.theta_star is not None:
            t = np.asarray(self.theta_star, dtype=float)
        else:
            K = self.n_characters
            t = np.full((self.n_annotators, K), 0.2 / max(K - 1, 1) if K > 1 else 1.0)
            for i in range(self.n_annotators):
                t[i, i % K] = 0.8 if K > 1 else 1.0
        if t.shape != (self.n_annotators, self.n_characters):
            raise ValueError("theta_star must be n_annotators x n_characters")
        return t

    def true_phi(self):
        if self.phi_star is not None:
            p = np.asarray(self.phi_star, dtype=float)
            if p.shape != (self.n_characters, 16):
                raise ValueError("phi_star must be n_characters x 16")
            return p
        return default_phi(self.n_characters)


_SUSTAIN_MIN_TURN_S = 10.6
_SUSTAIN_RUN_S = 10.4


def default_phi(K=3):
    """Characters that weigh the four signals differently (logistic in the bits)."""
    base = [(-1.5, (0.5, 0.5, 0.5, 3.0)),   # gaze-driven
            (-1.5, (0.5, 2.5, 2.0, 0.5)),   # verbal-driven
            (-1.0, (2.0, 0.5, 0.5, 1.0))]   # nod-driven
    phi = np.zeros((K, 16))
    for k in range(K):
        b, w = base[k % 3]
        for x in range(16):
            bits = [(x >> j) & 1 for j in range(4)]
            phi[k, x] = 1.0 / (1.0 + math.exp(-(b + float(np.dot(w, bits)) - 0.3 * (k // 3))))
    return phi


def annotator_ids(n):
    return [f"a{i + 1}" for i in range(n)]


def synthetic_geometry() -> GazeGeometry:
    """Robot head at the world origin height 1.2 m; sensor beside the robot.

    The sensor frame is turned half a revolution about +y relative to the world,
    so a user in front of the robot faces sensor +z when looking at it.
    """
    return GazeGeometry(sensor_position=np.array([0.5, 1.0, 0.0]),
                        sensor_rotation=np.diag([-1.0, 1.0, -1.0]),
                        target_center=np.array([0.0, 1.2, 0.0]))


def synthetic_lexicon(seed=0) -> Lexicon:
    rng = np.random.default_rng([seed, 7])
    vectors = {}
    for i in range(N_GENERAL_WORDS):
        vectors[f"w{i}"] = rng.normal(size=EMBED_DIM)
    bc_dir = rng.normal(size=EMBED_DIM)
    lg_dir = rng.normal(size=EMBED_DIM)
    for i, _ in enumerate(BACKCHANNEL_WORDS):
        vectors[f"bc{i}"] = 2.0 * bc_dir + 0.5 * rng.normal(size=EMBED_DIM)
    for i, _ in enumerate(LAUGH_WORDS):
        vectors[f"lg{i}"] = 2.0 * lg_dir + 0.5 * rng.normal(size=EMBED_DIM)
    return Lexicon(vectors, POS_TAGS)


# --------------------------------------------------------------------------- helpers

def _lognormal(rng, median, sigma, size=None):
    return median * np.exp(sigma * rng.standard_normal(size))


def _ou(rng, n, std, tau_frames):
    """Ornstein-Uhlenbeck noise with stationary standard deviation ``std``."""
    a = math.exp(-1.0 / tau_frames)
    e = rng.standard_normal(n) * std * math.sqrt(1 - a * a)
    out = lfilter([1.0], [1.0, -a], e)
    return out


def _smooth(x, tau_frames):
    a = math.exp(-1.0 / tau_frames)
    zi = np.array([a * x[0]])
    return lfilter([1.0 - a], [1.0, -a], x, zi=zi)[0]


def _place(rng, lo, hi, lengths, min_gap):
    """Non-overlapping intervals of the given lengths inside [lo, hi], or fewer if they do not fit."""
    lengths = list(lengths)
    while lengths and sum(lengths) + min_gap * (len(lengths) + 1) > hi - lo:
        lengths.pop()
    if not lengths:
        return []
    free = (hi - lo) - sum(lengths) - min_gap * (len(lengths) + 1)
    spaces = rng.dirichlet(np.ones(len(lengths) + 1)) * free
    out = []
    t = lo + min_gap + spaces[0]
    for j, L in enumerate(lengths):
        out.append((t, t + L))
        t += L + min_gap + spaces[j + 1]
    return out


# --------------------------------------------------------------------------- IPUs

@dataclass
class _Speaker:
    f0_base: float
    int_base: float


def _voicing(rng, n, p_voiced, switch=0.15):
    v = np.empty(n, dtype=bool)
    state = rng.random() < p_voiced
    for j in range(n):
        if rng.random() < switch:
            state = rng.random() < p_voiced
        v[j] = state
    return v


def _make_ipu(rng, label, t0, dur_ms, sp: _Speaker, sep, ipu_id):
    n = max(2, int(round(dur_ms / 10)))
    dur_ms = n * 10
    t = np.arange(n) * 0.01
    if label == "laughter":
        v = _voicing(rng, n, 0.75 - 0.35 * sep, 0.15 + 0.25 * sep)
        f0 = sp.f0_base * (1 + 0.25 * sep) + 60 * sep * np.sin(2 * np.pi * 5 * t + rng.uniform(0, 6.3)) \
            + 0.08 * sp.f0_base * (1 - sep) * np.sin(2 * np.pi * 1.5 * t + rng.uniform(0, 6.3)) - 15 * (1 - sep) * t
        inten = sp.int_base + 3 * sep + (4 + 6 * sep) * np.sin(2 * np.pi * (3 + 2 * sep) * t + rng.uniform(0, 6.3))
    elif label == "backchannel":
        v = _voicing(rng, n, 0.75 + 0.1 * sep)
        f0 = sp.f0_base * (1 + 0.08 * (1 - sep) * np.sin(2 * np.pi * 1.5 * t + rng.uniform(0, 6.3))) \
            - (15 + 150 * sep) * t
        inten = sp.int_base - 2 * sep + 4 * (1 - sep) * np.sin(2 * np.pi * 3 * t + rng.uniform(0, 6.3)) - 8 * sep * t
    else:
        v = _voicing(rng, n, 0.75)
        f0 = sp.f0_base * (1 + 0.08 * np.sin(2 * np.pi * 1.5 * t + rng.uniform(0, 6.3))) - 15 * t
        inten = sp.int_base + 4 * np.sin(2 * np.pi * 3 * t + rng.uniform(0, 6.3))
    f0 = np.maximum(f0 + rng.normal(0, 3, n), 50.0)
    f0 = np.where(v, np.round(f0, 2), 0.0)
    inten = np.round(inten + rng.normal(0, 1.5, n) - 12.0 * (~v), 2)

    tokens = []
    if label == "backchannel" and rng.random() < 0.9 * sep:
        for _ in range(rng.integers(1, 3)):
            j = int(rng.integers(len(BACKCHANNEL_WORDS)))
            tokens.append(Token(BACKCHANNEL_WORDS[j], "interjection", f"bc{j}"))
    else:
        if label == "laughter" and rng.random() < 0.7 * sep:
            j = int(rng.integers(len(LAUGH_WORDS)))
            tokens.append(Token(LAUGH_WORDS[j], "special", f"lg{j}"))
        n_words = max(1, int(round(dur_ms / 1000 * 3 * rng.uniform(0.6, 1.4))))
        if tokens:
            n_words = int(rng.integers(0, 2))
        for _ in range(n_words):
            if rng.random() < 0.03:
                emb = f"oov{int(rng.integers(1000))}"
            else:
                emb = f"w{int(rng.integers(N_GENERAL_WORDS))}"
            pos = POS_TAGS[int(rng.choice(len(POS_TAGS), p=_GENERAL_POS_P))]
            tokens.append(Token(emb, pos, emb))
    return IpuRecord(ipu_id, int(t0), int(t0 + dur_ms), tuple(tokens), tuple(float(x) for x in f0),
                     tuple(float(x) for x in inten), 10, label)


def _draw_label(rng, cfg):
    r = rng.random()
    if r < cfg.laughter_rate:
        return "laughter"
    if r < cfg.laughter_rate + cfg.backchannel_rate:
        return "backchannel"
    return "other"


def _ipu_duration_ms(rng, label, sep):
    if label == "backchannel":
        med = math.exp((1 - sep) * math.log(1.4) + sep * math.log(0.35))
        sigma = 0.5 - 0.15 * sep
    elif label == "laughter":
        med = math.exp((1 - sep) * math.log(1.4) + sep * math.log(0.9))
        sigma = 0.5 - 0.1 * sep
    else:
        med, sigma = 1.4, 0.5
    return float(np.clip(_lognormal(rng, med, sigma), 0.15, 6.0)) * 1000


# --------------------------------------------------------------------------- sessions

def _gaze_segments(rng, lo, hi, sustained):
    """Alternating (start, end, looking) segments covering [lo, hi)."""
    segs = []
    t = lo
    if sustained:
        lead = rng.uniform(0, max(0.0, (hi - lo) - _SUSTAIN_RUN_S * 1000 - 100))
        lead = lead if rng.random() < 0.5 else 0.0
        if lead > 300:
            segs.append((t, t + lead, False))
            t += lead
        segs.append((t, hi, True))
        return segs
    looking = rng.random() < 0.7
    while t < hi:
        if looking:
            L = min(_lognormal(rng, 3000, 0.6), 8000)
        else:
            L = rng.uniform(600, 2500)
        segs.append((t, min(hi, t + L), looking))
        t += L
        looking = not looking
    return segs


def generate_session(cfg: SynthConfig, seed, session_id="s000") -> Session:
    rng = np.random.default_rng(seed)
    sep = cfg.separability
    q_sustain = cfg.sustained_gaze_prob()

    # turns
    n_robot = max(3, int(round(_lognormal(rng, cfg.robot_turns_median,
                                          lognormal_sigma(cfg.robot_turns_median, cfg.robot_turns_iqr)))))
    turns = []
    t = 1500.0
    for j in range(n_robot):
        L = float(np.clip(_lognormal(rng, cfg.turn_len_median_s, cfg.turn_len_sigma), 0.8, cfg.turn_len_max_s))
        turns.append(Turn(f"t{2 * j + 1}", "robot", int(t), int(t + L * 1000)))
        t = turns[-1].t_end_ms + 200.0
        U = float(np.clip(_lognormal(rng, cfg.user_turn_median_s, cfg.user_turn_sigma), 0.5, 15.0))
        turns.append(Turn(f"t{2 * j + 2}", "user", int(t), int(t + U * 1000)))
        t = turns[-1].t_end_ms + 200.0
    t_end = t + 1000.0

    # frames
    n = int(t_end / FRAME_MS) + 1
    jitter = rng.uniform(-2, 2, n)
    jitter[0] = 0
    ts = np.round(np.arange(n) * FRAME_MS + jitter).astype(np.int64)
    ts[0] = 0

    # gaze truth
    looking = np.zeros(n, dtype=bool)
    for tr in turns:
        sustained = (tr.speaker == "robot" and tr.duration_ms >= _SUSTAIN_MIN_TURN_S * 1000
                     and rng.random() < q_sustain)
        for a, b, lk in _gaze_segments(rng, tr.t_start_ms, tr.t_end_ms, sustained):
            if lk:
                looking[(ts >= a) & (ts < b)] = True

    # nods
    nod_sigma = lognormal_sigma(cfg.nod_len_median_s, cfg.nod_len_iqr_s)
    nod_mean = cfg.nod_len_median_s * math.exp(nod_sigma ** 2 / 2)
    nods = []
    for tr in turns:
        if tr.speaker != "robot":
            continue
        L = tr.duration_ms / 1000
        k = rng.poisson(cfg.nod_frame_rate * L / nod_mean)
        lens = np.clip(_lognormal(rng, cfg.nod_len_median_s, nod_sigma, k), 0.25, 2.5) * 1000
        for a, b in _place(rng, tr.t_start_ms + 100, tr.t_end_ms - 100, lens, 300):
            nods.append((int(round(a)), int(round(b))))

    # head position (sensor coordinates) and intended facing direction
    geom = synthetic_geometry()
    base_world = np.array([rng.uniform(-0.1, 0.3), rng.uniform(1.1, 1.3), rng.uniform(1.3, 1.7)])
    sway = np.stack([_ou(rng, n, 0.02, 60) for _ in range(3)], axis=1)
    head_world = base_world + sway
    R = geom.sensor_rotation
    head_sensor = (head_world - geom.sensor_position) @ R  # R^T applied row-wise
    to_target = (geom.target_center + rng.normal(0, 0.05, 3)) - head_world
    d_s = to_target @ R
    d_s /= np.linalg.norm(d_s, axis=1, keepdims=True)
    look_yaw = np.degrees(np.arcsin(np.clip(d_s[:, 0], -1, 1)))
    look_pitch = np.degrees(np.arctan2(-d_s[:, 1], d_s[:, 2]))

    # away offsets per away-run
    off_yaw = np.zeros(n)
    off_pitch = np.zeros(n)
    edges = np.flatnonzero(np.diff(np.r_[1, looking.astype(int), 1]) != 0)
    for a, b in zip(edges[0::2], edges[1::2]):
        off_yaw[a:b] = rng.choice([-1, 1]) * rng.uniform(22, 45)
        off_pitch[a:b] = rng.uniform(-12, 25)
    yaw = _smooth(look_yaw + off_yaw, 3.0) + _ou(rng, n, 1.5, 30)
    pitch = _smooth(look_pitch + off_pitch, 3.0) + _ou(rng, n, 1.5, 30)
    roll = _ou(rng, n, 2.0, 45)

    # head shakes as confounders
    tsec = ts / 1000.0
    n_shakes = rng.poisson(0.03 * t_end / 1000)
    for _ in range(n_shakes):
        c = rng.uniform(0, t_end / 1000)
        dur = rng.uniform(0.5, 1.0)
        f = rng.uniform(2, 3)
        m = (tsec >= c) & (tsec < c + dur)
        u = (tsec[m] - c) / dur
        yaw[m] += rng.uniform(8, 15) * np.sin(np.pi * u) * np.sin(2 * np.pi * f * (tsec[m] - c))

    # nods: damped pitch oscillation, positive pitch = head down
    for a, b in nods:
        m = (ts >= a) & (ts <= b)
        tt = (ts[m] - a) / 1000.0
        L = (b - a) / 1000.0
        amp = sep * rng.uniform(10, 20)
        f = rng.uniform(1.5, 3.0)
        taper = np.sin(np.pi * np.clip(tt / L, 0, 1)) ** 0.5
        pitch[m] += amp * taper * np.exp(-1.0 * tt / L) * np.sin(2 * np.pi * f * tt)

    yaw += rng.normal(0, 0.3, n)
    pitch += rng.normal(0, 0.3, n)
    roll += rng.normal(0, 0.3, n)

    frames = tuple(
        PoseFrame(int(ts[j]), (round(float(head_sensor[j, 0]), 5), round(float(head_sensor[j, 1]), 5),
                               round(float(head_sensor[j, 2]), 5)),
                  round(float(yaw[j]), 4), round(float(roll[j]), 4), round(float(pitch[j]), 4))
        for j in range(n))

    # IPUs
    sp = _Speaker(rng.uniform(100, 220), rng.uniform(55, 65))
    ipus = []

    def fill(lo, hi, gap_sampler):
        cur = lo + gap_sampler()
        while cur < hi - 150:
            label = _draw_label(rng, cfg)
            dur = min(_ipu_duration_ms(rng, label, sep), hi - cur)
            if dur < 150:
                break
            u = _make_ipu(rng, label, cur, dur, sp, sep, f"u{len(ipus) + 1}")
            if u.t_end_ms > hi:
                break
            ipus.append(u)
            cur = u.t_end_ms + gap_sampler()

    for tr in turns:
        if tr.speaker == "robot":
            fill(tr.t_start_ms, tr.t_end_ms, lambda: rng.exponential(1000.0 / cfg.listener_ipu_rate_hz))
        else:
            fill(tr.t_start_ms, tr.t_end_ms, lambda: rng.uniform(150, 600))

    return Session(session_id, frames, tuple(ipus), tuple(turns), tuple(nods), tuple(bool(v) for v in looking))


# --------------------------------------------------------------------------- truth + annotations

def generate_annotations(sessions, theta_star, phi_star, seed, geom=None, ids=None) -> list:
    """Per (annotator, robot turn): draw a character from theta*, then a label from phi*."""
    theta = np.asarray(theta_star, dtype=float)
    phi = np.asarray(phi_star, dtype=float)
    if theta.ndim != 2 or phi.ndim != 2 or theta.shape[1] != phi.shape[0] or phi.shape[1] != 16:
        raise ValueError("theta* must be (annotators, K) and phi* (K, 16)")
    ids = annotator_ids(theta.shape[0]) if ids is None else list(ids)
    if len(ids) != theta.shape[0]:
        raise ValueError("annotator count does not match theta* rows")
    geom = geom or synthetic_geometry()
    rng = np.random.default_rng(seed)
    out = []
    for s in sessions:
        for turn, state in zip(robot_turns(s), true_states(s, geom)):
            x = state.encode()
            for i, a in enumerate(ids):
                k = rng.choice(theta.shape[1], p=theta[i])
                y = int(rng.random() < phi[k, x])
                out.append(AnnotationRecord(a, state, y, f"{s.session_id}/{turn.turn_id}"))
    return out


def with_annotations(s: Session, records) -> Session:
    anns = tuple(Annotation(r.annotator_id, r.turn_ref.split("/", 1)[1], r.engaged) for r in records
                 if r.turn_ref.split("/", 1)[0] == s.session_id)
    return Session(s.session_id, s.frames, s.ipus, s.turns, s.nod_truth, s.gaze_truth, anns)


def session_seed(master_seed, index):
    return np.random.SeedSequence([master_seed, index])


def generate_corpus(cfg: SynthConfig, out_dir=None, seed=None) -> list:
    """Generate ``cfg.n_sessions`` annotated sessions; optionally write a corpus directory.

    Layout: ``sessions/sNNN/``, ``lexicon.jsonl``, ``pos_tags.txt``,
    ``geometry.json``, ``synth.json`` and ``truth.json`` (theta*, phi*).
    """
    seed = cfg.seed if seed is None else seed
    sessions = [generate_session(cfg, session_seed(seed, i), f"s{i:03d}") for i in range(cfg.n_sessions)]
    theta, phi = cfg.true_theta(), cfg.true_phi()
    geom = synthetic_geometry()
    records = generate_annotations(sessions, theta, phi, np.random.SeedSequence([seed, 10 ** 6]), geom)
    sessions = [with_annotations(s, records) for s in sessions]
    if out_dir is not None:
        root = Path(out_dir)
        (root / "sessions").mkdir(parents=True, exist_ok=True)
        for s in sessions:
            write_session(s, root / "sessions" / s.session_id)
        synthetic_lexicon(seed).save(root / "lexicon.jsonl", root / "pos_tags.txt")
        geom.save(root / "geometry.json")
        (root / "synth.json").write_text(json.dumps({**cfg.to_dict(), "seed": seed}, indent=2) + "\n",
                                         encoding="utf-8")
        (root / "truth.json").write_text(json.dumps({
            "annotator_ids": annotator_ids(cfg.n_annotators), "theta": theta.tolist(), "phi": phi.tolist(),
            "signals": list(SIGNALS)}, indent=2) + "\n", encoding="utf-8")
    return sessions
