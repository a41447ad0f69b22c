"""Domain types, session directories and turn segmentation.

A session directory holds::

    frames.csv          timestamp_ms,head_x_m,head_y_m,head_z_m,yaw_deg,roll_deg,pitch_deg
    ipus.jsonl          one IpuRecord per line
    turns.jsonl         one Turn per line
    nods.jsonl          optional ground-truth nod intervals
    annotations.jsonl   optional engagement annotations
    gaze.csv            optional per-frame ground-truth gaze (timestamp_ms,looking)
    session.json        optional {"session_id": ...}; defaults to the directory name
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

FRAME_HEADER = ["timestamp_ms", "head_x_m", "head_y_m", "head_z_m", "yaw_deg", "roll_deg", "pitch_deg"]
GAZE_HEADER = ["timestamp_ms", "looking"]
IPU_LABELS = ("laughter", "backchannel", "other")
SPEAKERS = ("robot", "user")
HOP_MS = 10


class DataError(ValueError):
    """Invalid input data, located by file and line when possible."""

    def __init__(self, msg, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{os.fspath(path)}:{line}: " if line is not None else f"{os.fspath(path)}: "
        super().__init__(where + msg)


@dataclass(frozen=True, slots=True)
class PoseFrame:
    timestamp_ms: int
    head_pos: tuple
    yaw_deg: float
    roll_deg: float
    pitch_deg: float


@dataclass(frozen=True)
class Token:
    surface: str
    pos: str
    embedding_id: str


@dataclass(frozen=True)
class IpuRecord:
    ipu_id: str
    t_start_ms: int
    t_end_ms: int
    tokens: tuple = ()
    f0_hz: tuple = ()
    intensity_db: tuple = ()
    hop_ms: int = HOP_MS
    label: Optional[str] = None

    @property
    def duration_ms(self):
        return self.t_end_ms - self.t_start_ms


@dataclass(frozen=True)
class Turn:
    turn_id: str
    speaker: str
    t_start_ms: int
    t_end_ms: int

    @property
    def duration_ms(self):
        return self.t_end_ms - self.t_start_ms


@dataclass(frozen=True)
class Annotation:
    annotator_id: str
    turn_id: str
    engaged: int


@dataclass(frozen=True)
class BehaviorState:
    nod: bool = False
    laughter: bool = False
    backchannel: bool = False
    gaze: bool = False
    prev_engaged: Optional[bool] = None

    def encode(self, context_enabled: bool = False) -> int:
        if context_enabled != (self.prev_engaged is not None):
            raise ValueError("prev_engaged must be set exactly when context is enabled")
        idx = int(self.nod) + 2 * int(self.laughter) + 4 * int(self.backchannel) + 8 * int(self.gaze)
        if context_enabled:
            idx += 16 * int(self.prev_engaged)
        return idx

    @classmethod
    def decode(cls, index: int, context_enabled: bool = False) -> "BehaviorState":
        n = 32 if context_enabled else 16
        if not 0 <= index < n:
            raise ValueError(f"state index {index} outside 0..{n - 1}")
        return cls(
            nod=bool(index & 1),
            laughter=bool(index & 2),
            backchannel=bool(index & 4),
            gaze=bool(index & 8),
            prev_engaged=bool(index & 16) if context_enabled else None,
        )

    def with_prev(self, prev_engaged) -> "BehaviorState":
        return BehaviorState(self.nod, self.laughter, self.backchannel, self.gaze,
                             None if prev_engaged is None else bool(prev_engaged))

    def to_dict(self):
        return {"nod": self.nod, "laughter": self.laughter, "backchannel": self.backchannel, "gaze": self.gaze}


@dataclass(frozen=True)
class Session:
    session_id: str
    frames: tuple
    ipus: tuple = ()
    turns: tuple = ()
    nod_truth: tuple = ()
    gaze_truth: Optional[tuple] = None
    annotations: tuple = ()

    def __post_init__(self):
        validate_session(self)

    @cached_property
    def _ts(self):
        a = np.fromiter((f.timestamp_ms for f in self.frames), dtype=np.int64, count=len(self.frames))
        a.flags.writeable = False
        return a

    @cached_property
    def _angles(self):
        a = np.array([(f.yaw_deg, f.roll_deg, f.pitch_deg) for f in self.frames], dtype=float).reshape(-1, 3)
        a.flags.writeable = False
        return a

    @cached_property
    def _pos(self):
        a = np.array([f.head_pos for f in self.frames], dtype=float).reshape(-1, 3)
        a.flags.writeable = False
        return a

    def timestamps(self) -> np.ndarray:
        return self._ts

    def angles(self) -> np.ndarray:
        """(n, 3) array of yaw, roll, pitch in degrees."""
        return self._angles

    def head_positions(self) -> np.ndarray:
        return self._pos

    def turn(self, turn_id):
        for t in self.turns:
            if t.turn_id == turn_id:
                return t
        raise KeyError(turn_id)


def robot_turns(s: Session) -> list:
    return sorted((t for t in s.turns if t.speaker == "robot"), key=lambda t: t.t_start_ms)


def frames_in(s: Session, t_start_ms, t_end_ms) -> tuple:
    """Frames with t_start <= timestamp < t_end."""
    ts = s.timestamps()
    lo, hi = np.searchsorted(ts, [t_start_ms, t_end_ms], side="left")
    return s.frames[lo:hi]


def ipus_in_turn(s: Session, turn: Turn) -> list:
    """IPUs whose start falls inside the turn."""
    return [u for u in s.ipus if turn.t_start_ms <= u.t_start_ms < turn.t_end_ms]


# --------------------------------------------------------------------------- validation

def _finite(*xs):
    return all(math.isfinite(x) for x in xs)


def validate_frames(frames: Sequence[PoseFrame], path=None):
    if not frames:
        raise DataError("empty frame stream", path)
    prev = None
    for n, f in enumerate(frames):
        line = n + 2
        if not _finite(f.yaw_deg, f.roll_deg, f.pitch_deg, *f.head_pos):
            raise DataError(f"non-finite value at line {line}", path, line)
        if len(f.head_pos) != 3:
            raise DataError(f"head position must have 3 components at line {line}", path, line)
        for a in (f.yaw_deg, f.roll_deg, f.pitch_deg):
            if abs(a) > 180.0:
                raise DataError(f"angle outside [-180, 180] at line {line}", path, line)
        if prev is not None:
            if f.timestamp_ms <= prev.timestamp_ms:
                raise DataError(f"non-increasing timestamp at line {line}", path, line)
            for a, b in ((f.yaw_deg, prev.yaw_deg), (f.roll_deg, prev.roll_deg), (f.pitch_deg, prev.pitch_deg)):
                if abs(a - b) > 180.0:
                    raise DataError(f"angle wraps across +-180 at line {line}", path, line)
        prev = f
    if len(frames) > 1:
        gaps = np.diff([f.timestamp_ms for f in frames])
        med = float(np.median(gaps))
        if not 30 <= med <= 37:
            raise DataError(f"median frame gap {med} ms is not a 30 Hz stream", path)


def validate_ipu(u: IpuRecord, path=None, line=None):
    if u.t_end_ms <= u.t_start_ms:
        raise DataError(f"IPU {u.ipu_id}: t_end_ms must exceed t_start_ms", path, line)
    if u.hop_ms != HOP_MS:
        raise DataError(f"IPU {u.ipu_id}: hop_ms must be {HOP_MS}", path, line)
    if len(u.f0_hz) != len(u.intensity_db):
        raise DataError(f"IPU {u.ipu_id}: f0 and intensity track lengths differ", path, line)
    expected = u.duration_ms / u.hop_ms
    if abs(len(u.f0_hz) - expected) > 1:
        raise DataError(f"IPU {u.ipu_id}: track length {len(u.f0_hz)} does not match duration", path, line)
    if any((not math.isfinite(v)) or v < 0 for v in u.f0_hz):
        raise DataError(f"IPU {u.ipu_id}: f0 values must be finite and >= 0", path, line)
    if not all(math.isfinite(v) for v in u.intensity_db):
        raise DataError(f"IPU {u.ipu_id}: non-finite intensity", path, line)
    if u.label is not None and u.label not in IPU_LABELS:
        raise DataError(f"IPU {u.ipu_id}: unknown label {u.label!r}", path, line)


def _check_disjoint(intervals, what, path=None):
    for a, b in zip(intervals, intervals[1:]):
        if b[0] < a[1]:
            raise DataError(f"overlapping {what} intervals {a} and {b}", path)


def validate_session(s: Session):
    validate_frames(s.frames)
    lo, hi = s.frames[0].timestamp_ms, s.frames[-1].timestamp_ms

    def inside(a, b, what):
        if a < lo or b > hi:
            raise DataError(f"{what} [{a}, {b}] outside session bounds [{lo}, {hi}]")

    for u in s.ipus:
        validate_ipu(u)
        inside(u.t_start_ms, u.t_end_ms, f"IPU {u.ipu_id}")
    ids = set()
    for t in s.turns:
        if t.speaker not in SPEAKERS:
            raise DataError(f"turn {t.turn_id}: unknown speaker {t.speaker!r}")
        if t.t_end_ms <= t.t_start_ms:
            raise DataError(f"turn {t.turn_id}: t_end_ms must exceed t_start_ms")
        if t.turn_id in ids:
            raise DataError(f"duplicate turn id {t.turn_id}")
        ids.add(t.turn_id)
        inside(t.t_start_ms, t.t_end_ms, f"turn {t.turn_id}")
    for sp in SPEAKERS:
        _check_disjoint(sorted((t.t_start_ms, t.t_end_ms) for t in s.turns if t.speaker == sp), f"{sp} turn")
    for a, b in s.nod_truth:
        if b <= a:
            raise DataError(f"nod interval [{a}, {b}] has non-positive length")
        inside(a, b, "nod")
    _check_disjoint(list(s.nod_truth), "nod")
    if list(s.nod_truth) != sorted(s.nod_truth):
        raise DataError("nod intervals must be time-ordered")
    if s.gaze_truth is not None and len(s.gaze_truth) != len(s.frames):
        raise DataError("gaze truth length differs from frame count")
    for a in s.annotations:
        if a.turn_id not in ids:
            raise DataError(f"annotation refers to unknown turn {a.turn_id}")
        if a.engaged not in (0, 1):
            raise DataError(f"annotation engaged must be 0 or 1, got {a.engaged!r}")


# --------------------------------------------------------------------------- I/O

def _fmt(x: float) -> str:
    return repr(float(x))


def _read_jsonl(path: Path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"malformed JSON: {e.msg}", path, n) from None
            if not isinstance(obj, dict):
                raise DataError("expected a JSON object", path, n)
            out.append((n, obj))
    return out


def _write_jsonl(path: Path, objs):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for o in objs:
            fh.write(json.dumps(o, ensure_ascii=False, separators=(",", ":")) + "\n")


def _int_field(obj, key, path, n):
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise DataError(f"field {key!r} must be an integer", path, n)
    return v


def read_frames(path) -> tuple:
    path = Path(path)
    frames = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FRAME_HEADER:
            raise DataError(f"bad header {header!r}", path, 1)
        for n, row in enumerate(reader, start=2):
            if len(row) != 7:
                raise DataError(f"expected 7 columns, got {len(row)}", path, n)
            try:
                ts = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError:
                raise DataError("malformed number", path, n) from None
            frames.append(PoseFrame(ts, (vals[0], vals[1], vals[2]), vals[3], vals[4], vals[5]))
    validate_frames(frames, path)
    return tuple(frames)


def write_frames(frames, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(FRAME_HEADER) + "\n")
        for f in frames:
            fh.write(",".join([str(int(f.timestamp_ms)), *(_fmt(v) for v in f.head_pos),
                               _fmt(f.yaw_deg), _fmt(f.roll_deg), _fmt(f.pitch_deg)]) + "\n")


def ipu_to_dict(u: IpuRecord) -> dict:
    return {
        "ipu_id": u.ipu_id,
        "t_start_ms": u.t_start_ms,
        "t_end_ms": u.t_end_ms,
        "tokens": [[t.surface, t.pos, t.embedding_id] for t in u.tokens],
        "f0_hz": [float(v) for v in u.f0_hz],
        "intensity_db": [float(v) for v in u.intensity_db],
        "hop_ms": u.hop_ms,
        "label": u.label,
    }


def ipu_from_dict(d: dict, path=None, n=None) -> IpuRecord:
    try:
        tokens = tuple(Token(str(a), str(b), str(c)) for a, b, c in d.get("tokens", []))
        u = IpuRecord(
            ipu_id=str(d["ipu_id"]),
            t_start_ms=_int_field(d, "t_start_ms", path, n),
            t_end_ms=_int_field(d, "t_end_ms", path, n),
            tokens=tokens,
            f0_hz=tuple(float(v) for v in d["f0_hz"]),
            intensity_db=tuple(float(v) for v in d["intensity_db"]),
            hop_ms=_int_field(d, "hop_ms", path, n) if "hop_ms" in d else HOP_MS,
            label=d.get("label"),
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"malformed IPU record: {e!r}", path, n) from None
    validate_ipu(u, path, n)
    return u


def _turn_from_dict(d, path, n):
    try:
        return Turn(str(d["turn_id"]), d["speaker"], _int_field(d, "t_start_ms", path, n),
                    _int_field(d, "t_end_ms", path, n))
    except KeyError as e:
        raise DataError(f"missing field {e}", path, n) from None


def read_gaze(path, frames) -> tuple:
    path = Path(path)
    flags = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != GAZE_HEADER:
            raise DataError("bad header", path, 1)
        for n, row in enumerate(reader, start=2):
            if len(row) != 2 or row[1] not in ("0", "1"):
                raise DataError("expected timestamp_ms,looking with looking in {0,1}", path, n)
            i = n - 2
            if i >= len(frames) or int(row[0]) != frames[i].timestamp_ms:
                raise DataError("gaze timestamp does not match frames.csv", path, n)
            flags.append(row[1] == "1")
    if len(flags) != len(frames):
        raise DataError("gaze row count differs from frame count", path)
    return tuple(flags)


def load_session(dir_path) -> Session:
    d = Path(dir_path)
    for req in ("frames.csv", "ipus.jsonl", "turns.jsonl"):
        if not (d / req).is_file():
            raise DataError(f"missing {req}", d)
    frames = read_frames(d / "frames.csv")
    ipus = tuple(ipu_from_dict(o, d / "ipus.jsonl", n) for n, o in _read_jsonl(d / "ipus.jsonl"))
    turns = tuple(_turn_from_dict(o, d / "turns.jsonl", n) for n, o in _read_jsonl(d / "turns.jsonl"))
    nods = ()
    if (d / "nods.jsonl").is_file():
        p = d / "nods.jsonl"
        nods = tuple((_int_field(o, "t_start_ms", p, n), _int_field(o, "t_end_ms", p, n)) for n, o in _read_jsonl(p))
    annotations = ()
    if (d / "annotations.jsonl").is_file():
        p = d / "annotations.jsonl"
        annotations = tuple(Annotation(str(o.get("annotator_id")), str(o.get("turn_id")),
                                       _int_field(o, "engaged", p, n)) for n, o in _read_jsonl(p))
    gaze = read_gaze(d / "gaze.csv", frames) if (d / "gaze.csv").is_file() else None
    sid = d.name
    if (d / "session.json").is_file():
        sid = str(json.loads((d / "session.json").read_text(encoding="utf-8"))["session_id"])
    try:
        return Session(sid, frames, ipus, turns, nods, gaze, annotations)
    except DataError as e:
        raise DataError(str(e), d) from None


def write_session(s: Session, dir_path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    (d / "session.json").write_text(json.dumps({"session_id": s.session_id}) + "\n", encoding="utf-8")
    write_frames(s.frames, d / "frames.csv")
    _write_jsonl(d / "ipus.jsonl", (ipu_to_dict(u) for u in s.ipus))
    _write_jsonl(d / "turns.jsonl", ({"turn_id": t.turn_id, "speaker": t.speaker, "t_start_ms": t.t_start_ms,
                                      "t_end_ms": t.t_end_ms} for t in s.turns))
    for name, rows in (
        ("nods.jsonl", [{"t_start_ms": a, "t_end_ms": b} for a, b in s.nod_truth]),
        ("annotations.jsonl", [{"annotator_id": a.annotator_id, "turn_id": a.turn_id, "engaged": a.engaged}
                               for a in s.annotations]),
    ):
        p = d / name
        if rows:
            _write_jsonl(p, rows)
        elif p.exists():
            p.unlink()
    gp = d / "gaze.csv"
    if s.gaze_truth is not None:
        with open(gp, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(GAZE_HEADER) + "\n")
            for f, g in zip(s.frames, s.gaze_truth):
                fh.write(f"{f.timestamp_ms},{int(bool(g))}\n")
    elif gp.exists():
        gp.unlink()


def list_sessions(corpus_dir) -> list:
    """Session directories under ``corpus_dir/sessions`` (or ``corpus_dir`` itself), sorted by name."""
    root = Path(corpus_dir)
    base = root / "sessions" if (root / "sessions").is_dir() else root
    return sorted(p for p in base.iterdir() if p.is_dir() and (p / "frames.csv").is_file())


def load_corpus(corpus_dir) -> list:
    return [load_session(p) for p in list_sessions(corpus_dir)]
