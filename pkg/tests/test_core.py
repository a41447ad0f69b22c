import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_frames, make_ipu
from engage.core import (FRAME_HEADER, BehaviorState, DataError, Session, Turn, frames_in, ipus_in_turn,
                         load_session, robot_turns, write_session)


def _write_frames_csv(path, rows):
    path.write_text(",".join(FRAME_HEADER) + "\n" + "".join(r + "\n" for r in rows), encoding="utf-8")


def _minimal_dir(d, frame_rows):
    d.mkdir(parents=True, exist_ok=True)
    _write_frames_csv(d / "frames.csv", frame_rows)
    (d / "ipus.jsonl").write_text("", encoding="utf-8")
    (d / "turns.jsonl").write_text("", encoding="utf-8")
    return d


def test_empty_frame_stream(tmp_path):
    d = _minimal_dir(tmp_path / "s", [])
    with pytest.raises(DataError, match="empty frame stream"):
        load_session(d)


def test_non_increasing_timestamp_reports_line(tmp_path):
    rows = [f"{t},0,0,1,0,0,0" for t in (0, 33, 33)]
    d = _minimal_dir(tmp_path / "s", rows)
    with pytest.raises(DataError, match="non-increasing timestamp at line 4") as e:
        load_session(d)
    assert e.value.line == 4


def test_malformed_number_is_located(tmp_path):
    d = _minimal_dir(tmp_path / "s", ["0,0,0,1,0,0,0", "33,0,0,1,x,0,0"])
    with pytest.raises(DataError) as e:
        load_session(d)
    assert e.value.line == 3
    assert "frames.csv:3" in str(e.value)


def test_malformed_jsonl_line_is_located(tmp_path):
    d = _minimal_dir(tmp_path / "s", [f"{33 * i},0,0,1,0,0,0" for i in range(5)])
    (d / "turns.jsonl").write_text('{"turn_id":"t1","speaker":"robot","t_start_ms":0,"t_end_ms":100}\n{oops\n')
    with pytest.raises(DataError, match="turns.jsonl:2"):
        load_session(d)


def test_track_length_mismatch(tmp_path, tiny_session):
    write_session(tiny_session, tmp_path / "s")
    p = tmp_path / "s" / "ipus.jsonl"
    rows = [json.loads(line) for line in p.read_text().splitlines()]
    rows[0]["f0_hz"] = rows[0]["f0_hz"][:-5]
    p.write_text("".join(json.dumps(r) + "\n" for r in rows))
    with pytest.raises(DataError, match="ipus.jsonl:1"):
        load_session(tmp_path / "s")


def test_angle_wrap_rejected():
    frames = make_frames(3, yaw=[170.0, 179.0, -179.0])
    with pytest.raises(DataError, match="wraps"):
        Session("x", frames)


def test_frame_rate_checked():
    with pytest.raises(DataError, match="30 Hz"):
        Session("x", make_frames(10, dt=100))


def test_two_frame_session_writes_three_lines(tmp_path):
    s = Session("two", make_frames(2))
    write_session(s, tmp_path / "s")
    lines = (tmp_path / "s" / "frames.csv").read_text().splitlines()
    assert len(lines) == 3
    assert lines[0] == ",".join(FRAME_HEADER)


def test_no_annotations_file_when_empty(tmp_path, tiny_session):
    write_session(tiny_session, tmp_path / "s")
    assert not (tmp_path / "s" / "annotations.jsonl").exists()
    assert (tmp_path / "s" / "nods.jsonl").exists()


def test_nod_file_schema(tmp_path, tiny_session):
    write_session(tiny_session, tmp_path / "s")
    assert (tmp_path / "s" / "nods.jsonl").read_text() == '{"t_start_ms":1200,"t_end_ms":1800}\n'


def test_round_trip_tiny(tmp_path, tiny_session):
    write_session(tiny_session, tmp_path / "s")
    assert load_session(tmp_path / "s") == tiny_session


def test_round_trip_synthetic(tmp_path, synth_sessions):
    for s in synth_sessions:
        write_session(s, tmp_path / s.session_id)
        back = load_session(tmp_path / s.session_id)
        assert back == s
        assert back.annotations == s.annotations


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-179, 179, allow_nan=False), min_size=2, max_size=40),
       st.integers(30, 37), st.integers(0, 10 ** 6))
def test_round_trip_random_frames(tmp_path_factory, angles, dt, t0):
    # consecutive angle jumps must stay below 180 degrees
    a = np.clip(np.cumsum(np.r_[angles[0], np.diff(angles) * 0.4]), -179, 179)
    frames = make_frames(len(a), dt=dt, yaw=a, roll=-a / 3, pitch=a / 7 + 1e-9, t0=t0,
                         pos=(0.1234567890123, -1e-7, 2.5))
    s = Session("r", frames)
    d = tmp_path_factory.mktemp("rt")
    write_session(s, d)
    assert load_session(d) == s


def test_robot_turns_in_order():
    turns = (Turn("b", "robot", 2000, 2500), Turn("u", "user", 1000, 1900), Turn("a", "robot", 100, 900))
    s = Session("x", make_frames(100), turns=turns)
    assert [t.turn_id for t in robot_turns(s)] == ["a", "b"]


def test_robot_turns_none():
    s = Session("x", make_frames(100), turns=(Turn("u", "user", 0, 500),))
    assert robot_turns(s) == []


def test_turn_overlap_same_speaker_rejected():
    turns = (Turn("a", "robot", 0, 1000), Turn("b", "robot", 900, 2000))
    with pytest.raises(DataError, match="overlapping"):
        Session("x", make_frames(100), turns=turns)


def test_child_outside_bounds_rejected():
    with pytest.raises(DataError, match="outside session bounds"):
        Session("x", make_frames(10), ipus=(make_ipu("u", 200, 50),))


def test_overlapping_nods_rejected():
    with pytest.raises(DataError, match="overlapping nod"):
        Session("x", make_frames(100), nod_truth=((100, 500), (400, 800)))


def test_frames_and_ipus_in_turn(tiny_session):
    t = tiny_session.turn("t1")
    fr = frames_in(tiny_session, t.t_start_ms, t.t_end_ms)
    assert fr[0].timestamp_ms == 0 and fr[-1].timestamp_ms < 5000
    assert [u.ipu_id for u in ipus_in_turn(tiny_session, t)] == ["u1"]


@pytest.mark.parametrize("context", [False, True])
def test_state_encoding_bijective(context):
    n = 32 if context else 16
    states = [BehaviorState.decode(x, context) for x in range(n)]
    assert len(set(states)) == n
    assert [s.encode(context) for s in states] == list(range(n))


def test_state_encoding_examples():
    assert BehaviorState().encode() == 0
    assert BehaviorState(True, True, True, True).encode() == 15
    assert BehaviorState(True, True, True, True, True).encode(True) == 31
    assert BehaviorState(gaze=True).encode() == 8


def test_state_context_flag_mismatch():
    with pytest.raises(ValueError):
        BehaviorState().encode(True)
    with pytest.raises(ValueError):
        BehaviorState(prev_engaged=False).encode(False)
