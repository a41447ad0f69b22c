import numpy as np
import pytest

from engage.core import IpuRecord, PoseFrame, Session, Turn
from engage.synth import SynthConfig, generate_session


def make_frames(n, dt=33, yaw=0.0, roll=0.0, pitch=0.0, t0=0, pos=(0.0, 0.0, 1.5)):
    """Frames with per-frame angle arrays or scalars."""
    yaw, roll, pitch = (np.broadcast_to(np.asarray(a, dtype=float), (n,)) for a in (yaw, roll, pitch))
    return tuple(PoseFrame(t0 + i * dt, tuple(pos), float(yaw[i]), float(roll[i]), float(pitch[i])) for i in range(n))


def make_ipu(ipu_id="u1", t0=0, n=50, f0=120.0, inten=60.0, tokens=(), label=None):
    f0 = np.broadcast_to(np.asarray(f0, dtype=float), (n,))
    inten = np.broadcast_to(np.asarray(inten, dtype=float), (n,))
    return IpuRecord(ipu_id, t0, t0 + 10 * n, tuple(tokens), tuple(map(float, f0)), tuple(map(float, inten)), 10,
                     label)


@pytest.fixture
def tiny_session():
    frames = make_frames(300)
    turns = (Turn("t1", "robot", 0, 5000), Turn("t2", "user", 5000, 8000), Turn("t3", "robot", 8000, 9800))
    ipus = (make_ipu("u1", 1000, 40, label="backchannel"), make_ipu("u2", 5200, 100, label="other"))
    return Session("tiny", frames, ipus, turns, ((1200, 1800),), None, ())


@pytest.fixture(scope="session")
def synth_sessions():
    cfg = SynthConfig(n_sessions=3)
    return [generate_session(cfg, np.random.SeedSequence([11, i]), f"s{i:03d}") for i in range(3)]


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """A small corpus plus a full model directory, built through the CLI."""
    from engage.cli import main

    root = tmp_path_factory.mktemp("ws")
    corpus, models = root / "corpus", root / "models"
    assert main(["generate", "--out", str(corpus), "--sessions", "6", "--seed", "5"]) == 0
    common = ["--corpus", str(corpus), "--max-epochs", "2"]
    assert main(["train", "nod", *common, "--out", str(models / "nod.json")]) == 0
    assert main(["train", "laughter", *common, "--out", str(models / "laughter.json")]) == 0
    assert main(["train", "backchannel", *common, "--out", str(models / "backchannel.json")]) == 0
    assert main(["train", "engagement", "--corpus", str(corpus), "--restarts", "2", "--context",
                 "--out", str(models / "engagement.json")]) == 0
    (models / "geometry.json").write_text((corpus / "geometry.json").read_text())
    return corpus, models
