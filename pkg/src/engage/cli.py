"""Command-line entry point: ``engage {generate,train,detect,evaluate,replay}``.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 model/feature mismatch.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .core import DataError, load_corpus, load_session
from .engagement import fit_em
from .evaluation import evaluate_engagement, evaluate_gaze, evaluate_ipu, evaluate_nod, parse_folds
from .gaze import GazeGeometry
from .ipu import Lexicon, ModelMismatchError, train_ipu_classifier
from .learn import DimensionError, ModelFormatError, TrainConfig, TrainingError
from .nod import train_nod_detector
from .pipeline import (DetectorSet, annotation_records, detect_session, detect_states, replay_session, save_json,
                       true_states)
from .synth import SynthConfig, generate_corpus

log = logging.getLogger("engage")

EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 1, 2, 3
MODES = {"prosody": "prosody_only", "full": "prosody_plus_linguistic"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _setup_logging():
    level = os.environ.get("ENGAGE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"ENGAGE_LOG must be one of {sorted(levels)}")
    logging.basicConfig(level=levels[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="engage", description="Social-signal detection and engagement recognition.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic corpus")
    g.add_argument("--config", type=Path, help="synth config JSON (defaults built in)")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--sessions", type=int, help="override the session count")

    t = sub.add_parser("train", help="train one detector or the engagement model")
    t.add_argument("task", choices=["nod", "laughter", "backchannel", "engagement"])
    t.add_argument("--corpus", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--feature-mode", choices=sorted(MODES), default="full")
    t.add_argument("--context", action="store_true", help="engagement: add the previous-turn label")
    t.add_argument("--models", type=Path, help="engagement: fit on states detected with these models")
    t.add_argument("--geometry", type=Path, help="defaults to CORPUS/geometry.json")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--max-epochs", type=int, default=100)
    t.add_argument("--K", type=int, default=3)
    t.add_argument("--restarts", type=int, default=10)

    d = sub.add_parser("detect", help="per-turn behaviour states and engagement for one session")
    d.add_argument("--session", type=Path, required=True)
    d.add_argument("--models", type=Path, required=True)
    d.add_argument("--geometry", type=Path, required=True)
    d.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("evaluate", help="cross-validated evaluation on a corpus")
    e.add_argument("task", choices=["nod", "laughter", "backchannel", "gaze", "engagement"])
    e.add_argument("--corpus", type=Path, required=True)
    e.add_argument("--folds", default="loso")
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--feature-mode", choices=sorted(MODES), default="full")
    e.add_argument("--context", action="store_true")
    e.add_argument("--models", type=Path, help="engagement: use states detected with these models")
    e.add_argument("--geometry", type=Path)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--max-epochs", type=int, default=100)
    e.add_argument("--K", type=int, default=3)
    e.add_argument("--restarts", type=int, default=10)

    r = sub.add_parser("replay", help="stream a session and print engagement per robot turn")
    r.add_argument("--session", type=Path, required=True)
    r.add_argument("--models", type=Path, required=True)
    r.add_argument("--speed", type=float, default=1.0, help="simulated seconds per wall second; 0 = no pacing")
    r.add_argument("--geometry", type=Path, help="defaults to MODELS/geometry.json")
    return p


# --------------------------------------------------------------------------- helpers

def _geometry(path, *fallbacks) -> GazeGeometry:
    for p in (path, *fallbacks):
        if p is not None and Path(p).is_file():
            return GazeGeometry.load(p)
    if path is not None:
        raise DataError("geometry file not found", path)
    raise UsageError("no geometry file found; pass --geometry")


def _lexicon(corpus: Path):
    p = corpus / "lexicon.jsonl"
    if not p.is_file():
        raise DataError("missing lexicon.jsonl (needed for linguistic features)", corpus)
    return Lexicon.load(p, corpus / "pos_tags.txt")


def _corpus(path: Path):
    sessions = load_corpus(path)
    if not sessions:
        raise DataError("no sessions found", path)
    return sessions


def _split_valid(sessions):
    n_valid = max(1, len(sessions) // 10) if len(sessions) >= 2 else 0
    return sessions[:len(sessions) - n_valid], sessions[len(sessions) - n_valid:]


def _states(sessions, args, geom):
    if args.models is not None:
        det = DetectorSet.load(args.models)
        return [detect_states(det, s, geom) for s in sessions]
    return [true_states(s, geom) for s in sessions]


# --------------------------------------------------------------------------- commands

def cmd_generate(args):
    cfg = SynthConfig.load(args.config) if args.config else SynthConfig()
    if args.sessions is not None:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "n_sessions": args.sessions})
    seed = cfg.seed if args.seed is None else args.seed
    sessions = generate_corpus(cfg, args.out, seed)
    log.info("wrote %d sessions to %s", len(sessions), args.out)
    return 0


def cmd_train(args):
    sessions = _corpus(args.corpus)
    cfg = TrainConfig(max_epochs=args.max_epochs, seed=args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    if args.task == "nod":
        tr, va = _split_valid(sessions)
        det = train_nod_detector(tr, va, cfg)
        save_json(det.to_dict(), args.out)
    elif args.task in ("laughter", "backchannel"):
        mode = MODES[args.feature_mode]
        lex = _lexicon(args.corpus) if mode != "prosody_only" else None
        bundle = train_ipu_classifier([list(s.ipus) for s in sessions], args.task, mode, cfg, lex,
                                      n_trees=56)
        save_json(bundle.to_dict(), args.out)
        if lex is not None and not (args.out.parent / "lexicon.jsonl").exists():
            lex.save(args.out.parent / "lexicon.jsonl", args.out.parent / "pos_tags.txt")
    else:
        geom = _geometry(args.geometry, args.corpus / "geometry.json")
        recs = annotation_records(sessions, _states(sessions, args, geom), args.context)
        if not recs:
            raise DataError("corpus has no engagement annotations", args.corpus)
        m = fit_em(recs, args.K, args.seed, args.restarts, context_enabled=args.context)
        m.save(args.out)
    log.info("saved %s model to %s", args.task, args.out)
    return 0


def cmd_detect(args):
    det = DetectorSet.load(args.models)
    geom = _geometry(args.geometry)
    s = load_session(args.session)
    lines = detect_session(det, s, geom)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(line + "\n" for line in lines)
    return 0


def cmd_evaluate(args):
    try:
        parse_folds(args.folds, 2 ** 31)  # syntax only, before loading anything
    except ValueError as e:
        raise UsageError(str(e)) from None
    sessions = _corpus(args.corpus)
    try:
        parse_folds(args.folds, len(sessions))
    except ValueError as e:
        raise UsageError(str(e)) from None
    cfg = TrainConfig(max_epochs=args.max_epochs, seed=args.seed)
    if args.task == "nod":
        rep = evaluate_nod(sessions, args.folds, cfg)
    elif args.task in ("laughter", "backchannel"):
        mode = MODES[args.feature_mode]
        lex = _lexicon(args.corpus) if mode != "prosody_only" else None
        rep = evaluate_ipu(sessions, args.task, mode, args.folds, lex, cfg)
    elif args.task == "gaze":
        rep = evaluate_gaze(sessions, _geometry(args.geometry, args.corpus / "geometry.json"))
    else:
        geom = _geometry(args.geometry, args.corpus / "geometry.json")
        rep = evaluate_engagement(sessions, _states(sessions, args, geom), args.folds, args.K, args.seed,
                                  args.context, args.restarts)
        rep.meta["states"] = "detected" if args.models else "ground truth"
    args.out.parent.mkdir(parents=True, exist_ok=True)
    rep.save(args.out)
    print(rep.table())
    return 0


def cmd_replay(args):
    det = DetectorSet.load(args.models)
    geom = _geometry(args.geometry, args.models / "geometry.json")
    s = load_session(args.session)
    if args.speed < 0:
        raise UsageError("--speed must be >= 0")

    def emit(line):
        print(line, flush=True)

    replay_session(det, s, geom, args.speed, emit)
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "detect": cmd_detect, "evaluate": cmd_evaluate,
            "replay": cmd_replay}


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelMismatchError, ModelFormatError, DimensionError) as e:
        print(f"model error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except (DataError, TrainingError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
