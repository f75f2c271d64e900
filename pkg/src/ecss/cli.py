"""Command-line entry point covering the whole experimental protocol:
corpus generation, training, evaluation, the context-length sweep, the
ablation table, single-window prediction, and confusion-matrix plots.

Every subcommand is deterministic given --seed, logs to standard error
(level via the ECSS_LOG environment variable), writes its outputs under
the requested location, and drops a config-echo JSON next to them. Exit
codes: 0 success, 1 input or flag validation, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .corpus import (
    AUDIO_DIM,
    EMOTION_NAMES,
    INTENSITY_NAMES,
    ContextWindow,
    EmotionLabel,
    GeneratorConfig,
    IntensityLabel,
    Utterance,
    generate_corpus,
    load_corpus,
    save_corpus,
    split_corpus,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    CorpusFormatError,
    IngestionError,
    NoHistoryError,
    TrainingError,
    ValidationError,
)
from .evaluate import (
    SWEEP_LENGTHS,
    ablation_suite,
    confusion_csv,
    confusion_labels,
    context_sweep,
    eval_windows,
    evaluate_model,
    held_out_split,
    parse_confusion_csv,
    predicted_labels,
    report_csv,
    svg_heatmap,
)
from .model import ModelConfig, parse_drop_kinds
from .synthesizer import export_mel
from .train import TrainConfig, load_checkpoint, train_loop

log = logging.getLogger("ecss")

_LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO,
               "warning": logging.WARNING, "error": logging.ERROR}


class UsageError(Exception):
    """Bad flags or malformed invocation; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_run_flags(sp, steps=True):
    sp.add_argument("--corpus", required=True, help="JSONL corpus path")
    sp.add_argument("--out-dir", required=True, help="output directory")
    sp.add_argument("--seed", type=int, default=0)
    if steps:
        sp.add_argument("--steps", type=int, default=2000,
                        help="optimizer steps")
        sp.add_argument("--batch", type=int, default=16)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--profile", choices=("lite", "paper"), default="lite",
                    help="model size profile")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ecss", description="emotional conversational "
                "speech synthesis, desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic corpus")
    g.add_argument("--n", type=int, required=True,
                   help="number of conversations")
    g.add_argument("--out", required=True, help="JSONL output path")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--label-mode", choices=("paper_skewed", "balanced"),
                   default="paper_skewed")
    g.add_argument("--mean-turns", type=float, default=9.3)
    g.add_argument("--vocab-size", type=int, default=64)
    g.add_argument("--persistence", type=float, default=0.9,
                   help="label self-transition probability")

    t = sub.add_parser("train", help="optimize a model on a corpus")
    _add_run_flags(t)
    t.add_argument("--context-length", type=int, default=10)
    t.add_argument("--ablate", action="append", default=[],
                   choices=("emotion", "intensity", "speaker", "audio",
                            "supcon"),
                   help="drop a component; repeatable")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--context-length", type=int, default=None,
                   help="defaults to the checkpoint's training value")
    e.add_argument("--threads", type=int, default=1)

    s = sub.add_parser("sweep", help="train and evaluate per context length")
    _add_run_flags(s)
    s.add_argument("--lengths", default=",".join(map(str, SWEEP_LENGTHS)),
                   help="comma-separated context lengths")

    a = sub.add_parser("ablate", help="run the six-row ablation table")
    _add_run_flags(a)
    a.add_argument("--context-length", type=int, default=10)

    pr = sub.add_parser("predict", help="synthesize one utterance from a "
                        "context window")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--context", required=True,
                    help="context window JSON path")
    pr.add_argument("--out-dir", required=True)

    pl = sub.add_parser("plot", help="render confusion CSVs to SVG heatmaps")
    pl.add_argument("--report-dir", required=True,
                    help="directory holding *_confusion.csv")
    pl.add_argument("--out-dir", required=True)
    return p


def _configure_logging() -> None:
    raw = os.environ.get("ECSS_LOG", "info").lower()
    level = _LOG_LEVELS.get(raw)
    if level is None:
        level = logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    if raw not in _LOG_LEVELS:
        log.warning("ECSS_LOG=%r not recognized; using info", raw)


def _write_echo(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _model_config(profile: str, drop_names) -> ModelConfig:
    kinds = parse_drop_kinds([n for n in drop_names if n != "supcon"])
    if profile == "paper":
        return ModelConfig(drop_kinds=kinds)
    return ModelConfig.lite(drop_kinds=kinds)


def _progress(step: int, breakdown) -> None:
    log.info("step %d  total %.6f  emo %.4f  int %.4f  pro %.4f  fs2 %.4f",
             step, breakdown.total, breakdown.l_cl_emo, breakdown.l_cl_int,
             breakdown.l_mse_pro, breakdown.l_fs2)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    cfg = GeneratorConfig(n_conversations=args.n, seed=args.seed,
                          mean_turns=args.mean_turns,
                          vocab_size=args.vocab_size,
                          label_mode=args.label_mode,
                          label_persistence=args.persistence)
    cfg.validate()
    corpus = generate_corpus(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out)
    _write_echo(out.with_name(out.name + ".config.json"),
                {"command": "gen-data", "out": str(out),
                 "generator": {"n_conversations": cfg.n_conversations,
                               "seed": cfg.seed,
                               "mean_turns": cfg.mean_turns,
                               "vocab_size": cfg.vocab_size,
                               "label_mode": cfg.label_mode,
                               "label_persistence": cfg.label_persistence}})
    log.info("wrote %d conversations to %s", len(corpus), out)
    return 0


def _cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    mc = _model_config(args.profile, args.ablate)
    tc = TrainConfig(batch_size=args.batch, max_steps=args.steps,
                     context_length=args.context_length, seed=args.seed,
                     threads=args.threads,
                     use_cross_entropy="supcon" in args.ablate)
    tc.validate()
    out_dir = Path(args.out_dir)
    result = train_loop(corpus, tc, model_config=mc, out_dir=out_dir,
                        log=_progress)
    _write_echo(out_dir / "config.json",
                {"command": "train", "corpus": str(args.corpus),
                 "model": mc.to_dict(), "train": tc.to_dict()})
    final = result.metrics[-1][1]
    log.info("finished %d steps; final total %.6f", tc.max_steps, final.total)
    return 0


def _cmd_eval(args) -> int:
    loaded = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    length = (args.context_length if args.context_length is not None
              else loaded.train_config.context_length)
    if length < 1:
        raise UsageError("--context-length must be >= 1")
    windows = eval_windows(held_out_split(split_corpus(corpus)), length)
    report = evaluate_model(loaded.model, windows, threads=args.threads,
                            train_config=loaded.train_config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(report_csv(report))
    (out_dir / "emotion_confusion.csv").write_text(
        confusion_csv(report.emotion_confusion, confusion_labels("emotion")))
    (out_dir / "intensity_confusion.csv").write_text(
        confusion_csv(report.intensity_confusion,
                      confusion_labels("intensity")))
    _write_echo(out_dir / "config.json",
                {"command": "eval", "checkpoint": str(args.checkpoint),
                 "corpus": str(args.corpus), "context_length": length,
                 "threads": args.threads})
    log.info("evaluated %d windows; emotion acc %.3f, intensity acc %.3f",
             report.n_windows, report.emotion_accuracy,
             report.intensity_accuracy)
    return 0


def _parse_lengths(raw: str) -> list[int]:
    try:
        lengths = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"--lengths must be comma-separated integers, "
                         f"got {raw!r}") from exc
    if not lengths or any(n < 1 for n in lengths):
        raise UsageError("--lengths needs positive integers")
    return lengths


def _cmd_sweep(args) -> int:
    corpus = load_corpus(args.corpus)
    lengths = _parse_lengths(args.lengths)
    mc = _model_config(args.profile, [])
    tc = TrainConfig(batch_size=args.batch, max_steps=args.steps,
                     seed=args.seed, threads=args.threads)
    tc.validate()
    result = context_sweep(
        corpus, tc, model_config=mc, lengths=lengths,
        log=lambda n, r: log.info("length %d: mae_m %.5f, emotion acc %.3f",
                                  n, r.mae_m, r.emotion_accuracy))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep.csv").write_text(result.csv())
    _write_echo(out_dir / "config.json",
                {"command": "sweep", "corpus": str(args.corpus),
                 "lengths": lengths, "model": mc.to_dict(),
                 "train": tc.to_dict()})
    return 0


def _cmd_ablate(args) -> int:
    corpus = load_corpus(args.corpus)
    mc = _model_config(args.profile, [])
    tc = TrainConfig(batch_size=args.batch, max_steps=args.steps,
                     context_length=args.context_length, seed=args.seed,
                     threads=args.threads)
    tc.validate()
    result = ablation_suite(
        corpus, tc, model_config=mc,
        log=lambda n, r: log.info("%s: mae_m %.5f, emotion acc %.3f",
                                  n, r.mae_m, r.emotion_accuracy))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablations.csv").write_text(result.csv())
    _write_echo(out_dir / "config.json",
                {"command": "ablate", "corpus": str(args.corpus),
                 "model": mc.to_dict(), "train": tc.to_dict()})
    return 0


# ---------------------------------------------------------------------------
# prediction input


def _context_history_turn(raw: dict, idx: int) -> Utterance:
    prefix = f"history turn {idx}"
    if not isinstance(raw, dict):
        raise ValidationError(f"{prefix} must be a JSON object")
    toks = raw.get("tokens")
    if (not isinstance(toks, list) or not toks
            or not all(isinstance(t, int) and t >= 0 for t in toks)):
        raise ValidationError(f"{prefix}: tokens must be non-empty "
                              "non-negative integers")
    if raw.get("speaker") not in (0, 1):
        raise ValidationError(f"{prefix}: speaker must be 0 or 1")
    audio = np.asarray(raw.get("audio_feat", ()), dtype=np.float64)
    if audio.shape != (AUDIO_DIM,) or not np.isfinite(audio).all():
        raise ValidationError(f"{prefix}: audio_feat needs {AUDIO_DIM} "
                              "finite values")
    emotion = raw.get("emotion")
    if not isinstance(emotion, int) or not 0 <= emotion < 7:
        raise ValidationError(f"{prefix}: emotion must be an integer in "
                              "[0, 7)")
    intensity = raw.get("intensity")
    if not isinstance(intensity, int) or not 0 <= intensity < 3:
        raise ValidationError(f"{prefix}: intensity must be an integer in "
                              "[0, 3)")
    return Utterance(text_tokens=list(toks), speaker=int(raw["speaker"]),
                     audio_feat=audio, emotion=EmotionLabel(emotion),
                     intensity=IntensityLabel(intensity), targets=None)


def load_context(path) -> ContextWindow:
    """Parse a prediction request: history turns with labels and audio,
    plus the current turn's text and speaker. Acoustic targets are not
    required anywhere; the current turn's labels are what the model
    predicts, so they are ignored if present."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict) or "current" not in raw:
        raise ValidationError(f"{path}: expected an object with 'history' "
                              "and 'current'")
    history_raw = raw.get("history", [])
    if not isinstance(history_raw, list) or not history_raw:
        raise ValidationError(f"{path}: context needs at least one history "
                              "turn (a window with no history cannot be "
                              "rendered)")
    history = [_context_history_turn(t, i)
               for i, t in enumerate(history_raw)]
    cur = raw["current"]
    if not isinstance(cur, dict):
        raise ValidationError(f"{path}: 'current' must be a JSON object")
    toks = cur.get("tokens")
    if (not isinstance(toks, list) or not toks
            or not all(isinstance(t, int) and t >= 0 for t in toks)):
        raise ValidationError(f"{path}: current tokens must be non-empty "
                              "non-negative integers")
    if cur.get("speaker") not in (0, 1):
        raise ValidationError(f"{path}: current speaker must be 0 or 1")
    current = Utterance(text_tokens=list(toks), speaker=int(cur["speaker"]),
                        audio_feat=np.zeros(AUDIO_DIM),
                        emotion=EmotionLabel.neutral,
                        intensity=IntensityLabel.medium, targets=None)
    return ContextWindow(history=history, current=current,
                         conversation_id=str(raw.get("id", "context")),
                         current_index=len(history))


def _cmd_predict(args) -> int:
    loaded = load_checkpoint(args.checkpoint)
    window = load_context(args.context)
    for turn in window.history + [window.current]:
        for tok in turn.text_tokens:
            if tok >= loaded.model.config.vocab_size:
                raise ValidationError(
                    f"token {tok} out of range for the checkpoint's "
                    f"vocabulary ({loaded.model.config.vocab_size})")
    out = loaded.model.forward_window(window, teacher=False)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    export_mel(out_dir / "mel.bin", out.prediction.mel.data,
               out.prediction.pitch.data, out.prediction.energy.data,
               out.variance.durations)
    emotion, intensity = predicted_labels(out.rendered)
    (out_dir / "labels.json").write_text(json.dumps(
        {"emotion": EMOTION_NAMES[emotion], "emotion_index": emotion,
         "intensity": INTENSITY_NAMES[intensity],
         "intensity_index": intensity}, indent=1) + "\n")
    _write_echo(out_dir / "config.json",
                {"command": "predict", "checkpoint": str(args.checkpoint),
                 "context": str(args.context)})
    log.info("wrote %d mel frames; predicted %s/%s",
             out.prediction.mel.data.shape[0], EMOTION_NAMES[emotion],
             INTENSITY_NAMES[intensity])
    return 0


def _cmd_plot(args) -> int:
    report_dir = Path(args.report_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for kind in ("emotion", "intensity"):
        src = report_dir / f"{kind}_confusion.csv"
        if not src.exists():
            raise ValidationError(f"{src} not found; run eval first")
        matrix, labels = parse_confusion_csv(src.read_text())
        svg = svg_heatmap(matrix, labels, f"{kind} confusion")
        (out_dir / f"{kind}_confusion.svg").write_text(svg)
    _write_echo(out_dir / "config.json",
                {"command": "plot", "report_dir": str(args.report_dir)})
    return 0


# ---------------------------------------------------------------------------
# dispatch


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "predict": _cmd_predict,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ecss: {exc}", file=sys.stderr)
        return 1
    except (ValidationError, ConfigurationError, CorpusFormatError,
            NoHistoryError, IngestionError) as exc:
        print(f"ecss: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"ecss: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, TrainingError, OSError) as exc:
        print(f"ecss: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())
