"""Objective evaluation: acoustic MAE, label confusion matrices, the
context-length sweep, and the ablation harness.

Accuracy and confusion counts come from the model's own emotion and
intensity logits heads; there is no external recognizer in this pipeline.
Duration error is measured on log-durations before rounding, where the
predictor actually lives. Every entry point is deterministic given seeds,
and all CSV emitters format floats with repr-faithful precision so repeat
runs are byte-identical.
"""
from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from io import StringIO

import numpy as np

from . import autodiff as ad
from .corpus import (
    AcousticTargets,
    Conversation,
    ContextWindow,
    EMOTION_NAMES,
    INTENSITY_NAMES,
    slice_context,
)
from .errors import ValidationError
from .model import Model, ModelConfig, parse_drop_kinds
from .renderer import RenderedFeatures
from .synthesizer import SynthPrediction
from .train import TrainConfig, train_loop

SWEEP_LENGTHS = (2, 3, 6, 9, 10, 13, 14)
ABLATIONS = ("emotion", "intensity", "speaker", "audio", "supcon")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


@dataclass
class EvalReport:
    mae_m: float
    mae_p: float
    mae_e: float
    mae_d: float
    emotion_confusion: np.ndarray    # [7, 7] counts, true x predicted
    intensity_confusion: np.ndarray  # [3, 3]
    emotion_accuracy: float
    intensity_accuracy: float
    n_windows: int
    model_config: dict
    train_config: dict | None = None

    def validate(self) -> None:
        for name in ("mae_m", "mae_p", "mae_e", "mae_d"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and >= 0")
        for mat, side in ((self.emotion_confusion, 7),
                          (self.intensity_confusion, 3)):
            if mat.shape != (side, side):
                raise ValidationError(f"confusion matrix must be "
                                      f"{side}x{side}")
            if int(mat.sum()) != self.n_windows:
                raise ValidationError("confusion counts must conserve the "
                                      "evaluation set size")

    def metric_rows(self) -> list[tuple[str, str, str]]:
        return [("mae", "mel", _fmt(self.mae_m)),
                ("mae", "pitch", _fmt(self.mae_p)),
                ("mae", "energy", _fmt(self.mae_e)),
                ("mae", "duration", _fmt(self.mae_d)),
                ("accuracy", "emotion", _fmt(self.emotion_accuracy)),
                ("accuracy", "intensity", _fmt(self.intensity_accuracy)),
                ("count", "windows", str(self.n_windows))]


def report_csv(report: EvalReport) -> str:
    buf = StringIO()
    buf.write("metric,name,value\n")
    for metric, name, value in report.metric_rows():
        buf.write(f"{metric},{name},{value}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# pair-level metrics


def mae_metrics(pred: SynthPrediction,
                target: AcousticTargets) -> tuple[float, float, float, float]:
    """Mean absolute error per acoustic stream for one utterance.

    Requires teacher-forced durations so the mel frame counts line up;
    duration error compares predicted log-durations against the log of the
    target durations, before any rounding.
    """
    mel_p = pred.mel.data
    if mel_p.shape != target.mel.shape:
        raise ValidationError(f"mel shapes differ: predicted {mel_p.shape}, "
                              f"target {target.mel.shape}")
    n = target.pitch.shape[0]
    for name, arr in (("pitch", pred.pitch.data),
                      ("energy", pred.energy.data),
                      ("log_duration", pred.log_duration.data)):
        if arr.shape != (n,):
            raise ValidationError(f"{name} must have shape ({n},), "
                                  f"got {arr.shape}")
    if np.any(target.duration < 1):
        raise ValidationError("target durations must be >= 1")
    mae_m = float(np.mean(np.abs(mel_p - target.mel)))
    mae_p = float(np.mean(np.abs(pred.pitch.data - target.pitch)))
    mae_e = float(np.mean(np.abs(pred.energy.data - target.energy)))
    mae_d = float(np.mean(np.abs(pred.log_duration.data
                                 - np.log(target.duration))))
    return mae_m, mae_p, mae_e, mae_d


def predicted_labels(rendered: RenderedFeatures) -> tuple[int, int]:
    """Argmax class per head; ties resolve toward the lower index."""
    return (int(np.argmax(rendered.emotion_logits.data)),
            int(np.argmax(rendered.intensity_logits.data)))


def confusion_from_pairs(true_labels, pred_labels, n_classes: int) -> np.ndarray:
    """Count matrix with true labels on rows, predictions on columns."""
    mat = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(true_labels, pred_labels):
        mat[int(t), int(p)] += 1
    return mat


# ---------------------------------------------------------------------------
# set-level evaluation


def eval_windows(convs: list[Conversation],
                 context_length: int) -> list[ContextWindow]:
    """Every evaluable window (turn >= 1) of the given conversations."""
    out = []
    for conv in convs:
        for idx in range(1, len(conv.turns)):
            out.append(slice_context(conv, idx, context_length))
    return out


def _forward_eval(model: Model, windows: list[ContextWindow],
                  threads: int) -> list:
    def run(window: ContextWindow):
        return model.forward_window(window, teacher=True)

    with ad.no_grad():
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(run, windows))
        return [run(w) for w in windows]


def evaluate_model(model: Model, windows: list[ContextWindow],
                   threads: int = 1,
                   train_config: TrainConfig | None = None) -> EvalReport:
    """One teacher-forced pass over windows; MAEs are the mean of the
    per-window values, accumulated in window order regardless of threads."""
    if not windows:
        raise ValidationError("no evaluation windows")
    outputs = _forward_eval(model, windows, threads)
    sums = np.zeros(4)
    true_e, pred_e, true_i, pred_i = [], [], [], []
    for out, window in zip(outputs, windows):
        sums += mae_metrics(out.prediction, window.current.targets)
        e, i = predicted_labels(out.rendered)
        true_e.append(int(window.current.emotion))
        pred_e.append(e)
        true_i.append(int(window.current.intensity))
        pred_i.append(i)
    maes = sums / len(windows)
    emo = confusion_from_pairs(true_e, pred_e, 7)
    inten = confusion_from_pairs(true_i, pred_i, 3)
    report = EvalReport(
        mae_m=float(maes[0]), mae_p=float(maes[1]), mae_e=float(maes[2]),
        mae_d=float(maes[3]),
        emotion_confusion=emo, intensity_confusion=inten,
        emotion_accuracy=float(np.trace(emo) / len(windows)),
        intensity_accuracy=float(np.trace(inten) / len(windows)),
        n_windows=len(windows),
        model_config=model.config.to_dict(),
        train_config=None if train_config is None else train_config.to_dict())
    report.validate()
    return report


def held_out_split(split: dict[str, list[Conversation]]) -> list[Conversation]:
    if split["test"]:
        return split["test"]
    raise ValidationError("corpus has no test conversations; generate a "
                          "larger corpus")


# ---------------------------------------------------------------------------
# experiment harnesses


@dataclass
class SweepResult:
    rows: list[tuple[int, EvalReport]]

    def csv(self) -> str:
        buf = StringIO()
        buf.write("context_length,mae_m,mae_p,mae_e,mae_d,"
                  "emotion_accuracy,intensity_accuracy,n_windows\n")
        for length, r in self.rows:
            buf.write(",".join([str(length), _fmt(r.mae_m), _fmt(r.mae_p),
                                _fmt(r.mae_e), _fmt(r.mae_d),
                                _fmt(r.emotion_accuracy),
                                _fmt(r.intensity_accuracy),
                                str(r.n_windows)]) + "\n")
        return buf.getvalue()


def context_sweep(corpus: list[Conversation], train_config: TrainConfig,
                  model_config: ModelConfig | None = None,
                  lengths=SWEEP_LENGTHS, log=None) -> SweepResult:
    """Train and evaluate once per context length, same seeds throughout.

    Histories shorter than a requested length truncate per slice_context,
    so lengths beyond the longest conversation still run.
    """
    rows = []
    for length in lengths:
        cfg = dataclasses.replace(train_config, context_length=int(length))
        result = train_loop(corpus, cfg, model_config=model_config)
        windows = eval_windows(held_out_split(result.split), int(length))
        report = evaluate_model(result.model, windows, threads=cfg.threads,
                                train_config=cfg)
        rows.append((int(length), report))
        if log is not None:
            log(int(length), report)
    return SweepResult(rows)


@dataclass
class AblationResult:
    rows: list[tuple[str, EvalReport]]

    def csv(self) -> str:
        buf = StringIO()
        buf.write("ablation,mae_m,mae_p,mae_e,mae_d,"
                  "emotion_accuracy,intensity_accuracy,n_windows\n")
        for name, r in self.rows:
            buf.write(",".join([name, _fmt(r.mae_m), _fmt(r.mae_p),
                                _fmt(r.mae_e), _fmt(r.mae_d),
                                _fmt(r.emotion_accuracy),
                                _fmt(r.intensity_accuracy),
                                str(r.n_windows)]) + "\n")
        return buf.getvalue()


def ablation_suite(corpus: list[Conversation], train_config: TrainConfig,
                   model_config: ModelConfig | None = None,
                   log=None) -> AblationResult:
    """Baseline plus the five single-component ablations, same seeds.

    Node-kind rows drop one history stream from the graph; the contrastive
    row swaps both contrastive terms for full-path cross-entropy.
    """
    base = model_config if model_config is not None else ModelConfig.lite()
    rows = []
    for name in ("baseline",) + tuple(f"drop_{a}" for a in ABLATIONS):
        mc, tc = base, train_config
        if name == "drop_supcon":
            tc = dataclasses.replace(train_config, use_cross_entropy=True)
        elif name != "baseline":
            kinds = parse_drop_kinds([name.removeprefix("drop_")])
            mc = dataclasses.replace(base, drop_kinds=kinds)
        result = train_loop(corpus, tc, model_config=mc)
        windows = eval_windows(held_out_split(result.split),
                               tc.context_length)
        report = evaluate_model(result.model, windows, threads=tc.threads,
                                train_config=tc)
        rows.append((name, report))
        if log is not None:
            log(name, report)
    return AblationResult(rows)


# ---------------------------------------------------------------------------
# confusion matrix serialization


def confusion_csv(matrix: np.ndarray, labels) -> str:
    if matrix.shape != (len(labels), len(labels)):
        raise ValidationError("labels must match the matrix side")
    buf = StringIO()
    buf.write("," + ",".join(labels) + "\n")
    for name, row in zip(labels, matrix):
        buf.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")
    return buf.getvalue()


def parse_confusion_csv(text: str) -> tuple[np.ndarray, list[str]]:
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or not lines[0].startswith(","):
        raise ValidationError("not a confusion grid: missing label header")
    labels = lines[0].split(",")[1:]
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(labels) + 1:
            raise ValidationError(f"confusion row has {len(cells) - 1} "
                                  f"cells, expected {len(labels)}")
        rows.append([int(c) for c in cells[1:]])
    if len(rows) != len(labels):
        raise ValidationError("confusion grid is not square")
    return np.array(rows, dtype=np.int64), labels


def confusion_labels(kind: str) -> list[str]:
    if kind == "emotion":
        return list(EMOTION_NAMES)
    if kind == "intensity":
        return list(INTENSITY_NAMES)
    raise ValidationError(f"unknown confusion kind '{kind}'")


# ---------------------------------------------------------------------------
# SVG heatmap


_RAMP_LO = (247, 251, 255)
_RAMP_HI = (8, 48, 107)


def _ramp(frac: float) -> str:
    r, g, b = (round(lo + (hi - lo) * frac)
               for lo, hi in zip(_RAMP_LO, _RAMP_HI))
    return f"rgb({r},{g},{b})"


def svg_heatmap(matrix: np.ndarray, labels, title: str) -> str:
    """Standalone SVG: one shaded cell per count, value printed inside,
    true labels down the left, predicted labels across the top."""
    n = len(labels)
    if matrix.shape != (n, n):
        raise ValidationError("labels must match the matrix side")
    cell = 46
    left, top = 96, 72
    width = left + n * cell + 12
    height = top + n * cell + 12
    peak = max(1, int(matrix.max()))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" font-family="sans-serif">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + n * cell / 2:.1f}" y="20" text-anchor="middle" '
        f'font-size="14">{title}</text>',
        f'<text x="{left + n * cell / 2:.1f}" y="38" text-anchor="middle" '
        f'font-size="10" fill="#555">predicted</text>',
    ]
    for i, name in enumerate(labels):
        x = left + i * cell + cell / 2
        parts.append(f'<text x="{x:.1f}" y="{top - 8}" text-anchor="start" '
                     f'font-size="10" transform="rotate(-40 {x:.1f} '
                     f'{top - 8})">{name}</text>')
        y = top + i * cell + cell / 2
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" '
                     f'text-anchor="end" font-size="10">{name}</text>')
    for i in range(n):
        for j in range(n):
            v = int(matrix[i, j])
            frac = v / peak
            x = left + j * cell
            y = top + i * cell
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" '
                         f'height="{cell}" fill="{_ramp(frac)}" '
                         f'stroke="#ccc"/>')
            color = "white" if frac > 0.55 else "#222"
            parts.append(f'<text x="{x + cell / 2:.1f}" '
                         f'y="{y + cell / 2 + 4:.1f}" text-anchor="middle" '
                         f'font-size="11" fill="{color}">{v}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
