#!/usr/bin/env python3
"""Evaluation harness walk-through.

Trains briefly, evaluates on the held-out split, prints the report and
emotion confusion matrix, runs a two-length context sweep, and writes an
SVG heatmap into the working directory. A few minutes on one core; the
accuracies here are far from what a full-length run reaches.
"""
from pathlib import Path

from ecss.corpus import GeneratorConfig, generate_corpus
from ecss.evaluate import (
    confusion_labels,
    context_sweep,
    eval_windows,
    evaluate_model,
    held_out_split,
    report_csv,
    svg_heatmap,
)
from ecss.model import ModelConfig
from ecss.train import TrainConfig, train_loop

corpus = generate_corpus(GeneratorConfig(n_conversations=60, seed=2,
                                         label_mode="balanced"))
cfg = TrainConfig(batch_size=8, max_steps=300, context_length=4, seed=0)
result = train_loop(corpus, cfg, model_config=ModelConfig.lite())

windows = eval_windows(held_out_split(result.split), cfg.context_length)
report = evaluate_model(result.model, windows, train_config=cfg)
print(report_csv(report))

labels = confusion_labels("emotion")
print("emotion confusion (rows = true):")
header = " " * 10 + "".join(f"{l[:4]:>6}" for l in labels)
print(header)
for name, row in zip(labels, report.emotion_confusion):
    print(f"{name:>9} " + "".join(f"{v:>6}" for v in row))

out = Path.cwd() / "emotion_confusion.svg"
out.write_text(svg_heatmap(report.emotion_confusion, labels,
                           "emotion confusion"))
print(f"wrote {out}")

print("\ncontext sweep at two lengths (fresh model per length):")
sweep = context_sweep(corpus, cfg, model_config=ModelConfig.lite(),
                      lengths=(2, 4),
                      log=lambda n, r: print(
                          f"  length {n}: emotion acc {r.emotion_accuracy:.3f},"
                          f" mel error {r.mae_m:.4f}"))
print("\nsweep csv:")
print(sweep.csv())
