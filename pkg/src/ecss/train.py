"""Loss assembly, Adam, the training loop, and checkpoint persistence.

The total objective is the unweighted sum of four terms: contrastive
emotion and intensity losses over the rendered features, prosody MSE, and
the acoustic loss. The logits heads additionally train through a
cross-entropy probe on detached features, so label accuracy is measurable
without letting classification gradients steer the feature geometry. The
`use_cross_entropy` flag swaps both contrastive terms for cross-entropy
through the full stack instead.

Checkpoints are a little-endian binary: magic "ECSS", a format version, a
length-prefixed JSON header, then named float64 tensors. Loading rebuilds
the model from the echoed config and restores optimizer and RNG state, so
a resumed run retraces the original trajectory bit for bit.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from io import StringIO
from pathlib import Path

import json

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Conversation, ContextWindow, slice_context, split_corpus
from .errors import CheckpointError, ConfigurationError, TrainingError
from .model import Model, ModelConfig, WindowOutput
from .synthesizer import fs2_loss

METRICS_HEADER = "step,l_cl_emo,l_cl_int,l_mse_pro,l_fs2,total"
CHECKPOINT_MAGIC = b"ECSS"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    max_steps: int = 2000
    context_length: int = 10
    seed: int = 0
    use_cross_entropy: bool = False
    log_every: int = 50
    threads: int = 1

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (the "
                                     "contrastive terms need pairs)")
        if self.context_length < 1:
            raise ConfigurationError("context_length must be >= 1")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1)")
        if self.eps <= 0:
            raise ConfigurationError("eps must be > 0")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")
        if self.log_every < 1:
            raise ConfigurationError("log_every must be >= 1")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in (
            "batch_size", "lr", "beta1", "beta2", "eps", "max_steps",
            "context_length", "seed", "use_cross_entropy", "log_every",
            "threads")}

    @staticmethod
    def from_dict(raw: dict) -> "TrainConfig":
        return TrainConfig(**raw)


@dataclass
class LossBreakdown:
    l_cl_emo: float
    l_cl_int: float
    l_mse_pro: float
    l_fs2: float
    total: float
    fs2_parts: dict[str, float] = field(default_factory=dict)

    def csv_row(self, step: int) -> str:
        vals = (self.l_cl_emo, self.l_cl_int, self.l_mse_pro, self.l_fs2,
                self.total)
        return f"{step}," + ",".join(format(v, ".17g") for v in vals)


def total_loss(outputs: list[WindowOutput], windows: list[ContextWindow],
               config: TrainConfig,
               tau: float = 0.1) -> tuple[Tensor, LossBreakdown]:
    """Compose the batch objective. Returns the tensor to backpropagate and
    a float breakdown whose total is exactly the sum of the four terms.

    The returned tensor also carries the probe cross-entropy when the
    contrastive terms are active; the breakdown reports only the four.
    """
    if len(outputs) != len(windows) or not outputs:
        raise ConfigurationError("batch outputs and windows must align")
    emo_labels = np.array([int(w.current.emotion) for w in windows])
    int_labels = np.array([int(w.current.intensity) for w in windows])
    emo_feats = ad.stack_rows([o.rendered.emotion_feat for o in outputs])
    int_feats = ad.stack_rows([o.rendered.intensity_feat for o in outputs])
    emo_logits = ad.stack_rows([o.rendered.emotion_logits for o in outputs])
    int_logits = ad.stack_rows([o.rendered.intensity_logits for o in outputs])

    if config.use_cross_entropy:
        l_emo = ad.cross_entropy_loss(emo_logits, emo_labels)
        l_int = ad.cross_entropy_loss(int_logits, int_labels)
        probe = None
    else:
        l_emo, _ = ad.supcon_loss(emo_feats, emo_labels, tau)
        l_int, _ = ad.supcon_loss(int_feats, int_labels, tau)
        probe = ad.add(ad.cross_entropy_loss(emo_logits, emo_labels),
                       ad.cross_entropy_loss(int_logits, int_labels))

    pro_pred = ad.stack_rows([o.rendered.prosody_feat for o in outputs])
    pro_target = np.stack([w.current.targets.prosody for w in windows])
    l_pro = ad.mse_loss(pro_pred, ad.tensor(pro_target))

    fs2_totals = []
    parts_sum: dict[str, float] = {}
    for out, win in zip(outputs, windows):
        t, parts = fs2_loss(out.prediction, win.current.targets)
        fs2_totals.append(t)
        for name, val in parts.items():
            parts_sum[name] = parts_sum.get(name, 0.0) + float(val.data)
    l_fs2 = ad.scale(ad.add_n(fs2_totals), 1.0 / len(outputs))

    total = ad.add_n([l_emo, l_int, l_pro, l_fs2])
    objective = total if probe is None else ad.add(total, probe)
    breakdown = LossBreakdown(
        l_cl_emo=float(l_emo.data), l_cl_int=float(l_int.data),
        l_mse_pro=float(l_pro.data), l_fs2=float(l_fs2.data),
        total=float(total.data),
        fs2_parts={k: v / len(outputs) for k, v in parts_sum.items()})
    return objective, breakdown


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @staticmethod
    def init(params: dict[str, Tensor]) -> "AdamState":
        return AdamState(step=0,
                         m={n: np.zeros_like(t.data) for n, t in params.items()},
                         v={n: np.zeros_like(t.data) for n, t in params.items()})


def adam_step(params: dict[str, Tensor], state: AdamState,
              config: TrainConfig) -> None:
    """Bias-corrected Adam update in place; missing gradients count as zero."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match "
                                f"parameter '{name}' {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


# ---------------------------------------------------------------------------
# window sampling


def enumerate_windows(convs: list[Conversation]) -> list[tuple[int, int]]:
    """(conversation index, current turn index) for every usable window."""
    out = []
    for ci, conv in enumerate(convs):
        for idx in range(1, len(conv.turns)):
            out.append((ci, idx))
    return out


def sample_batch(convs: list[Conversation], by_conv: list[list[int]],
                 batch_size: int, context_length: int,
                 rng: np.random.Generator) -> list[ContextWindow]:
    """Draw windows from distinct conversations where possible, so
    contrastive batches see several label chains at once."""
    picks: list[tuple[int, int]] = []
    order: list[int] = []
    for _ in range(batch_size):
        if not order:
            order = [int(c) for c in rng.permutation(len(convs))]
        ci = order.pop(0)
        turns = by_conv[ci]
        picks.append((ci, turns[int(rng.integers(len(turns)))]))
    return [slice_context(convs[ci], idx, context_length)
            for ci, idx in picks]


# ---------------------------------------------------------------------------
# checkpoint format


def _write_tensor(fh, name: str, data: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", data.ndim))
    for d in data.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.blob)


def save_checkpoint(path, model: Model, train_config: TrainConfig,
                    adam: AdamState, step: int, rng_state: dict) -> None:
    params = model.parameters()
    header = {"model": model.config.to_dict(),
              "train": train_config.to_dict(),
              "step": step,
              "adam_step": adam.step,
              "rng_state": rng_state}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in sorted(params):
            _write_tensor(fh, name, params[name].data)
        for name in sorted(adam.m):
            _write_tensor(fh, f"adam.m.{name}", adam.m[name])
        for name in sorted(adam.v):
            _write_tensor(fh, f"adam.v.{name}", adam.v[name])


@dataclass
class LoadedCheckpoint:
    model: Model
    train_config: TrainConfig
    adam: AdamState
    step: int
    rng_state: dict


def load_checkpoint(path, expect_model: ModelConfig | None = None) -> LoadedCheckpoint:
    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version} != "
                              f"{CHECKPOINT_VERSION}")
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    model_config = ModelConfig.from_dict(header["model"])
    if expect_model is not None and model_config != expect_model:
        raise CheckpointError(f"{path}: checkpoint was trained with a "
                              "different model configuration")
    tensors: dict[str, np.ndarray] = {}
    while not r.done:
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = data.astype(np.float64)

    model = Model(model_config, np.random.default_rng(0))
    params = model.parameters()
    wanted = set(params)
    wanted.update(f"adam.m.{n}" for n in params)
    wanted.update(f"adam.v.{n}" for n in params)
    missing = sorted(wanted - set(tensors))
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing[:4]}")
    for name, p in params.items():
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(f"{path}: tensor '{name}' has shape "
                                  f"{tensors[name].shape}, model expects "
                                  f"{p.data.shape}")
        p.data[...] = tensors[name]
    adam = AdamState(step=header["adam_step"],
                     m={n: tensors[f"adam.m.{n}"].copy() for n in params},
                     v={n: tensors[f"adam.v.{n}"].copy() for n in params})
    return LoadedCheckpoint(model=model,
                            train_config=TrainConfig.from_dict(header["train"]),
                            adam=adam, step=header["step"],
                            rng_state=header["rng_state"])


# ---------------------------------------------------------------------------
# metrics log


def write_metrics(path, rows: list[tuple[int, LossBreakdown]]) -> None:
    buf = StringIO()
    buf.write(METRICS_HEADER + "\n")
    for step, breakdown in rows:
        buf.write(breakdown.csv_row(step) + "\n")
    Path(path).write_text(buf.getvalue())


def read_metrics(path) -> list[dict[str, float]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise TrainingError(f"{path}: unexpected metrics header")
    cols = METRICS_HEADER.split(",")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        row = {c: float(v) for c, v in zip(cols, vals)}
        row["step"] = int(vals[0])
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Model
    adam: AdamState
    metrics: list[tuple[int, LossBreakdown]]
    split: dict[str, list[Conversation]]
    rng_state: dict


def _forward_batch(model: Model, batch: list[ContextWindow],
                   config: TrainConfig, step: int,
                   pool: ThreadPoolExecutor | None) -> list[WindowOutput]:
    train_mode = model.config.dropout > 0.0

    def run(item: tuple[int, ContextWindow]) -> WindowOutput:
        i, window = item
        # Per-item RNG derived from (seed, step, index): dropout draws are
        # independent of thread scheduling and of resume points.
        drop_rng = (np.random.default_rng([config.seed, step, i])
                    if train_mode else None)
        # Logits heads always read detached features: labels shape the
        # feature space through the contrastive terms alone, and the
        # cross-entropy substitute trains the heads, not the trunk.
        return model.forward_window(window, teacher=True, train=train_mode,
                                    rng=drop_rng, detach_logits=True)

    items = list(enumerate(batch))
    if pool is None:
        return [run(it) for it in items]
    return list(pool.map(run, items))


def train_loop(corpus: list[Conversation], config: TrainConfig,
               model_config: ModelConfig | None = None,
               out_dir=None, resume_from=None,
               log=None) -> TrainResult:
    """Optimize on the train split of corpus for config.max_steps steps.

    Resuming restores parameters, optimizer moments, and the sampling RNG
    from a checkpoint, then continues to max_steps as if uninterrupted.
    When out_dir is given, writes model.ckpt and metrics.csv there.
    """
    config.validate()
    split = split_corpus(corpus)
    convs = split["train"]
    if not convs:
        raise TrainingError("train split is empty")
    by_conv = [list(range(1, len(c.turns))) for c in convs]
    rng = np.random.default_rng(config.seed)
    start_step = 0
    if resume_from is not None:
        loaded = load_checkpoint(resume_from)
        if loaded.train_config != config:
            raise CheckpointError("resume checkpoint was written by a "
                                  "different training configuration")
        model = loaded.model
        adam = loaded.adam
        start_step = loaded.step
        rng.bit_generator.state = loaded.rng_state
    else:
        model = Model(model_config if model_config is not None
                      else ModelConfig.lite(),
                      np.random.default_rng(config.seed))
        adam = AdamState.init(model.parameters())

    params = model.parameters()
    pool = (ThreadPoolExecutor(max_workers=config.threads)
            if config.threads > 1 else None)
    metrics: list[tuple[int, LossBreakdown]] = []
    try:
        for step in range(start_step + 1, config.max_steps + 1):
            batch = sample_batch(convs, by_conv, config.batch_size,
                                 config.context_length, rng)
            outputs = _forward_batch(model, batch, config, step, pool)
            objective, breakdown = total_loss(outputs, batch, config,
                                              tau=model.config.tau)
            if not np.isfinite(breakdown.total):
                raise TrainingError(f"non-finite loss at step {step}")
            ad.backward(objective)
            for name in sorted(params):
                g = params[name].grad
                if g is not None and not np.all(np.isfinite(g)):
                    raise TrainingError(f"non-finite gradient in '{name}' "
                                        f"at step {step}")
            adam_step(params, adam, config)
            for p in params.values():
                p.grad = None
            metrics.append((step, breakdown))
            if log is not None and (step % config.log_every == 0
                                    or step == config.max_steps or step == 1):
                log(step, breakdown)
    finally:
        if pool is not None:
            pool.shutdown()

    result = TrainResult(model=model, adam=adam, metrics=metrics, split=split,
                         rng_state=rng.bit_generator.state)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "model.ckpt", model, config, adam,
                        config.max_steps, result.rng_state)
        write_metrics(out_dir / "metrics.csv", metrics)
    return result
