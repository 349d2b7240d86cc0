"""Fine-tuning loop: frozen base, trainable adaptor, channel masking, fixed prompts.

Each step draws mask flags and a text prompt per example, runs teacher-forced
cross-entropy over next tokens, clips the global gradient norm and applies one
Adam step to the trainable parameters. The base can optionally be pretrained
at desk scale on plain token sequences first, then frozen.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .errors import ConfigError, NumericsError, StateError
from .model import AdaptedModel, FrozenBaseDecoder, forward_logits
from .numerics import Adam, Tape, clip_global_norm, lr_schedule
from .representation import ConditionSequence, apply_masking

PROMPTS = ("melodic music", "catchy song", "a song", "music tracks")


@dataclass
class TrainConfig:
    epochs: int = 10
    warmup_epochs: int = 2
    base_lr: float = 2e-3
    batch_size: int = 24
    mask_rate: float = 0.4
    seed: int = 0
    segment_frames: int = 128          # 1000 at full scale (20 s at 50 Hz)
    grad_clip: float = 1.0
    mask_granularity: str = "track"
    val_fraction: float = 0.1
    pretrain_epochs: int = 6
    pretrain_lr: float = 3e-3

    def validate(self) -> None:
        if self.warmup_epochs > self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} > epochs {self.epochs}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigError(f"mask_rate must be in [0, 1], got {self.mask_rate}")
        for name in ("epochs", "warmup_epochs", "pretrain_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "segment_frames"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.mask_granularity not in ("track", "frame"):
            raise ConfigError(f"unknown mask granularity {self.mask_granularity!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


@dataclass
class TrainingExample:
    """A token surface plus its frame-aligned condition channels."""
    tokens: np.ndarray
    condition: ConditionSequence

    def __post_init__(self):
        if len(self.tokens) != self.condition.n_frames:
            raise ConfigError(
                f"{len(self.tokens)} tokens vs {self.condition.n_frames} condition frames")


def sample_prompt(rng: np.random.Generator, n_prompts: int = len(PROMPTS)) -> int:
    """Uniform draw over the fixed prompt table."""
    return int(rng.integers(0, n_prompts))


def teacher_forcing(tokens: np.ndarray, start_token: int) -> tuple[np.ndarray, np.ndarray]:
    """Inputs are the surface shifted right behind a start token; targets are the surface."""
    inputs = np.concatenate([[start_token], tokens[:-1]]).astype(np.int64)
    return inputs, np.asarray(tokens, dtype=np.int64)


def crop_segment(example: TrainingExample, segment_frames: int,
                 rng: np.random.Generator) -> TrainingExample:
    """Fixed-length contiguous crop with a uniform start; shorter examples pass through."""
    n = len(example.tokens)
    if n <= segment_frames:
        return example
    start = int(rng.integers(0, n - segment_frames + 1))
    stop = start + segment_frames
    cond = example.condition
    cropped = ConditionSequence(
        chords=cond.chords[start:stop],
        piano_roll=cond.piano_roll[start:stop],
        acoustic_tokens=cond.acoustic_tokens[start:stop],
        midi_masked=cond.midi_masked[start:stop],
        acoustic_masked=cond.acoustic_masked[start:stop],
        frame_rate=cond.frame_rate)
    return TrainingExample(tokens=example.tokens[start:stop], condition=cropped)


def _batch_loss(model: AdaptedModel, prepared: list[tuple[np.ndarray, np.ndarray,
                                                          ConditionSequence, int]]):
    losses = []
    for inputs, targets, seq, prompt_id in prepared:
        logits = forward_logits(model, inputs, seq, prompt_id)
        losses.append(nm.cross_entropy(logits, targets))
    total = losses[0]
    for extra in losses[1:]:
        total = nm.add(total, extra)
    return nm.scale(total, 1.0 / len(losses))


def _fill_missing_grads(params) -> None:
    # a parameter can sit out a step (mask vectors when nothing was masked);
    # after a completed backward its gradient is legitimately zero
    for p in params:
        if p.trainable and p.grad is None:
            p.grad = np.zeros_like(p.data)


def _activation_trace(model: AdaptedModel, prepared) -> dict[str, float]:
    trace: dict[str, float] = {}
    try:
        for inputs, targets, seq, prompt_id in prepared:
            forward_logits(model, inputs, seq, prompt_id, trace=trace)
    except NumericsError:
        pass
    return trace


def training_step(model: AdaptedModel, batch: Sequence[TrainingExample],
                  optimizer: Adam, lr: float, rng: np.random.Generator,
                  config: TrainConfig) -> float:
    """One masked, prompted, teacher-forced step over a batch. Returns the loss."""
    if not batch:
        raise StateError("training_step needs a non-empty batch")
    start_token = model.config.vocab_size - 1
    prepared = []
    for ex in batch:
        seq = apply_masking(ex.condition, config.mask_rate, rng, config.mask_granularity)
        prompt_id = sample_prompt(rng, model.config.prompt_vocab)
        inputs, targets = teacher_forcing(ex.tokens, start_token)
        prepared.append((inputs, targets, seq, prompt_id))

    model.zero_grad()
    try:
        with Tape() as tape:
            total = _batch_loss(model, prepared)
        tape.backward(total)
    except NumericsError as exc:
        norms = _activation_trace(model, prepared)
        detail = ", ".join(f"{k}={v:.3e}" for k, v in norms.items())
        raise NumericsError(f"non-finite loss: {exc}; activation norms: {detail}") from exc
    _fill_missing_grads(model.trainable_parameters())
    clip_global_norm(model.trainable_parameters(), config.grad_clip)
    optimizer.step(lr)
    return float(total.item())


def evaluate_loss(model: AdaptedModel, examples: Sequence[TrainingExample],
                  prompt_id: int = 0) -> float:
    """Mean unmasked cross-entropy; deterministic, used for validation."""
    start_token = model.config.vocab_size - 1
    total = 0.0
    for ex in examples:
        inputs, targets = teacher_forcing(ex.tokens, start_token)
        logits = forward_logits(model, inputs, ex.condition, prompt_id)
        total += float(nm.cross_entropy(logits, targets).item())
    return total / len(examples)


def _frozen_checksum(model: AdaptedModel) -> str:
    digest = hashlib.sha256()
    for p in model.parameters():
        if not p.trainable:
            digest.update(p.name.encode())
            digest.update(p.data.tobytes())
    return digest.hexdigest()


METRIC_COLUMNS = ("chord_recall_root", "chord_recall_full", "beat_f1")


@dataclass
class FineTuneResult:
    rows: list[dict] = field(default_factory=list)
    best_val_loss: float = math.inf
    best_state: dict[str, np.ndarray] | None = None
    metrics_path: Path | None = None


def fine_tune(model: AdaptedModel, train_examples: Sequence[TrainingExample],
              config: TrainConfig,
              val_examples: Sequence[TrainingExample] | None = None,
              out_dir: str | Path | None = None,
              epoch_metrics_fn: Callable[[AdaptedModel, np.random.Generator], dict] | None = None,
              log_fn: Callable[[str], None] | None = None) -> FineTuneResult:
    """Epoch loop with warmup, per-epoch CSV logging and best-checkpoint retention.

    The CSV columns are epoch, step, loss, lr, the three controllability
    metrics (nan when no probe is wired) and one |g_l| column per adapted
    layer. Frozen parameters are checksummed every epoch.
    """
    config.validate()
    if not train_examples:
        raise StateError("fine_tune needs a non-empty dataset")
    rng = np.random.default_rng(config.seed)
    train = list(train_examples)
    if val_examples is None:
        n_val = max(1, int(round(config.val_fraction * len(train)))) if len(train) > 1 else 0
        val = train[len(train) - n_val:] if n_val else train[:]
        train = train[:len(train) - n_val] if n_val else train
    else:
        val = list(val_examples)

    optimizer = Adam(model.trainable_parameters(), lr=config.base_lr)
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    warmup_steps = config.warmup_epochs * steps_per_epoch
    frozen_before = _frozen_checksum(model)

    gate_columns = [f"gate_l{layer}" for layer in sorted(model.gate_values())]
    header = ["epoch", "step", "loss", "lr", *METRIC_COLUMNS, *gate_columns]
    result = FineTuneResult()
    csv_fh = None
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.metrics_path = out_dir / "metrics.csv"
        csv_fh = open(result.metrics_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(csv_fh)
        writer.writerow(header)
        csv_fh.flush()

    global_step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train))
            epoch_losses = []
            for b in range(steps_per_epoch):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                batch = [crop_segment(train[i], config.segment_frames, rng) for i in idx]
                lr = lr_schedule(min(global_step + 1, warmup_steps), warmup_steps, config.base_lr)
                epoch_losses.append(training_step(model, batch, optimizer, lr, rng, config))
                global_step += 1

            if _frozen_checksum(model) != frozen_before:
                raise StateError("frozen parameters changed during training")

            val_loss = evaluate_loss(model, val) if val else float(np.mean(epoch_losses))
            if val_loss < result.best_val_loss:
                result.best_val_loss = val_loss
                result.best_state = {k: v.copy() for k, v in model.state_arrays().items()}

            metrics = {c: float("nan") for c in METRIC_COLUMNS}
            if epoch_metrics_fn is not None:
                probe_rng = np.random.default_rng(rng.integers(0, 2**63))
                metrics.update(epoch_metrics_fn(model, probe_rng))
            gates = model.gate_values()
            row = {"epoch": epoch, "step": global_step,
                   "loss": float(np.mean(epoch_losses)), "lr": lr, **metrics,
                   **{f"gate_l{layer}": abs(v) for layer, v in gates.items()}}
            result.rows.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in header])
                csv_fh.flush()
            if log_fn is not None:
                log_fn(f"epoch {epoch}/{config.epochs} loss {row['loss']:.4f} "
                       f"val {val_loss:.4f} lr {lr:.2e}")
    finally:
        if csv_fh is not None:
            csv_fh.close()

    if result.best_state is None:  # epochs == 0
        result.best_state = {k: v.copy() for k, v in model.state_arrays().items()}
        result.best_val_loss = evaluate_loss(model, val) if val else math.nan
    return result


def pretrain_base(base: FrozenBaseDecoder, examples: Sequence[TrainingExample],
                  epochs: int, lr: float, batch_size: int, seed: int,
                  grad_clip: float = 1.0,
                  log_fn: Callable[[str], None] | None = None) -> list[float]:
    """Train the toy base as a plain language model on token surfaces, then freeze it.

    This is what stands in for the pretrained full-scale decoder: the adaptor
    is fine-tuned on top of the result with every base parameter frozen.
    """
    base.set_trainable(True)
    lm = AdaptedModel(base, l_layers=0, seed=seed)
    optimizer = Adam(base.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    start_token = base.config.vocab_size - 1
    epoch_means: list[float] = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(examples))
        losses = []
        for b in range(math.ceil(len(examples) / batch_size)):
            idx = order[b * batch_size:(b + 1) * batch_size]
            prepared = []
            for i in idx:
                inputs, targets = teacher_forcing(examples[i].tokens, start_token)
                prepared.append((inputs, targets, examples[i].condition,
                                 sample_prompt(rng, base.config.prompt_vocab)))
            lm.zero_grad()
            with Tape() as tape:
                total = _batch_loss(lm, prepared)
            tape.backward(total)
            _fill_missing_grads(base.parameters())
            clip_global_norm(base.parameters(), grad_clip)
            optimizer.step()
            losses.append(float(total.item()))
        epoch_means.append(float(np.mean(losses)))
        if log_fn is not None:
            log_fn(f"pretrain epoch {epoch}/{epochs} loss {epoch_means[-1]:.4f}")
    base.freeze()
    return epoch_means
