"""Command-line front-end: dataset synthesis, training, generation, evaluation.

Run configs are flat key=value text files; unknown keys are rejected and every
value is validated before any work starts. Exit codes: 0 success, 1 internal
failure, 2 user/config error. Commands refuse to overwrite existing outputs
unless --force is given.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import evaluation as ev
from . import numerics as nm
from .errors import (AnnotationError, CapacityError, CmadError, ConfigError,
                     ParseError)
from .model import (AdaptedModel, BaseConfig, build_base, count_parameters,
                    forward_logits, generate, read_model_config,
                    write_model_config)
from .representation import (DEFAULT_FRAME_RATE, ConditionSequence,
                             frames_from_intervals, piano_roll_from_notes,
                             read_lab, read_note_events, read_token_lines,
                             write_token_lines)
from .training import TrainConfig, fine_tune, pretrain_base, teacher_forcing


@dataclass
class RunConfig:
    """Every tunable of a run, mirrored one key per line in the config file."""
    # architecture
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 64
    t_max: int = 128
    ffn_multiplier: int = 4
    use_cross_attention: bool = True
    prompt_vocab: int = 4
    L: int = 2
    # training
    epochs: int = 10
    warmup_epochs: int = 2
    base_lr: float = 2e-3
    batch_size: int = 24
    mask_rate: float = 0.4
    seed: int = 0
    segment_frames: int = 128
    grad_clip: float = 1.0
    mask_granularity: str = "track"
    val_fraction: float = 0.1
    pretrain_epochs: int = 10
    pretrain_lr: float = 3e-3
    pretrain_examples: int = 1000
    pretrain_batch_size: int = 16
    eval_schedules: int = 4
    eval_samples: int = 1
    # synthetic task
    chord_period: int = 8
    pulse_period: int = 16
    seq_frames: int = 128
    n_train: int = 200
    n_val: int = 20
    n_test: int = 12
    frame_rate: float = DEFAULT_FRAME_RATE
    # paths
    out_dir: str = "runs/default"
    dataset: str = ""
    checkpoint: str = ""
    base_checkpoint: str = ""

    def base_config(self) -> BaseConfig:
        return BaseConfig(n_layers=self.n_layers, d_model=self.d_model,
                          n_heads=self.n_heads, vocab_size=self.vocab_size,
                          t_max=self.t_max, ffn_multiplier=self.ffn_multiplier,
                          use_cross_attention=self.use_cross_attention,
                          prompt_vocab=self.prompt_vocab)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, warmup_epochs=self.warmup_epochs,
                           base_lr=self.base_lr, batch_size=self.batch_size,
                           mask_rate=self.mask_rate, seed=self.seed,
                           segment_frames=self.segment_frames, grad_clip=self.grad_clip,
                           mask_granularity=self.mask_granularity,
                           val_fraction=self.val_fraction,
                           pretrain_epochs=self.pretrain_epochs,
                           pretrain_lr=self.pretrain_lr)

    def synthetic_spec(self) -> ev.SyntheticSpec:
        return ev.SyntheticSpec(vocab_size=self.vocab_size,
                                chord_period=self.chord_period,
                                pulse_period=self.pulse_period,
                                seq_frames=self.seq_frames, n_train=self.n_train,
                                n_val=self.n_val, n_test=self.n_test,
                                frame_rate=self.frame_rate)

    def validate(self) -> None:
        self.base_config().validate()
        self.train_config().validate()
        self.synthetic_spec().validate()
        if not 0 <= self.L <= self.n_layers:
            raise ConfigError(f"L={self.L} must be in [0, n_layers={self.n_layers}]")
        if self.seq_frames > self.t_max:
            raise ConfigError(f"seq_frames {self.seq_frames} exceeds t_max {self.t_max}")
        for name in ("eval_schedules", "eval_samples", "pretrain_examples"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.pretrain_batch_size <= 0:
            raise ConfigError("pretrain_batch_size must be positive")


_BOOL_VALUES = {"1": True, "0": False, "true": True, "false": False}


def load_run_config(path: str | Path) -> RunConfig:
    cfg = RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            if types[key] == "bool":
                cfg_value = _BOOL_VALUES[value.lower()]
            elif types[key] == "int":
                cfg_value = int(value)
            elif types[key] == "float":
                cfg_value = float(value)
            else:
                cfg_value = value
        except (ValueError, KeyError):
            raise ConfigError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
        setattr(cfg, key, cfg_value)
    cfg.validate()
    return cfg


def write_run_config(cfg: RunConfig, path: str | Path) -> None:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.type == "bool":
            value = int(value)
        lines.append(f"{f.name}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    _refuse_overwrite(out / "manifest.json", args.force)
    spec = cfg.synthetic_spec()
    dataset = ev.synthesize_dataset(spec, np.random.default_rng(cfg.seed))
    manifest = ev.save_dataset(dataset, spec, out)
    print(f"wrote {spec.n_train}/{spec.n_val}/{spec.n_test} train/val/test examples "
          f"under {out} ({manifest.name})")
    return 0


def _load_model(checkpoint_path: Path) -> tuple[AdaptedModel, dict]:
    config_path = checkpoint_path.with_suffix(".cfg")
    if not config_path.exists():
        raise ConfigError(f"missing model config {config_path} next to {checkpoint_path}")
    base_cfg, l_layers, extras = read_model_config(config_path)
    model = AdaptedModel(build_base(base_cfg, seed=0), l_layers, seed=0)
    model.load(checkpoint_path)
    return model, extras


def _epoch_probe(val_examples, spec, cfg):
    if cfg.eval_schedules == 0 or cfg.eval_samples == 0 or not val_examples:
        return None
    subset = val_examples[:cfg.eval_schedules]
    full_group = ev.EVAL_GROUPS[3]

    def probe(model, rng):
        scores = ev.evaluate_group(model, subset, spec, full_group, rng,
                                   samples_per_schedule=cfg.eval_samples)
        return {"chord_recall_root": scores.chord_recall_root,
                "chord_recall_full": scores.chord_recall_full,
                "beat_f1": scores.beat_f1}

    return probe


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if not cfg.dataset:
        raise ConfigError("config key 'dataset' must point to a synthesized dataset")
    out_dir = Path(cfg.out_dir)
    _refuse_overwrite(out_dir / "model.ckpt", args.force)
    spec, dataset = ev.load_dataset(cfg.dataset)
    train = [ex.to_training_example() for ex in dataset.train]
    val = [ex.to_training_example() for ex in dataset.val]
    if not train:
        raise ConfigError(f"dataset {cfg.dataset} has no training examples")

    base_cfg = cfg.base_config()
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.base_checkpoint:
        base = build_base(base_cfg, seed=cfg.seed, checkpoint_path=cfg.base_checkpoint)
        print(f"loaded frozen base from {cfg.base_checkpoint}")
    else:
        base = build_base(base_cfg, seed=cfg.seed)
        if cfg.pretrain_epochs > 0:
            # the base stands in for a decoder pretrained on a large corpus, so
            # its pretraining uses a bigger synthetic set than the fine-tune data
            corpus_rng = np.random.default_rng([cfg.seed, 1])
            corpus = [ev.synthesize_example(spec, corpus_rng).to_training_example()
                      for _ in range(cfg.pretrain_examples)] or train
            losses = pretrain_base(base, corpus, epochs=cfg.pretrain_epochs,
                                   lr=cfg.pretrain_lr, batch_size=cfg.pretrain_batch_size,
                                   seed=cfg.seed, grad_clip=cfg.grad_clip, log_fn=print)
            ckpt.save_tensors(out_dir / "base.ckpt",
                              {p.name: p.data for p in base.parameters()})
            print(f"pretrained base for {cfg.pretrain_epochs} epochs "
                  f"(loss {losses[0]:.4f} -> {losses[-1]:.4f}), saved base.ckpt")

    model = AdaptedModel(base, cfg.L, seed=cfg.seed + 1)
    if args.checkpoint:
        model.load(args.checkpoint)
        print(f"resumed adaptor state from {args.checkpoint}")

    result = fine_tune(model, train, cfg.train_config(), val_examples=val or None,
                       out_dir=out_dir,
                       epoch_metrics_fn=_epoch_probe(dataset.val, spec, cfg),
                       log_fn=print)
    model.load_state(result.best_state)
    model.save(out_dir / "model.ckpt")
    write_model_config(out_dir / "model.cfg", base_cfg, cfg.L,
                       mask_rate=cfg.mask_rate, frame_rate=cfg.frame_rate)
    write_run_config(cfg, out_dir / "run_config.txt")
    print(f"best val loss {result.best_val_loss:.4f}; wrote model.ckpt, model.cfg, "
          f"metrics.csv under {out_dir}")
    return 0


def cmd_generate(args) -> int:
    model, extras = _load_model(Path(args.checkpoint))
    frame_rate = extras["frame_rate"]
    annotations = read_lab(args.chords)
    if not annotations:
        raise ParseError(f"{args.chords} contains no intervals")
    n = int(round(max(end for _, end, _ in annotations) * frame_rate))
    if n <= 0:
        raise AnnotationError(f"{args.chords}: empty time span")
    if n > model.config.t_max:
        raise CapacityError(f"{n} frames exceed model capacity {model.config.t_max}")
    chords = frames_from_intervals(annotations, frame_rate, n)

    if args.midi:
        roll = piano_roll_from_notes(read_note_events(args.midi), frame_rate, n)
        midi_masked = False
    else:
        roll = np.zeros((n, 128), dtype=np.float32)
        midi_masked = True
    if args.drums:
        drums = read_token_lines(args.drums)[0]
        if len(drums) != n:
            raise AnnotationError(f"{args.drums}: {len(drums)} tokens vs {n} chord frames")
        if drums.max() >= model.config.vocab_size or drums.min() < 0:
            raise AnnotationError(f"{args.drums}: token id out of range")
        acoustic_masked = False
    else:
        drums = np.zeros(n, dtype=np.int64)
        acoustic_masked = True

    seq = ConditionSequence.create(chords, roll, drums, frame_rate=frame_rate,
                                   midi_masked=midi_masked, acoustic_masked=acoustic_masked)
    if not 0 <= args.prompt < model.config.prompt_vocab:
        raise ConfigError(f"prompt id {args.prompt} out of range "
                          f"[0, {model.config.prompt_vocab})")
    out_path = Path(args.out)
    _refuse_overwrite(out_path, args.force)
    rng = np.random.default_rng(args.seed)
    tokens = generate(model, seq, args.prompt, rng, temperature=args.temperature,
                      top_k=args.top_k, greedy=args.greedy)
    write_token_lines(out_path, [tokens])
    print(f"wrote {len(tokens)} tokens to {out_path}")
    return 0


def cmd_eval(args) -> int:
    model, _ = _load_model(Path(args.checkpoint))
    spec, dataset = ev.load_dataset(args.dataset)
    if not dataset.test:
        raise ConfigError(f"dataset {args.dataset} has no test examples")
    by_name = {g.name: g for g in ev.EVAL_GROUPS}
    groups = []
    for name in args.groups.split(","):
        name = name.strip()
        if name not in by_name:
            raise ConfigError(f"unknown eval group {name!r}; choose from {sorted(by_name)}")
        groups.append(by_name[name])
    report = ev.run_protocol(model, dataset.test, spec, groups=groups,
                             samples_per_schedule=args.samples, seed=args.seed,
                             include_baseline=not args.no_baseline,
                             temperature=args.temperature, top_k=args.top_k)
    print(report.format_table())
    if args.out:
        out_path = Path(args.out)
        _refuse_overwrite(out_path, args.force)
        report.to_csv(out_path)
        print(f"wrote {out_path}")
    return 0


FULL_SCALE_CONFIG = BaseConfig(n_layers=48, d_model=2048, n_heads=32, vocab_size=2048,
                               t_max=1000, ffn_multiplier=4, use_cross_attention=True,
                               prompt_vocab=4)


def cmd_count_params(args) -> int:
    if args.full_scale:
        base_cfg = FULL_SCALE_CONFIG
    elif args.config:
        base_cfg = load_run_config(args.config).base_config()
    else:
        raise ConfigError("pass --full-scale or --config")
    l_values = [int(v) for v in args.L.split(",")]
    print(f"{'L':>4s} {'total':>14s} {'trainable':>12s} {'fraction':>9s}")
    for l_layers in l_values:
        counts = count_parameters(base_cfg, l_layers, weight_mode=args.weight_mode)
        print(f"{l_layers:4d} {counts['total']:14d} {counts['trainable']:12d} "
              f"{100 * counts['fraction']:8.3f}%")
    return 0


def cmd_gates(args) -> int:
    with open(args.metrics_csv, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigError(f"{args.metrics_csv} is empty")
        gate_cols = [c for c in reader.fieldnames if c.startswith("gate_l")]
        if not gate_cols:
            raise ConfigError(f"{args.metrics_csv} has no gate_l<i> columns")
        rows = [[row["epoch"], *(row[c] for c in gate_cols)] for row in reader]
    out_path = Path(args.out)
    _refuse_overwrite(out_path, args.force)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", *gate_cols])
        writer.writerows(rows)
    print(f"wrote |g_l| trajectories for {len(gate_cols)} layers to {out_path}")
    return 0


GRADCHECK_CONFIG = BaseConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=8,
                              t_max=8, ffn_multiplier=2, use_cross_attention=True,
                              prompt_vocab=4)


def build_gradcheck_loss(model: AdaptedModel, n_frames: int, seed: int):
    """A fixed loss touching every trainable parameter class.

    Half the frames carry masked channels so the mask vectors and both channel
    projections all receive gradient; gates are moved off zero because at
    exactly zero no gradient reaches the encoder side.
    """
    rng = np.random.default_rng(seed)
    for g in model.adaptor.gates:
        g.data[:] = 0.25
    chords = [ev.random_chord(rng) for _ in range(n_frames)]
    roll = (rng.random((n_frames, 128)) < 0.05).astype(np.float64)
    acoustic = rng.integers(0, model.config.vocab_size, size=n_frames)
    seq = ConditionSequence.create(chords, roll, acoustic)
    seq.midi_masked[: n_frames // 2] = True
    seq.acoustic_masked[n_frames // 2:] = True
    tokens = rng.integers(0, model.config.vocab_size, size=n_frames)
    inputs, targets = teacher_forcing(tokens, model.config.vocab_size - 1)
    prompt_id = int(rng.integers(0, model.config.prompt_vocab))

    def loss_fn():
        return nm.cross_entropy(forward_logits(model, inputs, seq, prompt_id), targets)

    return loss_fn


def cmd_gradcheck(args) -> int:
    base_cfg = load_run_config(args.config).base_config() if args.config else GRADCHECK_CONFIG
    l_layers = 2 if not args.config else min(2, base_cfg.n_layers)
    base = build_base(base_cfg, seed=args.seed, dtype=np.float64)
    model = AdaptedModel(base, l_layers, seed=args.seed + 1, dtype=np.float64)
    loss_fn = build_gradcheck_loss(model, n_frames=args.frames, seed=args.seed)
    report = nm.finite_diff_check(loss_fn, model.trainable_parameters(),
                                  epsilon=args.epsilon)
    print(report.format_table())
    ok = report.max_rel_error < 1e-4
    print(f"max relative error {report.max_rel_error:.3e} "
          f"({'PASS' if ok else 'FAIL'} at 1e-4)")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmad",
                                     description="conditioned music-token generation "
                                                 "with a gated attention adaptor")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="synthesize a conditioned dataset")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train", help="pretrain/load the frozen base and fine-tune the adaptor")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", default="", help="resume adaptor state from this checkpoint")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="generate tokens for a chord chart")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--chords", required=True, help=".lab chord chart")
    p.add_argument("--midi", default="", help="optional note-event JSONL")
    p.add_argument("--drums", default="", help="optional drum token file")
    p.add_argument("--prompt", type=int, default=0, help="text prompt id")
    p.add_argument("--out", required=True, help="output token file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("eval", help="run the four-condition protocol on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--groups", default="chord-only,midi-only,drums-only,full")
    p.add_argument("--samples", type=int, default=4, help="samples per test schedule")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--no-baseline", action="store_true")
    p.add_argument("--out", default="", help="optional report CSV path")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("count-params", help="parameter accounting over L")
    p.add_argument("--full-scale", action="store_true",
                   help="use the 48-layer full-scale analog config")
    p.add_argument("--config", default="")
    p.add_argument("--L", default="12,24,36,48")
    p.add_argument("--weight-mode", choices=("shared", "copied"), default="shared")
    p.set_defaults(fn=cmd_count_params)

    p = sub.add_parser("gates", help="extract per-layer |g_l| trajectories from a metrics CSV")
    p.add_argument("--metrics-csv", required=True)
    p.add_argument("--out", default="gates.csv")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gates)

    p = sub.add_parser("gradcheck", help="finite-difference check of every trainable parameter")
    p.add_argument("--config", default="")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


USER_ERRORS = (ConfigError, ParseError, AnnotationError, CapacityError,
               FileNotFoundError, NotADirectoryError, PermissionError, IsADirectoryError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except CmadError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
