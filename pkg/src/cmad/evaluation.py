"""Synthetic conditioned-generation task with oracle metrics.

Tokens 0..47 are pitched (token t sounds pitch class t mod 12, four octaves
per class), one token is a drum hit, one a rest; the top id is reserved as the
generation start marker. Each example carries a random chord schedule, a
periodic drum pulse at a random phase, and a token surface consistent with
both; the piano-roll channel mirrors the surface and the acoustic channel is
the drum track. Chord recall decodes generated pitch classes per chord
segment; beat F1 greedily matches generated drum hits to reference pulses
within a tolerance window.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AlignmentError, ConfigError
from .model import AdaptedModel, generate
from .representation import (
    ChordSymbol,
    ConditionSequence,
    NO_CHORD,
    QUALITY_OFFSETS,
    chord_label,
    frames_from_intervals,
    piano_roll_from_notes,
    read_lab,
    read_note_events,
    read_token_lines,
    write_lab,
    write_note_events,
    write_token_lines,
)
from .training import TrainingExample

N_PITCHED_TOKENS = 48
LOWEST_PITCH = 36  # pitched token t sounds MIDI pitch 36 + t


@dataclass
class SyntheticSpec:
    vocab_size: int = 64
    chord_period: int = 8
    pulse_period: int = 16
    seq_frames: int = 128
    n_train: int = 200
    n_val: int = 20
    n_test: int = 12
    frame_rate: float = 50.0

    @property
    def drum_token(self) -> int:
        return N_PITCHED_TOKENS

    @property
    def rest_token(self) -> int:
        return N_PITCHED_TOKENS + 1

    @property
    def start_token(self) -> int:
        return self.vocab_size - 1

    def validate(self) -> None:
        if self.vocab_size < N_PITCHED_TOKENS + 3:
            raise ConfigError(f"vocab_size must be >= {N_PITCHED_TOKENS + 3} "
                              "(48 pitched + drum + rest + start marker)")
        for name in ("chord_period", "pulse_period", "seq_frames"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        # 4 octave tokens per pitch class: every chord realizable by >= 3 tokens
        if self.chord_period < 8:
            raise ConfigError("chord_period below 8 cannot guarantee pitch-class coverage")


def token_pitch_class(spec: SyntheticSpec, token: int) -> int | None:
    """Pitch class of a pitched token, None for drum/rest/unused ids."""
    return token % 12 if 0 <= token < N_PITCHED_TOKENS else None


def token_pitch(spec: SyntheticSpec, token: int) -> int | None:
    return LOWEST_PITCH + token if 0 <= token < N_PITCHED_TOKENS else None


def random_chord(rng: np.random.Generator) -> ChordSymbol:
    quality = list(QUALITY_OFFSETS)[rng.integers(0, len(QUALITY_OFFSETS))]
    root = int(rng.integers(0, 12))
    return ChordSymbol.from_offsets(root, QUALITY_OFFSETS[quality])


@dataclass
class SyntheticExample:
    """One conditioned sequence plus the ground truth it was built from."""
    tokens: np.ndarray                  # (T,)
    condition: ConditionSequence
    chord_frames: list[ChordSymbol]     # reference schedule, one entry per frame
    pulse_frames: np.ndarray            # reference drum-hit frame indices

    def to_training_example(self) -> TrainingExample:
        return TrainingExample(tokens=self.tokens, condition=self.condition)

    def schedule_intervals(self, frame_rate: float) -> list[tuple[float, float, str]]:
        out = []
        start = 0
        for stop, chord in _segments(self.chord_frames):
            out.append((start / frame_rate, stop / frame_rate, chord_label(chord)))
            start = stop
        return out


def _segments(chord_frames: Sequence[ChordSymbol]):
    """Yield (stop_index, chord) for maximal constant runs."""
    start = 0
    for i in range(1, len(chord_frames) + 1):
        if i == len(chord_frames) or chord_frames[i] != chord_frames[start]:
            yield i, chord_frames[start]
            start = i


def synthesize_example(spec: SyntheticSpec, rng: np.random.Generator) -> SyntheticExample:
    n = spec.seq_frames
    chord_frames: list[ChordSymbol] = []
    while len(chord_frames) < n:
        chord_frames.extend([random_chord(rng)] * spec.chord_period)
    chord_frames = chord_frames[:n]

    offset = int(rng.integers(0, spec.pulse_period))
    pulse = np.arange(offset, n, spec.pulse_period)
    is_pulse = np.zeros(n, dtype=bool)
    is_pulse[pulse] = True

    tokens = np.empty(n, dtype=np.int64)
    roll = np.zeros((n, 128), dtype=np.float32)
    start = 0
    for stop, chord in _segments(chord_frames):
        pcs = sorted(chord.pitch_classes())
        pitched = [i for i in range(start, stop) if not is_pulse[i]]
        # cycle through the chord tones first so every class appears in the segment
        for slot, i in enumerate(pitched):
            if slot < len(pcs):
                pc = pcs[slot]
            else:
                pc = pcs[rng.integers(0, len(pcs))]
            octave = int(rng.integers(0, N_PITCHED_TOKENS // 12))
            tokens[i] = pc + 12 * octave
        start = stop
    tokens[is_pulse] = spec.drum_token
    for i in range(n):
        pitch = token_pitch(spec, int(tokens[i]))
        if pitch is not None:
            roll[i, pitch] = 1.0

    acoustic = np.where(is_pulse, spec.drum_token, spec.rest_token).astype(np.int64)
    condition = ConditionSequence.create(chord_frames, roll, acoustic,
                                         frame_rate=spec.frame_rate)
    return SyntheticExample(tokens=tokens, condition=condition,
                            chord_frames=chord_frames, pulse_frames=pulse)


@dataclass
class SyntheticDataset:
    train: list[SyntheticExample]
    val: list[SyntheticExample]
    test: list[SyntheticExample]


def synthesize_dataset(spec: SyntheticSpec, rng: np.random.Generator) -> SyntheticDataset:
    spec.validate()
    return SyntheticDataset(
        train=[synthesize_example(spec, rng) for _ in range(spec.n_train)],
        val=[synthesize_example(spec, rng) for _ in range(spec.n_val)],
        test=[synthesize_example(spec, rng) for _ in range(spec.n_test)])


# ---------------------------------------------------------------------------
# dataset persistence
# ---------------------------------------------------------------------------

MANIFEST_FORMAT = "cmad-dataset@1"


def _note_events_from_tokens(spec: SyntheticSpec, tokens: np.ndarray) -> list[dict]:
    """Merge consecutive frames of the same pitch into note events."""
    events = []
    current_pitch = None
    start = 0
    for i in range(len(tokens) + 1):
        pitch = token_pitch(spec, int(tokens[i])) if i < len(tokens) else None
        if pitch != current_pitch:
            if current_pitch is not None:
                events.append({"onset_sec": start / spec.frame_rate,
                               "offset_sec": i / spec.frame_rate,
                               "pitch": current_pitch})
            current_pitch = pitch
            start = i
    return events


def save_dataset(dataset: SyntheticDataset, spec: SyntheticSpec,
                 out_dir: str | Path) -> Path:
    """Write one tokens/.lab/notes.jsonl/drums.tok quadruple per example plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[str]] = {}
    for split_name, examples in (("train", dataset.train), ("val", dataset.val),
                                 ("test", dataset.test)):
        ids = []
        for i, ex in enumerate(examples):
            ex_id = f"{split_name}_{i:04d}"
            ids.append(ex_id)
            write_token_lines(out_dir / f"{ex_id}.tokens", [ex.tokens])
            write_lab(out_dir / f"{ex_id}.lab", ex.schedule_intervals(spec.frame_rate))
            write_note_events(out_dir / f"{ex_id}.notes.jsonl",
                              _note_events_from_tokens(spec, ex.tokens))
            write_token_lines(out_dir / f"{ex_id}.drums.tok", [ex.condition.acoustic_tokens])
        splits[split_name] = ids
    manifest = {"format": MANIFEST_FORMAT,
                "vocab_size": spec.vocab_size,
                "chord_period": spec.chord_period,
                "pulse_period": spec.pulse_period,
                "seq_frames": spec.seq_frames,
                "frame_rate": spec.frame_rate,
                "splits": splits}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return out_dir / "manifest.json"


def _load_example(directory: Path, ex_id: str, spec: SyntheticSpec) -> SyntheticExample:
    tokens = read_token_lines(directory / f"{ex_id}.tokens")[0]
    n = len(tokens)
    chords = frames_from_intervals(read_lab(directory / f"{ex_id}.lab"), spec.frame_rate, n)
    roll = piano_roll_from_notes(read_note_events(directory / f"{ex_id}.notes.jsonl"),
                                 spec.frame_rate, n)
    acoustic = read_token_lines(directory / f"{ex_id}.drums.tok")[0]
    if len(acoustic) != n:
        raise AlignmentError(f"{ex_id}: {len(acoustic)} drum tokens vs {n} frames")
    condition = ConditionSequence.create(chords, roll, acoustic, frame_rate=spec.frame_rate)
    pulse = np.flatnonzero(acoustic == spec.drum_token)
    return SyntheticExample(tokens=tokens, condition=condition,
                            chord_frames=chords, pulse_frames=pulse)


def load_dataset(directory: str | Path) -> tuple[SyntheticSpec, SyntheticDataset]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"unsupported dataset format {manifest.get('format')!r}")
    spec = SyntheticSpec(vocab_size=int(manifest["vocab_size"]),
                         chord_period=int(manifest["chord_period"]),
                         pulse_period=int(manifest["pulse_period"]),
                         seq_frames=int(manifest["seq_frames"]),
                         frame_rate=float(manifest["frame_rate"]),
                         n_train=len(manifest["splits"]["train"]),
                         n_val=len(manifest["splits"]["val"]),
                         n_test=len(manifest["splits"]["test"]))
    splits = {name: [_load_example(directory, ex_id, spec) for ex_id in ids]
              for name, ids in manifest["splits"].items()}
    return spec, SyntheticDataset(train=splits.get("train", []),
                                  val=splits.get("val", []),
                                  test=splits.get("test", []))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def chord_recall(tokens: Sequence[int], chord_frames: Sequence[ChordSymbol],
                 mode: str = "root", spec: SyntheticSpec | None = None) -> float:
    """Frame-weighted recall of the reference chords in a generated surface.

    Every frame of a chord segment is correct iff the pitch-class set decoded
    from that segment's tokens contains the chord root ("root") or equals the
    chord's full pitch-class set ("full"). No-chord frames are not scored.
    """
    if mode not in ("root", "full"):
        raise ValueError(f"unknown recall mode {mode!r}")
    if len(tokens) != len(chord_frames):
        raise AlignmentError(f"{len(tokens)} tokens vs {len(chord_frames)} chord frames")
    spec = spec or SyntheticSpec()
    correct = 0
    scored = 0
    start = 0
    for stop, chord in _segments(list(chord_frames)):
        width = stop - start
        if not chord.is_no_chord:
            window = {token_pitch_class(spec, int(t)) for t in tokens[start:stop]}
            window.discard(None)
            target = chord.pitch_classes()
            hit = (chord.root in window) if mode == "root" else (window == target)
            scored += width
            correct += width if hit else 0
        start = stop
    return correct / scored if scored else 1.0


def detect_drum_frames(tokens: Sequence[int], spec: SyntheticSpec) -> np.ndarray:
    arr = np.asarray(tokens)
    return np.flatnonzero(arr == spec.drum_token)


def beat_f_measure(detected_frames: Sequence[int], reference_frames: Sequence[int],
                   tolerance_frames: int = 3) -> float:
    """F1 of greedy one-to-one matching within +/- tolerance frames."""
    if tolerance_frames < 0:
        raise ValueError("tolerance_frames must be >= 0")
    det = sorted(int(x) for x in detected_frames)
    ref = sorted(int(x) for x in reference_frames)
    if not det and not ref:
        return 1.0
    if not det or not ref:
        return 0.0
    matches = 0
    i = j = 0
    while i < len(ref) and j < len(det):
        if abs(ref[i] - det[j]) <= tolerance_frames:
            matches += 1
            i += 1
            j += 1
        elif ref[i] < det[j] - tolerance_frames:
            i += 1
        else:
            j += 1
    precision = matches / len(det)
    recall = matches / len(ref)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def uniform_chance_level(spec: SyntheticSpec, examples: Sequence[SyntheticExample],
                         rng: np.random.Generator, trials: int = 50,
                         mode: str = "root") -> float:
    """Monte-Carlo recall of uniformly random tokens against the given schedules."""
    scores = []
    for _ in range(trials):
        for ex in examples:
            tokens = rng.integers(0, spec.vocab_size, size=len(ex.tokens))
            scores.append(chord_recall(tokens, ex.chord_frames, mode=mode, spec=spec))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# four-condition protocol
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalGroup:
    """Which channels the generator may see; the chord channel is part of every group."""
    name: str
    use_midi: bool
    use_drums: bool
    use_chords: bool = True


EVAL_GROUPS = (
    EvalGroup("chord-only", use_midi=False, use_drums=False),
    EvalGroup("midi-only", use_midi=True, use_drums=False),
    EvalGroup("drums-only", use_midi=False, use_drums=True),
    EvalGroup("full", use_midi=True, use_drums=True),
)

BASELINE_GROUP = EvalGroup("baseline", use_midi=False, use_drums=False, use_chords=False)


def condition_for_group(example: SyntheticExample, group: EvalGroup) -> ConditionSequence:
    """Mask channels the group withholds; a withheld chord channel becomes all no-chord."""
    cond = example.condition
    n = cond.n_frames
    chords = list(cond.chords) if group.use_chords else [NO_CHORD] * n
    return ConditionSequence(
        chords=chords,
        piano_roll=cond.piano_roll,
        acoustic_tokens=cond.acoustic_tokens,
        midi_masked=np.full(n, not group.use_midi, dtype=bool),
        acoustic_masked=np.full(n, not group.use_drums, dtype=bool),
        frame_rate=cond.frame_rate)


@dataclass
class GroupScores:
    chord_recall_root: float
    chord_recall_full: float
    beat_f1: float
    n_samples: int


@dataclass
class EvalReport:
    groups: dict[str, GroupScores] = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["group", "chord_recall_root", "chord_recall_full",
                             "beat_f1", "n_samples"])
            for name, s in self.groups.items():
                writer.writerow([name, f"{s.chord_recall_root:.6f}",
                                 f"{s.chord_recall_full:.6f}", f"{s.beat_f1:.6f}",
                                 s.n_samples])

    def format_table(self) -> str:
        lines = [f"{'group':12s} {'root_rec':>9s} {'full_rec':>9s} {'beat_f1':>9s} {'n':>5s}"]
        for name, s in self.groups.items():
            lines.append(f"{name:12s} {s.chord_recall_root:9.3f} "
                         f"{s.chord_recall_full:9.3f} {s.beat_f1:9.3f} {s.n_samples:5d}")
        return "\n".join(lines)


def evaluate_group(model: AdaptedModel, examples: Sequence[SyntheticExample],
                   spec: SyntheticSpec, group: EvalGroup, rng: np.random.Generator,
                   samples_per_schedule: int = 4, temperature: float = 1.0,
                   top_k: int = 0, tolerance_frames: int = 3) -> GroupScores:
    roots, fulls, beats = [], [], []
    n = 0
    for ex in examples:
        cond = condition_for_group(ex, group)
        for _ in range(samples_per_schedule):
            prompt_id = int(rng.integers(0, model.config.prompt_vocab))
            tokens = generate(model, cond, prompt_id, rng, temperature=temperature,
                              top_k=top_k, start_token=spec.start_token)
            roots.append(chord_recall(tokens, ex.chord_frames, "root", spec))
            fulls.append(chord_recall(tokens, ex.chord_frames, "full", spec))
            beats.append(beat_f_measure(detect_drum_frames(tokens, spec),
                                        ex.pulse_frames, tolerance_frames))
            n += 1
    return GroupScores(chord_recall_root=float(np.mean(roots)),
                       chord_recall_full=float(np.mean(fulls)),
                       beat_f1=float(np.mean(beats)), n_samples=n)


def run_protocol(model: AdaptedModel, examples: Sequence[SyntheticExample],
                 spec: SyntheticSpec, groups: Sequence[EvalGroup] = EVAL_GROUPS,
                 samples_per_schedule: int = 4, seed: int = 0,
                 include_baseline: bool = True, temperature: float = 1.0,
                 top_k: int = 0) -> EvalReport:
    """Generate per group with channels masked per the group, score against truth."""
    report = EvalReport()
    all_groups = list(groups) + ([BASELINE_GROUP] if include_baseline else [])
    for group in all_groups:
        rng = np.random.default_rng(seed)  # same sampling stream per group
        report.groups[group.name] = evaluate_group(
            model, examples, spec, group, rng, samples_per_schedule=samples_per_schedule,
            temperature=temperature, top_k=top_k)
    return report
