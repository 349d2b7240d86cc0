"""Chord labels, piano-roll and acoustic-token channels, and their joint embedding.

A chord is {root, bass, bitmap}: the bitmap marks active pitches as semitone
offsets from the root. Each frame becomes a 37-dim vector (root one-hot, bass
one-hot, bitmap, no-chord flag). The piano roll (128 pitches) and the frozen
acoustic embedding are projected to 12 dims each, optionally replaced by
learned mask vectors, concatenated with the chord vector and a learned
positional term, and finally projected per (encoder layer, head).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nm
from .errors import AnnotationError, CapacityError, ParseError
from .numerics import Parameter, Tensor

K1 = 12          # projected piano-roll width
K2 = 12          # projected acoustic width
CHORD_DIM = 37   # root 12 + bass 12 + bitmap 12 + no-chord flag
JOINT_DIM = CHORD_DIM + K1 + K2
N_PITCHES = 128
DEFAULT_FRAME_RATE = 50

PITCH_NAMES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]

_NATURALS = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}

QUALITY_OFFSETS: dict[str, tuple[int, ...]] = {
    "maj": (0, 4, 7),
    "min": (0, 3, 7),
    "7": (0, 4, 7, 10),
    "maj7": (0, 4, 7, 11),
    "min7": (0, 3, 7, 10),
    "dim": (0, 3, 6),
    "aug": (0, 4, 8),
    "sus2": (0, 2, 7),
    "sus4": (0, 5, 7),
}


def parse_pitch_class(token: str) -> int:
    """'C'..'B' with optional single # or b suffix."""
    if not token or token[0] not in _NATURALS:
        raise ParseError(f"unknown note name {token!r}")
    pc = _NATURALS[token[0]]
    accidental = token[1:]
    if accidental == "#":
        pc += 1
    elif accidental == "b":
        pc -= 1
    elif accidental:
        raise ParseError(f"unknown note name {token!r}")
    return pc % 12


@dataclass(frozen=True)
class ChordSymbol:
    """Parsed chord: root/bass pitch classes and a 12-bit offset bitmap."""
    root: int
    bass: int
    bitmap: tuple[bool, ...]
    is_no_chord: bool = False

    def __post_init__(self):
        if not self.is_no_chord:
            if not (0 <= self.root < 12 and 0 <= self.bass < 12):
                raise ParseError(f"pitch class out of range: root={self.root} bass={self.bass}")
            if len(self.bitmap) != 12 or not self.bitmap[0]:
                raise ParseError("chord bitmap must have 12 entries with the root active")

    @classmethod
    def no_chord(cls) -> "ChordSymbol":
        return cls(root=0, bass=0, bitmap=(False,) * 12, is_no_chord=True)

    @classmethod
    def from_offsets(cls, root: int, offsets: Iterable[int], bass: int | None = None) -> "ChordSymbol":
        bitmap = [False] * 12
        for o in offsets:
            bitmap[o % 12] = True
        return cls(root=root % 12, bass=(root if bass is None else bass) % 12, bitmap=tuple(bitmap))

    def pitch_classes(self) -> frozenset[int]:
        """Absolute pitch classes sounded by this chord."""
        if self.is_no_chord:
            return frozenset()
        return frozenset((self.root + j) % 12 for j in range(12) if self.bitmap[j])


NO_CHORD = ChordSymbol.no_chord()


def parse_chord_label(text: str) -> ChordSymbol:
    """Parse ROOT[":"QUALITY]["/"BASS] or "N"; quality defaults to maj."""
    label = text.strip()
    if not label:
        raise ParseError("empty chord label")
    if label == "N":
        return NO_CHORD
    bass_token = None
    if "/" in label:
        label, bass_token = label.split("/", 1)
    if ":" in label:
        root_token, quality = label.split(":", 1)
    else:
        root_token, quality = label, "maj"
    root = parse_pitch_class(root_token)
    if quality not in QUALITY_OFFSETS:
        raise ParseError(f"unknown chord quality {quality!r} in {text!r}")
    bass = parse_pitch_class(bass_token) if bass_token is not None else root
    return ChordSymbol.from_offsets(root, QUALITY_OFFSETS[quality], bass=bass)


def chord_label(chord: ChordSymbol) -> str:
    """Render a ChordSymbol back to grammar text (bitmap must match a known quality)."""
    if chord.is_no_chord:
        return "N"
    offsets = tuple(sorted(j for j in range(12) if chord.bitmap[j]))
    for name, q_offsets in QUALITY_OFFSETS.items():
        if tuple(sorted(q_offsets)) == offsets:
            base = f"{PITCH_NAMES[chord.root]}:{name}"
            if chord.bass != chord.root:
                base += f"/{PITCH_NAMES[chord.bass]}"
            return base
    raise ParseError(f"bitmap {offsets} does not match any known quality")


def encode_chord_frame(chord: ChordSymbol) -> np.ndarray:
    """37-dim frame vector: root one-hot, bass one-hot, bitmap, no-chord flag."""
    vec = np.zeros(CHORD_DIM, dtype=np.float32)
    if chord.is_no_chord:
        vec[36] = 1.0
        return vec
    vec[chord.root] = 1.0
    vec[12 + chord.bass] = 1.0
    for j in range(12):
        if chord.bitmap[j]:
            vec[24 + j] = 1.0
    return vec


def decode_chord_frame(vec: np.ndarray) -> ChordSymbol:
    """Inverse of encode_chord_frame."""
    if vec.shape != (CHORD_DIM,):
        raise ParseError(f"chord frame must have {CHORD_DIM} entries, got {vec.shape}")
    if vec[36] > 0.5:
        return NO_CHORD
    root = int(np.argmax(vec[0:12]))
    bass = int(np.argmax(vec[12:24]))
    bitmap = tuple(bool(v > 0.5) for v in vec[24:36])
    return ChordSymbol(root=root, bass=bass, bitmap=bitmap)


def encode_chord_frames(chords: Sequence[ChordSymbol]) -> np.ndarray:
    return np.stack([encode_chord_frame(c) for c in chords]) if chords else np.zeros((0, CHORD_DIM), np.float32)


# ---------------------------------------------------------------------------
# annotation files and frame alignment
# ---------------------------------------------------------------------------

def frames_from_intervals(annotations: Sequence[tuple[float, float, str]],
                          frame_rate: float, n_frames: int) -> list[ChordSymbol]:
    """Assign each frame the label covering its midpoint; uncovered frames get N."""
    intervals = []
    for start, end, label in annotations:
        if not start < end:
            raise AnnotationError(f"interval start {start} is not before end {end}")
        intervals.append((float(start), float(end), parse_chord_label(label)))
    intervals.sort(key=lambda iv: iv[0])
    for (s0, e0, _), (s1, _, _) in zip(intervals, intervals[1:]):
        if s1 < e0 - 1e-9:
            raise AnnotationError(f"overlapping intervals at {s1:.6f}s (previous ends {e0:.6f}s)")
    out = []
    pos = 0
    for i in range(n_frames):
        mid = (i + 0.5) / frame_rate
        while pos < len(intervals) and intervals[pos][1] <= mid:
            pos += 1
        if pos < len(intervals) and intervals[pos][0] <= mid < intervals[pos][1]:
            out.append(intervals[pos][2])
        else:
            out.append(NO_CHORD)
    return out


def read_lab(path: str | Path) -> list[tuple[float, float, str]]:
    """Read `start<TAB>end<TAB>label` lines."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            start, end = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad interval bounds {parts[0]!r}/{parts[1]!r}") from None
        out.append((start, end, parts[2].strip()))
    return out


def write_lab(path: str | Path, annotations: Sequence[tuple[float, float, str]]) -> None:
    lines = [f"{s:.6f}\t{e:.6f}\t{label}" for s, e, label in annotations]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_note_events(path: str | Path) -> list[dict]:
    """Read one JSON object per line with onset_sec, offset_sec, pitch."""
    events = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        for key in ("onset_sec", "offset_sec", "pitch"):
            if key not in obj:
                raise ParseError(f"{path}:{lineno}: missing field {key!r}")
        events.append(obj)
    return events


def write_note_events(path: str | Path, events: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(ev) + "\n")


def piano_roll_from_notes(events: Sequence[dict], frame_rate: float, n_frames: int) -> np.ndarray:
    """(n_frames, 128) activity matrix; a pitch sounds in a frame if it covers the midpoint."""
    roll = np.zeros((n_frames, N_PITCHES), dtype=np.float32)
    mids = (np.arange(n_frames) + 0.5) / frame_rate
    for ev in events:
        pitch = int(ev["pitch"])
        if not 0 <= pitch < N_PITCHES:
            raise AnnotationError(f"pitch {pitch} out of range [0, {N_PITCHES})")
        onset, offset = float(ev["onset_sec"]), float(ev["offset_sec"])
        if not onset < offset:
            raise AnnotationError(f"note onset {onset} is not before offset {offset}")
        roll[(mids >= onset) & (mids < offset), pitch] = 1.0
    return roll


def read_token_lines(path: str | Path) -> list[np.ndarray]:
    """One sequence of space-separated integers per line."""
    seqs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            seqs.append(np.array([int(tok) for tok in line.split()], dtype=np.int64))
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-integer token") from None
    return seqs


def write_token_lines(path: str | Path, seqs: Iterable[np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in seqs:
            fh.write(" ".join(str(int(t)) for t in seq) + "\n")


# ---------------------------------------------------------------------------
# condition sequence and trainable condition parameters
# ---------------------------------------------------------------------------

@dataclass
class ConditionSequence:
    """Per-frame chord, piano-roll and acoustic channels plus mask flags."""
    chords: list[ChordSymbol]
    piano_roll: np.ndarray          # (T, 128)
    acoustic_tokens: np.ndarray     # (T,)
    midi_masked: np.ndarray         # (T,) bool
    acoustic_masked: np.ndarray     # (T,) bool
    frame_rate: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        n = len(self.chords)
        if self.piano_roll.shape != (n, N_PITCHES):
            raise AnnotationError(f"piano roll shape {self.piano_roll.shape} != ({n}, {N_PITCHES})")
        if self.acoustic_tokens.shape != (n,):
            raise AnnotationError(f"acoustic tokens shape {self.acoustic_tokens.shape} != ({n},)")
        if self.midi_masked.shape != (n,) or self.acoustic_masked.shape != (n,):
            raise AnnotationError("mask flag arrays must have one entry per frame")

    @property
    def n_frames(self) -> int:
        return len(self.chords)

    @classmethod
    def create(cls, chords: Sequence[ChordSymbol], piano_roll: np.ndarray,
               acoustic_tokens: np.ndarray, frame_rate: float = DEFAULT_FRAME_RATE,
               midi_masked: bool = False, acoustic_masked: bool = False) -> "ConditionSequence":
        n = len(chords)
        return cls(chords=list(chords),
                   piano_roll=np.asarray(piano_roll, dtype=np.float32),
                   acoustic_tokens=np.asarray(acoustic_tokens, dtype=np.int64),
                   midi_masked=np.full(n, midi_masked, dtype=bool),
                   acoustic_masked=np.full(n, acoustic_masked, dtype=bool),
                   frame_rate=frame_rate)


def apply_masking(seq: ConditionSequence, r: float, rng: np.random.Generator,
                  granularity: str = "track") -> ConditionSequence:
    """Randomly mask the MIDI and acoustic channels, each with probability r.

    "track" draws once per channel and masks every frame (the default: it is
    what lets inference drop whole tracks); "frame" draws per frame.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"mask rate must be in [0, 1], got {r}")
    n = seq.n_frames
    if granularity == "track":
        midi = np.full(n, rng.random() < r, dtype=bool)
        acoustic = np.full(n, rng.random() < r, dtype=bool)
    elif granularity == "frame":
        midi = rng.random(n) < r
        acoustic = rng.random(n) < r
    else:
        raise ValueError(f"unknown mask granularity {granularity!r}")
    return replace(seq, midi_masked=midi, acoustic_masked=acoustic)


class ConditionParams:
    """Trainable parameters of the joint condition embedding.

    w_p compresses the piano roll, w_a the frozen acoustic embedding; s_p/s_a
    are the learned mask vectors; z_pos is the positional term added to the
    61-dim pre-fusion vector; w_e[layer][head] projects it to head width.
    """

    def __init__(self, w_p: Parameter, w_a: Parameter, s_p: Parameter, s_a: Parameter,
                 z_pos: Parameter, w_e: list[list[Parameter]]):
        self.w_p = w_p
        self.w_a = w_a
        self.s_p = s_p
        self.s_a = s_a
        self.z_pos = z_pos
        self.w_e = w_e

    @classmethod
    def create(cls, rng: np.random.Generator, n_layers: int, n_heads: int, d_head: int,
               t_max: int, embed_dim: int, dtype=np.float32) -> "ConditionParams":
        def p(name, shape, std):
            return Parameter(rng.normal(0.0, std, size=shape).astype(dtype), name=name)

        # unit-order channels: one active pitch picks a single w_p row, the
        # acoustic row has |h| ~ sqrt(embed_dim), the fusion input is 61 wide;
        # the chord rows of the fusion matrices start louder and the positional
        # and mask vectors quieter, so the sparse chord one-hots are not buried
        # under frame-varying noise while the gates open up
        w_e = []
        for layer in range(n_layers):
            row = []
            for head in range(n_heads):
                w = p(f"cond.w_e.l{layer}.h{head}", (JOINT_DIM, d_head), JOINT_DIM ** -0.5)
                w.data[:CHORD_DIM] *= 3.0
                row.append(w)
            w_e.append(row)
        return cls(w_p=p("cond.w_p", (N_PITCHES, K1), 1.0),
                   w_a=p("cond.w_a", (embed_dim, K2), embed_dim ** -0.5),
                   s_p=p("cond.s_p", (K1,), 0.3),
                   s_a=p("cond.s_a", (K2,), 0.3),
                   z_pos=p("cond.z_pos", (t_max, JOINT_DIM), 0.3),
                   w_e=w_e)

    @property
    def t_max(self) -> int:
        return self.z_pos.shape[0]

    def parameters(self) -> list[Parameter]:
        out = [self.w_p, self.w_a, self.s_p, self.s_a, self.z_pos]
        for layer in self.w_e:
            out.extend(layer)
        return out


def project_piano_roll(roll: np.ndarray, w_p: Parameter) -> Tensor:
    """Compress one frame (128,) or a frame stack (T, 128) through w_p."""
    arr = np.atleast_2d(np.asarray(roll, dtype=w_p.dtype))
    return nm.matmul(Tensor(arr), w_p)


def project_acoustic(token_ids, frozen_embedding: Tensor, w_a: Parameter) -> Tensor:
    """Resolve token ids through the frozen embedding table, then compress through w_a."""
    ids = np.atleast_1d(np.asarray(token_ids, dtype=np.int64))
    h = nm.embedding_lookup(frozen_embedding, ids)
    return nm.matmul(h, w_a)


def _masked_channel(n: int, project, mask_vec: Parameter, masked: np.ndarray) -> Tensor:
    if masked.all():
        return nm.broadcast_rows(mask_vec, n)  # channel content never touched
    projected = project()
    if not masked.any():
        return projected
    keep = (~masked).astype(projected.dtype)[:, None]
    kept = nm.mul_const(projected, keep)
    filled = nm.mul_const(nm.broadcast_rows(mask_vec, n), 1.0 - keep)
    return nm.add(kept, filled)


def embed_condition(seq: ConditionSequence, params: ConditionParams,
                    frozen_embedding: Tensor) -> Tensor:
    """The shared (T, 61) pre-fusion embedding: [chord; midi; acoustic] + positional term."""
    n = seq.n_frames
    if n > params.t_max:
        raise CapacityError(f"sequence length {n} exceeds positional capacity {params.t_max}")
    chord = Tensor(encode_chord_frames(seq.chords).astype(params.w_p.dtype))
    z_p = _masked_channel(n, lambda: project_piano_roll(seq.piano_roll, params.w_p),
                          params.s_p, seq.midi_masked)
    z_a = _masked_channel(n, lambda: project_acoustic(seq.acoustic_tokens, frozen_embedding,
                                                      params.w_a),
                          params.s_a, seq.acoustic_masked)
    joint = nm.concat_cols([chord, z_p, z_a])
    return nm.add(joint, nm.slice_rows(params.z_pos, 0, n))


def fuse(seq: ConditionSequence, params: ConditionParams, frozen_embedding: Tensor,
         layer: int, head: int) -> Tensor:
    """Per-(layer, head) fused condition embedding, (T, d_head)."""
    return nm.matmul(embed_condition(seq, params, frozen_embedding), params.w_e[layer][head])


def fuse_all(joint: Tensor, params: ConditionParams, layer: int) -> list[Tensor]:
    """All head projections of one encoder layer from a precomputed joint embedding."""
    return [nm.matmul(joint, w) for w in params.w_e[layer]]
