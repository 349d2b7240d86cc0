"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The synthetic
controllability criteria (5 and 6) share one trained reference model built by
a module-scoped fixture; everything else is independent and fast.
"""

import hashlib
import itertools
import time

import numpy as np
import pytest

from cmad import numerics as nm
from cmad import representation as rep
from cmad.cli import build_gradcheck_loss, main
from cmad.evaluation import (
    SyntheticSpec,
    beat_f_measure,
    chord_recall,
    detect_drum_frames,
    run_protocol,
    synthesize_dataset,
    synthesize_example,
    uniform_chance_level,
)
from cmad.model import (
    AdaptedModel,
    BaseConfig,
    base_logits,
    build_adapted,
    build_base,
    count_parameters,
    forward_logits,
)
from cmad.numerics import Adam
from cmad.representation import decode_chord_frame, encode_chord_frame, parse_chord_label
from cmad.training import TrainConfig, fine_tune, pretrain_base, training_step

GRADCHECK_CONFIG = BaseConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=8,
                              t_max=8, ffn_multiplier=2, use_cross_attention=True,
                              prompt_vocab=4)

FULL_SCALE = BaseConfig(n_layers=48, d_model=2048, n_heads=32, vocab_size=2048,
                        t_max=1000, ffn_multiplier=4, use_cross_attention=True,
                        prompt_vocab=4)

# reference toy configuration: N=4, d_model=64, n_heads=4, L=2, V=64, T=128,
# ~200 training examples, one desktop CPU
REFERENCE_BASE = BaseConfig(n_layers=4, d_model=64, n_heads=4, vocab_size=64, t_max=128)
REFERENCE_SPEC = SyntheticSpec(vocab_size=64, chord_period=8, pulse_period=16,
                               seq_frames=128, n_train=200, n_val=20, n_test=8)
REFERENCE_L = 2
PRETRAIN_EXAMPLES = 1000
PRETRAIN_EPOCHS = 10
FINETUNE = TrainConfig(epochs=150, warmup_epochs=2, base_lr=2e-3, batch_size=8,
                       mask_rate=0.4, seed=9)


def _random_tiny_model(rng):
    n_layers = int(rng.integers(1, 4))
    n_heads = int(rng.integers(1, 3))
    d_head = int(rng.integers(2, 6))
    cfg = BaseConfig(n_layers=n_layers, d_model=n_heads * d_head, n_heads=n_heads,
                     vocab_size=int(rng.integers(6, 16)), t_max=8,
                     ffn_multiplier=2, use_cross_attention=bool(rng.integers(0, 2)),
                     prompt_vocab=4)
    l_layers = int(rng.integers(1, n_layers + 1))
    return build_adapted(cfg, l_layers, seed=int(rng.integers(0, 2**31)))


def _random_condition(cfg, n, rng):
    chords = [rep.ChordSymbol.from_offsets(int(rng.integers(0, 12)), (0, 4, 7))
              if rng.random() > 0.2 else rep.NO_CHORD for _ in range(n)]
    roll = (rng.random((n, 128)) < 0.05).astype(np.float32)
    acoustic = rng.integers(0, cfg.vocab_size, size=n)
    seq = rep.ConditionSequence.create(chords, roll, acoustic)
    seq.midi_masked[:] = rng.random(n) < 0.3
    seq.acoustic_masked[:] = rng.random(n) < 0.3
    return seq


def test_criterion_01_zero_gate_identity():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(100):
        model = _random_tiny_model(rng)
        n = int(rng.integers(2, 8))
        seq = _random_condition(model.config, n, rng)
        tokens = rng.integers(0, model.config.vocab_size, size=n)
        prompt = int(rng.integers(0, model.config.prompt_vocab))
        adapted = forward_logits(model, tokens, seq, prompt).data
        frozen = base_logits(model, tokens, prompt).data
        worst = max(worst, float(np.max(np.abs(adapted - frozen))))
    assert worst < 1e-6, f"zero-gate identity violated: max abs diff {worst:.2e}"
    print(f"\nACCEPTANCE 1 PASS: zero-gate identity over 100 triples "
          f"(max abs diff {worst:.2e} < 1e-6)")


def test_criterion_02_gradient_fidelity():
    start = time.perf_counter()
    base = build_base(GRADCHECK_CONFIG, seed=0, dtype=np.float64)
    model = AdaptedModel(base, l_layers=2, seed=1, dtype=np.float64)
    loss_fn = build_gradcheck_loss(model, n_frames=6, seed=0)
    report = nm.finite_diff_check(loss_fn, model.trainable_parameters(), epsilon=1e-5)
    elapsed = time.perf_counter() - start
    classes = {"cond.w_p", "cond.w_a", "cond.s_p", "cond.s_a", "cond.z_pos", "enc.x1"}
    assert classes <= set(report.per_param), "missing parameter classes"
    assert any(name.startswith("cond.w_e.") for name in report.per_param)
    assert any(name.startswith("adaptor.gate.") for name in report.per_param)
    assert report.max_rel_error < 1e-4, report.format_table()
    assert elapsed < 60.0, f"gradcheck took {elapsed:.1f}s"
    print(f"\nACCEPTANCE 2 PASS: gradient fidelity max rel err "
          f"{report.max_rel_error:.2e} < 1e-4 over every trainable class "
          f"({elapsed:.1f}s < 60s)")


def test_criterion_03_freezing_discipline():
    cfg = BaseConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=64, t_max=32,
                     ffn_multiplier=2)
    model = build_adapted(cfg, l_layers=1, seed=3)
    spec = SyntheticSpec(vocab_size=64, chord_period=16, pulse_period=8, seq_frames=32)
    batch = [synthesize_example(spec, np.random.default_rng(i)).to_training_example()
             for i in range(4)]

    def checksums():
        return {p.name: hashlib.sha256(p.data.tobytes()).hexdigest()
                for p in model.parameters() if not p.trainable}

    before = checksums()
    opt = Adam(model.trainable_parameters(), lr=2e-3)
    rng = np.random.default_rng(0)
    config = TrainConfig(batch_size=4, mask_rate=0.4)
    for _ in range(500):
        training_step(model, batch, opt, 2e-3, rng, config)
    after = checksums()
    assert before == after
    print(f"\nACCEPTANCE 3 PASS: {len(before)} frozen parameter checksums unchanged "
          f"after 500 training steps")


def test_criterion_04_chord_encoding_golden_suite():
    table1 = {
        "C:maj": (0, 0, {0, 4, 7}),
        "D:maj": (2, 2, {0, 4, 7}),
        "D:min": (2, 2, {0, 3, 7}),
    }
    for label, (root, bass, offsets) in table1.items():
        c = parse_chord_label(label)
        assert (c.root, c.bass) == (root, bass)
        assert {j for j in range(12) if c.bitmap[j]} == offsets
    c_maj = encode_chord_frame(parse_chord_label("C:maj"))
    assert set(np.flatnonzero(c_maj).tolist()) == {0, 12, 24, 28, 31}
    n_checked = 0
    for quality, root, bass in itertools.product(rep.QUALITY_OFFSETS, range(12), range(12)):
        label = f"{rep.PITCH_NAMES[root]}:{quality}/{rep.PITCH_NAMES[bass]}"
        chord = parse_chord_label(label)
        assert decode_chord_frame(encode_chord_frame(chord)) == chord
        n_checked += 1
    assert n_checked == 9 * 12 * 12
    print(f"\nACCEPTANCE 4 PASS: golden chord rows plus {n_checked} grammar "
          f"combinations roundtrip exactly")


@pytest.fixture(scope="module")
def reference_run():
    start = time.perf_counter()
    data = synthesize_dataset(REFERENCE_SPEC, np.random.default_rng(1234))
    train = [ex.to_training_example() for ex in data.train]
    val = [ex.to_training_example() for ex in data.val]

    corpus_rng = np.random.default_rng(777)
    corpus = [synthesize_example(REFERENCE_SPEC, corpus_rng).to_training_example()
              for _ in range(PRETRAIN_EXAMPLES)]
    base = build_base(REFERENCE_BASE, seed=7)
    pretrain_base(base, corpus, epochs=PRETRAIN_EPOCHS, lr=3e-3, batch_size=16, seed=7)

    model = AdaptedModel(base, REFERENCE_L, seed=8)
    result = fine_tune(model, train, FINETUNE, val_examples=val)
    model.load_state(result.best_state)

    chance = uniform_chance_level(REFERENCE_SPEC, data.test,
                                  np.random.default_rng(0), trials=30)
    report = run_protocol(model, data.test, REFERENCE_SPEC,
                          samples_per_schedule=2, seed=5)
    elapsed = time.perf_counter() - start
    return {"model": model, "report": report, "chance": chance,
            "elapsed": elapsed, "best_val": result.best_val_loss}


def test_criterion_05_synthetic_controllability(reference_run):
    s = reference_run["report"].groups
    chance = reference_run["chance"]
    elapsed = reference_run["elapsed"]
    assert elapsed < 30 * 60, f"reference run took {elapsed:.0f}s"
    assert s["full"].chord_recall_root >= 0.8, \
        f"(a) full root recall {s['full'].chord_recall_root:.3f} < 0.8"
    assert s["baseline"].chord_recall_root <= chance + 0.1, \
        f"(b) baseline {s['baseline'].chord_recall_root:.3f} above chance {chance:.3f}+0.1"
    assert s["full"].chord_recall_root >= s["chord-only"].chord_recall_root, \
        f"(c) full {s['full'].chord_recall_root:.3f} < chord-only " \
        f"{s['chord-only'].chord_recall_root:.3f}"
    beat_floor = s["baseline"].beat_f1 + 0.3
    assert s["drums-only"].beat_f1 >= beat_floor and s["full"].beat_f1 >= beat_floor, \
        f"(d) beat F1 drums {s['drums-only'].beat_f1:.3f}/{s['full'].beat_f1:.3f} " \
        f"vs floor {beat_floor:.3f}"
    print(f"\nACCEPTANCE 5 PASS: full root {s['full'].chord_recall_root:.3f} >= 0.8; "
          f"baseline {s['baseline'].chord_recall_root:.3f} <= chance {chance:.3f}+0.1; "
          f"full >= chord-only ({s['chord-only'].chord_recall_root:.3f}); "
          f"beat F1 {s['drums-only'].beat_f1:.3f}/{s['full'].beat_f1:.3f} vs baseline "
          f"{s['baseline'].beat_f1:.3f}+0.3 ({elapsed:.0f}s < 30min)")


def test_criterion_06_masking_robustness(reference_run):
    s = reference_run["report"].groups
    margin = s["chord-only"].chord_recall_root - s["baseline"].chord_recall_root
    assert margin >= 0.2, \
        f"chord-only {s['chord-only'].chord_recall_root:.3f} vs baseline " \
        f"{s['baseline'].chord_recall_root:.3f}: margin {margin:.3f} < 0.2"
    print(f"\nACCEPTANCE 6 PASS: with MIDI and drums absent the r=0.4-trained model "
          f"beats the unconditioned baseline by {margin:.3f} >= 0.2 on root recall")


def test_criterion_07_parameter_accounting():
    fractions = {l: count_parameters(FULL_SCALE, l)["fraction"] for l in (12, 24, 36, 48)}
    assert fractions[48] < 0.04
    values = [fractions[l] for l in (12, 24, 36, 48)]
    assert all(b > a for a, b in zip(values, values[1:]))
    print(f"\nACCEPTANCE 7 PASS: full-scale trainable fraction "
          f"{', '.join(f'L={l}: {100 * fractions[l]:.2f}%' for l in (12, 24, 36, 48))} "
          f"(strictly increasing, < 4% at L=48)")


def test_criterion_08_metric_unit_suite():
    spec = SyntheticSpec()
    # oracle-consistent surfaces score 1.0; uniform surfaces sit at chance
    ex = synthesize_example(spec, np.random.default_rng(0))
    assert chord_recall(ex.tokens, ex.chord_frames, "root", spec) == 1.0
    assert chord_recall(ex.tokens, ex.chord_frames, "full", spec) == 1.0
    assert beat_f_measure(detect_drum_frames(ex.tokens, spec), ex.pulse_frames) == 1.0
    assert beat_f_measure([11, 29], [10, 20, 30], 3) == pytest.approx(0.8)
    assert beat_f_measure([14, 24, 34], [10, 20, 30], 3) == 0.0
    assert beat_f_measure([], []) == 1.0
    assert beat_f_measure([], [1]) == 0.0
    rng = np.random.default_rng(1)
    for trial in range(1000):
        n_seg = int(rng.integers(1, 5))
        period = int(rng.integers(8, 17))
        chords = []
        for _ in range(n_seg):
            chords.extend([synthesize_example(
                SyntheticSpec(seq_frames=8, chord_period=8, pulse_period=8),
                rng).chord_frames[0]] * period)
        tokens = rng.integers(0, spec.vocab_size, size=len(chords))
        root = chord_recall(tokens, chords, "root", spec)
        full = chord_recall(tokens, chords, "full", spec)
        assert full <= root
    print("\nACCEPTANCE 8 PASS: metric examples exact; full <= root on 1000 "
          "random instances")


def test_criterion_09_causality_property():
    rng = np.random.default_rng(7)
    trials = 0
    while trials < 1000:
        model = _random_tiny_model(rng)
        for g in (model.adaptor.gates if model.adaptor else []):
            g.data[:] = float(rng.normal())
        n = int(rng.integers(3, 8))
        seq = _random_condition(model.config, n, rng)
        tokens = rng.integers(0, model.config.vocab_size, size=n)
        ref = forward_logits(model, tokens, seq).data.copy()
        for _ in range(20):
            t = int(rng.integers(1, n))
            perturbed = tokens.copy()
            perturbed[t] = int(rng.integers(0, model.config.vocab_size))
            out = forward_logits(model, perturbed, seq).data
            assert np.max(np.abs(out[:t] - ref[:t])) <= 1e-6
            trials += 1
    print(f"\nACCEPTANCE 9 PASS: token causality held over {trials} perturbation trials")


ACCEPTANCE_RUN_CONFIG = """
n_layers=2
d_model=16
n_heads=2
vocab_size=64
t_max=32
ffn_multiplier=2
L=1
epochs=2
warmup_epochs=1
batch_size=4
seed=11
segment_frames=32
pretrain_epochs=1
pretrain_examples=8
pretrain_batch_size=4
eval_schedules=1
eval_samples=1
chord_period=16
pulse_period=8
seq_frames=32
n_train=6
n_val=2
n_test=2
"""


def test_criterion_10_reproducibility(tmp_path):
    cfg_path = tmp_path / "synth.cfg"
    cfg_path.write_text(ACCEPTANCE_RUN_CONFIG, encoding="utf-8")
    data_dir = tmp_path / "data"
    assert main(["synth-data", "--config", str(cfg_path), "--out", str(data_dir)]) == 0
    artifacts = []
    for run in ("a", "b"):
        out_dir = tmp_path / f"run_{run}"
        run_cfg = tmp_path / f"{run}.cfg"
        run_cfg.write_text(ACCEPTANCE_RUN_CONFIG +
                           f"dataset={data_dir}\nout_dir={out_dir}\n", encoding="utf-8")
        assert main(["train", "--config", str(run_cfg)]) == 0
        artifacts.append(((out_dir / "model.ckpt").read_bytes(),
                          (out_dir / "metrics.csv").read_bytes()))
    assert artifacts[0][0] == artifacts[1][0], "checkpoints differ between runs"
    assert artifacts[0][1] == artifacts[1][1], "metric CSVs differ between runs"
    print("\nACCEPTANCE 10 PASS: two seeded train runs produced byte-identical "
          "checkpoints and metric CSVs")
