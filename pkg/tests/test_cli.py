import json

from cmad.cli import main

TINY_CONFIG = """
n_layers=2
d_model=16
n_heads=2
vocab_size=64
t_max=32
ffn_multiplier=2
L=1
epochs=2
warmup_epochs=1
base_lr=2e-3
batch_size=4
mask_rate=0.4
seed=3
segment_frames=32
pretrain_epochs=1
pretrain_lr=3e-3
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


def write_config(tmp_path, extra="", name="run.cfg"):
    path = tmp_path / name
    path.write_text(TINY_CONFIG + extra, encoding="utf-8")
    return str(path)


def synth(tmp_path, force=False):
    cfg = write_config(tmp_path)
    data_dir = tmp_path / "data"
    argv = ["synth-data", "--config", cfg, "--out", str(data_dir)]
    if force:
        argv.append("--force")
    assert main(argv) == 0
    return cfg, data_dir


def trained_run(tmp_path):
    cfg, data_dir = synth(tmp_path)
    out_dir = tmp_path / "run"
    cfg2 = write_config(tmp_path, extra=f"dataset={data_dir}\nout_dir={out_dir}\n",
                        name="train.cfg")
    assert main(["train", "--config", cfg2]) == 0
    return cfg2, data_dir, out_dir


# ---------------------------------------------------------------------------
# synth-data
# ---------------------------------------------------------------------------

def test_synth_data_manifest_counts(tmp_path):
    _, data_dir = synth(tmp_path)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert [len(manifest["splits"][s]) for s in ("train", "val", "test")] == [6, 2, 2]
    assert (data_dir / "train_0000.lab").exists()
    assert (data_dir / "train_0000.notes.jsonl").exists()
    assert (data_dir / "train_0000.drums.tok").exists()


def test_synth_data_deterministic_and_guarded(tmp_path):
    _, data_dir = synth(tmp_path)
    first = {p.name: p.read_bytes() for p in sorted(data_dir.iterdir())}
    cfg = write_config(tmp_path)
    assert main(["synth-data", "--config", cfg, "--out", str(data_dir)]) == 2  # no --force
    assert main(["synth-data", "--config", cfg, "--out", str(data_dir), "--force"]) == 0
    second = {p.name: p.read_bytes() for p in sorted(data_dir.iterdir())}
    assert first == second


def test_synth_data_rejects_unknown_key(tmp_path):
    cfg = write_config(tmp_path, extra="not_a_key=1\n")
    assert main(["synth-data", "--config", cfg, "--out", str(tmp_path / "d")]) == 2


def test_synth_data_unwritable_path(tmp_path):
    cfg = write_config(tmp_path)
    blocker = tmp_path / "blocked"
    blocker.write_text("file, not a directory")
    assert main(["synth-data", "--config", cfg, "--out", str(blocker / "sub")]) == 2


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_writes_artifacts(tmp_path):
    _, _, out_dir = trained_run(tmp_path)
    for name in ("model.ckpt", "model.cfg", "metrics.csv", "run_config.txt", "base.ckpt"):
        assert (out_dir / name).exists(), name
    header = (out_dir / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("epoch,step,loss,lr,chord_recall_root,chord_recall_full,beat_f1,gate_l")
    assert "dataset=" in (out_dir / "run_config.txt").read_text()


def test_train_missing_dataset_exits_2(tmp_path):
    cfg = write_config(tmp_path, extra=f"dataset={tmp_path / 'nope'}\n")
    assert main(["train", "--config", cfg]) == 2


def test_train_refuses_overwrite_without_force(tmp_path):
    cfg2, _, _ = trained_run(tmp_path)
    assert main(["train", "--config", cfg2]) == 2
    assert main(["train", "--config", cfg2, "--force"]) == 0


def test_train_reproducible_and_resumable(tmp_path):
    cfg, data_dir = synth(tmp_path)
    outs = []
    for run in ("a", "b"):
        out_dir = tmp_path / f"run_{run}"
        cfg_run = write_config(tmp_path, extra=f"dataset={data_dir}\nout_dir={out_dir}\n",
                               name=f"{run}.cfg")
        assert main(["train", "--config", cfg_run]) == 0
        outs.append(out_dir)
    assert (outs[0] / "model.ckpt").read_bytes() == (outs[1] / "model.ckpt").read_bytes()
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()

    resumed = []
    for run in ("c", "d"):
        out_dir = tmp_path / f"run_{run}"
        cfg_run = write_config(
            tmp_path, extra=f"dataset={data_dir}\nout_dir={out_dir}\n"
                            f"base_checkpoint={outs[0] / 'base.ckpt'}\n",
            name=f"{run}.cfg")
        assert main(["train", "--config", cfg_run, "--checkpoint",
                     str(outs[0] / "model.ckpt")]) == 0
        resumed.append((out_dir / "metrics.csv").read_bytes())
    assert resumed[0] == resumed[1]


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def test_generate_chords_only_and_full(tmp_path):
    _, data_dir, out_dir = trained_run(tmp_path)
    ckpt = str(out_dir / "model.ckpt")
    out_tok = tmp_path / "gen.tok"
    assert main(["generate", "--checkpoint", ckpt, "--chords", str(data_dir / "test_0000.lab"),
                 "--out", str(out_tok), "--seed", "1"]) == 0
    tokens = out_tok.read_text().split()
    assert len(tokens) == 32  # chord chart spans 32 frames at 50 Hz

    out_full = tmp_path / "gen_full.tok"
    assert main(["generate", "--checkpoint", ckpt,
                 "--chords", str(data_dir / "test_0000.lab"),
                 "--midi", str(data_dir / "test_0000.notes.jsonl"),
                 "--drums", str(data_dir / "test_0000.drums.tok"),
                 "--out", str(out_full), "--seed", "1"]) == 0
    assert len(out_full.read_text().split()) == 32


def test_generate_seeded_bit_reproducible(tmp_path):
    _, data_dir, out_dir = trained_run(tmp_path)
    ckpt = str(out_dir / "model.ckpt")
    outputs = []
    for name in ("g1.tok", "g2.tok"):
        out = tmp_path / name
        assert main(["generate", "--checkpoint", ckpt,
                     "--chords", str(data_dir / "test_0001.lab"),
                     "--out", str(out), "--seed", "9"]) == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]


def test_generate_malformed_lab_names_line(tmp_path, capsys):
    _, _, out_dir = trained_run(tmp_path)
    bad = tmp_path / "bad.lab"
    bad.write_text("0.0\t0.5\tC:maj\ngarbage line\n", encoding="utf-8")
    code = main(["generate", "--checkpoint", str(out_dir / "model.ckpt"),
                 "--chords", str(bad), "--out", str(tmp_path / "x.tok")])
    assert code == 2
    assert ":2" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_writes_report(tmp_path, capsys):
    _, data_dir, out_dir = trained_run(tmp_path)
    report_csv = tmp_path / "report.csv"
    assert main(["eval", "--checkpoint", str(out_dir / "model.ckpt"),
                 "--dataset", str(data_dir), "--samples", "1",
                 "--groups", "chord-only,full", "--out", str(report_csv)]) == 0
    lines = report_csv.read_text().strip().splitlines()
    assert lines[0] == "group,chord_recall_root,chord_recall_full,beat_f1,n_samples"
    names = [line.split(",")[0] for line in lines[1:]]
    assert names == ["chord-only", "full", "baseline"]
    assert "chord-only" in capsys.readouterr().out


def test_eval_unknown_group_exits_2(tmp_path):
    _, data_dir, out_dir = trained_run(tmp_path)
    assert main(["eval", "--checkpoint", str(out_dir / "model.ckpt"),
                 "--dataset", str(data_dir), "--groups", "woops"]) == 2


# ---------------------------------------------------------------------------
# count-params, gates, gradcheck
# ---------------------------------------------------------------------------

def test_count_params_full_scale_table(tmp_path, capsys):
    assert main(["count-params", "--full-scale", "--L", "12,24,36,48"]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.strip() and not l.startswith("   L")]
    assert len(lines) == 4
    fractions = [float(l.split()[-1].rstrip("%")) for l in lines]
    assert fractions == sorted(fractions)
    assert fractions[-1] < 4.0


def test_gates_extracts_trajectories(tmp_path):
    _, _, out_dir = trained_run(tmp_path)
    gates_csv = tmp_path / "gates.csv"
    assert main(["gates", "--metrics-csv", str(out_dir / "metrics.csv"),
                 "--out", str(gates_csv)]) == 0
    lines = gates_csv.read_text().strip().splitlines()
    assert lines[0].startswith("epoch,gate_l")
    assert len(lines) == 3  # header + 2 epochs


def test_gradcheck_default_config_passes(tmp_path, capsys):
    assert main(["gradcheck", "--seed", "0", "--frames", "4"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    assert "cond.w_p" in out
