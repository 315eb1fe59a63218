import hashlib
import subprocess
import sys
import time

import numpy as np
import pytest

from adalign.cli import main
from adalign.graph import CsbmSpec, load_domain, spec_to_text
from adalign.trainer import RECORD_FIELDS, read_metrics_log

SMALL = CsbmSpec(num_nodes=80, feature_dim=4, num_classes=2, p_in=0.15, p_out=0.03,
                 shift_translation=(1.0, 0.0, 0.0, 0.0), shift_p_out_delta=0.03, seed=2)
FAST = ["--epochs", "4", "--eval-every", "2", "--num-freqs", "64", "--hidden-dim", "8", "--emb-dim", "4",
        "--num-components", "2", "--quiet"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def data(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text(spec_to_text(SMALL))
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


def test_synth_deterministic(tmp_path, data):
    spec = tmp_path / "spec.txt"
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "again")]) == 0
    for rel in ("source/edges.txt", "source/features.csv", "target/labels.txt", "spec.txt"):
        assert digest(data / rel) == digest(tmp_path / "again" / rel)


def test_synth_null_shift(tmp_path):
    spec = tmp_path / "null.txt"
    spec.write_text(spec_to_text(CsbmSpec(num_nodes=1000, feature_dim=3, seed=4)))
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "d")]) == 0
    s, t = load_domain(tmp_path / "d" / "source"), load_domain(tmp_path / "d" / "target")
    gap = np.abs(s.features.mean(0) - t.features.mean(0)).max()
    # overall column means of two balanced samples: std about sqrt(2/N) plus class-mix noise
    assert gap < 3 * np.sqrt(2 / 1000) * 1.5


def test_synth_translation_column_means(tmp_path):
    shift = (2.0, -1.0, 0.0)
    spec = tmp_path / "tr.txt"
    spec.write_text(spec_to_text(CsbmSpec(num_nodes=2000, feature_dim=3, shift_translation=shift, seed=6)))
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "d")]) == 0
    s, t = load_domain(tmp_path / "d" / "source"), load_domain(tmp_path / "d" / "target")
    se = np.sqrt(2.0 / 2000) * 1.5
    assert np.all(np.abs(t.features.mean(0) - s.features.mean(0) - np.array(shift)) < 3 * se)


def test_synth_bad_spec_names_field(tmp_path, capsys):
    spec = tmp_path / "bad.txt"
    spec.write_text("num_nodes=10\np_in=0.1\np_out=0.5\n")
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "d")]) == 2
    assert "p_in" in capsys.readouterr().err


def test_train_lambda_zero_logs_alignment(tmp_path, data):
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(out), "--lambda", "0", *FAST]) == 0
    recs = read_metrics_log(out / "metrics.log")
    assert [r.epoch for r in recs] == [0, 2, 4]
    assert all(np.isfinite(r.loss_align) and r.loss_align > 0 for r in recs)
    assert "lam=0.0" in (out / "manifest.txt").read_text()
    assert (out / "checkpoint.bin").is_file()


def test_sampler_manifests_differ_only_in_sampler(tmp_path, data):
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(out), "--sampler", "random", *FAST]) == 0
    first = (out / "manifest.txt").read_text().splitlines()
    assert main(["train", "--data", str(data), "--out", str(out), "--sampler", "adaptive", *FAST]) == 0
    second = (out / "manifest.txt").read_text().splitlines()
    diff = [(a, b) for a, b in zip(first, second) if a != b]
    assert len(first) == len(second)
    assert diff == [("sampler=random", "sampler=adaptive")]


def test_identical_runs_byte_identical(tmp_path, data):
    for name in ("a", "b"):
        assert main(["train", "--data", str(data), "--out", str(tmp_path / name), *FAST]) == 0
    for f in ("metrics.log", "checkpoint.bin"):
        assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f)
    manifest = [ln for ln in (tmp_path / "a" / "manifest.txt").read_text().splitlines() if not ln.startswith("out_dir=")]
    other = [ln for ln in (tmp_path / "b" / "manifest.txt").read_text().splitlines() if not ln.startswith("out_dir=")]
    assert manifest == other


def test_config_precedence(tmp_path, data):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("kappa=0.3\nepochs=2\nlambda=0.5\n")
    out = tmp_path / "run"
    args = ["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--kappa", "0.4",
            "--num-freqs", "64", "--hidden-dim", "8", "--emb-dim", "4", "--quiet"]
    assert main(args) == 0
    manifest = (out / "manifest.txt").read_text().splitlines()
    assert "kappa=0.4" in manifest and "epochs=2" in manifest and "lam=0.5" in manifest
    assert "lr_model=0.003" in manifest  # default materialised
    assert any(ln.startswith("config=sha256:") for ln in manifest)


def test_out_dir_env_override(tmp_path, data, monkeypatch):
    monkeypatch.setenv("ADALIGN_OUT_DIR", str(tmp_path / "env_out"))
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "flag_out"), *FAST]) == 0
    assert (tmp_path / "env_out" / "metrics.log").is_file()
    assert not (tmp_path / "flag_out").exists()


def test_train_missing_inputs(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o"), *FAST]) == 1
    assert "missing input file" in capsys.readouterr().err


def test_train_bad_config_is_usage_error(tmp_path, data):
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "o"), "--kappa", "1.5"]) == 2
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "o"), "--epochs", "many"]) == 2


def test_train_abort_on_non_finite(tmp_path, data, capsys):
    feats = data / "source" / "features.csv"
    rows = feats.read_text().splitlines()
    rows[0] = ",".join(["nan"] * 4)
    feats.write_text("\n".join(rows) + "\n")
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(out), *FAST]) == 1
    assert "aborted" in capsys.readouterr().err
    assert (out / "aborted.txt").read_text().startswith("epoch:")


def test_eval_reproduces_logged_f1_and_keeps_checkpoint(tmp_path, data, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(out), *FAST]) == 0
    before = digest(out / "checkpoint.bin")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--data", str(data),
                 "--out", str(out), "--num-freqs", "256"]) == 0
    printed = capsys.readouterr().out.splitlines()
    last = read_metrics_log(out / "metrics.log")[-1]
    fields = dict(p.split(":", 1) for p in printed[0].split())
    assert float(fields["micro_f1"]) == last.micro_f1
    assert float(fields["macro_f1"]) == last.macro_f1
    assert printed[1].startswith("nsd:")
    assert digest(out / "checkpoint.bin") == before
    assert (out / "eval_target.csv").read_text().startswith("micro_f1,macro_f1,nsd,")


def test_eval_dimension_mismatch(tmp_path, data, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(out), *FAST]) == 0
    other = tmp_path / "other.txt"
    other.write_text(spec_to_text(CsbmSpec(num_nodes=30, feature_dim=5, seed=1)))
    assert main(["synth", "--spec", str(other), "--out", str(tmp_path / "d5")]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--data", str(tmp_path / "d5")]) == 1
    assert "features" in capsys.readouterr().err


def test_verify_suites(capsys):
    assert main(["verify", "decomposition"]) == 0
    text = capsys.readouterr().out
    assert "[PASS]" in text and "<= 1e-10" in text
    assert main(["verify", "gradcheck"]) == 0
    assert "[FAIL]" not in capsys.readouterr().out


def test_verify_unknown_suite():
    assert main(["verify", "everything"]) == 2


def test_export_curves(tmp_path, data):
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(out), *FAST]) == 0
    csv_path = tmp_path / "curves.csv"
    assert main(["export-curves", str(out / "metrics.log"), str(csv_path)]) == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0] == ",".join(RECORD_FIELDS) and len(lines) == 4
    recs = read_metrics_log(out / "metrics.log")
    for rec, line in zip(recs, lines[1:]):
        cells = dict(zip(RECORD_FIELDS, line.split(",")))
        for name in ("loss_source", "loss_align", "micro_f1", "macro_f1"):
            assert abs(float(cells[name]) - getattr(rec, name)) <= 1e-12


def test_export_curves_empty_and_malformed(tmp_path, capsys):
    empty = tmp_path / "empty.log"
    empty.write_text("")
    assert main(["export-curves", str(empty), str(tmp_path / "e.csv")]) == 0
    assert (tmp_path / "e.csv").read_text() == ",".join(RECORD_FIELDS) + "\n"
    bad = tmp_path / "bad.log"
    bad.write_text("epoch:0 loss_source:1.0\n")
    assert main(["export-curves", str(bad), str(tmp_path / "b.csv")]) == 1
    assert "line 1" in capsys.readouterr().err


def test_console_script_usage_exit_code():
    proc = subprocess.run([sys.executable, "-m", "adalign.cli", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == 2


@pytest.mark.slow
def test_default_run_on_canonical_task(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data)]) == 0
    out = tmp_path / "run"
    t0 = time.perf_counter()
    assert main(["train", "--data", str(data), "--out", str(out), "--quiet"]) == 0
    elapsed = time.perf_counter() - t0
    # the paired experiment allows 5 minutes for ten such runs
    assert elapsed < 30.0, elapsed
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--data", str(data), "--domain", "source"]) == 0
    fields = dict(p.split(":", 1) for p in capsys.readouterr().out.splitlines()[0].split())
    assert float(fields["micro_f1"]) > 0.9
