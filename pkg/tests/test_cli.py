import csv
import json

import numpy as np
import pytest

from hamlet.cli import gradcheck_blocks, main
from hamlet.config import RunConfig
from hamlet.model import load_checkpoint

TWO_MODALITIES = [{"name": "imu", "kind": "vector", "dims": 3}, {"name": "emg", "kind": "vector", "dims": 4}]


def write_config(path, epochs=3, lr=3e-3, **model):
    cfg = {
        "model": {"embed_dim": 8, "segments": 2, **model},
        "train": {"epochs": epochs, "batch_size": 4, "lr": lr, "t0_epochs": 2},
        "data": {"synthetic": {"n_classes": 2, "modalities": TWO_MODALITIES, "n_frames": 12, "n_segments": 2,
                               "n_actors": 2, "samples_per_class": 3}, "synthetic_seed": 0},
    }
    path.write_text(json.dumps(cfg))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_writes_checkpoint_history_and_config(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json")
    assert run("train", "--config", cfg, "--out", tmp_path / "run") == 0
    out = tmp_path / "run"
    assert (out / "model.ckpt").exists() and (out / "config.json").exists()
    rows = read_rows(out / "history.csv")
    assert list(rows[0]) == ["epoch", "step", "lr", "train_loss", "train_acc"]
    assert float(rows[-1]["train_loss"]) < float(rows[0]["train_loss"])
    effective = json.loads((out / "config.json").read_text())
    assert [m["name"] for m in effective["model"]["modalities"]] == ["imu", "emg"]
    assert effective["model"]["n_classes"] == 2 and effective["out"] == str(out)


def test_runs_are_bit_identical_and_config_reloads(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    run("train", "--config", cfg, "--seed", 4, "--out", tmp_path / "a")
    run("train", "--config", cfg, "--seed", 4, "--out", tmp_path / "b")
    run("train", "--config", tmp_path / "a" / "config.json", "--out", tmp_path / "c")
    for name in ("model.ckpt", "history.csv"):
        ref = (tmp_path / "a" / name).read_bytes()
        assert (tmp_path / "b" / name).read_bytes() == ref
        assert (tmp_path / "c" / name).read_bytes() == ref
    run("train", "--config", cfg, "--seed", 5, "--out", tmp_path / "d")
    assert (tmp_path / "d" / "model.ckpt").read_bytes() != (tmp_path / "a" / "model.ckpt").read_bytes()


def test_flags_override_config(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    assert run("train", "--config", cfg, "--out", tmp_path / "r", "--variant", "usa", "--fusion", "SUM",
               "--uat-heads", 2, "--epochs", 1) == 0
    eff = RunConfig.load(tmp_path / "r" / "config.json")
    assert (eff.model.variant, eff.model.fusion, eff.model.uat_heads, eff.train.epochs) == ("usa", "SUM", 2, 1)
    model, _, _ = load_checkpoint(tmp_path / "r" / "model.ckpt")
    assert model.mat is None and model.unimodal["imu"].heads == 2


def test_eval_memorized_toy_set_is_perfect(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", epochs=40, lr=1e-2)
    assert run("train", "--config", cfg, "--out", tmp_path / "r") == 0
    assert run("eval", tmp_path / "r" / "model.ckpt") == 0
    report = json.loads((tmp_path / "r" / "metrics.json").read_text())
    assert report["accuracy"] == 100.0 and report["macro_f1"] == 100.0
    assert np.sum(report["confusion"]) == 12


def test_eval_on_generated_manifest(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    assert run("generate", "--config", cfg, "--out", tmp_path / "data", "--seed", 0) == 0
    assert run("train", "--config", cfg, "--data", tmp_path / "data" / "manifest.json", "--out", tmp_path / "r") == 0
    assert run("eval", tmp_path / "r" / "model.ckpt", "--data", tmp_path / "data" / "manifest.json",
               "--out", tmp_path / "ev") == 0
    assert json.loads((tmp_path / "ev" / "metrics.json").read_text())["confusion"]


def test_bad_heads_exit_2_names_divisibility(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", embed_dim=256, uat_heads=3)
    assert run("train", "--config", cfg, "--out", tmp_path / "r") == 2
    assert "divisible" in capsys.readouterr().err


def test_dropout_range_and_override(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", epochs=1, dropout_encoder=0.6)
    assert run("train", "--config", cfg, "--out", tmp_path / "r") == 2
    assert "--allow-any-dropout" in capsys.readouterr().err
    assert run("train", "--config", cfg, "--out", tmp_path / "r", "--allow-any-dropout") == 0


def test_unknown_config_key_and_missing_file(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"model": {"heads": 2}}))
    assert run("train", "--config", tmp_path / "bad.json") == 2
    assert "heads" in capsys.readouterr().err
    assert run("eval", tmp_path / "missing.ckpt") == 2


def test_check_finite_flag_reports_numeric_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", epochs=1, lr=1e300)
    with np.errstate(all="ignore"):
        code = run("train", "--config", cfg, "--out", tmp_path / "r", "--check-finite")
    assert code == 3
    assert "error" in capsys.readouterr().err


def test_sweep_default_grid_has_eight_cells(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", epochs=1)
    assert run("sweep", "--config", cfg, "--out", tmp_path / "s") == 0
    rows = read_rows(tmp_path / "s" / "sweep.csv")
    assert list(rows[0]) == ["uat_heads", "mat_heads", "fusion", "metric"]
    assert [(r["uat_heads"], r["mat_heads"], r["fusion"]) for r in rows] == [
        (u, m, f) for u, m in [("1", "1"), ("1", "2"), ("2", "2"), ("2", "4")] for f in ("MAT-SUM", "MAT-CONCAT")]
    assert all(0.0 <= float(r["metric"]) <= 100.0 for r in rows)


def test_sweep_records_failing_cell_and_continues(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", epochs=1, embed_dim=6)
    assert run("sweep", "--config", cfg, "--out", tmp_path / "s", "--grid", "1,2;1,4", "--fusions", "MAT-SUM") == 0
    rows = read_rows(tmp_path / "s" / "sweep.csv")
    assert rows[0]["metric"] != "failed" and rows[1]["metric"] == "failed"
    errors = json.loads((tmp_path / "s" / "sweep_errors.json").read_text())
    assert list(errors) == ["1,4,MAT-SUM"] and "divisible" in errors["1,4,MAT-SUM"]


def test_single_cell_sweep_matches_cross_validated_train(tmp_path):
    from hamlet.cli import complete_config, cross_validate, resolve_data

    cfg = write_config(tmp_path / "cfg.json", epochs=2)
    run("sweep", "--config", cfg, "--out", tmp_path / "s", "--grid", "1,2", "--fusions", "MAT-CONCAT")
    metric = float(read_rows(tmp_path / "s" / "sweep.csv")[0]["metric"])
    rc = RunConfig.load(cfg)
    ds = resolve_data(rc.data)
    reports = cross_validate(complete_config(rc, ds), ds)
    assert metric == np.mean([r.accuracy for r in reports])


def test_bad_grid_is_validation_error(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", epochs=1)
    assert run("sweep", "--config", cfg, "--out", tmp_path / "s", "--grid", "1;2") == 2


def test_export_attention(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    run("train", "--config", cfg, "--out", tmp_path / "r")
    assert run("export-attention", tmp_path / "r" / "model.ckpt") == 0
    report = json.loads((tmp_path / "r" / "attention.json").read_text())
    assert len(report["samples"]) == 12
    for s in report["samples"]:
        assert len(s["fusion"]["reduced"]) == 2 and abs(sum(s["fusion"]["reduced"]) - 1) < 1e-9
        for m in ("imu", "emg"):
            red = s["unimodal"][m]["reduced"]
            assert len(red) == 2 and abs(sum(red) - 1) < 1e-9
        assert "raw" not in s["fusion"]
    summary = report["summary"]
    assert summary["uniform"] == 0.5 and set(summary["informative_above_uniform"]) == {"class0", "class1"}

    assert run("export-attention", tmp_path / "r" / "model.ckpt", "--raw", "--samples", "actor1_c0_t0",
               "--out", tmp_path / "raw") == 0
    raw = json.loads((tmp_path / "raw" / "attention.json").read_text())["samples"]
    assert len(raw) == 1
    heads = np.array(raw[0]["fusion"]["raw"])
    assert heads.shape == (2, 2, 2)
    np.testing.assert_allclose(heads.sum(-1), 1.0, atol=1e-9)


def test_export_attention_unknown_sample(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", epochs=1)
    run("train", "--config", cfg, "--out", tmp_path / "r")
    assert run("export-attention", tmp_path / "r" / "model.ckpt", "--samples", "nobody") == 2


# -- gradcheck ------------------------------------------------------------------

def test_gradcheck_lists_each_block_once(capsys):
    assert run("gradcheck") == 0
    lines = [ln.split()[0] for ln in capsys.readouterr().out.splitlines() if ln.strip() and "finished" not in ln]
    assert len(lines) == len(set(lines))
    for block in ("op.matmul", "op.softmax", "lstm", "cooccurrence_encoder", "uat", "mat", "model"):
        assert block in lines


def test_gradcheck_enforces_small_dims(tmp_path, capsys):
    cfg = tmp_path / "big.json"
    cfg.write_text(json.dumps({"model": {"embed_dim": 32, "modalities": [{"name": "a", "dims": 2}]}}))
    assert run("gradcheck", "--config", cfg) == 2
    assert "embed_dim" in capsys.readouterr().err
    with pytest.raises(ValueError, match="batch"):
        gradcheck_blocks(RunConfig(), batch=3)


def test_gradcheck_rejects_zero_parameter_config(tmp_path, capsys):
    cfg = tmp_path / "zero.json"
    cfg.write_text(json.dumps({"model": {"embed_dim": 4, "segments": 2, "modalities": [{"name": "a", "dims": 0}]}}))
    assert run("gradcheck", "--config", cfg) == 2
    assert "no trainable parameters" in capsys.readouterr().err
