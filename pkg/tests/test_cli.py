import json

import numpy as np
import pytest

from disentangled_influence.cli import main
from disentangled_influence.datasets import TabularDataset, XY_COLUMNS
from disentangled_influence.reporting import parse_svg_data, read_rows, safe_name


def run(*argv):
    return main([str(a) for a in argv])


def tree_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def xy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("xy")
    assert run("gen-data", "--dataset", "xy", "--n", 5000, "--seed", 0, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def handcrafted_audit(xy_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("audit")
    assert run("audit", "--mode", "both", "--dr", "handcrafted", "--dataset", xy_dir,
               "--model", "fixed-xy", "--features", "all", "--svg", "--out", out) == 0
    return out


def test_gen_data_outputs(xy_dir):
    data = TabularDataset.load(xy_dir)
    assert data.feature_names == XY_COLUMNS and data.values.shape == (5000, 9)
    header = (xy_dir / "train.csv").read_text().splitlines()[0].split(",")
    assert header[:9] == XY_COLUMNS and len(header) == 10
    manifest = json.loads((xy_dir / "manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["config"]["seed"] == 0


def test_gen_data_rerun_is_byte_identical(xy_dir, tmp_path):
    assert run("gen-data", "--dataset", "xy", "--n", 5000, "--seed", 0, "--out", tmp_path) == 0
    assert tree_bytes(tmp_path) == tree_bytes(xy_dir)


def test_handcrafted_summary(handcrafted_audit):
    rows = read_rows(handcrafted_audit / "summary.csv")
    indirect = {r["feature"]: float(r["mean_abs"]) for r in rows if r["kind"] == "indirect"}
    direct = {r["feature"]: float(r["mean_abs"]) for r in rows if r["kind"] == "direct"}
    assert set(indirect) == set(XY_COLUMNS)
    assert all(indirect[c] <= 1e-9 for c in ("c", "2c", "c^2"))
    assert [c for c in XY_COLUMNS if direct[c] != 0.0] == ["x", "y"]
    for name in XY_COLUMNS:
        assert (handcrafted_audit / f"influence_{safe_name(name)}.csv").exists()
        assert (handcrafted_audit / f"errors_{safe_name(name)}.csv").exists()


def test_svg_embeds_data(handcrafted_audit):
    table = parse_svg_data((handcrafted_audit / "bars_indirect.svg").read_text())
    assert table[0] == ["feature", "value"]
    summary = {r["feature"]: r["mean_abs"] for r in read_rows(handcrafted_audit / "summary.csv")
               if r["kind"] == "indirect"}
    assert {f: v for f, v in table[1:]} == summary
    scatter = parse_svg_data((handcrafted_audit / f"scatter_{safe_name('x^2')}.svg").read_text())
    assert len(scatter) == 101


def test_audit_replay_is_byte_identical(handcrafted_audit, tmp_path):
    assert run("replay", handcrafted_audit / "manifest.json", "--out", tmp_path) == 0
    assert tree_bytes(tmp_path) == tree_bytes(handcrafted_audit)


def test_learned_audit_deterministic_across_jobs(tmp_path):
    data = tmp_path / "data"
    assert run("gen-data", "--dataset", "xy", "--n", 800, "--seed", 1, "--out", data) == 0
    common = ["audit", "--dr", "learned", "--dataset", data, "--model", "fixed-xy",
              "--features", "x,c,y^2", "--train-steps", 150, "--instances", 10,
              "--background-size", 10, "--seed", 0]
    assert run(*common, "--out", tmp_path / "a") == 0
    assert run(*common, "--jobs", 3, "--out", tmp_path / "b") == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert run("replay", tmp_path / "a" / "manifest.json", "--out", tmp_path / "c") == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "c")


def test_train_dr_errors_and_preloaded_audit(xy_dir, tmp_path):
    reps = tmp_path / "reps"
    assert run("train-dr", "--dataset", xy_dir, "--feature", "y^2", "--dr", "handcrafted", "--out", reps) == 0
    assert run("train-dr", "--dataset", xy_dir, "--feature", "c", "--train-steps", 20, "--out", reps) == 0
    assert (reps / f"dr_{safe_name('y^2')}.json").exists()
    assert (reps / "manifest_dr_c.json").exists()
    errs = tmp_path / "errs"
    assert run("errors", "--rep", reps / f"dr_{safe_name('y^2')}.json", "--dataset", xy_dir,
               "--model", "fixed-xy", "--out", errs) == 0
    rows = read_rows(errs / f"errors_{safe_name('y^2')}.csv")
    assert len(rows) == 1000
    assert all(float(v) == 0.0 for r in rows for k, v in r.items() if k != "p")
    out = tmp_path / "audit"
    assert run("audit", "--dr", "preloaded", "--rep-dir", reps, "--dataset", xy_dir,
               "--model", "fixed-xy", "--features", "y^2,c", "--instances", 10, "--out", out) == 0
    assert len(read_rows(out / "summary.csv")) == 2


def test_train_model_and_report(tmp_path):
    data = tmp_path / "data"
    assert run("gen-data", "--dataset", "planted", "--n", 600, "--out", data) == 0
    model = tmp_path / "model"
    assert run("train-model", "--dataset", data, "--train-steps", 200, "--out", model) == 0
    metrics = json.loads((model / "metrics.json").read_text())
    assert {"train_loss", "test_loss"} <= set(metrics)
    assert (model / "manifest_model.json").exists()
    runs = tmp_path / "runs"
    assert run("audit", "--mode", "direct", "--dataset", data, "--model", model,
               "--instances", 5, "--out", runs / "direct") == 0
    assert run("report", "--run", runs) == 0
    rows = read_rows(runs / "report.csv")
    assert {r["feature"] for r in rows} == {"A", "B", "C"}
    assert {r["source"] for r in rows} == {"direct"}


def test_config_file_precedence(xy_dir, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("mode: direct\ninstances: 7\nbackground-size: 5\n")
    out = tmp_path / "o"
    assert run("audit", "--config", cfg, "--instances", 3, "--dataset", xy_dir,
               "--model", "fixed-xy", "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["mode"] == "direct"
    assert manifest["config"]["instances"] == 3
    assert manifest["config"]["background_size"] == 5
    assert "out" not in manifest["config"] and "jobs" not in manifest["config"]
    assert list(manifest) == sorted(manifest)


def test_validation_errors_exit_1(xy_dir, tmp_path, capsys):
    assert run("audit", "--dataset", xy_dir, "--model", "fixed-xy", "--features", "nope",
               "--out", tmp_path / "a") == 1
    assert run("audit", "--dataset", tmp_path / "missing", "--model", "fixed-xy",
               "--out", tmp_path / "b") == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("colour: red\n")
    assert run("audit", "--config", bad, "--dataset", xy_dir, "--out", tmp_path / "c") == 1
    assert "error:" in capsys.readouterr().err


def _exploding_dataset(path):
    rng = np.random.default_rng(0)
    values = rng.normal(size=(60, 3)) * 1e150
    TabularDataset(["a", "b", "c"], values, values[:, 0],
                   split=np.array(["train"] * 50 + ["test"] * 10)).save(path)


def test_runtime_failures_exit_2(tmp_path):
    data = tmp_path / "data"
    _exploding_dataset(data)
    assert run("train-dr", "--dataset", data, "--feature", "a", "--learning-rate", 1.0,
               "--train-steps", 50, "--latent-dim", 1, "--out", tmp_path / "dr") == 2
    out = tmp_path / "audit"
    rc = run("audit", "--dataset", data, "--model", "planted-proxy", "--features", "a,b",
             "--learning-rate", 1.0, "--train-steps", 50, "--latent-dim", 1, "--out", out)
    assert rc == 2
    status = json.loads((out / "manifest.json").read_text())["status"]
    assert all(v.startswith("divergence") for v in status.values())
