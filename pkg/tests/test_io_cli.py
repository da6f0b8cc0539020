import json

import numpy as np
import pytest

from tnfs import io as tio
from tnfs.cli import main
from tnfs.clustering import ClusterConfig
from tnfs.errors import ArchiveVersionError, InvalidArgumentError
from tnfs.model import rollout
from tnfs.pipeline import initialize
from tnfs.plant import DEFAULT_PLANT, Scenario, default_catalog, make_scenarios, simulate_scenario
from tnfs.training import TrainingSequence, random_model


def archive(seed=0):
    m = random_model(3, 2, 2, 4, np.random.default_rng(seed))
    m.x0 = np.array([0.1, -0.2, 1 / 3])
    return tio.ModelArchive(m, ["y0", "y1"], ["a", "b"], 4, np.arange(8.0), np.ones(8) / 3,
                            np.array([1.0, 2.0]), np.array([0.5, 0.25]), "classify", {},
                            {"seed": 7, "config_digest": "abc"})


def test_archive_round_trip_is_bit_identical(tmp_path):
    arc = archive()
    U = np.random.default_rng(1).normal(size=(100, 2))
    before = rollout(arc.model, U)[1]
    tio.save_archive(arc, tmp_path / "m.json")
    back = tio.load_archive(tmp_path / "m.json")
    assert np.array_equal(rollout(back.model, U)[1], before)
    assert np.array_equal(back.feature_std, arc.feature_std)
    assert back.class_names == arc.class_names and back.provenance["seed"] == 7


def test_archive_is_versioned_text(tmp_path):
    tio.save_archive(archive(), tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["format_version"] == tio.FORMAT_VERSION
    assert doc["dimensions"] == {"N": 3, "M": 2, "P": 2, "R": 4}
    assert doc["rules"][0]["A"]["shape"] == [3, 3]
    doc["format_version"] = tio.FORMAT_VERSION + 1
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ArchiveVersionError):
        tio.load_archive(tmp_path / "m.json")


def test_archive_with_inconsistent_dimensions(tmp_path):
    doc = json.loads(archive().to_json())
    doc["dimensions"]["R"] = 5
    with pytest.raises(InvalidArgumentError):
        tio.ModelArchive.from_json(json.dumps(doc))


def test_csv_round_trip(tmp_path):
    traj = simulate_scenario(DEFAULT_PLANT, Scenario(seed=3))
    tio.write_trajectory(traj, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "minute," + ",".join(s.name for s in DEFAULT_PLANT)
    assert len(lines) == 14
    back = tio.read_trajectory(tmp_path / "t.csv")
    assert np.array_equal(back.matrix(), traj.matrix())
    assert np.array_equal(back.timestamps, traj.timestamps)


def test_manifest_round_trip(tmp_path):
    scenarios = make_scenarios(5, default_catalog(), seed=2)
    trajs = [simulate_scenario(DEFAULT_PLANT, s, i) for i, s in enumerate(scenarios)]
    tio.write_simulation(tmp_path, scenarios, trajs)
    loaded, back = tio.load_trajectories(tmp_path)
    assert loaded == scenarios
    assert all(np.array_equal(a.matrix(), b.matrix()) for a, b in zip(trajs, back))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    tio.atomic_write(tmp_path / "x" / "f.txt", "hello\n")
    tio.atomic_write(tmp_path / "x" / "f.txt", "again\n")
    assert [p.name for p in (tmp_path / "x").iterdir()] == ["f.txt"]
    assert (tmp_path / "x" / "f.txt").read_text() == "again\n"


def test_seed_derivation():
    assert tio.derive_seed(1, "train") == tio.derive_seed(1, "train")
    assert tio.derive_seed(1, "train") != tio.derive_seed(1, "cluster")
    assert tio.derive_seed(1, "train") != tio.derive_seed(2, "train")


def test_run_config_validation(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "train": {"epochs": 7}}))
    cfg = tio.RunConfig.load(p)
    assert cfg.seed == 3 and cfg.train_config().epochs == 7
    assert cfg.train_config().learning_rate == 1.0
    for bad in ({"bogus": 1}, {"train": {"epoch": 3}}, {"plant": "missing.json"},
                {"split": [0.5, 0.5, 0.5]}, {"cluster": {"fuzzifier_m": 1.0}},
                {"cluster": {"c_min": 2}}):
        p.write_text(json.dumps(bad))
        with pytest.raises(InvalidArgumentError):
            tio.RunConfig.load(p)


def test_initialize_scan_selects_four_blobs():
    rng = np.random.default_rng(4)
    centers = np.array([[0, 0], [5, 0], [0, 5], [5, 5]], dtype=float)
    pts = np.vstack([c + 0.05 * rng.standard_normal((50, 2)) for c in centers])
    # zero targets keep the state proxy at zero, leaving the input blobs
    seqs = [TrainingSequence(pts[i:i + 10], np.zeros((10, 1))) for i in range(0, 200, 10)]
    res = initialize(seqs, 1, 1, ClusterConfig(), c_range=(2, 8))
    assert res.cluster_count == 4 and res.model.n_rules == 4
    assert set(res.validity_table) == set(range(2, 9))


# command line

def write_config(tmp_path, **overrides):
    doc = {"scenarios": {"count": 6}, "model": {"n_states": 3},
           "train": {"epochs": 3, "learning_rate": 0.1}}
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(doc.get(k), dict):
            doc[k].update(v)
        else:
            doc[k] = v
    p = tmp_path / "config.json"
    p.write_text(json.dumps(doc))
    return str(p)


def test_simulate_single_normal(tmp_path):
    cfg = write_config(tmp_path, scenarios={"count": 1})
    assert main(["--config", cfg, "--out", str(tmp_path / "sim"), "simulate"]) == 0
    lines = (tmp_path / "sim" / "scenario_000.csv").read_text().splitlines()
    assert len(lines) == 1 + 13
    assert "fault_id=NORMAL" in (tmp_path / "sim" / "manifest.txt").read_text()


def test_simulate_is_reproducible(tmp_path):
    cfg = write_config(tmp_path, scenarios={"count": 38})
    assert main(["--config", cfg, "--seed", "5", "--out", str(tmp_path / "a"), "simulate"]) == 0
    assert main(["--config", cfg, "--seed", "5", "--out", str(tmp_path / "b"), "simulate"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 39 and "manifest.txt" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    err = float(out.split("max_relative_error=")[1].split()[0])
    assert err <= 1e-4


@pytest.mark.parametrize("c", [4, 1])
def test_init_fixed_rule_count(tmp_path, c):
    cfg = write_config(tmp_path)
    out = str(tmp_path / "run")
    assert main(["--config", cfg, "--out", out, "init", "--clusters", str(c)]) == 0
    arc = tio.load_archive(tmp_path / "run" / "model.json")
    assert arc.model.n_rules == c
    assert arc.points_per_window == 4 and len(arc.class_names) == 15


def test_init_train_evaluate_diagnose(tmp_path, capsys):
    cfg = write_config(tmp_path, cluster={"c_min": 2, "c_max": 3})
    out = str(tmp_path / "run")
    assert main(["--config", cfg, "--out", out, "simulate"]) == 0
    assert main(["--config", cfg, "--out", out, "init", "--data", out]) == 0
    assert "validity.c2=" in capsys.readouterr().out
    assert main(["--config", cfg, "--out", out, "train", "--data", out]) == 0
    history = (tmp_path / "run" / "loss_history.csv").read_text().splitlines()
    assert history[0] == "epoch,train_mse,validation_mse" and len(history) == 5
    assert main(["--config", cfg, "--out", out, "evaluate", "--data", out]) == 0
    report = (tmp_path / "run" / "evaluation.txt").read_text()
    assert report.startswith("samples=18\naccuracy=")
    capsys.readouterr()
    assert main(["--config", cfg, "--out", out, "diagnose", "--trajectory",
                 str(tmp_path / "run" / "scenario_001.csv")]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 9


def test_predict_rows_per_anchor(tmp_path, capsys):
    cfg = write_config(tmp_path, task="forecast", forecast={"outputs": ["Temp"]},
                       scenarios={"count": 3, "step_minutes": 5.0}, split=[1.0, 0.0, 0.0],
                       window={"window_minutes": 40.0, "stride_minutes": 10.0})
    out = str(tmp_path / "run")
    assert main(["--config", cfg, "--out", out, "simulate"]) == 0
    assert main(["--config", cfg, "--out", out, "init", "--data", out, "--clusters", "2"]) == 0
    assert main(["--config", cfg, "--out", out, "train", "--data", out]) == 0
    assert main(["--config", cfg, "--out", out, "predict", "--horizon", "15",
                 "--trajectory", str(tmp_path / "run" / "scenario_001.csv"),
                 "--anchor-stride", "30", "--min-history", "3"]) == 0
    rows = (tmp_path / "run" / "predictions.csv").read_text().splitlines()
    assert rows[0] == "anchor_minute,minute,ahead,pred_Temp,true_Temp"
    anchors = {}
    for r in rows[1:]:
        anchors.setdefault(r.split(",")[0], []).append(r)
    assert all(len(v) == 3 for v in anchors.values()) and len(anchors) >= 3


def test_exit_codes(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = str(tmp_path / "run")
    assert main(["--config", str(tmp_path / "nope.json"), "simulate"]) == 3
    assert main(["--config", cfg, "--out", out, "evaluate"]) == 3  # no archive yet
    assert main(["--config", cfg, "--out", out, "init", "--clusters", "2"]) == 0
    # a different window geometry no longer fits the archive
    other = write_config(tmp_path, window={"window_minutes": 30.0})
    assert main(["--config", other, "--out", out, "evaluate"]) == 1
    assert "expects 4 points" in capsys.readouterr().err
    wild = write_config(tmp_path, train={"learning_rate": 1e8, "epochs": 20,
                                         "grad_clip_norm": None})
    assert main(["--config", wild, "--out", out, "train"]) == 2
