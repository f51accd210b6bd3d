import json
import os
import subprocess
import sys

import numpy as np
import pytest

from eqtrack import cli, data, geometry


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--seed", "1", "--count", "3", "--size", "16", "--out", str(root / "d")]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"model": "tiny", "epochs": 2, "lr": 1e-2}))
    code = cli.main(["train", "--config", str(cfg), "--manifest", str(root / "d" / "manifest.json"),
                     "--out", str(root / "run")])
    assert code == 0
    return root


def test_help_lists_subcommands():
    out = subprocess.run([sys.executable, "-m", "eqtrack.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "train", "track", "eval", "check-equivariance"):
        assert cmd in out.stdout


def test_usage_error_exits_one(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 1


def test_validation_errors_exit_one(tmp_path):
    assert cli.main(["gen-data", "--size", "8", "--out", str(tmp_path)]) == 1
    assert cli.main(["train", "--manifest", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.json"), "--manifest", "x", "--out", "y"]) == 1


def test_train_outputs(workdir):
    run = workdir / "run"
    assert sorted(os.listdir(run)) == ["checkpoint.json", "metrics.jsonl", "train_config.json"]
    lines = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
    assert [l["epoch"] for l in lines] == [1, 2]
    assert json.loads((run / "train_config.json").read_text())["model"] == "tiny"


def test_flags_override_config(workdir, tmp_path):
    code = cli.main(["train", "--config", str(workdir / "cfg.json"), "--epochs", "1",
                     "--manifest", str(workdir / "d" / "manifest.json"), "--out", str(tmp_path)])
    assert code == 0
    assert json.loads((tmp_path / "train_config.json").read_text())["epochs"] == 1


def test_resume_zero_epochs_keeps_checkpoint(workdir, tmp_path):
    ck = workdir / "run" / "checkpoint.json"
    code = cli.main(["train", "--resume", str(ck), "--epochs", "0", "--manifest",
                     str(workdir / "d" / "manifest.json"), "--out", str(tmp_path)])
    assert code == 0
    a = json.loads(ck.read_text())["params"]
    b = json.loads((tmp_path / "checkpoint.json").read_text())["params"]
    assert a == b


def test_track_identity_and_truth(workdir, tmp_path, capsys):
    d = workdir / "d"
    ck = str(workdir / "run" / "checkpoint.json")
    out = tmp_path / "t.json"
    assert cli.main(["track", "--checkpoint", ck, "--reference", str(d / "s00_v0000.json"),
                     "--moving", str(d / "s00_v0000.json"), "--out", str(out)]) == 0
    t = geometry.RigidTransform.load(out)
    assert geometry.rotation_angle(t.rotation) < 1e-6
    diag = json.loads((tmp_path / "t.diagnostics.json").read_text())
    assert {"weights", "singular_values", "empty_channels", "seconds"} <= set(diag)

    assert cli.main(["track", "--checkpoint", ck, "--reference", str(d / "s00_v0000.json"),
                     "--moving", str(d / "s00_v0001.json"), "--truth", str(d / "s00_v0001_pose.json"),
                     "--out", str(out)]) == 0
    diag = json.loads((tmp_path / "t.diagnostics.json").read_text())
    assert {"euler_mae_deg", "translation_voxels"} <= set(diag["errors"])


def test_track_grid_mismatch(workdir, tmp_path):
    d = workdir / "d"
    other = tmp_path / "o"
    data.save_volume(other, data.Volume(np.zeros((16, 16, 17))))
    code = cli.main(["track", "--checkpoint", str(workdir / "run" / "checkpoint.json"),
                     "--reference", str(d / "s00_v0000.json"), "--moving", str(other) + ".json",
                     "--out", str(tmp_path / "t.json")])
    assert code == 1


def test_eval_report(workdir, tmp_path, capsys):
    out = tmp_path / "r.json"
    assert cli.main(["eval", "--checkpoint", str(workdir / "run" / "checkpoint.json"),
                     "--manifest", str(workdir / "d" / "manifest.json"), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["pairs"] == 2 and len(rep["per_pair"]) == 2
    assert {"euler_mae_deg", "translation_mm", "dice"} <= set(rep["summary"])
    assert "euler_mae_deg" in capsys.readouterr().out


def test_eval_perfect_and_identity_estimates(workdir):
    from eqtrack import dataset, evaluation

    pair = dataset.load_pairs(workdir / "d" / "manifest.json")[0]
    perfect = evaluation.pair_metrics(pair.transform, pair)
    assert perfect["euler_mae_deg"] < 1e-9 and perfect["translation_mm"] == 0.0
    assert perfect["dice"] == 1.0
    ident = evaluation.pair_metrics(geometry.RigidTransform(), pair)
    assert np.isclose(ident["translation_mm"], np.linalg.norm(pair.transform.translation))
    assert np.isclose(ident["geodesic_deg"], np.degrees(geometry.rotation_angle(pair.transform.rotation)))


def test_check_equivariance_random_and_corrupted(tmp_path, capsys):
    out = tmp_path / "eq.json"
    args = ["check-equivariance", "--random-weights", "--model", "tiny", "--size", "16",
            "--rotations", "4", "--continuous", "0", "--out", str(out)]
    assert cli.main(args) == 0
    assert json.loads(out.read_text())["octahedral"]["passed"]
    assert cli.main(args + ["--corrupt-basis"]) == 1
    assert cli.main(args + ["--zero-weights"]) == 0


def test_check_equivariance_from_checkpoint(workdir):
    assert cli.main(["check-equivariance", "--checkpoint", str(workdir / "run" / "checkpoint.json"),
                     "--size", "16", "--rotations", "2", "--continuous", "0"]) == 0
