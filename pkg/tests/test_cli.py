import csv
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from lccan import tenfile
from lccan.cli import build_parser, load_config, main


def _last_json(text):
    return json.loads(text.strip().splitlines()[-1])


def test_subcommands_exist():
    p = build_parser()
    for cmd in ("gen-data", "pretrain", "metatrain", "eval", "ablate", "augment", "gradcheck"):
        args = p.parse_args([cmd, "--seed", "3", "--fold", "1", "--shots", "2", "--mode", "LCCAN_org",
                             "--out", "x", "--config", "c.json"])
        assert (args.seed, args.fold, args.shots, args.mode, args.out) == (3, 1, 2, "LCCAN_org", "x")


def test_config_merge(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"inner": {"iters": 5}}, "align": {"gamma": 0.3}}))
    cfg = load_config(path, seed=11)
    assert cfg["train"]["inner"] == {"iters": 5, "lr": 0.1, "momentum": 0.0, "weight_decay": 0.0}
    assert cfg["align"]["gamma"] == 0.3 and cfg["align"]["tau"] == 10.0 and cfg["seed"] == 11


def test_missing_artifacts_error_line(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path)]) == 1
    err = _last_json(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError" and err["command"] == "eval"


def test_usage_error_is_json(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--fold", "9"])
    assert exc.value.code == 2
    assert _last_json(capsys.readouterr().err)["error"] == "UsageError"


def test_fold_mismatch(reference_run, tmp_path, capsys):
    out = tmp_path / "w"
    shutil.copytree(reference_run.data, out / "data")
    shutil.copytree(reference_run.backbone, out / "backbone")
    assert main(["metatrain", "--out", str(out), "--fold", "2"]) == 1
    assert "fold" in _last_json(capsys.readouterr().err)["message"]


def test_augment_command(reference_run, tmp_path, capsys):
    out = tmp_path / "aug"
    assert main(["augment", "--out", str(out), "--data", str(reference_run.data), "--ids", "0", "1", "2", "5"]) == 0
    with (out / "augment" / "augment.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["sample_id"]) for r in rows] == [0, 1, 2, 5]
    for r in rows:
        before, after = float(r["mu_before"]), float(r["mu_after"])
        if r["branch"] == "None":
            assert before == after and 0.15 <= before <= 0.3
        else:
            img = tenfile.load(out / "augment" / "images" / f"{int(r['sample_id']):05d}.ten")
            mask = tenfile.load(out / "augment" / "masks" / f"{int(r['sample_id']):05d}.ten")
            assert img.shape == (3, 64, 64) and abs(mask.mean() - after) < 1e-6
            assert (after > before) if r["branch"] == "Crop" else (after < before)
    assert main(["augment", "--out", str(out), "--data", str(reference_run.data), "--ids", "99999"]) == 1


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--ops", "relu", "matmul", "--seeds", "2", "--no-composite", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "PASS relu" in out and "PASS matmul" in out
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert set(report) == {"relu", "matmul"}
    assert main(["gradcheck", "--ops", "argmax", "--seeds", "1", "--no-composite", "--out", str(tmp_path)]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "lccan", "eval", "--fold", "5"], capture_output=True, text=True)
    assert proc.returncode == 2 and "UsageError" in proc.stderr


def test_eval_outputs(reference_run):
    ev = reference_run.root / "eval"
    report = json.loads((ev / "report.json").read_text())
    assert report["n_episodes"] == 200 and report["seed"] == 0
    assert report["config"]["mode"]["variant"] == "LCCAN_aug"
    assert set(report["per_class_iou"]) == {"0", "4", "8"}
    assert abs(report["miou"] - np.mean(list(report["per_class_iou"].values()))) < 1e-12
    for name in ("per_episode.csv", "iou_hist.png", "loss_pretrain.png", "loss_metatrain.png"):
        assert (ev / name).exists()
