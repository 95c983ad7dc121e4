import json
import subprocess
import sys

import numpy as np
from PIL import Image

from tlw.cli import main
from tlw.data import load_png

TINY_SET = [
    "sr_depth=2", "sr_width=4", "weight_width=4", "batch_size=4", "toy_train=8", "toy_val=2",
    "toy_size=16", "patch=16", "stride=16", "judge.layer_widths=[4,8]",
]


def _sets(extra=()):
    out = []
    for s in list(TINY_SET) + list(extra):
        out += ["--set", s]
    return out


def _write_config(path, **values):
    path.write_text(json.dumps(values))
    return path


def test_train_produces_checkpoints_and_metrics(tmp_path):
    cfg = _write_config(tmp_path / "c.json", epochs=1)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run1")] + _sets()) == 0
    run = tmp_path / "run1"
    assert (run / "ckpt_epoch0001.bin").is_file()
    assert (run / "metrics.csv").read_text().startswith("epoch,iter,loss_theta,loss_phi,mean_wc,psnr_y,judge_dist\n")
    meta = json.loads((run / "run.json").read_text())
    assert meta["config"]["epochs"] == 1 and meta["config"]["judge"]["layer_widths"] == [4, 8]
    assert len(meta["input_hash"]) == 64


def test_equal_run_json_equal_metrics(tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--seed", "3", "--out", str(tmp_path / name)] + _sets(["epochs=2"])) == 0
    assert (tmp_path / "a" / "run.json").read_bytes() == (tmp_path / "b" / "run.json").read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_missing_config_is_usage_error(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["train", "--config", str(missing), "--out", str(tmp_path / "o")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key_named(tmp_path, capsys):
    cfg = _write_config(tmp_path / "c.json", learning_speed=3)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "learning_speed" in capsys.readouterr().err


def test_bad_flags_exit_1(tmp_path):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["frobnicate", "--out", str(tmp_path)]) == 1
    assert main(["train", "--out", str(tmp_path), "--set", "noequals"]) == 1
    assert main(["train", "--out", str(tmp_path), "--set", "T=0"]) == 1


def test_runtime_failure_exit_2(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.bin"), "--manifest", str(tmp_path / "m.json"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "m.json" in capsys.readouterr().err


def _png_folder(path, sizes):
    path.mkdir()
    rng = np.random.default_rng(0)
    for i, (h, w) in enumerate(sizes):
        Image.fromarray(rng.integers(0, 256, (h, w, 3), dtype=np.uint8)).save(path / f"pic{i}.png")
    return path


def test_degrade_folder(tmp_path):
    src = _png_folder(tmp_path / "in", [(20, 20), (17, 12)])
    assert main(["degrade", "--input", str(src), "--scale", "2", "--out", str(tmp_path / "lr")]) == 0
    names = sorted(p.name for p in (tmp_path / "lr").glob("*.png"))
    assert names == ["pic0x2.png", "pic1x2.png"]
    assert load_png(tmp_path / "lr" / "pic0x2.png").shape == (1, 3, 10, 10)
    assert load_png(tmp_path / "lr" / "pic1x2.png").shape == (1, 3, 8, 6)


def test_eval_and_export_end_to_end(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out)] + _sets(["epochs=1"])) == 0
    src = _png_folder(tmp_path / "imgs", [(16, 16), (24, 20)])
    manifest = src / "m.json"
    manifest.write_text(json.dumps([{"path": "pic0.png", "split": "val"}, {"path": "pic1.png", "split": "val"}]))
    ck = str(out / "ckpt_epoch0001.bin")
    assert main(["eval", "--checkpoint", ck, "--manifest", str(manifest), "--out", str(tmp_path / "ev")]) == 0
    assert "mean PSNR-Y" in capsys.readouterr().out
    rows = (tmp_path / "ev" / "eval.csv").read_text().splitlines()
    assert len(rows) == 4
    ck0 = str(out / "ckpt_epoch0000.bin")
    assert main(["export-weights", "--checkpoint", ck0, ck, "--input", str(src), "--out", str(tmp_path / "maps")]) == 0
    assert sorted(p.name for p in (tmp_path / "maps").glob("*.png")) == ["pic0_0.png", "pic0_1.png", "pic1_0.png", "pic1_1.png"]


def test_compare_losses(tmp_path, capsys):
    assert main(["compare-losses", "--out", str(tmp_path / "cmp")] + _sets(["epochs=1"])) == 0
    text = capsys.readouterr().out
    assert "TLW+L1" in text and "TLW+MSE" in text
    assert (tmp_path / "cmp" / "comparison.csv").is_file()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "tlw", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "compare-losses" in res.stdout
