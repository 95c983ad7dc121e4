import json
import math

import numpy as np
import pytest

from tlw import tensor as T
from tlw.data import load_png, make_pair, save_png, toy_corpus
from tlw.evaluation import EvalReport, EvalRow, eval_dataset, evaluate_batched, evaluate_pairs, export_weight_maps, psnr_y
from tlw.judge import JudgeSpec, get_judge
from tlw.models import SrModel, WeightModel, init_models
from tlw.trainer import TrainConfig, Trainer

JUDGE = get_judge(JudgeSpec(layer_widths=(4, 8)))


def test_identical_inputs_capped():
    x = np.random.default_rng(0).random((1, 3, 8, 8))
    assert psnr_y(x, x, 2) == 100.0


def test_uniform_luma_offset():
    x = np.random.default_rng(1).uniform(0.1, 0.8, (1, 3, 10, 10))
    # adding d to all channels shifts Y by d * 219/255
    y = x + 1.0 / 219.0
    assert psnr_y(x, y, 0) == pytest.approx(20 * math.log10(255), abs=1e-9)
    assert psnr_y(x, y, 0) == pytest.approx(48.1308, abs=1e-4)


def test_halving_mse_gains_3db():
    x = np.full((1, 3, 6, 6), 0.5)
    a = psnr_y(x, x + 0.02, 0)
    b = psnr_y(x, x + 0.02 / math.sqrt(2), 0)
    assert b - a == pytest.approx(10 * math.log10(2), abs=1e-9)
    assert b - a == pytest.approx(3.0103, abs=1e-4)


def test_shave_and_errors():
    x = np.zeros((1, 3, 6, 6))
    y = x.copy()
    y[..., 0, :] = 1.0  # only the border differs
    assert psnr_y(x, y, 1) == 100.0
    assert psnr_y(x, y, 0) < 100.0
    with pytest.raises(ValueError):
        psnr_y(x, y, 3)
    with pytest.raises(ValueError):
        psnr_y(x, np.zeros((1, 3, 6, 5)), 0)


def _pairs(n=4, size=16):
    return [make_pair(img, 2, name=f"im{i}") for i, img in enumerate(toy_corpus(n, size, seed=9))]


def test_identity_model_equals_baseline():
    (sr,), _ = init_models(0, sr_depth=3, sr_width=4)
    pairs = _pairs()
    assert evaluate_pairs(sr, pairs, JUDGE) == evaluate_pairs(None, pairs, JUDGE)
    assert evaluate_batched(sr, pairs, JUDGE) == evaluate_batched(None, pairs, JUDGE)


def test_batched_agrees_with_per_pair():
    gen = np.random.default_rng(3)
    sr = SrModel(depth=2, width=4)
    sr.init(gen)
    pairs = _pairs(5)
    rows = evaluate_pairs(sr, pairs, JUDGE)
    mp, mj = evaluate_batched(sr, pairs, JUDGE, batch=2)
    assert mp == pytest.approx(np.mean([r.psnr_y for r in rows]), rel=1e-9)
    assert mj == pytest.approx(np.mean([r.judge_dist for r in rows]), rel=1e-5)


def test_report_means_and_files(tmp_path):
    rows = [EvalRow("a", 30.0, 0.1), EvalRow("b", 32.5, 0.3)]
    rep = EvalReport(rows, dataset="d", scale=2)
    assert abs(rep.mean_psnr_y - 31.25) <= 1e-9
    assert abs(rep.mean_judge_dist - 0.2) <= 1e-9
    rep.write(tmp_path)
    lines = (tmp_path / "eval.csv").read_text().splitlines()
    assert lines[0] == "image,psnr_y,judge_dist" and lines[-1].startswith("mean,")
    data = json.loads((tmp_path / "eval.json").read_text())
    assert data["mean_psnr_y"] == rep.mean_psnr_y and len(data["rows"]) == 2


def _tiny_checkpoint(path):
    cfg = TrainConfig(sr_depth=2, sr_width=4, weight_width=4, judge=JudgeSpec(layer_widths=(4, 8)).to_dict())
    trainer = Trainer(cfg)
    trainer.save(path)
    return trainer


def test_eval_dataset_identity_and_determinism(tmp_path):
    ckpt = tmp_path / "c.bin"
    _tiny_checkpoint(ckpt)
    paths = []
    for i, img in enumerate(toy_corpus(3, 24, seed=4)):
        paths.append(tmp_path / f"img{i}.png")
        save_png(img, paths[-1])
    r1 = eval_dataset(ckpt, paths, 2, out_dir=tmp_path / "o1")
    r2 = eval_dataset(ckpt, paths, 2, out_dir=tmp_path / "o2")
    for name in ("eval.csv", "eval.json"):
        assert (tmp_path / "o1" / name).read_bytes() == (tmp_path / "o2" / name).read_bytes()
    base = evaluate_pairs(None, [make_pair(load_png(p), 2, name=p.stem) for p in paths], JUDGE)
    assert r1.rows == base
    assert r1.checkpoint_hash and r1.scale == 2


def test_export_flat_map_is_128(tmp_path):
    wm = WeightModel(width=4)  # all-zero params: sigmoid(0) = 0.5 everywhere, FixedSum(0.5) leaves it
    sr = SrModel(depth=2, width=4)
    pairs = _pairs(2)
    paths = export_weight_maps(wm, sr, pairs, 0.5, tmp_path, epoch=3)
    assert [p.name for p in paths] == ["im0_3.png", "im1_3.png"]
    for p in paths:
        arr = load_png(p)
        assert arr.shape == (1, 1, 16, 16)
        assert np.all(np.round(arr * 255) == 128)


def test_export_round_trip_within_quantization(tmp_path):
    gen = np.random.default_rng(5)
    wm = WeightModel(width=4)
    wm.init(gen)
    sr = SrModel(depth=2, width=4)
    pair = _pairs(1)[0]
    (path,) = export_weight_maps(wm, sr, [pair], 0.4, tmp_path, epoch=0)
    with T.no_grad():
        ref = wm(T.Tensor(pair.hr), sr(T.Tensor(pair.lr_up)), 0.4).data
    assert np.max(np.abs(load_png(path) - ref)) <= 1 / 255
