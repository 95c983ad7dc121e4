"""PSNR-Y, dataset evaluation reports and weight-map export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import ImagePair, make_pair, load_png, rgb_to_y, save_png
from .judge import Judge, JudgeSpec, get_judge
from .models import SrModel, WeightModel

PSNR_CAP = 100.0


def psnr_y(x, x_hat, shave: int = 0) -> float:
    """PSNR in dB on BT.601 luma over the region left after removing ``shave`` border pixels."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"psnr_y inputs differ in shape: {x.shape} vs {x_hat.shape}")
    ya, yb = rgb_to_y(x), rgb_to_y(x_hat)
    if shave:
        ya = ya[..., shave:-shave, shave:-shave]
        yb = yb[..., shave:-shave, shave:-shave]
    if ya.size == 0:
        raise ValueError(f"nothing left to compare after shaving {shave} pixels from {x.shape[-2:]}")
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def super_resolve(model: SrModel, lr_up: np.ndarray, batch: int = 16) -> np.ndarray:
    """Run the SR model without a graph and clamp the output to [0, 1]."""
    outs = []
    with T.no_grad():
        for i in range(0, lr_up.shape[0], batch):
            outs.append(model(T.Tensor(lr_up[i : i + batch])).data)
    return np.clip(np.concatenate(outs), 0.0, 1.0)


@dataclass
class EvalRow:
    name: str
    psnr_y: float
    judge_dist: float


@dataclass
class EvalReport:
    rows: List[EvalRow]
    dataset: str = ""
    scale: int = 0
    checkpoint_hash: str = ""
    judge: dict = field(default_factory=dict)

    @property
    def mean_psnr_y(self) -> float:
        return float(np.mean([r.psnr_y for r in self.rows]))

    @property
    def mean_judge_dist(self) -> float:
        return float(np.mean([r.judge_dist for r in self.rows]))

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "scale": self.scale,
            "checkpoint_hash": self.checkpoint_hash,
            "judge": self.judge,
            "judge_note": "judge distance is a fixed-feature stand-in, not LPIPS",
            "mean_psnr_y": self.mean_psnr_y,
            "mean_judge_dist": self.mean_judge_dist,
            "rows": [asdict(r) for r in self.rows],
        }

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image", "psnr_y", "judge_dist"])
            for r in self.rows:
                w.writerow([r.name, repr(r.psnr_y), repr(r.judge_dist)])
            w.writerow(["mean", repr(self.mean_psnr_y), repr(self.mean_judge_dist)])
        (out_dir / "eval.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def evaluate_pairs(
    model: Optional[SrModel],
    pairs: Sequence[ImagePair],
    judge: Judge,
    shave: Optional[int] = None,
) -> List[EvalRow]:
    """Score each pair; ``model=None`` scores the bicubic upsampling itself."""
    rows = []
    for pair in pairs:
        if model is None:
            out = np.clip(pair.lr_up, 0.0, 1.0)
        else:
            out = super_resolve(model, pair.lr_up)
        s = pair.scale if shave is None else shave
        with T.no_grad():
            d = judge.distance(T.Tensor(out.astype(np.float32)), T.Tensor(pair.hr)).data
        rows.append(EvalRow(pair.name, psnr_y(pair.hr, out, s), float(np.mean(d))))
    return rows


def evaluate_batched(
    model: Optional[SrModel],
    pairs: Sequence[ImagePair],
    judge: Judge,
    shave: Optional[int] = None,
    batch: int = 16,
) -> tuple:
    """Mean PSNR-Y and mean judge distance over equally sized pairs."""
    psnrs, dists = [], []
    for i in range(0, len(pairs), batch):
        chunk = pairs[i : i + batch]
        hr = np.concatenate([p.hr for p in chunk])
        lr_up = np.concatenate([p.lr_up for p in chunk])
        out = np.clip(lr_up, 0.0, 1.0) if model is None else super_resolve(model, lr_up, batch)
        with T.no_grad():
            d = judge.distance(T.Tensor(out.astype(np.float32)), T.Tensor(hr)).data
        dists.extend(float(v) for v in d)
        for j, p in enumerate(chunk):
            s = p.scale if shave is None else shave
            psnrs.append(psnr_y(hr[j : j + 1], out[j : j + 1], s))
    return float(np.mean(psnrs)), float(np.mean(dists))


def eval_dataset(
    checkpoint,
    image_paths: Sequence,
    scale: int,
    judge_spec: Optional[JudgeSpec] = None,
    out_dir=None,
    leg: Optional[str] = None,
    dataset: str = "",
) -> EvalReport:
    from .trainer import load_sr_model  # avoid an import cycle

    model, header, ckpt_hash = load_sr_model(checkpoint, leg)
    if judge_spec is None:
        judge_spec = JudgeSpec.from_dict(header["config"]["judge"])
    judge = get_judge(judge_spec)
    pairs = [make_pair(load_png(p), scale, name=Path(p).stem) for p in image_paths]
    report = EvalReport(
        rows=evaluate_pairs(model, pairs, judge),
        dataset=dataset,
        scale=scale,
        checkpoint_hash=ckpt_hash,
        judge=judge_spec.to_dict(),
    )
    if out_dir is not None:
        report.write(out_dir)
    return report


def export_weight_maps(
    weight_model: WeightModel,
    sr_model: SrModel,
    pairs: Sequence[ImagePair],
    k: float,
    out_dir,
    epoch: int,
) -> List[Path]:
    """Write each pair's mean weight map as 8-bit grayscale ``<image>_<epoch>.png``."""
    out_dir = Path(out_dir)
    written = []
    for pair in pairs:
        with T.no_grad():
            x = T.Tensor(pair.hr)
            x_hat = sr_model(T.Tensor(pair.lr_up))
            wmap = weight_model(x, x_hat, k).data
        path = out_dir / f"{pair.name}_{epoch}.png"
        save_png(wmap[0], path)
        written.append(path)
    return written
