"""Joint EM-style training of the SR network(s) and the weighting network."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .core import (
    BASE_LOSS_KINDS,
    DIRECTIONS,
    loss_phi,
    loss_theta,
    weight_criterion,
    weighted_base_norm,
)
from .data import DatasetManifest, ImagePair, load_png, make_pair, make_pairs, toy_pairs
from .evaluation import evaluate_batched
from .judge import Judge, JudgeSpec, get_judge
from .models import (
    SrModel,
    WeightModel,
    config_hash,
    file_hash,
    init_models,
    load_checkpoint,
    save_checkpoint,
)
from .stochastic import RngState, sample_relaxed_bernoulli

logger = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "iter", "loss_theta", "loss_phi", "mean_wc", "psnr_y", "judge_dist"]
FOUR_LEGS = (("l1", "l1", False), ("mse", "mse", False), ("tlw_l1", "l1", True), ("tlw_mse", "mse", True))


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    T: int = 4
    tau: float = 0.5
    eps_wc: float = 1e-6
    k_gain: float = 0.6
    k_timescale: float = 200.0
    k_base: float = 0.3
    base_loss: str = "l1"
    direction: str = "inverted"
    weighted: bool = True
    lr_theta: float = 1e-4
    lr_phi: float = 1e-4
    clip_norm: float = 1.0
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    judge: dict = field(default_factory=lambda: JudgeSpec().to_dict())
    four_loss: bool = False
    sr_depth: int = 8
    sr_width: int = 32
    weight_width: int = 32
    scale: int = 2
    patch: int = 32
    stride: int = 32
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    toy_train: int = 200
    toy_val: int = 40
    toy_size: int = 32
    data_seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in ("lr_theta", "lr_phi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.base_loss not in BASE_LOSS_KINDS:
            raise ValueError(f"base_loss must be one of {BASE_LOSS_KINDS}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if isinstance(self.judge, JudgeSpec):
            self.judge = self.judge.to_dict()
        JudgeSpec.from_dict(self.judge)

    @property
    def judge_spec(self) -> JudgeSpec:
        return JudgeSpec.from_dict(self.judge)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


def k_schedule(epoch: int, gain: float = 0.6, timescale: float = 200.0, base: float = 0.3) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return gain * (1.0 - math.exp(-epoch / timescale)) + base


class Adam:
    """Adam with global-norm gradient clipping; moments kept in float32."""

    def __init__(self, params: Sequence[T.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: Optional[float] = 1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps_taken = 0

    def zero_grad(self) -> None:
        T.zero_grad(self.params)

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params if p.grad is not None))

    def step(self) -> None:
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if not math.isfinite(norm):
                raise NonFiniteError("non-finite gradient norm")
            if norm > self.clip_norm:
                scale = self.clip_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = (p.grad.astype(np.float64) * scale).astype(np.float32)
            m *= np.float32(self.b1)
            m += np.float32(1 - self.b1) * g
            v *= np.float32(self.b2)
            v += np.float32(1 - self.b2) * g * g
            update = self.lr * (m.astype(np.float64) / c1) / (np.sqrt(v.astype(np.float64) / c2) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(np.float32)
        self.steps_taken += 1

    def state_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}/m/{i}"] = m
            out[f"{prefix}/v/{i}"] = v
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], prefix: str, t: int) -> None:
        for i in range(len(self.params)):
            self.m[i] = arrays[f"{prefix}/m/{i}"].copy()
            self.v[i] = arrays[f"{prefix}/v/{i}"].copy()
        self.t = t


@dataclass
class Leg:
    name: str
    kind: str
    weighted: bool
    model: SrModel
    opt: Adam


@dataclass
class TrainState:
    epoch: int = 0
    iteration: int = 0
    history: List[dict] = field(default_factory=list)
    epoch_rows: Dict[str, List[dict]] = field(default_factory=dict)
    phi_updates: int = 0
    theta_updates: int = 0


@dataclass
class Batch:
    hr: np.ndarray
    lr_up: np.ndarray

    @classmethod
    def stack(cls, pairs: Sequence[ImagePair]) -> "Batch":
        return cls(np.concatenate([p.hr for p in pairs]), np.concatenate([p.lr_up for p in pairs]))


def _check_finite(name: str, t) -> None:
    arr = t.data if isinstance(t, T.Tensor) else np.asarray(t)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")


class Trainer:
    """Holds the models, optimizers and state of one run.

    A run has one or more SR "legs" sharing batches and initial parameters;
    weighted legs share one weighting network.
    """

    def __init__(self, config: TrainConfig, legs: Sequence[Tuple[str, str, bool]] = None):
        self.config = config
        if legs is None:
            legs = FOUR_LEGS if config.four_loss else ((config.base_loss, config.base_loss, config.weighted),)
        srs, wm = init_models(config.seed, config.sr_depth, config.sr_width, config.weight_width, n_sr=len(legs))
        self.legs = [
            Leg(name, kind, weighted, sr, Adam(sr.parameters(), config.lr_theta, clip_norm=config.clip_norm))
            for (name, kind, weighted), sr in zip(legs, srs)
        ]
        self.any_weighted = any(leg.weighted for leg in self.legs)
        self.weight_model = wm
        self.opt_phi = Adam(wm.parameters(), config.lr_phi, clip_norm=config.clip_norm)
        self.judge: Judge = get_judge(config.judge_spec)
        self.rng = RngState(config.seed)
        self.state = TrainState(epoch_rows={leg.name: [] for leg in self.legs})

    # -- one iteration -------------------------------------------------------
    def k(self, epoch: Optional[int] = None) -> float:
        c = self.config
        return k_schedule(self.state.epoch if epoch is None else epoch, c.k_gain, c.k_timescale, c.k_base)

    def em_iteration(self, batch: Batch, k: float) -> dict:
        c = self.config
        it = self.state.iteration
        x = T.Tensor(batch.hr)
        y_up = T.Tensor(batch.lr_up)
        weighted = [leg for leg in self.legs if leg.weighted]

        x_hats = {}
        for leg in self.legs:
            x_hat = leg.model(y_up)
            _check_finite(f"{leg.name} SR output", x_hat)
            x_hats[leg.name] = x_hat

        record = {"iter": it + 1}
        x_feats = None
        if weighted and self.judge.spec.kind == "fixed-feature":
            with T.no_grad():
                x_feats = self.judge.features(x)

        # weighting-network step on a fresh sample from the current g_phi
        if weighted:
            gen = self.rng.generator("phi", position=it)
            phi_losses = []
            for leg in weighted:
                x_hat = T.detach(x_hats[leg.name])
                p = self.weight_model(x, x_hat, k)
                _check_finite("weight map", p)
                w = sample_relaxed_bernoulli(p, c.tau, gen)
                crit = weight_criterion(x, x_hat, w, self.judge, c.eps_wc, x_features=x_feats)
                _check_finite("criterion numerator", crit.numerator)
                _check_finite("criterion denominator", crit.denominator)
                phi_losses.append(loss_phi(crit, c.direction))
            lphi = phi_losses[0]
            for extra in phi_losses[1:]:
                lphi = lphi + extra
            lphi = lphi * (1.0 / len(phi_losses))
            _check_finite("loss_phi", lphi)
            self.opt_phi.zero_grad()
            T.backward(lphi)
            self.opt_phi.step()
            self.opt_phi.zero_grad()
            self.state.phi_updates += 1
            record["loss_phi"] = lphi.item()

        # SR steps; weighted legs draw T samples from the updated g_phi
        gen = self.rng.generator("theta", position=it)
        wcs = []
        for leg in self.legs:
            x_hat = x_hats[leg.name]
            if leg.weighted:
                x_hat_d = T.detach(x_hat)
                with T.no_grad():
                    p = self.weight_model(x, x_hat_d, k)
                    samples, crits = [], []
                    for _ in range(c.T):
                        w = sample_relaxed_bernoulli(p, c.tau, gen)
                        samples.append(w)
                        crits.append(weight_criterion(x, x_hat_d, w, self.judge, c.eps_wc, x_features=x_feats))
                leg_wcs = [float(v) for cr in crits for v in cr.wc.data]
                record[f"mean_wc/{leg.name}"] = float(np.mean(leg_wcs))
                wcs.extend(leg_wcs)
                loss = loss_theta(x, x_hat, samples, crits, leg.kind, c.direction)
            else:
                loss = weighted_base_norm(x, x_hat, None, leg.kind)
            _check_finite(f"{leg.name} loss_theta", loss)
            leg.opt.zero_grad()
            T.backward(loss)
            leg.opt.step()
            leg.opt.zero_grad()
            record[f"loss_theta/{leg.name}"] = loss.item()
        self.state.theta_updates += 1

        record["loss_theta"] = record[f"loss_theta/{self.legs[0].name}"] if len(self.legs) == 1 else float(
            np.mean([record[f"loss_theta/{leg.name}"] for leg in self.legs])
        )
        record.setdefault("loss_phi", float("nan"))
        record["mean_wc"] = float(np.mean(wcs)) if wcs else float("nan")
        self.state.iteration += 1
        return record

    # -- epochs ----------------------------------------------------------------
    def run_epoch(self, train: Sequence[ImagePair], val: Sequence[ImagePair]) -> None:
        """Train one epoch (number ``state.epoch + 1``) and log its metrics row."""
        c = self.config
        epoch = self.state.epoch
        k = self.k(epoch)
        order = self.rng.generator("shuffle", position=epoch).permutation(len(train))
        records = []
        for start in range(0, len(order), c.batch_size):
            batch = Batch.stack([train[i] for i in order[start : start + c.batch_size]])
            rec = self.em_iteration(batch, k)
            rec["epoch"] = epoch + 1
            records.append(rec)
        self.state.history.extend(records)
        self.state.epoch += 1
        for leg in self.legs:
            psnr, jd = evaluate_batched(leg.model, val, self.judge, batch=c.batch_size * 2)
            key = f"loss_theta/{leg.name}"
            # phi-side columns belong to weighted legs only
            nan = float("nan")
            self.state.epoch_rows[leg.name].append(
                {
                    "epoch": self.state.epoch,
                    "iter": self.state.iteration,
                    "loss_theta": _nanmean([r[key] for r in records]),
                    "loss_phi": _nanmean([r["loss_phi"] for r in records]) if leg.weighted else nan,
                    "mean_wc": _nanmean([r[f"mean_wc/{leg.name}"] for r in records]) if leg.weighted else nan,
                    "psnr_y": psnr,
                    "judge_dist": jd,
                }
            )

    # -- persistence -----------------------------------------------------------
    def checkpoint_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for leg in self.legs:
            for name, arr in leg.model.state_dict().items():
                arrays[f"sr/{leg.name}/{name}"] = arr
            arrays.update(leg.opt.state_arrays(f"opt/{leg.name}"))
        for name, arr in self.weight_model.state_dict().items():
            arrays[f"weight/{name}"] = arr
        arrays.update(self.opt_phi.state_arrays("opt/phi"))
        return arrays

    def save(self, path) -> None:
        cfg = self.config.to_dict()
        s = self.state
        meta = {
            "format": 1,
            "config": cfg,
            "config_hash": config_hash(cfg),
            "seed": self.config.seed,
            "legs": [[leg.name, leg.kind, leg.weighted] for leg in self.legs],
            "k": self.k(),
            "state": {
                "epoch": s.epoch,
                "iteration": s.iteration,
                "rng": self.rng.to_dict(),
                "history": s.history,
                "epoch_rows": s.epoch_rows,
                "phi_updates": s.phi_updates,
                "theta_updates": s.theta_updates,
                "adam_t": {**{leg.name: leg.opt.t for leg in self.legs}, "phi": self.opt_phi.t},
            },
        }
        save_checkpoint(path, self.checkpoint_arrays(), meta)

    @classmethod
    def load(cls, path) -> "Trainer":
        arrays, meta = load_checkpoint(path)
        config = TrainConfig.from_dict(meta["config"])
        trainer = cls(config, legs=[tuple(l) for l in meta["legs"]])
        trainer.restore(arrays, meta)
        return trainer

    def restore(self, arrays: Dict[str, np.ndarray], meta: dict) -> None:
        st = meta["state"]
        for leg in self.legs:
            prefix = f"sr/{leg.name}/"
            leg.model.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
            leg.opt.load_state_arrays(arrays, f"opt/{leg.name}", st["adam_t"][leg.name])
        self.weight_model.load_state_dict({k[len("weight/"):]: v for k, v in arrays.items() if k.startswith("weight/")})
        self.opt_phi.load_state_arrays(arrays, "opt/phi", st["adam_t"]["phi"])
        self.rng = RngState.from_dict(st["rng"])
        self.state = TrainState(
            epoch=st["epoch"],
            iteration=st["iteration"],
            history=st["history"],
            epoch_rows=st["epoch_rows"],
            phi_updates=st["phi_updates"],
            theta_updates=st["theta_updates"],
        )

    def write_metrics(self, out_dir) -> List[Path]:
        out_dir = Path(out_dir)
        paths = []
        for leg in self.legs:
            name = "metrics.csv" if len(self.legs) == 1 else f"metrics_{leg.name}.csv"
            path = out_dir / name
            write_metrics_csv(path, self.state.epoch_rows[leg.name])
            paths.append(path)
        return paths


def _nanmean(values: Sequence[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in METRICS_HEADER])


def checkpoint_path(out_dir, epoch: int) -> Path:
    return Path(out_dir) / f"ckpt_epoch{epoch:04d}.bin"


# -- data ---------------------------------------------------------------------

def load_datasets(config: TrainConfig, base_dir=None) -> Tuple[List[ImagePair], List[ImagePair]]:
    """Training patches and validation pairs from manifests, or the toy corpus."""
    c = config
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    if c.train_manifest:
        man = DatasetManifest.load(base / c.train_manifest, c.scale)
        train = make_pairs(man.select("train"), c.scale, c.patch, c.stride, c.data_seed)
        val_paths = man.select("val")
        if c.val_manifest:
            val_paths = DatasetManifest.load(base / c.val_manifest, c.scale).select(None)
        val = [make_pair(load_png(p), c.scale, name=Path(p).stem) for p in val_paths]
    else:
        train = toy_pairs(c.toy_train, c.scale, c.toy_size, seed=c.data_seed)
        val = toy_pairs(c.toy_val, c.scale, c.toy_size, seed=c.data_seed + 1)
    if not train:
        raise ValueError("training set is empty")
    return train, val


# -- runs -----------------------------------------------------------------------

def train_run(
    config: TrainConfig,
    out_dir,
    train: Optional[Sequence[ImagePair]] = None,
    val: Optional[Sequence[ImagePair]] = None,
    resume: Optional[str] = None,
    stop_after: Optional[int] = None,
) -> Trainer:
    """Train ``config.epochs`` epochs, checkpointing and logging after each.

    ``resume`` continues from a checkpoint; ``stop_after`` ends the run early
    after that epoch (used to simulate interruptions).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if train is None or val is None:
        train, val = load_datasets(config)
    if resume is not None:
        trainer = Trainer.load(resume)
    else:
        trainer = Trainer(config)
        trainer.save(checkpoint_path(out_dir, 0))
        trainer.write_metrics(out_dir)
    while trainer.state.epoch < config.epochs:
        trainer.run_epoch(train, val)
        trainer.save(checkpoint_path(out_dir, trainer.state.epoch))
        trainer.write_metrics(out_dir)
        row = trainer.state.epoch_rows[trainer.legs[0].name][-1]
        logger.info(
            "epoch %d iter %d loss_theta %.5f loss_phi %.5f wc %.4f psnr_y %.3f",
            row["epoch"], row["iter"], row["loss_theta"], row["loss_phi"], row["mean_wc"], row["psnr_y"],
        )
        if stop_after is not None and trainer.state.epoch >= stop_after:
            break
    return trainer


COMPARISON_HEADER = ["loss", "psnr_y", "judge_dist"]
LEG_LABELS = {"l1": "L1", "mse": "MSE", "tlw_l1": "TLW+L1", "tlw_mse": "TLW+MSE"}


def four_loss_run(
    config: TrainConfig,
    out_dir,
    train: Optional[Sequence[ImagePair]] = None,
    val: Optional[Sequence[ImagePair]] = None,
) -> Tuple[Trainer, List[dict]]:
    """L1, MSE, TLW+L1 and TLW+MSE trained side by side from one init on the same batches."""
    config = config.replace(four_loss=True)
    trainer = train_run(config, out_dir, train, val)
    table = comparison_table(trainer, val if val is not None else load_datasets(config)[1])
    write_comparison(Path(out_dir) / "comparison.csv", table)
    return trainer, table


def comparison_table(trainer: Trainer, val: Sequence[ImagePair]) -> List[dict]:
    rows = []
    for leg in trainer.legs:
        psnr, jd = evaluate_batched(leg.model, val, trainer.judge, batch=trainer.config.batch_size * 2)
        rows.append({"loss": LEG_LABELS.get(leg.name, leg.name), "psnr_y": psnr, "judge_dist": jd})
    return rows


def write_comparison(path, table: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_HEADER)
        for row in table:
            w.writerow([row["loss"], repr(row["psnr_y"]), repr(row["judge_dist"])])


def load_sr_model(checkpoint, leg: Optional[str] = None) -> Tuple[SrModel, dict, str]:
    arrays, header = load_checkpoint(checkpoint)
    cfg = header["config"]
    names = [l[0] for l in header["legs"]]
    leg = names[0] if leg is None else leg
    if leg not in names:
        raise KeyError(f"checkpoint {checkpoint} has no leg {leg!r}; available: {names}")
    model = SrModel(cfg["sr_depth"], cfg["sr_width"])
    prefix = f"sr/{leg}/"
    model.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
    return model, header, file_hash(checkpoint)


def load_weight_model(checkpoint) -> Tuple[WeightModel, dict]:
    arrays, header = load_checkpoint(checkpoint)
    model = WeightModel(header["config"]["weight_width"])
    model.load_state_dict({k[len("weight/"):]: v for k, v in arrays.items() if k.startswith("weight/")})
    return model, header
