"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .data import DatasetManifest, crop_to_scale, degrade, load_png, make_pair, save_png, as_rgb
from .evaluation import eval_dataset, export_weight_maps
from .judge import JudgeSpec
from .trainer import (
    TrainConfig,
    four_loss_run,
    load_sr_model,
    load_weight_model,
    train_run,
)

logger = logging.getLogger("tlw")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable); VALUE is parsed as JSON when possible")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tlw", description="Super-resolution training with trainable per-pixel loss weights.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="joint SR / weighting-network training")
    _common(p)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="PSNR-Y and judge distance of a checkpoint on a manifest")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scale", type=int)
    p.add_argument("--split", help="only manifest entries with this split tag")
    p.add_argument("--leg", help="which SR model of a multi-loss checkpoint")

    p = sub.add_parser("degrade", help="bicubic-downscale every PNG in a folder")
    _common(p)
    p.add_argument("--input", required=True, help="folder of PNG images")
    p.add_argument("--scale", type=int, required=True)

    p = sub.add_parser("export-weights", help="render weight maps of one or more checkpoints")
    _common(p)
    p.add_argument("--checkpoint", required=True, nargs="+")
    p.add_argument("--input", required=True, help="folder of PNG images or a manifest JSON")
    p.add_argument("--scale", type=int)

    p = sub.add_parser("compare-losses", help="train L1, MSE, TLW+L1, TLW+MSE side by side")
    _common(p)
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> TrainConfig:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        if key.startswith("judge."):
            data.setdefault("judge", dict(TrainConfig().judge))[key[len("judge."):]] = _parse_value(value)
        else:
            data[key] = _parse_value(value)
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        return TrainConfig.from_dict(data)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _input_hash(config: TrainConfig, base: Path) -> str:
    h = hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode())
    for name in ("train_manifest", "val_manifest"):
        rel = getattr(config, name)
        if rel:
            h.update(DatasetManifest.load(base / rel).content_hash().encode())
    return h.hexdigest()


def write_run_json(out: Path, command: str, config: TrainConfig, extra: Optional[dict] = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "config": config.to_dict(),
        "input_hash": _input_hash(config, Path.cwd()),
    }
    if extra:
        record.update(extra)
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _images_in(path: Path) -> List[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if path.suffix.lower() == ".json":
        return DatasetManifest.load(path).paths
    raise FileNotFoundError(f"not a folder or manifest: {path}")


def cmd_train(args, config: TrainConfig) -> None:
    out = Path(args.out)
    write_run_json(out, "train", config, {"resume": args.resume})
    train_run(config, out, resume=args.resume)


def cmd_compare(args, config: TrainConfig) -> None:
    out = Path(args.out)
    write_run_json(out, "compare-losses", config)
    _, table = four_loss_run(config, out)
    print(f"{'loss':<10}{'psnr_y':>12}{'judge_dist':>14}")
    for row in table:
        print(f"{row['loss']:<10}{row['psnr_y']:>12.4f}{row['judge_dist']:>14.6f}")


def cmd_eval(args, config: TrainConfig) -> None:
    out = Path(args.out)
    scale = args.scale or config.scale
    manifest = DatasetManifest.load(args.manifest, scale)
    write_run_json(out, "eval", config, {"checkpoint": args.checkpoint, "manifest": args.manifest})
    spec = config.judge_spec if (args.config or any(o.startswith("judge") for o in args.overrides)) else None
    report = eval_dataset(
        args.checkpoint, manifest.select(args.split), scale, spec, out, leg=args.leg, dataset=Path(args.manifest).stem
    )
    print(f"mean PSNR-Y {report.mean_psnr_y:.4f} dB, mean judge distance {report.mean_judge_dist:.6f}")


def cmd_degrade(args, config: TrainConfig) -> None:
    out = Path(args.out)
    paths = _images_in(Path(args.input))
    write_run_json(out, "degrade", config, {"input": args.input, "scale": args.scale})
    for p in paths:
        hr = crop_to_scale(as_rgb(load_png(p)), args.scale)
        save_png(degrade(hr, args.scale), out / f"{p.stem}x{args.scale}.png")


def cmd_export(args, config: TrainConfig) -> None:
    out = Path(args.out)
    paths = _images_in(Path(args.input))
    write_run_json(out, "export-weights", config, {"checkpoints": args.checkpoint})
    for ckpt in args.checkpoint:
        weight_model, header = load_weight_model(ckpt)
        legs = header["legs"]
        leg = next((l[0] for l in legs if l[2]), legs[0][0])
        sr_model, _, _ = load_sr_model(ckpt, leg)
        scale = args.scale or header["config"]["scale"]
        pairs = [make_pair(load_png(p), scale, name=p.stem) for p in paths]
        export_weight_maps(weight_model, sr_model, pairs, header["k"], out, header["state"]["epoch"])


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "degrade": cmd_degrade,
    "export-weights": cmd_export,
    "compare-losses": cmd_compare,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        config = resolve_config(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
