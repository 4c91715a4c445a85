"""Operator-facing command line: synth, train, eval, predict, ablate, verify.

A JSON config file can supply every setting; explicit flags override file
values. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import verify as verify_mod
from .data import (AugmentationPlan, VolumeSample, WindowingSpec, augment,
                   extract_windows, list_dataset, load_dataset, load_volume,
                   save_mask, save_volume, synth_dataset, train_val_split)
from .errors import ConfigError, DataError, EngineError, NumericError
from .model import AtrousResUNet, ModelConfig, build, load_checkpoint
from .tensor import Tensor, stack
from .train import (AdamConfig, DiceLossConfig, MetricReport, TrainConfig,
                    ablation_run, binarize, evaluate, history_jsonl,
                    merge_reports, train_loop)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@dataclass
class RunConfig:
    """Bundle of every knob one command needs; JSON round-trips losslessly."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    windowing: WindowingSpec = field(default_factory=WindowingSpec)
    augmentation: AugmentationPlan = field(default_factory=AugmentationPlan)
    val_fraction: float = 0.1
    augment: bool = True
    data_dir: str | None = None
    out_dir: str | None = None

    def to_dict(self) -> dict:
        t = self.train
        return {
            "model": self.model.to_dict(),
            "train": {
                "epochs": t.epochs, "batch_size": t.batch_size, "lr": t.lr,
                "seed": t.seed,
                "dice": {"smooth": t.dice.smooth, "per_sample": t.dice.per_sample},
                "adam": None if t.adam is None else vars(t.adam),
            },
            "windowing": {"window_depth": self.windowing.window_depth,
                          "stride": self.windowing.stride},
            "augmentation": {
                "fractions": dict(self.augmentation.fractions),
                "seed": self.augmentation.seed,
                "morph_target": self.augmentation.morph_target,
                "elastic_alpha": self.augmentation.elastic_alpha,
                "elastic_sigma": self.augmentation.elastic_sigma,
                "grid_cells": self.augmentation.grid_cells,
                "grid_limit": self.augmentation.grid_limit,
                "optical_limit": self.augmentation.optical_limit,
            },
            "val_fraction": self.val_fraction,
            "augment": self.augment,
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        cfg = cls()
        if "model" in d:
            cfg.model = ModelConfig.from_dict(d["model"])
        if "train" in d:
            t = dict(d["train"])
            extra = set(t) - {"epochs", "batch_size", "lr", "seed", "dice", "adam"}
            if extra:
                raise ConfigError(f"unknown train config fields: {sorted(extra)}")
            dice = t.pop("dice", None)
            adam = t.pop("adam", None)
            cfg.train = TrainConfig(**t)
            if dice is not None:
                cfg.train.dice = DiceLossConfig(**dice)
            if adam is not None:
                cfg.train.adam = AdamConfig(**adam)
        if "windowing" in d:
            cfg.windowing = WindowingSpec(**d["windowing"])
        if "augmentation" in d:
            cfg.augmentation = AugmentationPlan(**d["augmentation"])
        for key in ("val_fraction", "augment", "data_dir", "out_dir"):
            if key in d:
                setattr(cfg, key, d[key])
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc


def _load_config_file(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return RunConfig.from_json(p.read_text())


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Explicit flags beat config-file values."""
    amap = vars(args)

    def pick(name):
        return amap.get(name)

    if pick("seed") is not None:
        cfg.model.seed = args.seed
        cfg.train.seed = args.seed
        cfg.augmentation.seed = args.seed
    for flag, target, attr in (
        ("levels", cfg.model, "levels"),
        ("base_channels", cfg.model, "base_channels"),
        ("norm", cfg.model, "norm_kind"),
        ("precision", cfg.model, "precision"),
        ("lr", cfg.train, "lr"),
        ("epochs", cfg.train, "epochs"),
        ("batch_size", cfg.train, "batch_size"),
        ("window_depth", cfg.windowing, "window_depth"),
        ("window_stride", cfg.windowing, "stride"),
    ):
        if pick(flag) is not None:
            setattr(target, attr, amap[flag])
    if pick("smooth") is not None:
        cfg.train.dice.smooth = args.smooth
    if pick("val_fraction") is not None:
        cfg.val_fraction = args.val_fraction
    if amap.get("no_augment"):
        cfg.augment = False
    if pick("data") is not None:
        cfg.data_dir = args.data
    if pick("out") is not None:
        cfg.out_dir = args.out
    return cfg


# ---------------------------------------------------------------------------
# windowed inference with overlap averaging


def stitched_probability(model: AtrousResUNet, vol: VolumeSample,
                         stride: int) -> np.ndarray:
    """Average overlapping window predictions over a whole volume."""
    depth = model.config.input_shape[0]
    spec = WindowingSpec(window_depth=depth, stride=stride)
    img = vol.image.data
    if img.shape[1:3] != model.config.input_shape[1:]:
        raise DataError(f"volume {vol.source_id}: in-plane shape {img.shape[1:3]} "
                        f"does not match model {model.config.input_shape[1:]}")
    acc = np.zeros(img.shape, dtype=np.float64)
    cnt = np.zeros((img.shape[0], 1, 1, 1), dtype=np.float64)
    for s in spec.starts(vol.depth):
        window = Tensor._wrap(img[s:s + depth].copy())
        prob = model.predict(stack([window]))
        acc[s:s + depth] += prob.data[0]
        cnt[s:s + depth] += 1.0
    return acc / cnt


def predict_mask(model: AtrousResUNet, vol: VolumeSample, stride: int,
                 threshold: float = 0.5) -> Tensor:
    prob = stitched_probability(model, vol, stride)
    return Tensor._wrap((prob >= threshold).astype(model_dtype(model)))


def model_dtype(model: AtrousResUNet):
    return np.float64 if model.config.precision == 64 else np.float32


def evaluate_volumes(model: AtrousResUNet, volumes: list[VolumeSample],
                     stride: int) -> tuple[list[tuple[str, MetricReport]], MetricReport]:
    per_volume = []
    for vol in volumes:
        mask = predict_mask(model, vol, stride)
        gt = Tensor._wrap(vol.mask.data.astype(mask.dtype))
        per_volume.append((vol.source_id, evaluate(mask, gt)))
    aggregate = merge_reports([r for _, r in per_volume])
    return per_volume, aggregate


def _report_text(per_volume, aggregate) -> str:
    lines = [json.dumps({"volume": vid, **rep.as_dict()}) for vid, rep in per_volume]
    lines.append(json.dumps({"aggregate": True, **aggregate.as_dict()}))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# dataset plumbing shared by train and ablate


def _prepare_samples(cfg: RunConfig):
    if cfg.data_dir is None:
        raise ConfigError("no data path given (use --data or config data_dir)")
    ddir = Path(cfg.data_dir)
    if not ddir.is_dir():
        raise ConfigError(f"data path {ddir} does not exist")
    volumes = load_dataset(ddir, precision=cfg.model.precision)
    if not volumes:
        raise DataError(f"no volumes found in {ddir}")
    v, h, w = volumes[0].image.dims[:3]
    for vol in volumes:
        if vol.image.dims[1:3] != (h, w):
            raise DataError(f"volume {vol.source_id}: in-plane shape "
                            f"{vol.image.dims[1:3]} differs from ({h}, {w})")
    cfg.model.input_shape = (cfg.windowing.window_depth, h, w)
    cfg.model.validate()
    train_vols, val_vols = train_val_split(volumes, cfg.val_fraction,
                                           seed=cfg.train.seed)
    train_windows = []
    for vol in train_vols:
        train_windows.extend(extract_windows(vol, cfg.windowing))
    if cfg.augment:
        train_windows, _ = augment(train_windows, cfg.augmentation)
    val_windows = []
    for vol in val_vols:
        val_windows.extend(extract_windows(vol, cfg.windowing))
    return train_vols, val_vols, train_windows, val_windows


def _check_train_config(cfg: RunConfig):
    cfg.train.validate()
    cfg.windowing.validate()
    cfg.augmentation.validate()
    if cfg.model.norm_kind == "batch" and cfg.train.batch_size < 2:
        raise ConfigError("batch normalization requires batch_size >= 2")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.out is None:
        raise ConfigError("synth requires --out")
    shape = tuple(args.shape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volumes = synth_dataset(args.n_volumes, shape, seed=args.seed or 0,
                            precision=args.precision or 32)
    for vol in volumes:
        save_volume(vol, out / vol.source_id)
    print(f"wrote {len(volumes)} volumes of shape {shape} to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _apply_overrides(_load_config_file(args.config), args)
    _check_train_config(cfg)
    if cfg.out_dir is None:
        raise ConfigError("train requires --out (or config out_dir)")
    _, val_vols, train_windows, val_windows = _prepare_samples(cfg)
    model = build(cfg.model)
    result = train_loop(model, train_windows, val_windows, cfg.train)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.log").write_text(history_jsonl(result.history))
    (out / "best.ckpt").write_bytes(result.best_checkpoint)
    (out / "config.json").write_text(cfg.to_json())
    best = load_checkpoint(result.best_checkpoint)
    per_volume, aggregate = evaluate_volumes(best, val_vols, cfg.windowing.stride)
    (out / "report.txt").write_text(_report_text(per_volume, aggregate))
    if result.halted:
        print(f"training halted: {result.halted}")
        print(f"artifacts in {out} (best checkpoint retained)")
        return EXIT_NUMERIC
    print(f"trained {len(result.history)} epochs; best epoch {result.best_epoch} "
          f"(val loss {result.best_val_loss:.6f}); held-out dice "
          f"{aggregate.dice:.4f}; artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    model = load_checkpoint(ckpt.read_bytes())
    ddir = Path(args.data)
    volumes = load_dataset(ddir, precision=model.config.precision)
    if not volumes:
        raise DataError(f"no volumes found in {ddir}")
    stride = args.window_stride or 5
    per_volume, aggregate = evaluate_volumes(model, volumes, stride)
    text = _report_text(per_volume, aggregate)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    model = load_checkpoint(ckpt.read_bytes())
    vol = load_volume(args.volume, precision=model.config.precision)
    mask = predict_mask(model, vol, args.window_stride or 5)
    save_mask(mask, args.out_path)
    frac = float(mask.data.mean())
    print(f"wrote mask for {vol.source_id} to {args.out_path} "
          f"(foreground fraction {frac:.4f})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _apply_overrides(_load_config_file(args.config), args)
    if cfg.train.batch_size < 2:
        raise ConfigError("ablate requires batch_size >= 2")
    _check_train_config(cfg)
    if cfg.out_dir is None:
        raise ConfigError("ablate requires --out (or config out_dir)")
    _, val_vols, train_windows, val_windows = _prepare_samples(cfg)
    result = ablation_run(cfg.model, train_windows, val_windows, cfg.train)
    out = Path(cfg.out_dir)
    for kind, arm in (("layer", result.layer), ("batch", result.batch)):
        arm_dir = out / kind
        arm_dir.mkdir(parents=True, exist_ok=True)
        (arm_dir / "history.log").write_text(history_jsonl(arm.history))
        (arm_dir / "best.ckpt").write_bytes(arm.best_checkpoint)
    (out / "report.txt").write_text(json.dumps(result.report(), indent=2) + "\n")
    (out / "config.json").write_text(cfg.to_json())
    print(f"ablation complete; paired report in {out / 'report.txt'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify_mod.run(args.scope)
    failures = 0
    for res in results:
        print(res.line())
        failures += 0 if res.passed else 1
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument parsing


def _add_common_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--norm", choices=("layer", "batch"))
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--window-depth", dest="window_depth", type=int)
    p.add_argument("--window-stride", dest="window_stride", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--smooth", type=float)
    p.add_argument("--no-augment", dest="no_augment", action="store_true")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arunet",
        description="Desk-scale volumetric segmentation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-volumes", dest="n_volumes", type=int, default=4)
    p.add_argument("--shape", type=int, nargs=3, default=(16, 32, 32),
                   metavar=("V", "H", "W"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_common_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--window-stride", dest="window_stride", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="write a predicted mask for one volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--volume", required=True, help="volume base path (no suffix)")
    p.add_argument("--out-path", dest="out_path", required=True)
    p.add_argument("--window-stride", dest="window_stride", type=int)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("ablate", help="paired layer-vs-batch normalization runs")
    _add_common_train_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("verify", help="run the self-verification suites")
    p.add_argument("--scope", choices=("all", "grad", "oracle"), default="all")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
