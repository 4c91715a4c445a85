"""Dice loss, Adam, the metric suite and the training / ablation loops."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Node, Parameter, Tape, backward
from .errors import ConfigError, DataError, NumericError, ShapeError
from .model import AtrousResUNet, ModelConfig, build, save_checkpoint
from .tensor import Tensor, stack


@dataclass
class DiceLossConfig:
    """smooth stabilizes the ratio; per_sample averages sample-wise dices
    instead of pooling all voxels of the batch."""

    smooth: float = 1.0
    per_sample: bool = False

    def validate(self):
        if self.smooth <= 0:
            raise ConfigError(f"dice smooth must be positive, got {self.smooth}")


def soft_dice_loss(pred: Node, gt: Tensor, cfg: DiceLossConfig | None = None) -> Node:
    """1 - (2*sum(pred*gt) + smooth) / (sum(pred) + sum(gt) + smooth).

    pred holds probabilities in [0, 1]; gt is binary. Sums run over every
    voxel of the batch unless per_sample is set.
    """
    cfg = cfg or DiceLossConfig()
    cfg.validate()
    p = pred.value.data
    g = gt.data
    if p.shape != g.shape:
        raise ShapeError(f"dice: shape mismatch {p.shape} vs {g.shape}")
    if not np.all((g == 0) | (g == 1)):
        raise DataError("dice: ground truth mask must be binary")
    s = cfg.smooth
    if cfg.per_sample:
        axes = tuple(range(1, p.ndim))
        inter = (p * g).sum(axis=axes)
        denom = p.sum(axis=axes) + g.sum(axis=axes) + s
        dice = (2.0 * inter + s) / denom
        loss = np.asarray(1.0 - dice.mean(), dtype=p.dtype)
        n = p.shape[0]

        def bwd(gy):
            shape = (-1,) + (1,) * (p.ndim - 1)
            num = (2.0 * inter + s).reshape(shape)
            den = denom.reshape(shape)
            grad = (num - 2.0 * g * den) / (den * den) / n
            return (gy * grad.astype(p.dtype),)

    else:
        inter = float((p * g).sum())
        denom = float(p.sum()) + float(g.sum()) + s
        loss = np.asarray(1.0 - (2.0 * inter + s) / denom, dtype=p.dtype)

        def bwd(gy):
            grad = ((2.0 * inter + s) - 2.0 * g * denom) / (denom * denom)
            return (gy * grad.astype(p.dtype),)

    return pred.tape.record("soft_dice_loss", Tensor._wrap(loss), (pred,), bwd)


@dataclass
class AdamConfig:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam with bias correction over a fixed parameter list."""

    def __init__(self, params: list[Parameter], cfg: AdamConfig | None = None):
        self.cfg = cfg or AdamConfig()
        self.params = [p for p in params if p.trainable]
        self.m = [np.zeros(p.value.dims, dtype=p.value.dtype) for p in self.params]
        self.v = [np.zeros(p.value.dims, dtype=p.value.dtype) for p in self.params]
        self.step_count = 0

    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for {p.name}; step aborted")
        self.step_count += 1
        c = self.cfg
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * np.square(g)
            m_hat = self.m[i] / (1.0 - c.beta1 ** t)
            v_hat = self.v[i] / (1.0 - c.beta2 ** t)
            update = c.lr * m_hat / (np.sqrt(v_hat) + c.eps)
            p.assign(Tensor._wrap((p.value.data - update).astype(p.value.dtype)))

    def zero_grads(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class MetricReport:
    """Confusion counts and the five ratios derived from them.

    Ratios with a zero denominator are None (absent), except dice, which is
    1.0 when both masks are empty (perfect agreement).
    """

    tp: int
    fp: int
    tn: int
    fn: int
    dice: float = field(init=False)
    accuracy: float = field(init=False)
    precision: float | None = field(init=False)
    recall: float | None = field(init=False)
    specificity: float | None = field(init=False)

    def __post_init__(self):
        tp, fp, tn, fn = self.tp, self.fp, self.tn, self.fn
        total = tp + fp + tn + fn
        if total <= 0:
            raise ShapeError("metric counts must cover at least one voxel")
        self.dice = 1.0 if (2 * tp + fp + fn) == 0 else 2.0 * tp / (2 * tp + fp + fn)
        self.accuracy = (tp + tn) / total
        self.precision = tp / (tp + fp) if (tp + fp) else None
        self.recall = tp / (tp + fn) if (tp + fn) else None
        self.specificity = tn / (tn + fp) if (tn + fp) else None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "dice": self.dice, "accuracy": self.accuracy,
                "precision": self.precision, "recall": self.recall,
                "specificity": self.specificity}


def evaluate(pred_mask: Tensor, gt_mask: Tensor) -> MetricReport:
    """Exact confusion counts between two binary masks."""
    p, g = pred_mask.data, gt_mask.data
    if p.shape != g.shape:
        raise ShapeError(f"evaluate: shape mismatch {p.shape} vs {g.shape}")
    for name, arr in (("prediction", p), ("ground truth", g)):
        if not np.all((arr == 0) | (arr == 1)):
            raise DataError(f"evaluate: {name} mask is not binary")
    pb = p != 0
    gb = g != 0
    tp = int(np.count_nonzero(pb & gb))
    fp = int(np.count_nonzero(pb & ~gb))
    fn = int(np.count_nonzero(~pb & gb))
    tn = p.size - tp - fp - fn
    return MetricReport(tp=tp, fp=fp, tn=tn, fn=fn)


def merge_reports(reports: list[MetricReport]) -> MetricReport:
    """Aggregate by summing confusion counts."""
    if not reports:
        raise DataError("cannot merge an empty report list")
    return MetricReport(tp=sum(r.tp for r in reports), fp=sum(r.fp for r in reports),
                        tn=sum(r.tn for r in reports), fn=sum(r.fn for r in reports))


def binarize(prob: Tensor, threshold: float = 0.5) -> Tensor:
    return Tensor._wrap((prob.data >= threshold).astype(prob.dtype))


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 2
    lr: float = 1e-5
    seed: int = 0
    dice: DiceLossConfig = field(default_factory=DiceLossConfig)
    adam: AdamConfig | None = None

    def validate(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        self.dice.validate()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    metrics: MetricReport

    def as_dict(self) -> dict:
        d = {"epoch": self.epoch, "train_loss": self.train_loss,
             "val_loss": self.val_loss}
        m = self.metrics.as_dict()
        d.update({"dice": m["dice"], "accuracy": m["accuracy"],
                  "precision": m["precision"], "recall": m["recall"],
                  "specificity": m["specificity"]})
        return d


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_checkpoint: bytes
    best_epoch: int | None
    best_val_loss: float | None
    halted: str | None = None


def history_jsonl(history: list[EpochRecord]) -> str:
    """Line-delimited structured-text training log."""
    return "".join(json.dumps(rec.as_dict()) + "\n" for rec in history)


def _batch(samples, idx):
    images = stack([samples[i].image for i in idx])
    masks = stack([samples[i].mask for i in idx])
    return images, masks


def _validate(model: AtrousResUNet, val_samples, dice_cfg) -> tuple[float, MetricReport]:
    losses = []
    reports = []
    for sample in val_samples:
        x = stack([sample.image])
        gt = stack([sample.mask])
        tape = Tape()
        out = model.forward(tape, x, training=False)
        losses.append(soft_dice_loss(out, gt, dice_cfg).value.item())
        reports.append(evaluate(binarize(out.value), gt))
    return float(np.mean(losses)), merge_reports(reports)


def train_loop(model: AtrousResUNet, train_samples, val_samples,
               cfg: TrainConfig) -> TrainResult:
    """Seeded epoch loop with best-checkpoint selection on validation loss.

    Batches are drawn by a seeded shuffle; a trailing partial batch is
    dropped so every step sees the configured batch size. Given the same
    seed and data the run is bit-reproducible in 64-bit mode. A non-finite
    loss halts the run and keeps the best checkpoint seen so far.
    """
    cfg.validate()
    if not train_samples:
        raise DataError("training set is empty")
    if not val_samples:
        raise DataError("validation set is empty")
    if cfg.batch_size > len(train_samples):
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds training set size "
                          f"{len(train_samples)}")
    adam = Adam(model.parameters(),
                cfg.adam or AdamConfig(lr=cfg.lr))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    history: list[EpochRecord] = []
    best_bytes = save_checkpoint(model)
    best_epoch = None
    best_val = None
    halted = None
    training_flag = True
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_samples))
        steps = len(train_samples) // cfg.batch_size
        epoch_losses = []
        for s in range(steps):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            images, masks = _batch(train_samples, idx)
            tape = Tape()
            out = model.forward(tape, images, training=training_flag)
            loss = soft_dice_loss(out, masks, cfg.dice)
            loss_val = loss.value.item()
            if not np.isfinite(loss_val):
                halted = f"non-finite training loss at epoch {epoch}"
                break
            adam.zero_grads()
            backward(loss)
            try:
                adam.step()
            except NumericError as exc:
                halted = str(exc)
                break
            epoch_losses.append(loss_val)
        if halted:
            break
        val_loss, report = _validate(model, val_samples, cfg.dice)
        history.append(EpochRecord(epoch=epoch,
                                   train_loss=float(np.mean(epoch_losses)),
                                   val_loss=val_loss, metrics=report))
        if best_val is None or val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_bytes = save_checkpoint(model)
    return TrainResult(history=history, best_checkpoint=best_bytes,
                       best_epoch=best_epoch, best_val_loss=best_val, halted=halted)


@dataclass
class AblationResult:
    layer: TrainResult
    batch: TrainResult
    differing_fields: list[str]

    def report(self) -> dict:
        def arm(result: TrainResult):
            last = result.history[-1].metrics.as_dict() if result.history else None
            return {"epochs_run": len(result.history),
                    "best_epoch": result.best_epoch,
                    "best_val_loss": result.best_val_loss,
                    "final_metrics": last,
                    "halted": result.halted}

        return {"layer_norm": arm(self.layer), "batch_norm": arm(self.batch),
                "differing_fields": self.differing_fields}


def ablation_run(model_config: ModelConfig, train_samples, val_samples,
                 cfg: TrainConfig) -> AblationResult:
    """Train twice, identical in everything except norm_kind.

    The two arm configs are diffed field by field to prove norm_kind is the
    single difference before either run starts.
    """
    if cfg.batch_size < 2:
        raise ConfigError("ablation requires batch_size >= 2 (batch-norm arm)")
    arms = {}
    configs = {}
    for kind in ("layer", "batch"):
        arm_cfg = ModelConfig(**{**model_config.to_dict(), "norm_kind": kind})
        configs[kind] = arm_cfg
        arms[kind] = train_loop(build(arm_cfg), train_samples, val_samples, cfg)
    diff = [k for k in configs["layer"].__dataclass_fields__
            if getattr(configs["layer"], k) != getattr(configs["batch"], k)]
    if diff != ["norm_kind"]:
        raise ConfigError(f"ablation arms differ in {diff}, expected only norm_kind")
    return AblationResult(layer=arms["layer"], batch=arms["batch"],
                          differing_fields=diff)
