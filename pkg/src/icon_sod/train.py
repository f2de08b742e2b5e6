"""Toy training harness: SGD with momentum, warm-up + linear decay, clipping.

Runs are deterministic for a fixed seed: data order, augmentation and
initialization all come from seeded generators, so two identical runs
produce byte-identical checkpoints and logs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import DatasetIndex, load_batch
from .errors import ConfigError
from .losses import cpr_loss
from .metrics import fnr as fnr_metric
from .metrics import mae as mae_metric
from .network import (
    IconConfig,
    IconParams,
    icon_forward,
    infer,
    init_params,
    save_checkpoint,
)
from .nn import parameters
from .tensor import Tensor, no_grad


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 60
    batch_size: int = 8
    warmup_epochs: int = 5
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs)")

    def to_kv(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name].strip()
            kwargs[f.name] = float(raw) if f.type == "float" else int(raw)
        return cls(**kwargs)


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up to the configured rate, then linear decay to zero.

    The rate at the last warm-up epoch equals ``cfg.lr`` exactly; decay
    reaches zero one step past the final epoch.
    """
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    return cfg.lr * (cfg.epochs - epoch) / span


class SGD:
    """Momentum SGD; weight decay is added to the gradient (classic, not decoupled)."""

    def __init__(self, params: list[Tensor], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint l2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def validate_model(
    params: IconParams, config: IconConfig, index: DatasetIndex, batch_size: int = 8
) -> tuple[float, float]:
    """Mean MAE and mean FNR over a held-out index (eval-mode forward)."""
    maes, fnrs = [], []
    for start in range(0, len(index), batch_size):
        order = range(start, min(start + batch_size, len(index)))
        x, y = load_batch(index, order, config.input_size, train=False)
        pred = infer(Tensor(x.astype(config.np_dtype)), params, config)
        for b in range(pred.shape[0]):
            p, g = pred[b, 0], y[b, 0]
            maes.append(mae_metric(p, g))
            if g.sum() > 0:
                fnrs.append(fnr_metric(p, g))
    return float(np.mean(maes)), float(np.mean(fnrs)) if fnrs else float("nan")


@dataclass
class TrainResult:
    epochs_run: int
    train_loss: list[float]
    val_mae: list[float]
    val_fnr: list[float]
    best_epoch: int
    best_val_mae: float
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path


def train(
    train_index: DatasetIndex,
    val_index: DatasetIndex,
    icon_cfg: IconConfig,
    train_cfg: TrainConfig,
    out_dir,
) -> TrainResult:
    """Train from scratch; log per-epoch CSV and keep best/last checkpoints.

    A non-finite loss aborts with a diagnostic dump of the offending batch
    (``nan_batch.npz`` next to the checkpoints).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = init_params(icon_cfg, seed=train_cfg.seed)
    trainable = parameters(params)
    opt = SGD(trainable, momentum=train_cfg.momentum, weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed + 1)
    dt = icon_cfg.np_dtype

    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    log_path = out_dir / "train_log.csv"
    history_loss: list[float] = []
    history_mae: list[float] = []
    history_fnr: list[float] = []
    best_mae = float("inf")
    best_epoch = -1

    with open(log_path, "w", newline="") as fh:
        log = csv.writer(fh)
        log.writerow(["epoch", "lr", "train_loss", "val_mae", "val_fnr"])
        for epoch in range(train_cfg.epochs):
            lr = lr_at_epoch(epoch, train_cfg)
            order = rng.permutation(len(train_index))
            epoch_losses = []
            for start in range(0, len(order), train_cfg.batch_size):
                batch_ids = order[start : start + train_cfg.batch_size]
                x, y = load_batch(
                    train_index, batch_ids, icon_cfg.input_size, train=True, rng=rng
                )
                image = Tensor(x.astype(dt))
                target = Tensor(y.astype(dt))
                pred = icon_forward(image, params, icon_cfg, training=True)
                loss = cpr_loss(pred.side_logits, target)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    dump = out_dir / "nan_batch.npz"
                    np.savez(dump, images=x, masks=y, batch_ids=batch_ids, epoch=epoch)
                    raise RuntimeError(
                        f"non-finite loss {loss_val} at epoch {epoch}; "
                        f"offending batch dumped to {dump}"
                    )
                opt.zero_grad()
                loss.backward()
                clip_global_norm(trainable, train_cfg.clip_norm)
                with no_grad():
                    opt.step(lr)
                epoch_losses.append(loss_val)

            train_loss = float(np.mean(epoch_losses))
            val_mae, val_fnr = validate_model(params, icon_cfg, val_index)
            history_loss.append(train_loss)
            history_mae.append(val_mae)
            history_fnr.append(val_fnr)
            log.writerow(
                [epoch, f"{lr:.10g}", f"{train_loss:.10g}", f"{val_mae:.10g}", f"{val_fnr:.10g}"]
            )
            fh.flush()
            if val_mae < best_mae:
                best_mae = val_mae
                best_epoch = epoch
                save_checkpoint(best_path, params, icon_cfg, {"epoch": epoch})

    save_checkpoint(last_path, params, icon_cfg, {"epoch": train_cfg.epochs - 1})
    return TrainResult(
        epochs_run=train_cfg.epochs,
        train_loss=history_loss,
        val_mae=history_mae,
        val_fnr=history_fnr,
        best_epoch=best_epoch,
        best_val_mae=best_mae,
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        log_path=log_path,
    )


def smoothed(series: list[float], window: int = 5) -> list[float]:
    """Trailing moving average, short windows at the start."""
    out = []
    for i in range(len(series)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(series[lo : i + 1])))
    return out
