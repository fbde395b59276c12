"""Fine-tuning and linear probing with AdamW / SGD and cosine schedules.

Fine-tuning trains backbone, context parameters, and classifier head
jointly; probing freezes everything except a freshly zeroed head and
uses SGD with momentum.  Learning rate warms up linearly then decays on
a cosine; weight decay rises on a cosine from its start to its end
value.  Decay is decoupled and skipped for biases, norm parameters, the
CLS token, and context tokens.  Everything is seeded, so a fixed config
reproduces the exact trajectory.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .context import CONTEXT_KIND_NAMES, ContextViT, GroupedBatch
from .data import DatasetSplit, Subset, batches_per_epoch, make_batches
from .rng import child_seed
from .tensor import Tape, Tensor, backward

__all__ = [
    "TrainConfig",
    "AdamWState",
    "SGDState",
    "cross_entropy",
    "batch_cross_entropy",
    "is_decay_exempt",
    "adamw_step",
    "sgd_momentum_step",
    "schedules",
    "TrainResult",
    "fine_tune",
    "linear_probe",
    "write_metrics_csv",
    "write_summary_json",
]

_BETA1, _BETA2, _EPS = 0.9, 0.999, 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 3e-3
    final_lr: float = 1e-5
    warmup_epochs: int = 2
    weight_decay_start: float = 0.04
    weight_decay_end: float = 0.4
    momentum: float = 0.9
    seed: int = 0
    context_kind: str = "none"
    sampler: str = "uniform"
    mode: str = "finetune"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ValueError("warmup_epochs must satisfy 0 <= warmup < epochs")
        if self.base_lr <= 0 or self.final_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in ("finetune", "probe"):
            raise ValueError(f"mode must be finetune or probe, got {self.mode!r}")
        if self.context_kind not in CONTEXT_KIND_NAMES:
            raise ValueError(f"unknown context kind {self.context_kind!r}")
        if self.sampler not in ("uniform", "context"):
            raise ValueError(f"sampler must be uniform or context, got {self.sampler!r}")


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] for one [K] logit vector, stable for
    large logit magnitudes."""
    k = logits.shape[-1]
    label = int(label)
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    row = T.reshape(logits, (1, k))
    lse = T.logsumexp(row, axis=-1)
    picked = T.select_columns(row, [label])
    return T.reshape(lse - picked, ())


def batch_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over a [B, K] batch."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels out of range for {k} classes")
    lse = T.logsumexp(logits, axis=-1)
    picked = T.select_columns(logits, labels)
    return T.mean_axis(lse - picked)


def is_decay_exempt(name: str) -> bool:
    """Biases, norm parameters, the CLS token, and context tokens skip decay."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf.startswith("b"):  # b, bias, b1, bq, ...
        return True
    if "norm" in name:
        return True
    if "cls_token" in name or "oracle_table" in name:
        return True
    return False


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float, wd: float) -> None:
    """One decoupled-decay Adam update; reads each parameter's ``.grad``
    (missing grads count as zero, which happens for unused context heads)."""
    if lr < 0:  # 0 is legitimate: warmup starts there (moments still advance)
        raise ValueError("lr must be >= 0")
    if wd < 0:
        raise ValueError("wd must be >= 0")
    state.step += 1
    t = state.step
    bc1 = 1.0 - _BETA1 ** t
    bc2 = 1.0 - _BETA2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= _BETA1
        m += (1.0 - _BETA1) * g
        v *= _BETA2
        v += (1.0 - _BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + _EPS)
        if not is_decay_exempt(name):
            update = update + wd * p.data
        p.data = p.data - lr * update


@dataclass
class SGDState:
    velocity: dict[str, np.ndarray]

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "SGDState":
        return cls(velocity={k: np.zeros_like(p.data) for k, p in params.items()})


def sgd_momentum_step(params: dict[str, Tensor], state: SGDState, lr: float, momentum: float = 0.9) -> None:
    if lr < 0:
        raise ValueError("lr must be >= 0")
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        vel = state.velocity[name]
        vel *= momentum
        vel += g
        p.data = p.data - lr * vel


def schedules(step: int, total_steps: int, warmup_steps: int, config: TrainConfig) -> tuple[float, float]:
    """(lr, wd) at an optimizer step, 0-indexed over ``total_steps``.

    lr: linear 0 -> base_lr across warmup, then cosine base_lr -> final_lr
    landing exactly on final_lr at the last step.  wd: cosine
    weight_decay_start -> weight_decay_end over the whole run.
    """
    if total_steps < 1 or not (0 <= step < total_steps):
        raise ValueError(f"step {step} outside run of {total_steps} steps")
    if warmup_steps >= total_steps:
        raise ValueError("warmup covers the entire run")
    if warmup_steps > 0 and step < warmup_steps:
        lr = config.base_lr * step / warmup_steps
    else:
        span = max(total_steps - 1 - warmup_steps, 1)
        progress = (step - warmup_steps) / span
        lr = config.final_lr + 0.5 * (config.base_lr - config.final_lr) * (1.0 + math.cos(math.pi * progress))
    wd_span = max(total_steps - 1, 1)
    wd_progress = step / wd_span
    wd = config.weight_decay_end + 0.5 * (
        config.weight_decay_start - config.weight_decay_end
    ) * (1.0 + math.cos(math.pi * wd_progress))
    return lr, wd


def _split_accuracy(model: ContextViT, subset: Subset, batch_size: int) -> float:
    """Deterministic sequential-batch accuracy (context from each batch)."""
    if subset.size == 0:
        raise ValueError("accuracy over an empty split")
    correct = 0
    for start in range(0, subset.size, batch_size):
        idx = np.arange(start, min(start + batch_size, subset.size))
        batch = GroupedBatch(subset.images[idx], subset.labels[idx], subset.groups[idx])
        with Tape():
            _, logits = model.forward(batch, train=False)
        correct += int((np.argmax(logits.data, axis=1) == batch.labels).sum())
    return correct / subset.size


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params: dict[str, Tensor], snapshot: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data = snapshot[k].copy()


@dataclass
class TrainResult:
    model: ContextViT
    best_epoch: int
    best_val_accuracy: float
    metrics_rows: list = field(default_factory=list)  # (epoch, split, metric, value, seed, kind)
    final_train_loss: float = float("nan")
    step_losses: list = field(default_factory=list)  # one entry per optimizer step


def fine_tune(model: ContextViT, data: DatasetSplit, config: TrainConfig) -> TrainResult:
    """Joint training of backbone + context + head with per-epoch validation
    and best-validation model selection (earliest epoch wins ties)."""
    params = model.trainable_parameters()
    state = AdamWState.init(params)
    train = data.train
    steps_per_epoch = batches_per_epoch(train, config.batch_size, config.sampler)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch
    kind_name = model.kind.name

    rows = []
    all_losses: list[float] = []
    best_acc, best_epoch, best_params, best_ema = -1.0, -1, None, None
    step = 0
    epoch_loss = float("nan")
    for epoch in range(config.epochs):
        losses = []
        for batch in make_batches(train, config.batch_size, config.sampler, child_seed(config.seed, "epoch", epoch)):
            lr, wd = schedules(step, total_steps, warmup_steps, config)
            try:
                with Tape() as tape:
                    _, logits = model.forward(batch, train=True, sample_seed=child_seed(config.seed, "draw", step))
                    loss = batch_cross_entropy(logits, batch.labels)
                    backward(loss, tape)
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise FloatingPointError(f"loss is {loss_val}")
                adamw_step(params, state, lr, wd)
            except (FloatingPointError, ValueError) as exc:
                # non-finite values surface either as the loop's own loss
                # check, the optimizer's gradient check, or an input guard
                # inside softmax/logsumexp; all of them mean divergence here
                if "non-finite" not in str(exc) and "loss is" not in str(exc):
                    raise
                raise FloatingPointError(
                    f"training diverged at epoch {epoch} step {step} (kind {kind_name}, lr {lr:g}): {exc}"
                ) from exc
            losses.append(loss_val)
            all_losses.append(loss_val)
            step += 1
        epoch_loss = float(np.mean(losses))
        val_acc = _split_accuracy(model, data.val, config.batch_size)
        rows.append((epoch, "train", "loss", epoch_loss, config.seed, kind_name))
        rows.append((epoch, "val", "accuracy", val_acc, config.seed, kind_name))
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_params = _snapshot(params)
            best_ema = {k: v.copy() for k, v in model.ema_state.items()}

    _restore(params, best_params)
    model.ema_state = best_ema
    return TrainResult(
        model=model,
        best_epoch=best_epoch,
        best_val_accuracy=best_acc,
        metrics_rows=rows,
        final_train_loss=epoch_loss,
        step_losses=all_losses,
    )


def linear_probe(model: ContextViT, data: DatasetSplit, config: TrainConfig) -> TrainResult:
    """Train a fresh zero-initialized affine head over frozen features.

    The backbone and context parameters are wrapped as constants, so no
    gradient buffer can even exist for them; context inference still runs
    during every forward.
    """
    frozen_backbone = {k: Tensor(p.data, requires_grad=False) for k, p in model.backbone.items()}
    frozen_context = {k: Tensor(p.data, requires_grad=False) for k, p in model.context.items()}
    probe = ContextViT(
        config=model.config,
        kind=model.kind,
        backbone=frozen_backbone,
        context=frozen_context,
        ema_state={k: v.copy() for k, v in model.ema_state.items()},
    )
    d, k = model.config.dim, model.config.num_classes
    probe.backbone["head.w"] = Tensor(np.zeros((d, k)), requires_grad=True)
    probe.backbone["head.b"] = Tensor(np.zeros(k), requires_grad=True)
    params = {"head.w": probe.backbone["head.w"], "head.b": probe.backbone["head.b"]}
    state = SGDState.init(params)

    train = data.train
    steps_per_epoch = batches_per_epoch(train, config.batch_size, config.sampler)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch
    kind_name = model.kind.name

    rows = []
    best_acc, best_epoch, best_params = -1.0, -1, None
    step = 0
    epoch_loss = float("nan")
    for epoch in range(config.epochs):
        losses = []
        for batch in make_batches(train, config.batch_size, config.sampler, child_seed(config.seed, "probe_epoch", epoch)):
            with Tape() as tape:
                _, logits = probe.forward(batch, train=False, sample_seed=child_seed(config.seed, "probe_draw", step))
                loss = batch_cross_entropy(logits, batch.labels)
                backward(loss, tape)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise FloatingPointError(f"probe diverged: loss {loss_val} at epoch {epoch} step {step}")
            lr, _ = schedules(step, total_steps, warmup_steps, config)
            sgd_momentum_step(params, state, lr, config.momentum)
            losses.append(loss_val)
            step += 1
        epoch_loss = float(np.mean(losses))
        val_acc = _split_accuracy(probe, data.val, config.batch_size)
        rows.append((epoch, "train", "probe_loss", epoch_loss, config.seed, kind_name))
        rows.append((epoch, "val", "probe_accuracy", val_acc, config.seed, kind_name))
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_params = _snapshot(params)

    _restore(params, best_params)
    return TrainResult(
        model=probe,
        best_epoch=best_epoch,
        best_val_accuracy=best_acc,
        metrics_rows=rows,
        final_train_loss=epoch_loss,
    )


def write_metrics_csv(rows, path: str) -> None:
    """(epoch, split, metric, value, seed, kind) rows; floats via repr so
    identical runs produce identical bytes."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "split", "metric", "value", "seed", "kind"])
        for epoch, split, metric, value, seed, kind in rows:
            writer.writerow([epoch, split, metric, repr(float(value)), seed, kind])


def write_summary_json(summary: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=float)
        f.write("\n")
