"""SGD training with momentum, warmup and cosine decay.

The optimizer only ever touches mask-true parameters of a TunableModel.
Velocity update: v <- mu * v + g; parameter update: p <- p - lr(step) * (v
+ wd * p) with weight decay applied to decay-tagged weights only (conv and
linear kernels), never to biases, norm affines or blend scalars.  Gradients
are consumed and cleared by each step.

Everything is deterministic given (model state, data, hyperparams, seed):
batch order comes from one seeded generator, the schedule is a pure
function of the step index, and evaluation runs under no_grad.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import Tensor, no_grad
from .backbones import StagedModel
from .data import Dataset
from .paradigms import TunableModel, count_trainable_params, verify_frozen


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Hyperparams:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    max_steps: int | None = None
    clip_norm: float | None = None  # global gradient-norm cap; None disables

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError(f"bad hyperparameters: {self}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")


@dataclass
class OptimizerState:
    lr_base: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    total_steps: int | None = None  # None: constant lr, no schedule
    warmup_frac: float = 0.0
    velocity: dict = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        if self.total_steps is None:
            return self.lr_base
        warmup = int(round(self.warmup_frac * self.total_steps))
        if step < warmup:
            return self.lr_base * (step + 1) / warmup
        span = max(1, self.total_steps - warmup)
        progress = (step - warmup) / span
        return 0.5 * self.lr_base * (1.0 + math.cos(math.pi * progress))


def clip_gradients(tm: TunableModel, max_norm: float) -> float:
    """Scale all trainable gradients so their global L2 norm is <= max_norm.

    Returns the pre-clip norm.  The norm accumulates in float64 so the
    scaling factor is deterministic regardless of parameter iteration order.
    """
    reg = tm.model.registry()
    total = 0.0
    grads = []
    for name, trainable in tm.mask.items():
        if not trainable:
            continue
        g = reg[name][0].grad
        if g is None:
            continue
        grads.append(g)
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if math.isfinite(norm) and norm > max_norm:
        scale = np.float32(max_norm / norm) if grads and grads[0].dtype == np.float32 else max_norm / norm
        for g in grads:
            g *= scale
    return norm


def sgd_step(tm: TunableModel, opt: OptimizerState, step: int):
    """One update over every mask-true parameter; clears their gradients."""
    lr = opt.lr_at(step)
    reg = tm.model.registry()
    for name, trainable in tm.mask.items():
        if not trainable:
            continue
        tensor, info = reg[name]
        if tensor.grad is None:
            raise RuntimeError(
                f"trainable parameter {name!r} has no gradient at step {step}"
            )
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(tensor.data)
            opt.velocity[name] = v
        elif v.shape != tensor.grad.shape:
            raise RuntimeError(
                f"velocity shape {v.shape} does not match gradient shape "
                f"{tensor.grad.shape} for {name!r}; optimizer state belongs "
                "to a different model"
            )
        v *= opt.momentum
        v += tensor.grad
        if info.decay and opt.weight_decay:
            update = v + opt.weight_decay * tensor.data
        else:
            update = v
        tensor.data = tensor.data - lr * update
        tensor.grad = None


@dataclass
class TrainReport:
    train_losses: list      # mean loss per epoch
    val_accuracies: list    # accuracy per epoch
    final_accuracy: float
    trainable_params: int
    steps: int
    seed: int
    wall_seconds: float
    frozen_changed: list    # names of frozen tensors that moved; must be empty

    @property
    def frozen_clean(self) -> bool:
        return not self.frozen_changed


def evaluate(model: StagedModel, ds: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy; builds no graph."""
    n = len(ds)
    correct = 0
    with no_grad(), np.errstate(over="ignore", invalid="ignore"):
        for b0 in range(0, n, batch_size):
            x = Tensor(ds.images[b0 : b0 + batch_size])
            logits = model.logits(x)
            pred = logits.data.argmax(axis=1)
            correct += int((pred == ds.labels[b0 : b0 + batch_size]).sum())
    return correct / n


def train(
    tm: TunableModel,
    train_ds: Dataset,
    val_ds: Dataset,
    hp: Hyperparams,
    seed: int,
) -> TrainReport:
    """Run the training loop; returns the report with frozen verification.

    Aborts with TrainingDiverged (carrying step and learning rate) the
    moment the loss stops being finite.
    """
    hp.validate()
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    n = len(train_ds)
    steps_per_epoch = math.ceil(n / hp.batch_size)
    total = hp.epochs * steps_per_epoch
    if hp.max_steps is not None:
        total = min(total, hp.max_steps)
    opt = OptimizerState(
        lr_base=hp.lr,
        momentum=hp.momentum,
        weight_decay=hp.weight_decay,
        total_steps=max(total, 1),
        warmup_frac=hp.warmup_frac,
    )

    train_losses: list[float] = []
    val_accuracies: list[float] = []
    step = 0
    for _epoch in range(hp.epochs):
        if step >= total:
            break
        perm = rng.permutation(n)
        epoch_losses = []
        for b0 in range(0, n, hp.batch_size):
            if step >= total:
                break
            idx = perm[b0 : b0 + hp.batch_size]
            x = Tensor(train_ds.images[idx])
            with np.errstate(over="ignore", invalid="ignore"):
                logits = tm.model.logits(x)
                loss = ops.softmax_cross_entropy(logits, train_ds.labels[idx])
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss {loss_val} at step {step} "
                    f"(lr {opt.lr_at(step):.6g}, batch of {idx.size})"
                )
            with np.errstate(over="ignore", invalid="ignore"):
                loss.backward()
                if hp.clip_norm is not None:
                    clip_gradients(tm, hp.clip_norm)
                sgd_step(tm, opt, step)
            epoch_losses.append(loss_val)
            step += 1
        if epoch_losses:
            train_losses.append(float(np.mean(epoch_losses)))
            val_accuracies.append(evaluate(tm.model, val_ds))

    final = val_accuracies[-1] if val_accuracies else evaluate(tm.model, val_ds)
    return TrainReport(
        train_losses=train_losses,
        val_accuracies=val_accuracies,
        final_accuracy=final,
        trainable_params=count_trainable_params(tm),
        steps=step,
        seed=seed,
        wall_seconds=time.perf_counter() - t0,
        frozen_changed=verify_frozen(tm.frozen_snapshot, tm.model),
    )
