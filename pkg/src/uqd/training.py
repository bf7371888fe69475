"""Supervised training: BCE task loss, Adam with L2 weight decay, cosine annealing."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericError
from .models import ArchConfig, SegNet, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 70
    batch_size: int = 4
    lr_init: float = 1e-4
    weight_decay: float = 1e-5
    eta_min: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr_init <= 0 or self.weight_decay < 0 or self.eta_min < 0:
            raise ConfigError("lr_init must be positive; weight_decay and eta_min nonnegative")
        if self.eta_min > self.lr_init:
            raise ConfigError("eta_min must not exceed lr_init")


@dataclass
class OptimizerState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def bce_loss(probs: Tensor, target) -> Tensor:
    """Mean binary cross-entropy with log arguments floored at 1e-12."""
    y = np.asarray(target, dtype=np.float64)
    if probs.shape != y.shape:
        raise ContractError(f"prediction shape {probs.shape} != target shape {y.shape}")
    return -ad.mean(y * ad.log(probs) + (1.0 - y) * ad.log(1.0 - probs))


def bce_with_logits(logits: Tensor, target) -> Tensor:
    return bce_loss(ad.sigmoid(logits), target)


def adam_step(params: Sequence[Tensor], state: OptimizerState, lr: float,
              weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One Adam update using each parameter's ``grad``.

    Weight decay is classic L2: ``weight_decay * theta`` is added to the
    gradient before the moment updates (not the decoupled AdamW form).
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p in params:
        if p.grad is None:
            raise ContractError("adam_step called before gradients were populated")
        if not np.isfinite(p.grad).all():
            raise NumericError("non-finite gradient; aborting update")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for i, p in enumerate(params):
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


def cosine_lr(step: int, total_steps: int, lr_init: float, eta_min: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return eta_min + 0.5 * (lr_init - eta_min) * (1.0 + math.cos(math.pi * step / total_steps))


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, epoch])


def train_member(images: np.ndarray, masks: np.ndarray, cfg: TrainConfig, member_seed: int,
                 arch: ArchConfig | None = None, dropout_rate: float = 0.0,
                 checkpoint_path=None, log_path=None) -> SegNet:
    """Train one segmenter from a seeded initialisation.

    Shuffling and dropout masks are drawn from generators derived from
    ``member_seed`` so the result depends only on the data, config and seed.
    The loss log has columns ``epoch,step,lr,loss``.
    """
    cfg.validate()
    if len(images) == 0:
        raise ContractError("training set is empty")
    net = SegNet(arch, dropout_rate, seed=member_seed).train()
    params = net.parameters()
    state = OptimizerState()
    steps_per_epoch = math.ceil(len(images) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    drop_rng = np.random.default_rng([member_seed, 2])
    rows = ["epoch,step,lr,loss"]
    step = 0
    for epoch in range(cfg.epochs):
        for idx in batches(len(images), cfg.batch_size, epoch_rng(member_seed, epoch)):
            lr = cosine_lr(step, total, cfg.lr_init, cfg.eta_min)
            with ad.GradTape() as tape:
                logits, _ = net(images[idx], drop_rng)
                loss = bce_with_logits(logits, masks[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(f"loss diverged at epoch {epoch} step {step}; "
                                   f"last finite epoch {epoch - 1}")
            ad.backward(loss, tape)
            adam_step(params, state, lr, cfg.weight_decay)
            rows.append(f"{epoch},{step},{lr!r},{loss.item()!r}")
            step += 1
        log.debug("member seed %d epoch %d loss %.5f", member_seed, epoch, loss.item())
    net.eval()
    if checkpoint_path is not None:
        save_checkpoint(net, checkpoint_path)
    if log_path is not None:
        Path(log_path).write_text("\n".join(rows) + "\n")
    return net
