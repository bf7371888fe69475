"""Ensemble distillation into a single student: KL to the ensemble mean, or
contrastive representation distillation against every teacher."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_FLOOR, Tensor
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .models import ArchConfig, SegNet, save_checkpoint
from .training import OptimizerState, TrainConfig, adam_step, batches, bce_with_logits, cosine_lr, epoch_rng
from .uq import EnsembleModel, mean_of

log = logging.getLogger(__name__)

MODES = ("kl", "crd", "kl+crd")


@dataclass
class DistillConfig:
    mode: str = "kl"
    temperature: float = 0.07
    task_loss_weight: float = 1.0
    teacher_checkpoints: list[str] = field(default_factory=list)
    batch_size: int = 4

    @property
    def uses_kl(self) -> bool:
        return "kl" in self.mode.split("+")

    @property
    def uses_crd(self) -> bool:
        return "crd" in self.mode.split("+")

    def validate(self, need_checkpoints: bool = False) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.uses_crd and not self.temperature > 0:
            raise ConfigError("crd mode needs temperature > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.task_loss_weight < 0:
            raise ConfigError("task_loss_weight must be >= 0")
        if need_checkpoints and not self.teacher_checkpoints:
            raise ConfigError("teacher list is empty")


def kl_divergence(p, q) -> Tensor:
    """Mean over pixels of the Bernoulli KL(p || q).

    ``p`` is the (fixed) target map; ``q`` may be a Tensor carrying gradient.
    Every log argument is floored at 1e-12.
    """
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    q = q if isinstance(q, Tensor) else Tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"KL inputs differ in shape: {p.shape} vs {q.shape}")
    lp = np.log(np.maximum(p, LOG_FLOOR))
    lp1 = np.log(np.maximum(1.0 - p, LOG_FLOOR))
    per_pixel = p * (lp - ad.log(q)) + (1.0 - p) * (lp1 - ad.log(1.0 - q))
    return ad.mean(per_pixel)


def _unit_rows(z: Tensor) -> Tensor:
    norms = np.sqrt((z.data ** 2).sum(axis=1))
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise NumericError("cosine similarity undefined for a zero-norm representation")
    return z / ad.sqrt(ad.sum_(z * z, axis=1, keepdims=True))


def crd_loss(student_reps, teacher_reps, T: float = 0.07) -> Tensor:
    """In-batch contrastive loss between student and one teacher.

    Row ``i`` of the student batch is pulled towards row ``i`` of the teacher
    batch and pushed from the other rows, with cosine similarity over
    temperature ``T`` as the logit.
    """
    if not T > 0:
        raise ContractError(f"temperature must be positive, got {T}")
    zs = student_reps if isinstance(student_reps, Tensor) else Tensor(student_reps)
    zt = teacher_reps if isinstance(teacher_reps, Tensor) else Tensor(teacher_reps)
    if zs.ndim != 2 or zs.shape != zt.shape:
        raise DimensionError(f"student reps {zs.shape} and teacher reps {zt.shape} must both be N x D")
    n = zs.shape[0]
    sims = ad.matmul(_unit_rows(zs), ad.transpose(_unit_rows(zt))) * (1.0 / T)
    diag = np.arange(n)
    return ad.mean(ad.logsumexp(sims, axis=1) - sims[diag, diag])


def crd_total_loss(student_reps, per_teacher_reps, T: float = 0.07) -> Tensor:
    if len(per_teacher_reps) == 0:
        raise ContractError("crd_total_loss needs at least one teacher")
    total = crd_loss(student_reps, per_teacher_reps[0], T)
    for reps in per_teacher_reps[1:]:
        total = total + crd_loss(student_reps, reps, T)
    return total


def teacher_targets(teachers: EnsembleModel, images) -> tuple[np.ndarray, list[np.ndarray]]:
    """Ensemble-mean probabilities and each teacher's representations (no gradient)."""
    probs, reps = [], []
    for net in teachers.members:
        if net.mode != "eval":
            raise ContractError("teachers must be frozen in eval mode")
        logits, rep = net.forward(images)
        probs.append(ad.sigmoid(logits).data)
        reps.append(rep.data)
    return mean_of(probs), reps


def distill_step(student: SegNet, images, masks, teachers: EnsembleModel, cfg: DistillConfig,
                 rng: np.random.Generator | None = None, targets=None) -> dict[str, float]:
    """Forward, loss and backward for one batch; leaves gradients on the student.

    ``targets`` may carry precomputed ``teacher_targets`` for this batch.
    Returns the value of every active loss term plus ``total``.
    """
    if student.mode != "train":
        raise ContractError("student must be in train mode")
    before = teachers.checksum()
    mean_p, t_reps = targets if targets is not None else teacher_targets(teachers, images)
    terms: dict[str, float] = {}
    with ad.GradTape() as tape:
        logits, rep = student.forward(images, rng)
        if logits.shape != np.shape(mean_p):
            raise DimensionError(f"student output {logits.shape} vs teacher mean {np.shape(mean_p)}")
        total = None
        if cfg.uses_kl:
            kl = kl_divergence(mean_p, ad.sigmoid(logits))
            terms["kl_term"] = kl.item()
            total = kl
        if cfg.uses_crd:
            crd = crd_total_loss(rep, t_reps, cfg.temperature)
            terms["crd_term"] = crd.item()
            total = crd if total is None else total + crd
        if cfg.task_loss_weight > 0:
            task = bce_with_logits(logits, masks)
            terms["task_term"] = task.item()
            total = total + cfg.task_loss_weight * task
    terms["total"] = total.item()
    if not all(math.isfinite(v) for v in terms.values()):
        raise NumericError(f"non-finite loss term in {terms}")
    ad.backward(total, tape)
    if teachers.checksum() != before:
        raise ContractError("teacher parameters changed during a distillation step")
    return terms


def distill(images: np.ndarray, masks: np.ndarray, teachers: EnsembleModel, cfg: DistillConfig,
            train_cfg: TrainConfig, seed: int, arch: ArchConfig | None = None,
            checkpoint_path=None, log_path=None) -> SegNet:
    """Train a fresh student against frozen teachers.

    Teacher outputs are computed once per image up front; teachers are frozen
    and deterministic so this matches recomputing them every batch.
    Log columns: ``step,kl_term,crd_term,task_term,total``.
    """
    cfg.validate()
    train_cfg.validate()
    arch = arch or teachers.members[0].arch
    student = SegNet(arch, 0.0, seed=seed).train()
    params = student.parameters()
    state = OptimizerState()
    mean_all, reps_all = teacher_targets(teachers, images)
    steps_per_epoch = math.ceil(len(images) / cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    rows = ["step,kl_term,crd_term,task_term,total"]
    step = 0
    for epoch in range(train_cfg.epochs):
        for idx in batches(len(images), cfg.batch_size, epoch_rng(seed, epoch)):
            lr = cosine_lr(step, total_steps, train_cfg.lr_init, train_cfg.eta_min)
            targets = (mean_all[idx], [r[idx] for r in reps_all])
            terms = distill_step(student, images[idx], masks[idx], teachers, cfg, targets=targets)
            adam_step(params, state, lr, train_cfg.weight_decay)
            cells = [repr(terms[k]) if k in terms else "" for k in ("kl_term", "crd_term", "task_term")]
            rows.append(",".join([str(step), *cells, repr(terms["total"])]))
            step += 1
        log.debug("student epoch %d %s", epoch, terms)
    student.eval()
    if checkpoint_path is not None:
        save_checkpoint(student, checkpoint_path)
    if log_path is not None:
        Path(log_path).write_text("\n".join(rows) + "\n")
    return student
