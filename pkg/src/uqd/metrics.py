"""Segmentation (Dice, MCC) and calibration (ECE, Brier, NLL) metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import LOG_FLOOR
from .errors import ContractError, DimensionError


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass
class ReliabilityBin:
    confidence_lo: float
    confidence_hi: float
    mean_confidence: float
    accuracy: float
    count: int


@dataclass
class ReliabilityTable:
    bins: list[ReliabilityBin]

    @property
    def B(self) -> int:
        return len(self.bins)

    @property
    def total(self) -> int:
        return sum(b.count for b in self.bins)

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,mean_conf,accuracy,count"]
        lines += [f"{b.confidence_lo!r},{b.confidence_hi!r},{b.mean_confidence!r},{b.accuracy!r},{b.count}"
                  for b in self.bins]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ReliabilityTable":
        rows = [ln.split(",") for ln in text.strip().splitlines()[1:]]
        return cls([ReliabilityBin(float(a), float(b), float(c), float(d), int(e)) for a, b, c, d, e in rows])


@dataclass
class CalibrationReport:
    dsc: float
    mcc: float
    ece: float
    brier: float
    nll: float
    reliability: ReliabilityTable
    per_image: list[dict[str, float]] = field(default_factory=list)

    def row(self) -> dict[str, float]:
        return {"dsc": self.dsc, "mcc": self.mcc, "ece": self.ece, "brier": self.brier, "nll": self.nll}


METRIC_COLUMNS = ("dsc", "mcc", "ece", "brier", "nll")


def _check_pair(p, y) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"prediction shape {p.shape} != ground truth shape {y.shape}")
    return p, y


def _check_binary(m) -> np.ndarray:
    m = np.asarray(m)
    if not np.isin(m, (0, 1)).all():
        raise ContractError("mask must contain only 0 and 1")
    return m.astype(bool)


def binarize(p, threshold: float = 0.5) -> np.ndarray:
    """Foreground iff ``p >= threshold`` (a tie counts as foreground)."""
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(p) >= threshold).astype(np.int64)


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    pred, gt = _check_binary(pred_mask), _check_binary(gt_mask)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, pred.size - tp - fp - fn, fn)


def dice_from_counts(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def dice(pred_mask, gt_mask) -> float:
    """Dice overlap; two empty masks score 1.0."""
    return dice_from_counts(confusion(pred_mask, gt_mask))


def mcc(counts: ConfusionCounts) -> float:
    """Matthews correlation; 0.0 whenever a marginal is empty."""
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    prod = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if prod == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(prod)


def bin_edges(B: int) -> np.ndarray:
    return 0.5 + 0.5 * np.arange(B + 1) / B


def reliability(p, gt_mask, B: int = 10) -> ReliabilityTable:
    """Equal-width confidence bins over [0.5, 1]; bins are [lo, hi) except the last, [lo, 1]."""
    if B < 1:
        raise ContractError(f"bin count must be >= 1, got {B}")
    p, y = _check_pair(p, gt_mask)
    p, y = p.ravel(), y.ravel()
    conf = np.maximum(p, 1.0 - p)
    correct = (p >= 0.5) == (y == 1)
    edges = bin_edges(B)
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, B - 1)
    count = np.bincount(idx, minlength=B)
    conf_sum = np.bincount(idx, weights=conf, minlength=B)
    acc_sum = np.bincount(idx, weights=correct.astype(np.float64), minlength=B)
    bins = []
    for b in range(B):
        n = int(count[b])
        bins.append(ReliabilityBin(float(edges[b]), float(edges[b + 1]),
                                   float(conf_sum[b] / n) if n else 0.0,
                                   float(acc_sum[b] / n) if n else 0.0, n))
    return ReliabilityTable(bins)


def ece_from_table(table: ReliabilityTable) -> float:
    total = table.total
    if total == 0:
        return 0.0
    return float(sum(b.count / total * abs(b.accuracy - b.mean_confidence) for b in table.bins if b.count))


def ece(p, gt_mask, B: int = 10) -> tuple[float, ReliabilityTable]:
    table = reliability(p, gt_mask, B)
    return ece_from_table(table), table


def brier(p, gt_mask) -> float:
    p, y = _check_pair(p, gt_mask)
    return float(np.mean((p - y) ** 2))


def nll(p, gt_mask) -> float:
    p, y = _check_pair(p, gt_mask)
    p_true = np.where(y == 1, p, 1.0 - p)
    return float(np.mean(-np.log(np.clip(p_true, LOG_FLOOR, 1.0))))


def _scalars(p, y, B: int) -> dict[str, float]:
    counts = confusion(binarize(p), y)
    return {"dsc": dice_from_counts(counts), "mcc": mcc(counts), "ece": ece(p, y, B)[0],
            "brier": brier(p, y), "nll": nll(p, y)}


def evaluate(probs, gts, B: int = 10, ece_mode: str = "pooled") -> CalibrationReport:
    """Pixel-pooled metrics over every image plus per-image scalars.

    ``ece_mode="image_mean"`` reports ECE as the average of per-image ECEs
    instead of the pooled value.
    """
    if isinstance(probs, np.ndarray) and probs.ndim == 2:
        probs, gts = [probs], [gts]
    probs, gts = list(probs), list(gts)
    if not probs:
        raise ContractError("evaluate needs at least one prediction")
    if len(probs) != len(gts):
        raise ContractError(f"{len(probs)} predictions but {len(gts)} ground-truth masks")
    if ece_mode not in ("pooled", "image_mean"):
        raise ContractError(f"unknown ece_mode {ece_mode!r}")
    pairs = [_check_pair(p, y) for p, y in zip(probs, gts)]
    per_image = [_scalars(p, y, B) for p, y in pairs]
    flat_p = np.concatenate([p.ravel() for p, _ in pairs])
    flat_y = np.concatenate([y.ravel() for _, y in pairs])
    pooled = _scalars(flat_p, flat_y, B)
    table = reliability(flat_p, flat_y, B)
    ece_val = pooled["ece"] if ece_mode == "pooled" else float(np.mean([r["ece"] for r in per_image]))
    return CalibrationReport(pooled["dsc"], pooled["mcc"], ece_val, pooled["brier"], pooled["nll"],
                             table, per_image)


def metrics_csv(rows: Sequence[tuple[str, CalibrationReport]]) -> str:
    lines = ["method," + ",".join(METRIC_COLUMNS)]
    for name, rep in rows:
        lines.append(name + "," + ",".join(f"{getattr(rep, c):.10f}" for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def per_image_csv(rows: Sequence[tuple[str, CalibrationReport]]) -> str:
    lines = ["method,image,dice,ece"]
    for name, rep in rows:
        lines += [f"{name},{i},{r['dsc']:.10f},{r['ece']:.10f}" for i, r in enumerate(rep.per_image)]
    return "\n".join(lines) + "\n"
