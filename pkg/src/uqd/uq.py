"""Deep Ensemble and MC-Dropout aggregation plus pixelwise uncertainty measures.

Probability maps are plain float arrays of foreground probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import LOG_FLOOR, sigmoid
from .errors import ContractError, DimensionError
from .models import SegNet


@dataclass
class EnsembleModel:
    members: list[SegNet]

    def __post_init__(self):
        if not self.members:
            raise ContractError("an ensemble needs at least one member")
        arch = self.members[0].arch
        if any(m.arch != arch for m in self.members):
            raise ContractError("all ensemble members must share arch_config")

    @property
    def M(self) -> int:
        return len(self.members)

    def checksum(self) -> list[str]:
        return [m.checksum() for m in self.members]


def mean_of(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean, summed in ascending member order."""
    if not maps:
        raise ContractError("cannot average an empty list of maps")
    shape = np.shape(maps[0])
    acc = np.array(maps[0], dtype=np.float64, copy=True)
    for m in maps[1:]:
        if np.shape(m) != shape:
            raise DimensionError(f"map shape {np.shape(m)} differs from {shape}")
        acc += m
    return acc / len(maps)


def ensemble_predict(ens: EnsembleModel, images) -> tuple[np.ndarray, list[np.ndarray]]:
    members = []
    for net in ens.members:
        if net.mode != "eval":
            raise ContractError("ensemble members must be in eval mode")
        members.append(net.predict_prob(images))
    return mean_of(members), members


def mcd_predict(net: SegNet, images, T_passes: int = 10, seed: int = 0
                ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Average of ``T_passes`` dropout-active forwards; pass k uses seed ``seed + k``."""
    if net.dropout_rate <= 0:
        raise ContractError("MC-Dropout needs a network with dropout_rate > 0")
    if T_passes < 1:
        raise ContractError(f"T_passes must be >= 1, got {T_passes}")
    passes = []
    for k in range(T_passes):
        logits, _ = net.forward(images, rng=np.random.default_rng(seed + k), mc=True)
        passes.append(sigmoid(logits).data)
    return mean_of(passes), passes


def binary_entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -(p * np.log(np.maximum(p, LOG_FLOOR)) + (1 - p) * np.log(np.maximum(1 - p, LOG_FLOOR)))


def predictive_entropy(p) -> np.ndarray:
    return np.clip(binary_entropy(p), 0.0, np.log(2.0))


def member_variance(members: Sequence[np.ndarray]) -> np.ndarray:
    """Population variance across members (zero for a single member)."""
    if len(members) == 0:
        raise ContractError("member_variance needs at least one member")
    mu = mean_of(members)
    acc = np.zeros_like(mu)
    for m in members:
        acc += (m - mu) ** 2
    return acc / len(members)


def mutual_information(mean: np.ndarray, members: Sequence[np.ndarray], tol: float = 1e-9) -> np.ndarray:
    """Entropy of the mean minus mean member entropy, floored at zero."""
    expected = mean_of(members)
    if np.shape(mean) != expected.shape:
        raise DimensionError(f"mean shape {np.shape(mean)} != member shape {expected.shape}")
    gap = np.max(np.abs(np.asarray(mean) - expected)) if expected.size else 0.0
    if gap > tol:
        raise ContractError(f"mean differs from the member average by {gap:.3g}")
    aleatoric = mean_of([binary_entropy(m) for m in members])
    return np.maximum(binary_entropy(mean) - aleatoric, 0.0)


MEASURES = ("entropy", "variance", "mi")


def uncertainty_map(measure: str, mean: np.ndarray, members: Sequence[np.ndarray]) -> np.ndarray:
    if measure == "entropy":
        return predictive_entropy(mean)
    if measure == "variance":
        return member_variance(members)
    if measure in ("mi", "mutual_information"):
        return mutual_information(mean, members)
    raise ContractError(f"unknown uncertainty measure {measure!r}; choose from {MEASURES}")
