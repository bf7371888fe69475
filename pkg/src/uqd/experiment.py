"""Desk-scale experiment: ensemble, MC-Dropout and distilled students on the synthetic set."""
from __future__ import annotations

import logging
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data import SynthConfig, generate_synthetic
from .distill import DistillConfig, distill, kl_divergence
from .models import SegNet
from .training import TrainConfig, train_member
from .uq import EnsembleModel, ensemble_predict, mcd_predict

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    data_seed: int = 7
    n_train: int = 30
    n_test: int = 10
    members: int = 5
    member_seed: int = 0
    student_seed: int = 1000
    modes: tuple[str, ...] = ("kl",)
    mcd_rate: float = 0.0   # 0 skips the MC-Dropout network
    mcd_passes: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class DeskResult:
    reports: dict[str, metrics.CalibrationReport]
    member_reports: list[metrics.CalibrationReport]
    kl_init: dict[str, float]
    kl_final: dict[str, float]
    seconds: dict[str, float]

    def summary(self) -> str:
        lines = [metrics.metrics_csv(list(self.reports.items())).rstrip()]
        for i, r in enumerate(self.member_reports):
            lines.append(f"member_{i} nll={r.nll:.6f} ece={r.ece:.6f} dsc={r.dsc:.6f}")
        mean_nll = np.mean([r.nll for r in self.member_reports])
        lines.append(f"mean member nll={mean_nll:.6f}")
        for mode in self.kl_final:
            ratio = self.kl_init[mode] / self.kl_final[mode]
            lines.append(f"{mode}: test KL {self.kl_init[mode]:.6f} -> {self.kl_final[mode]:.6f} ({ratio:.1f}x)")
        lines += [f"time {k}: {v:.1f}s" for k, v in self.seconds.items()]
        return "\n".join(lines) + "\n"


def load_desk_data(cfg: DeskConfig):
    """Synthetic train and test splits, passed through the on-disk PGM format like the CLI."""
    with tempfile.TemporaryDirectory() as root:
        base = SynthConfig(n_images=cfg.n_train, seed=cfg.data_seed)
        train = generate_synthetic(base, root, "train").load()
        base.n_images = cfg.n_test
        test = generate_synthetic(base, root, "test").load()
    return train, test


def run_desk(cfg: DeskConfig) -> DeskResult:
    (x, y), (xt, yt) = load_desk_data(cfg)
    seconds = {}
    t0 = time.perf_counter()
    members = [train_member(x, y, cfg.train, cfg.member_seed + m) for m in range(cfg.members)]
    seconds["ensemble"] = time.perf_counter() - t0
    ens = EnsembleModel(members)
    mean, member_maps = ensemble_predict(ens, xt)
    reports = {"baseline": metrics.evaluate(list(member_maps[0]), list(yt)),
               "de": metrics.evaluate(list(mean), list(yt))}
    member_reports = [metrics.evaluate(list(m), list(yt)) for m in member_maps]

    if cfg.mcd_rate > 0:
        t0 = time.perf_counter()
        net = train_member(x, y, cfg.train, cfg.member_seed, dropout_rate=cfg.mcd_rate)
        probs = np.stack([mcd_predict(net, xt[i:i + 1], cfg.mcd_passes, cfg.member_seed + 7919 * i)[0][0]
                          for i in range(len(xt))])
        reports["mcd"] = metrics.evaluate(list(probs), list(yt))
        seconds["mcd"] = time.perf_counter() - t0

    kl_init, kl_final = {}, {}
    for mode in cfg.modes:
        t0 = time.perf_counter()
        fresh = SegNet(members[0].arch, seed=cfg.student_seed).eval()
        kl_init[mode] = kl_divergence(mean, fresh.predict_prob(xt)).item()
        student = distill(x, y, ens, DistillConfig(mode=mode), cfg.train, cfg.student_seed)
        q = student.predict_prob(xt)
        kl_final[mode] = kl_divergence(mean, q).item()
        reports[f"end-{mode}"] = metrics.evaluate(list(q), list(yt))
        seconds[f"end-{mode}"] = time.perf_counter() - t0
        log.info("%s student: KL %.5f -> %.5f", mode, kl_init[mode], kl_final[mode])
    return DeskResult(reports, member_reports, kl_init, kl_final, seconds)
