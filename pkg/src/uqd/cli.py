"""Command-line pipeline: gen-data, train, train-ensemble, distill, predict, evaluate, report.

Settings resolve as built-in defaults < ``--config`` key=value file < flags,
and the resolved set is written to ``<out>/resolved-config.txt``.
"""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics, report
from .data import SynthConfig, generate_synthetic, load_manifest, write_pfm
from .distill import DistillConfig, distill
from .errors import ConfigError, FormatError, UQDError
from .models import ArchConfig, SegNet, load_checkpoint
from .training import TrainConfig, train_member
from .uq import EnsembleModel, ensemble_predict, mcd_predict, uncertainty_map

log = logging.getLogger("uqd")

METHODS = ("baseline", "de", "mcd", "end-kl", "end-crd", "gt")
DEFAULT_METHODS = "baseline,de,mcd,end-kl,end-crd"

# every setting: (type, default)
SETTINGS: dict[str, tuple[type, object]] = {
    "out": (str, "run"),
    "data": (str, ""),
    "seed": (int, 0),
    # synthetic data
    "n": (int, 30),
    "n_test": (int, 10),
    "size": (int, 64),
    "n_curves": (int, 6),
    "thickness_min": (float, 1.0),
    "thickness_max": (float, 2.5),
    "noise": (float, 0.05),
    # architecture
    "width1": (int, 8),
    "width2": (int, 16),
    "width3": (int, 32),
    "dropout": (float, 0.0),
    # optimisation
    "epochs": (int, 70),
    "batch_size": (int, 4),
    "lr": (float, 1e-4),
    "weight_decay": (float, 1e-5),
    "eta_min": (float, 0.0),
    # ensembles and distillation
    "members": (int, 5),
    "name": (str, ""),
    "mode": (str, "kl"),
    "temperature": (float, 0.07),
    "task_weight": (float, 1.0),
    "teachers": (str, ""),
    # evaluation
    "methods": (str, DEFAULT_METHODS),
    "bins": (int, 10),
    "measure": (str, "entropy"),
    "passes": (int, 10),
    "ece_mode": (str, "pooled"),
    "baseline": (str, ""),
    "mcd": (str, ""),
    "student_kl": (str, ""),
    "student_crd": (str, ""),
    "checkpoint": (str, ""),
    "method": (str, "de"),
}

COMMAND_KEYS = {
    "gen-data": ["n", "n_test", "size", "n_curves", "thickness_min", "thickness_max", "noise"],
    "train": ["width1", "width2", "width3", "dropout", "epochs", "batch_size", "lr", "weight_decay",
              "eta_min", "name"],
    "train-ensemble": ["width1", "width2", "width3", "dropout", "epochs", "batch_size", "lr",
                       "weight_decay", "eta_min", "members"],
    "distill": ["epochs", "batch_size", "lr", "weight_decay", "eta_min", "mode", "temperature",
                "task_weight", "teachers", "name"],
    "predict": ["method", "checkpoint", "teachers", "passes", "measure", "baseline", "mcd",
                "student_kl", "student_crd"],
    "evaluate": ["methods", "bins", "measure", "passes", "ece_mode", "teachers", "baseline", "mcd",
                 "student_kl", "student_crd"],
    "report": [],
}
COMMON_KEYS = ["out", "data", "seed"]


class IOFailure(UQDError):
    """Wraps filesystem failures so they map to exit code 2."""


def read_config_file(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise IOFailure(f"--config: cannot read {path}")
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        if key not in SETTINGS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def resolve(command: str, args: argparse.Namespace) -> dict[str, object]:
    keys = COMMON_KEYS + COMMAND_KEYS[command]
    cfg: dict[str, object] = {k: SETTINGS[k][1] for k in keys}
    if args.config:
        for k, v in read_config_file(args.config).items():
            if k in cfg:
                cfg[k] = v
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    for k in keys:
        typ = SETTINGS[k][0]
        try:
            cfg[k] = typ(cfg[k])
        except ValueError as exc:
            raise ConfigError(f"--{k.replace('_', '-')}: cannot parse {cfg[k]!r} as {typ.__name__}") from exc
    if not cfg["data"]:
        cfg["data"] = str(Path(cfg["out"]) / "data")
    return cfg


def dump_resolved(cfg: dict[str, object], command: str) -> None:
    out = Path(cfg["out"])
    text = f"command={command}\n" + "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))
    (out / "resolved-config.txt").write_text(text)
    (out / f"resolved-config.{command}.txt").write_text(text)


def ensure_dirs(out: Path) -> None:
    try:
        for sub in ("checkpoints", "logs", "reports", "figures"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"--out: cannot create output directory {out}: {exc}") from exc


def arch_of(cfg) -> ArchConfig:
    return ArchConfig(cfg["width1"], cfg["width2"], cfg["width3"])


def train_cfg_of(cfg, seed: int) -> TrainConfig:
    return TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["weight_decay"], cfg["eta_min"], seed)


def load_split(cfg, split: str):
    manifest = Path(cfg["data"]) / f"{split}.txt"
    if not manifest.is_file():
        raise IOFailure(f"--data: manifest {manifest} not found (run gen-data first)")
    return load_manifest(manifest, split).load()


def teacher_paths(cfg) -> list[str]:
    spec = cfg["teachers"] or str(Path(cfg["out"]) / "checkpoints")
    if Path(spec).is_dir():
        paths = sorted(glob.glob(str(Path(spec) / "member_*.uqd")))
        if not paths:
            raise ConfigError(f"--teachers: no member_*.uqd checkpoints in {spec}")
        return paths
    paths = [p for p in spec.split(",") if p]
    missing = [p for p in paths if not Path(p).is_file()]
    if missing:
        raise ConfigError(f"--teachers: missing checkpoint files: {', '.join(missing)}")
    return paths


def load_ckpt(path: str, flag: str) -> SegNet:
    if not Path(path).is_file():
        raise ConfigError(f"--{flag}: checkpoint {path} does not exist")
    return load_checkpoint(path)


# commands

def cmd_gen_data(cfg) -> None:
    root = Path(cfg["data"])
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"--data: cannot create {root}: {exc}") from exc
    synth = SynthConfig(n_images=cfg["n"], H=cfg["size"], W=cfg["size"], n_curves=cfg["n_curves"],
                        thickness=(cfg["thickness_min"], cfg["thickness_max"]),
                        noise_sigma=cfg["noise"], seed=cfg["seed"])
    train = generate_synthetic(synth, root, "train")
    synth.n_images = cfg["n_test"]
    test = generate_synthetic(synth, root, "test")
    print(f"train {len(train)} images sha256 {train.checksum()}")
    print(f"test {len(test)} images sha256 {test.checksum()}")


def _train_one(job):
    images, masks, tcfg, seed, arch, rate, ckpt, logp = job
    train_member(images, masks, tcfg, seed, arch, rate, ckpt, logp)
    return ckpt


def _threads() -> int:
    raw = os.environ.get("UQD_THREADS", "")
    try:
        return max(1, int(raw)) if raw else (os.cpu_count() or 1)
    except ValueError as exc:
        raise ConfigError(f"UQD_THREADS must be an integer, got {raw!r}") from exc


def cmd_train(cfg) -> None:
    images, masks = load_split(cfg, "train")
    out = Path(cfg["out"])
    name = cfg["name"] or ("mcd" if cfg["dropout"] > 0 else "baseline")
    ckpt = out / "checkpoints" / f"{name}.uqd"
    _train_one((images, masks, train_cfg_of(cfg, cfg["seed"]), cfg["seed"], arch_of(cfg), cfg["dropout"],
                ckpt, out / "logs" / f"{name}.csv"))
    print(f"wrote {ckpt}")


def cmd_train_ensemble(cfg) -> None:
    if cfg["members"] < 1:
        raise ConfigError("--members must be >= 1")
    images, masks = load_split(cfg, "train")
    out = Path(cfg["out"])
    jobs = []
    for m in range(cfg["members"]):
        seed = cfg["seed"] + m
        jobs.append((images, masks, train_cfg_of(cfg, seed), seed, arch_of(cfg), cfg["dropout"],
                     out / "checkpoints" / f"member_{m}.uqd", out / "logs" / f"member_{m}.csv"))
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_train_one, jobs))
    else:
        done = [_train_one(j) for j in jobs]
    for ckpt in done:
        print(f"wrote {ckpt}")


def cmd_distill(cfg) -> None:
    paths = teacher_paths(cfg)
    dcfg = DistillConfig(cfg["mode"], cfg["temperature"], cfg["task_weight"], paths, cfg["batch_size"])
    dcfg.validate(need_checkpoints=True)
    teachers = EnsembleModel([load_checkpoint(p) for p in paths])
    images, masks = load_split(cfg, "train")
    out = Path(cfg["out"])
    name = cfg["name"] or f"student_{cfg['mode'].replace('+', '_')}"
    ckpt = out / "checkpoints" / f"{name}.uqd"
    distill(images, masks, teachers, dcfg, train_cfg_of(cfg, cfg["seed"]), cfg["seed"] + 1000,
            checkpoint_path=ckpt, log_path=out / "logs" / f"{name}.csv")
    print(f"wrote {ckpt}")


def _method_default(cfg, key: str, filename: str) -> str:
    return cfg[key] or str(Path(cfg["out"]) / "checkpoints" / filename)


def predictor(cfg, method: str):
    """Callable mapping one image to ``(mean_map, member_maps)`` for ``method``."""
    if method == "de":
        ens = EnsembleModel([load_checkpoint(p) for p in teacher_paths(cfg)])
        return lambda img, i: ensemble_predict(ens, img[None])
    if method == "mcd":
        net = load_ckpt(_method_default(cfg, "mcd", "mcd.uqd"), "mcd")
        return lambda img, i: mcd_predict(net, img[None], cfg["passes"], cfg["seed"] + 7919 * i)
    key, fname = {"baseline": ("baseline", "baseline.uqd"), "end-kl": ("student_kl", "student_kl.uqd"),
                  "end-crd": ("student_crd", "student_crd.uqd")}.get(method, (None, None))
    if key is None:
        raise ConfigError(f"--methods: unknown method {method!r}; choose from {', '.join(METHODS)}")
    path = cfg.get("checkpoint") or _method_default(cfg, key, fname)
    net = load_ckpt(path, key.replace("_", "-"))

    def single(img, i):
        p = net.predict_prob(img[None])
        return p, [p]

    return single


def run_method(cfg, method: str, images, masks):
    if method == "gt":
        return [m.copy() for m in masks], [[m.copy()] for m in masks]
    predict = predictor(cfg, method)
    means, members = [], []
    for i, img in enumerate(images):
        mean, mem = predict(img, i)
        means.append(mean[0])
        members.append([m[0] for m in mem])
    return means, members


def write_uncertainty(cfg, method: str, means, members, root: Path) -> None:
    d = root / method
    d.mkdir(parents=True, exist_ok=True)
    for i, (mean, mem) in enumerate(zip(means, members)):
        u = uncertainty_map(cfg["measure"], mean, mem)
        write_pfm(d / f"{i:04d}_{cfg['measure']}.pfm", u)


def cmd_predict(cfg) -> None:
    images, masks = load_split(cfg, "test")
    method = cfg["method"]
    means, members = run_method(cfg, method, images, masks)
    d = Path(cfg["out"]) / "predictions" / method
    d.mkdir(parents=True, exist_ok=True)
    for i, mean in enumerate(means):
        write_pfm(d / f"{i:04d}.pfm", mean)
    write_uncertainty(cfg, method, means, members, Path(cfg["out"]) / "uncertainty")
    print(f"wrote {len(means)} probability maps to {d}")


def cmd_evaluate(cfg) -> None:
    methods = [m.strip() for m in cfg["methods"].split(",") if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"--methods: unknown method(s) {', '.join(unknown)}")
    if cfg["measure"] not in ("entropy", "variance", "mi"):
        raise ConfigError(f"--measure: expected entropy|variance|mi, got {cfg['measure']!r}")
    images, masks = load_split(cfg, "test")
    out = Path(cfg["out"])
    rows = []
    for method in methods:
        means, members = run_method(cfg, method, images, masks)
        rep = metrics.evaluate(means, list(masks), cfg["bins"], cfg["ece_mode"])
        rows.append((method, rep))
        (out / "reports" / f"reliability_{method}.csv").write_text(rep.reliability.to_csv())
        (out / "figures" / f"reliability_{method}.svg").write_text(
            report.reliability_svg(rep.reliability, f"Reliability: {report.DISPLAY_NAMES[method]}"))
        write_uncertainty(cfg, method, means, members, out / "uncertainty")
        print(f"{method}: " + " ".join(f"{k}={v:.4f}" for k, v in rep.row().items()))
    (out / "reports" / "metrics.csv").write_text(metrics.metrics_csv(rows))
    (out / "reports" / "per_image.csv").write_text(metrics.per_image_csv(rows))
    render_reports(out)


def render_reports(out: Path) -> None:
    metrics_path = out / "reports" / "metrics.csv"
    if not metrics_path.is_file():
        raise IOFailure(f"--out: {metrics_path} not found (run evaluate first)")
    rows = report.read_metrics_csv(metrics_path.read_text())
    (out / "reports" / "table.md").write_text(report.markdown_table(rows))
    for rel in sorted((out / "reports").glob("reliability_*.csv")):
        method = rel.stem[len("reliability_"):]
        table = metrics.ReliabilityTable.from_csv(rel.read_text())
        title = f"Reliability: {report.DISPLAY_NAMES.get(method, method)}"
        (out / "figures" / f"reliability_{method}.svg").write_text(report.reliability_svg(table, title))
    per_image = out / "reports" / "per_image.csv"
    if per_image.is_file():
        pts = report.read_per_image_csv(per_image.read_text())
        (out / "figures" / "ece_vs_dice.svg").write_text(report.scatter_svg(pts))


def cmd_report(cfg) -> None:
    out = Path(cfg["out"])
    render_reports(out)
    print((out / "reports" / "table.md").read_text(), end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "train-ensemble": cmd_train_ensemble,
    "distill": cmd_distill,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uqd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="key=value settings file")
        sp.add_argument("--log-level", default="WARNING")
        for key in COMMON_KEYS + COMMAND_KEYS[name]:
            typ, default = SETTINGS[key]
            sp.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None,
                            help=f"default: {default}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        out = Path(cfg["out"])
        ensure_dirs(out)
        dump_resolved(cfg, args.command)
        COMMANDS[args.command](cfg)
    except (IOFailure, FormatError, OSError) as exc:
        print(f"uqd {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2
    except (UQDError, ValueError) as exc:
        print(f"uqd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
