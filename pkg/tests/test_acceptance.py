"""Acceptance criteria; each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py`` or ``python3 tests/test_acceptance.py``.
The desk experiment behind criteria 4 and 5 trains five members and a student
at full scale, which takes several minutes on one core.
"""
import math
import sys
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from scipy.special import expit, logit

from oracles import brier_loop, dice_loop, ece_loop, mcc_loop, nll_loop
from uqd import autodiff as ad
from uqd import cli, metrics, uq
from uqd.autodiff import Tensor, fd_gradcheck
from uqd.data import read_pfm, read_pgm, write_pfm, write_pgm
from uqd.distill import DistillConfig, crd_loss, crd_total_loss, distill_step, kl_divergence
from uqd.experiment import DeskConfig, run_desk
from uqd.models import SegNet
from uqd.report import reliability_svg
from uqd.training import bce_with_logits

SVG = "{http://www.w3.org/2000/svg}"


def verdict(capsys, n, title, ok, detail=""):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] AC{n} {title}: {detail}")
    assert ok, f"AC{n} {title}: {detail}"


@pytest.fixture(scope="module")
def desk():
    t0 = time.perf_counter()
    result = run_desk(DeskConfig())
    result.seconds["total"] = time.perf_counter() - t0
    return result


def test_ac1_metric_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        p = rng.random((8, 8))
        p.flat[rng.choice(64, 4, replace=False)] = [0.5, 0.55, 0.95, 1.0]
        y = (rng.random((8, 8)) < 0.4).astype(float)
        ours = metrics.evaluate(p, y, B=10)
        ref = (dice_loop(p, y), mcc_loop(p, y), ece_loop(p, y, 10), brier_loop(p, y), nll_loop(p, y))
        got = (ours.dsc, ours.mcc, ours.ece, ours.brier, ours.nll)
        worst = max(worst, max(abs(a - b) for a, b in zip(got, ref)))
    dt = time.perf_counter() - t0
    verdict(capsys, 1, "metric-oracle equivalence", worst < 1e-10 and dt < 5,
            f"max |diff| {worst:.2e} (tol 1e-10), {dt:.2f}s (limit 5s)")


def test_ac2_gradients(capsys):
    t0 = time.perf_counter()
    worst = {"bce": 0.0, "kl": 0.0, "crd": 0.0}
    for seed in range(10):
        rng = np.random.default_rng(seed)
        net = SegNet(seed=seed)
        x = rng.random((3, 8, 8))
        y = (rng.random((3, 8, 8)) > 0.6).astype(float)
        teachers = uq.EnsembleModel([SegNet(seed=100 + seed + k).eval() for k in range(2)])
        mean, _ = uq.ensemble_predict(teachers, x)
        reps = [t.forward(x)[1].data for t in teachers.members]

        def head(flat):
            return net.forward(x, params=net.unflatten(flat))

        losses = {"bce": lambda f: bce_with_logits(head(f)[0], y),
                  "kl": lambda f: kl_divergence(mean, ad.sigmoid(head(f)[0])),
                  "crd": lambda f: crd_total_loss(head(f)[1], reps, 0.5)}
        flat = Tensor(net.flat_params())
        idx = rng.choice(flat.size, 100, replace=False)
        for name, f in losses.items():
            # eps=1e-5 balances roundoff against truncation for these losses
            worst[name] = max(worst[name], fd_gradcheck(f, flat, eps=1e-5, indices=idx))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and dt < 60
    verdict(capsys, 2, "gradient correctness", ok,
            ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (tol 1e-4), {dt:.1f}s (limit 60s)")


def test_ac3_fixed_point(capsys):
    rng = np.random.default_rng(3)
    teacher = SegNet(seed=11).eval()
    student = teacher.copy().train()
    x = rng.random((2, 16, 16))
    y = (rng.random((2, 16, 16)) > 0.7).astype(float)
    terms = distill_step(student, x, y, uq.EnsembleModel([teacher]), DistillConfig("kl", task_loss_weight=0.0))
    gnorm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in student.parameters()))
    verdict(capsys, 3, "distillation fixed point", terms["total"] < 1e-10 and gnorm < 1e-8,
            f"loss {terms['total']:.1e} (tol 1e-10), grad norm {gnorm:.1e} (tol 1e-8)")


def test_ac4_distillation_convergence(capsys, desk):
    ratio = desk.kl_init["kl"] / desk.kl_final["kl"]
    t = desk.seconds["total"]
    verdict(capsys, 4, "distillation convergence", ratio >= 5 and t < 15 * 60,
            f"test KL {desk.kl_init['kl']:.4f} -> {desk.kl_final['kl']:.4f} ({ratio:.1f}x, need 5x), "
            f"desk run {t / 60:.1f} min (target 15)")


def test_ac5_ensemble_behavior(capsys, desk):
    de = desk.reports["de"]
    mean_nll = float(np.mean([r.nll for r in desk.member_reports]))
    student = desk.reports["end-kl"]
    gap = abs(student.ece - de.ece)
    verdict(capsys, 5, "ensemble behavior", de.nll <= mean_nll and gap <= 0.05,
            f"DE NLL {de.nll:.4f} <= member mean {mean_nll:.4f}; "
            f"ECE student {student.ece:.4f} vs DE {de.ece:.4f} (gap {gap:.4f}, tol 0.05)")


def test_ac6_crd_properties(capsys):
    rng = np.random.default_rng(6)
    errs = []
    for N in (2, 4, 8):
        zt = np.tile(rng.normal(size=(1, 5)), (N, 1))
        errs.append(abs(crd_loss(rng.normal(size=(N, 5)), zt, 0.07).item() - math.log(N)))
    zs, zt = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    single = crd_loss(zs, zt, 0.07).item()
    rel = max(abs(crd_total_loss(zs, [zt] * M, 0.07).item() - M * single) / (M * single) for M in (1, 3, 5))
    verdict(capsys, 6, "CRD properties", max(errs) < 1e-10 and rel < 1e-12,
            f"|loss - ln N| max {max(errs):.1e} (tol 1e-10), M-teacher relative gap {rel:.1e}")


def test_ac7_mc_dropout_contract(capsys):
    net = SegNet(dropout_rate=0.2, seed=5).eval()
    x = np.random.default_rng(7).random((1, 16, 16))
    a, _ = uq.mcd_predict(net, x, 10, 123)
    b, _ = uq.mcd_predict(net, x, 10, 123)
    reproducible = a.tobytes() == b.tobytes()
    same = [a[0]] * 4
    mi_zero = bool((uq.mutual_information(uq.mean_of(same), same) == 0).all())
    rng = np.random.default_rng(77)
    bounded = True
    for _ in range(1000):
        M = int(rng.integers(2, 11))
        members = [rng.random(16) for _ in range(M)]
        mean = uq.mean_of(members)
        mi = uq.mutual_information(mean, members)
        bounded &= bool((mi >= 0).all() and (mi <= uq.predictive_entropy(mean) + 1e-15).all())
    verdict(capsys, 7, "MC-Dropout contract", reproducible and mi_zero and bounded,
            f"bitwise reproducible {reproducible}, identical-member MI == 0 {mi_zero}, "
            f"MI <= H(mean) on 1000 sets {bounded}")


PINNED = """\
seed = 3
n = 6
n_test = 2
size = 16
width1 = 2
width2 = 4
width3 = 8
epochs = 2
batch_size = 2
lr = 0.001
members = 2
mode = kl
methods = de,end-kl
"""


def run_pipeline(out, conf):
    steps = [["gen-data"], ["train-ensemble"], ["distill"], ["evaluate"]]
    codes = [cli.main([*s, "--config", str(conf), "--out", str(out)]) for s in steps]
    return codes, (out / "reports" / "metrics.csv").read_bytes()


def test_ac8_end_to_end_determinism(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("UQD_THREADS", "1")
    conf = tmp_path / "pinned.txt"
    conf.write_text(PINNED)
    codes1, csv1 = run_pipeline(tmp_path / "a", conf)
    codes2, csv2 = run_pipeline(tmp_path / "b", conf)
    ok = codes1 == codes2 == [0, 0, 0, 0] and csv1 == csv2
    verdict(capsys, 8, "end-to-end determinism", ok,
            f"exit codes {codes1} / {codes2}, metrics.csv identical {csv1 == csv2} ({len(csv1)} bytes)")


def test_ac9_calibration_sanity(capsys):
    rng = np.random.default_rng(9)
    p = rng.random(1_000_000)
    y = (rng.random(p.size) < p).astype(float)
    base = metrics.ece(p, y, 10)[0]
    z = logit(np.clip(p, 1e-12, 1 - 1e-12))
    eces = [base] + [metrics.ece(expit(k * z), y, 10)[0] for k in (1.5, 2.0, 4.0)]
    increasing = all(a < b for a, b in zip(eces, eces[1:]))
    verdict(capsys, 9, "calibration sanity", base < 0.01 and increasing,
            f"calibrated ECE {base:.5f} (tol 0.01); sharpened x1.5, x2, x4: "
            + ", ".join(f"{e:.4f}" for e in eces[1:]))


def test_ac10_file_formats(capsys, tmp_path):
    rng = np.random.default_rng(10)
    img = rng.integers(0, 256, size=(13, 17)) / 255.0
    mask = (rng.random((13, 17)) < 0.3).astype(float)
    probs = rng.random((13, 17))
    write_pgm(tmp_path / "i.pgm", img)
    write_pgm(tmp_path / "m.pgm", mask, mask=True)
    write_pfm(tmp_path / "p.pfm", probs)
    pgm_ok = np.array_equal(read_pgm(tmp_path / "i.pgm"), img)
    pgm_ok &= np.array_equal(read_pgm(tmp_path / "m.pgm", mask=True), mask)
    pfm_err = float(np.abs(read_pfm(tmp_path / "p.pfm") - probs).max())
    svg_ok = True
    for B in (5, 10, 15):
        table = metrics.reliability(probs, mask, B)
        root = ET.fromstring(reliability_svg(table, f"B={B}"))
        bars = [e for e in root.iter(SVG + "rect") if e.get("class") == "bar"]
        diag = [e for e in root.iter(SVG + "path") if e.get("class") == "diagonal"]
        svg_ok &= len(bars) == B and len(diag) == 1
    ok = pgm_ok and pfm_err <= 2.0 ** -24 and svg_ok
    verdict(capsys, 10, "file-format conformance", ok,
            f"PGM exact {pgm_ok}, PFM max err {pfm_err:.1e} (<= 2^-24), SVG bars+diagonal {svg_ok}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
