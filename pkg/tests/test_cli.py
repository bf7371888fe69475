import xml.etree.ElementTree as ET

import numpy as np
import pytest

from uqd import cli
from uqd.data import read_pfm

SVG = "{http://www.w3.org/2000/svg}"
TINY = ["--width1", "2", "--width2", "4", "--width3", "8", "--epochs", "2", "--batch-size", "2",
        "--lr", "1e-3"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A tiny end-to-end run shared by the read-only checks below."""
    out = tmp_path_factory.mktemp("run")
    mp = pytest.MonkeyPatch()
    mp.setenv("UQD_THREADS", "1")
    assert run("gen-data", "--out", out, "--n", 4, "--n-test", 2, "--size", 16) == 0
    assert run("train-ensemble", "--out", out, "--members", 2, *TINY) == 0
    assert run("train", "--out", out, *TINY) == 0
    assert run("train", "--out", out, "--dropout", 0.2, *TINY) == 0
    for mode in ("kl", "crd"):
        assert run("distill", "--out", out, "--mode", mode, "--epochs", 2, "--batch-size", 2) == 0
    assert run("evaluate", "--out", out, "--methods", "baseline,de,mcd,end-kl,end-crd,gt",
               "--passes", 3, "--measure", "mi") == 0
    mp.undo()
    return out


def test_outputs_present(pipeline):
    out = pipeline
    for name in ("member_0", "member_1", "baseline", "mcd", "student_kl", "student_crd"):
        assert (out / "checkpoints" / f"{name}.uqd").is_file()
        assert (out / "logs" / f"{name}.csv").is_file()
    assert (out / "reports" / "table.md").is_file()
    assert (out / "figures" / "ece_vs_dice.svg").is_file()
    assert len(list((out / "uncertainty" / "de").glob("*_mi.pfm"))) == 2


def test_metrics_csv(pipeline):
    lines = (pipeline / "reports" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "method,dsc,mcc,ece,brier,nll"
    rows = {ln.split(",")[0]: [float(v) for v in ln.split(",")[1:]] for ln in lines[1:]}
    assert set(rows) == {"baseline", "de", "mcd", "end-kl", "end-crd", "gt"}
    dsc, mcc, ece, brier, nll = rows["gt"]
    assert dsc == 1.0 and ece == 0.0 and brier == 0.0 and nll == 0.0
    for vals in rows.values():
        assert all(np.isfinite(vals))


def test_single_member_uncertainty_is_zero(pipeline):
    u = read_pfm(pipeline / "uncertainty" / "baseline" / "0000_mi.pfm")
    assert (u == 0).all()


@pytest.mark.parametrize("method", ["baseline", "de", "mcd", "end-kl", "end-crd", "gt"])
def test_reliability_svg(pipeline, method):
    root = ET.parse(pipeline / "figures" / f"reliability_{method}.svg").getroot()
    bars = [e for e in root.iter(SVG + "rect") if e.get("class") == "bar"]
    paths = list(root.iter(SVG + "path"))
    assert len(bars) == 10
    assert len(paths) == 1 and paths[0].get("class") == "diagonal"


def test_scatter_svg(pipeline):
    root = ET.parse(pipeline / "figures" / "ece_vs_dice.svg").getroot()
    points = [e for e in root.iter(SVG + "circle") if e.get("class") == "point"]
    assert len(points) == 6 * 2


def test_table_bolds_best(pipeline):
    table = (pipeline / "reports" / "table.md").read_text()
    assert table.splitlines()[0].startswith("| Method | DSC")
    assert "**" in table
    gt_line = [ln for ln in table.splitlines() if ln.startswith("| Ground truth")][0]
    assert "**" not in gt_line


def test_report_rerenders(pipeline, capsys):
    before = (pipeline / "reports" / "table.md").read_text()
    assert run("report", "--out", pipeline) == 0
    assert capsys.readouterr().out == before


def test_predict_writes_maps(pipeline):
    assert run("predict", "--out", pipeline, "--method", "end-kl") == 0
    maps = sorted((pipeline / "predictions" / "end-kl").glob("*.pfm"))
    assert len(maps) == 2
    p = read_pfm(maps[0])
    assert p.shape == (16, 16) and p.min() >= 0 and p.max() <= 1


def test_de_with_one_member_matches_baseline(pipeline, tmp_path):
    ckpt = pipeline / "checkpoints" / "member_0.uqd"
    common = ["--out", tmp_path, "--data", pipeline / "data", "--teachers", ckpt, "--baseline", ckpt]
    assert run("evaluate", *common, "--methods", "baseline,de") == 0
    base, de = (tmp_path / "reports" / "metrics.csv").read_text().splitlines()[1:]
    assert base.split(",")[1:] == de.split(",")[1:]


def test_config_precedence(tmp_path):
    conf = tmp_path / "c.txt"
    conf.write_text("# pinned\nn = 3\nsize=16\nseed=5\n")
    assert run("gen-data", "--out", tmp_path, "--config", conf, "--seed", 9, "--n-test", 1) == 0
    text = (tmp_path / "resolved-config.txt").read_text()
    assert "n=3\n" in text and "seed=9\n" in text and "size=16\n" in text and "n_test=1\n" in text
    assert "noise=0.05\n" in text
    assert (tmp_path / "resolved-config.gen-data.txt").read_text() == text
    assert len((tmp_path / "data" / "train.txt").read_text().splitlines()) == 3


def test_unknown_config_key(tmp_path, capsys):
    conf = tmp_path / "c.txt"
    conf.write_text("colour=blue\n")
    assert run("gen-data", "--out", tmp_path, "--config", conf) == 1
    assert "colour" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path, "--config", tmp_path / "nope.txt") == 2
    assert "--config" in capsys.readouterr().err


def test_missing_data(tmp_path, capsys):
    assert run("train", "--out", tmp_path, *TINY) == 2
    assert "--data" in capsys.readouterr().err


def test_missing_teachers(tmp_path, capsys):
    assert run("distill", "--out", tmp_path, "--teachers", tmp_path / "a.uqd") == 1
    err = capsys.readouterr().err
    assert "--teachers" in err and "a.uqd" in err


def test_empty_teacher_dir(tmp_path, capsys):
    assert run("distill", "--out", tmp_path) == 1
    assert "member_" in capsys.readouterr().err


def test_corrupt_checkpoint(pipeline, tmp_path, capsys):
    bad = tmp_path / "bad.uqd"
    bad.write_bytes(b"XXXX")
    assert run("evaluate", "--out", tmp_path, "--data", pipeline / "data", "--methods", "baseline",
               "--baseline", bad) == 2
    assert "offset" in capsys.readouterr().err


def test_unknown_method(pipeline, tmp_path, capsys):
    assert run("evaluate", "--out", tmp_path, "--data", pipeline / "data", "--methods", "de,xyz") == 1
    assert "xyz" in capsys.readouterr().err


def test_bad_flag_type(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("gen-data", "--out", tmp_path, "--n", "many")
    assert exc.value.code == 2


def test_report_without_metrics(tmp_path, capsys):
    assert run("report", "--out", tmp_path) == 2
    assert "evaluate" in capsys.readouterr().err
