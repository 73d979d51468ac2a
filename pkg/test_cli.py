"""
End-to-end tests of the command line: files written, exit codes and
byte-level determinism.
"""

import json
import os

import pandas as pd
import pytest

import cli


@pytest.fixture(scope="module")
def sims(tmp_path_factory):
    root = tmp_path_factory.mktemp("sims")
    paths = {}
    for design, extra in (("multicutoff", []), ("cumulative", []), ("bivariate", ["--effects", "3"])):
        out = root / design
        code = cli.main(["simulate", "--design", design, "--n", "3000", "--seed", "11",
                         "--out-dir", str(out), "--quiet"] + extra)
        assert code == 0
        paths[design] = out
    return paths


def _rdmc(sims, out, *extra):
    data = str(sims["multicutoff"] / "data.csv")
    return cli.main(["rdmc", "--data", data, "--y", "y", "--x", "x", "--c", "c",
                     "--out-dir", str(out), "--quiet", *extra])


def _results(out):
    return json.loads((out / "results.json").read_text())


# ---------------- SIMULATE ---------------- #

def test_simulate_files(sims):
    out = sims["multicutoff"]
    assert {"data.csv", "truth.json", "manifest.json"} <= set(os.listdir(out))
    truth = json.loads((out / "truth.json").read_text())
    assert truth["truth"] == {"33": 5.0, "66": 2.0}
    assert list(pd.read_csv(out / "data.csv").columns) == ["y", "x", "c", "t"]
    assert (sims["cumulative"] / "cutoffs.csv").exists()


# ---------------- RDMC ---------------- #

def test_rdmc_rows(sims, tmp_path, capsys):
    assert _rdmc(sims, tmp_path) == 0
    doc = _results(tmp_path)
    assert [r["label"] for r in doc["rows"]] == ["33", "66", "weighted", "pooled"]
    weights = [r["weight"] for r in doc["rows"][:2]]
    assert sum(weights) == pytest.approx(1.0)
    bundle = json.loads((tmp_path / "bundle.json").read_text())
    assert bundle["labels"] == ["33", "66", "weighted", "pooled"]
    assert "weighted" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert "results.json" in manifest["files"] and manifest["audit"]


def test_rdmc_pooled_options(sims, tmp_path):
    assert _rdmc(sims, tmp_path, "--pooled-opt", "h=20", "p=2") == 0
    pooled = _results(tmp_path)["rows"][-1]
    assert pooled["h"] == [20.0, 20.0] and pooled["p"] == 2


def test_rdmc_equality_test(sims, tmp_path):
    assert _rdmc(sims, tmp_path, "--test", "equal") == 0
    tests = _results(tmp_path)["tests"]
    assert tests[0]["name"] == "contrast"
    assert 0.0 <= tests[0]["p_value"] <= 1.0


def test_rdmc_plot_and_verbose(sims, tmp_path, capsys):
    assert _rdmc(sims, tmp_path, "--plot", "--verbose") == 0
    frame = pd.read_csv(tmp_path / "rdmc_plot.csv")
    assert list(frame["label"].astype(str)) == ["33", "66", "weighted", "pooled"]
    assert "Sharp RD estimate" in capsys.readouterr().out


def test_unsupported_option_exit_code(sims, tmp_path, capsys):
    assert _rdmc(sims, tmp_path, "--fuzzy", "t") == 2
    assert "unsupported option: fuzzy" in capsys.readouterr().err


def test_missing_cutoff_exit_code(sims, tmp_path, capsys):
    data = str(sims["multicutoff"] / "data.csv")
    assert cli.main(["rdmc", "--data", data, "--y", "y", "--x", "x", "--out-dir", str(tmp_path)]) == 2
    assert "cutoff column is required" in capsys.readouterr().err


def test_estimation_failure_exit_code(sims, tmp_path):
    assert _rdmc(sims, tmp_path, "--pooled-opt", "h=0.001") == 3
    assert not (tmp_path / "results.json").exists()


def test_invalid_level(sims, tmp_path):
    assert _rdmc(sims, tmp_path, "--level", "100") == 2


def test_no_command():
    assert cli.main([]) == 2


def test_outputs_byte_identical(sims, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert _rdmc(sims, first, "--test", "equal") == 0
    assert _rdmc(sims, second, "--test", "equal", "--n-jobs", "2") == 0
    for name in ("results.json", "bundle.json", "results.txt"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_seed_check(sims, tmp_path):
    assert _rdmc(sims, tmp_path, "--seed-check") == 0
    audit = json.loads((tmp_path / "manifest.json").read_text())["audit"]
    assert any("seed check passed" in event["reason"] for event in audit)


# ---------------- RDMCPLOT ---------------- #

def test_rdmcplot_genvars(sims, tmp_path):
    data = str(sims["multicutoff"] / "data.csv")
    code = cli.main(["rdmcplot", "--data", data, "--y", "y", "--x", "x", "--c", "c", "--p", "1",
                     "--nbins", "5,8", "--out-dir", str(tmp_path), "--quiet"])
    assert code == 0
    frame = pd.read_csv(tmp_path / "rdmcplot_genvars.csv")
    assert len(frame) == 3000
    assert list(frame.columns[:5]) == [f"rdmcplot_{n}_1" for n in ("hat_y", "mean_x", "mean_y", "ci_l", "ci_r")]
    assert frame["rdmcplot_mean_x_1"].dropna().nunique() == 10


# ---------------- RDMS ---------------- #

def test_rdms_cumulative(sims, tmp_path):
    data = str(sims["cumulative"] / "data.csv")
    code = cli.main(["rdms", "--data", data, "--y", "y", "--x", "x", "--c", "33,66", "--range", "0:65.5,33.5:100",
                     "--closest", "--out-dir", str(tmp_path), "--quiet"])
    assert code == 0
    doc = _results(tmp_path)
    assert [r["label"] for r in doc["rows"]] == ["33", "66", "pooled"]
    assert doc["ranges"] == [[0.0, 65.5], [33.5, 100.0]]
    assert doc["xnorm"] == "closest"


def test_rdms_cutoffs_from_file(sims, tmp_path):
    folder = sims["cumulative"]
    code = cli.main(["rdms", "--data", str(folder / "data.csv"), "--y", "y", "--x", "x", "--c", "cutoff",
                     "--cutoff-data", str(folder / "cutoffs.csv"), "--out-dir", str(tmp_path), "--quiet"])
    assert code == 0
    doc = _results(tmp_path)
    assert [r["label"] for r in doc["rows"]] == ["33", "66"]
    assert any("full sample" in w["reason"] for w in doc["warnings"])


def test_rdms_bivariate(sims, tmp_path):
    data = str(sims["bivariate"] / "data.csv")
    code = cli.main(["rdms", "--data", data, "--y", "y", "--x", "x1", "--x2", "x2", "--treat", "t",
                     "--c", "25:50,50:50,50:25", "--xnorm", "perpendicular", "--boundary", "corner:50,50",
                     "--test", "equal", "--out-dir", str(tmp_path), "--quiet"])
    assert code == 0
    doc = _results(tmp_path)
    assert [r["label"] for r in doc["rows"]] == ["(25,50)", "(50,50)", "(50,25)", "pooled"]
    assert doc["xnorm"] == "corner:50,50"
    assert [t["name"] for t in doc["tests"]] == ["contrast", "wald_equal"]


def test_rdms_plot(sims, tmp_path):
    data = str(sims["cumulative"] / "data.csv")
    code = cli.main(["rdms", "--data", data, "--y", "y", "--x", "x", "--c", "33,66", "--closest", "--plot",
                     "--out-dir", str(tmp_path), "--quiet"])
    assert code == 0
    frame = pd.read_csv(tmp_path / "rdms_plot.csv")
    rows = {r["label"]: r for r in _results(tmp_path)["rows"]}
    assert list(frame["label"].astype(str)) == ["33", "66", "pooled"]
    assert list(frame["cutoff"].iloc[:2]) == [33.0, 66.0]
    assert frame["weight"].isna().all()
    for _, line in frame.iterrows():
        assert line["ci_l"] <= line["estimate"] <= line["ci_r"]
        assert line["estimate"] == pytest.approx(rows[str(line["label"])]["tau_bias_corrected"], rel=1e-12)


def test_rdms_ambiguous_design(sims, tmp_path, capsys):
    data = str(sims["bivariate"] / "data.csv")
    code = cli.main(["rdms", "--data", data, "--y", "y", "--x", "x1", "--x2", "x2", "--c", "50:50",
                     "--out-dir", str(tmp_path)])
    assert code == 2
    assert "ambiguous" in capsys.readouterr().err


def test_rdms_perpendicular_needs_boundary(sims, tmp_path):
    data = str(sims["bivariate"] / "data.csv")
    code = cli.main(["rdms", "--data", data, "--y", "y", "--x", "x1", "--x2", "x2", "--treat", "t",
                     "--c", "50:50", "--xnorm", "perpendicular", "--out-dir", str(tmp_path), "--quiet"])
    assert code == 2


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
