import csv
import json

import numpy as np
import pytest

from penmeta import __version__
from penmeta.cli import EXIT_INPUT, main, study_curve, write_outputs
from penmeta.dist import PenetranceModel
from penmeta.likelihood import parse_baseline
from penmeta.simulation import fit_weibull_to_curve
from penmeta.studies import StudyRecord

STUDIES = [
    {"id": "p1", "modality": "Penetrance", "n": 300, "ages": [40, 55, 70],
     "estimate": [0.03, 0.08, 0.2], "ci_lower": [0.01, 0.04, 0.12], "ci_upper": [0.08, 0.15, 0.3]},
    {"id": "r1", "modality": "RR", "n": 919, "estimate": 2.4, "ci_lower": 1.3, "ci_upper": 4.3},
    {"id": "o1", "modality": "OR", "n": 5000, "estimate": 1.74, "ci_lower": 1.46, "ci_upper": 2.07},
]
FAST = ["--iters", "400", "--burnin", "200", "--covariance-draws", "20000", "--seed", "7"]


@pytest.fixture
def study_file(tmp_path):
    path = tmp_path / "studies.json"
    path.write_text(json.dumps(STUDIES))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_meta_writes_all_outputs(study_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["meta", "--studies", str(study_file), "--out", str(out), *FAST]) == 0
    rows = read_csv(out / "consensus.csv")
    assert [r["age"] for r in rows] == ["40", "50", "60", "70", "80"]
    means = [float(r["mean"]) for r in rows]
    assert all(float(r["lower"]) <= float(r["mean"]) <= float(r["upper"]) for r in rows)
    assert means == sorted(means)
    diag = json.loads((out / "diagnostics.json").read_text())
    assert {"acceptance", "gelman_rubin", "max_gelman_rubin"} <= set(diag)
    assert set(diag["acceptance"]) == {"kappa", "lambda", "a", "b", "c", "d"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["version"] == __version__ and manifest["config"]["seed"] == 7
    post = read_csv(out / "posterior.csv")
    assert len(post) == 2 * 200 and "penetrance_80" in post[0]
    assert "consensus.csv" in capsys.readouterr().out


def test_meta_is_byte_identical_for_a_seed(study_file, tmp_path):
    for name in ("a", "b"):
        assert main(["meta", "--studies", str(study_file), "--out", str(tmp_path / name), *FAST]) == 0
    for f in ("consensus.csv", "posterior.csv", "diagnostics.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_unseeded_run_records_generated_seed(study_file, tmp_path):
    out = tmp_path / "run"
    assert main(["meta", "--studies", str(study_file), "--out", str(out),
                 "--iters", "300", "--burnin", "100", "--covariance-draws", "10000"]) == 0
    seed = json.loads((out / "manifest.json").read_text())["config"]["seed"]
    assert isinstance(seed, int)
    again = tmp_path / "again"
    assert main(["meta", "--studies", str(study_file), "--out", str(again),
                 "--iters", "300", "--burnin", "100", "--covariance-draws", "10000", "--seed", str(seed)]) == 0
    assert (out / "consensus.csv").read_bytes() == (again / "consensus.csv").read_bytes()


def test_empty_study_file(tmp_path, capsys):
    path = tmp_path / "empty.json"
    path.write_text("[]")
    assert main(["meta", "--studies", str(path), "--out", str(tmp_path / "o")]) != 0
    assert "no studies" in capsys.readouterr().err


def test_malformed_input_leaves_no_files(tmp_path, capsys):
    path = tmp_path / "bad.json"
    bad = [dict(STUDIES[1]), {"id": "o9", "modality": "OR", "n": 10, "estimate": 2.0, "ci_lower": 3.0, "ci_upper": 4.0}]
    path.write_text(json.dumps(bad))
    out = tmp_path / "o"
    assert main(["meta", "--studies", str(path), "--out", str(out), *FAST]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert "o9" in err
    assert not out.exists() or not any(out.iterdir())


def test_write_outputs_is_all_or_nothing(tmp_path):
    files = {"a.csv": "x\n", "b.csv": None}
    with pytest.raises(TypeError):
        write_outputs(tmp_path, files)
    assert list(tmp_path.iterdir()) == []


def test_bad_arguments_exit_nonzero(study_file, tmp_path):
    assert main(["meta", "--studies", str(study_file), "--out", str(tmp_path / "o"),
                 "--iters", "100", "--burnin", "100"]) == EXIT_INPUT
    assert main(["meta", "--studies", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    with pytest.raises(SystemExit):
        main(["meta", "--studies", str(study_file), "--out", str(tmp_path / "o"), "--ages", "50,40"])


def test_fixed_writes_tagged_table(study_file, tmp_path):
    out = tmp_path / "fx"
    assert main(["fixed", "--studies", str(study_file), "--out", str(out), "--seed", "1",
                 "--covariance-draws", "20000"]) == 0
    rows = read_csv(out / "fixed.csv")
    assert {r["method"] for r in rows} == {"fixed"} and len(rows) == 5
    assert list(rows[0]) == ["method", "age", "mean", "lower", "upper"]


def test_oracle_rows(tmp_path):
    out = tmp_path / "or"
    assert main(["oracle", "--preset", "palb2", "--out", str(out), "--seed", "2", "--draws", "200000"]) == 0
    vals = [float(r["penetrance"]) for r in read_csv(out / "truth.csv")]
    assert np.allclose(vals, [0.066, 0.143, 0.257, 0.404, 0.565], atol=0.002)


def test_simulate_single_replicate(tmp_path):
    config = tmp_path / "sim.json"
    config.write_text(json.dumps({
        "preset": "atm", "population_size": 50000,
        "plan": [{"modality": "Penetrance", "n": 300}, {"modality": "RR", "n": 900, "reports_ages": True},
                 {"modality": "OR", "n": 2000}],
    }))
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(config), "--replicates", "1", "--iters", "300", "--burnin", "100",
                 "--seed", "4", "--out", str(out)]) == 0
    summary = read_csv(out / "summary.csv")
    cov = [r for r in summary if r["statistic"] == "coverage"]
    assert {r["method"] for r in cov} == {"bayesian", "fixed"}
    for r in cov:
        assert all(float(r[a]) in (0.0, 1.0) for a in ("40", "50", "60", "70", "80"))
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["run"]["replicates"] == 1 and manifest["run"]["setting"]["population_size"] == 50000


def test_plotdata_two_series_on_fine_grid(study_file, tmp_path):
    one = tmp_path / "one.json"
    one.write_text(json.dumps([STUDIES[1]]))
    cons = tmp_path / "consensus.csv"
    grid = range(20, 91)
    m = PenetranceModel(4.5, 95.0)
    cons.write_text("age,mean,lower,upper\n" + "".join(f"{a},{m.cdf(a)},{m.cdf(a)},{m.cdf(a)}\n" for a in grid))
    out = tmp_path / "plot"
    assert main(["plotdata", "--consensus", str(cons), "--studies", str(one), "--ages", "20:90:1",
                 "--out", str(out)]) == 0
    rows = read_csv(out / "plotdata.csv")
    series = {r["series"] for r in rows}
    assert series == {"consensus", "study:r1"}
    assert all(sum(r["series"] == s for r in rows) == 71 for s in series)


def test_plotdata_from_posterior_with_bands(study_file, tmp_path):
    run = tmp_path / "run"
    assert main(["meta", "--studies", str(study_file), "--out", str(run), *FAST]) == 0
    out = tmp_path / "plot"
    assert main(["plotdata", "--posterior", str(run / "posterior.csv"), "--studies", str(study_file),
                 "--bands", "--out", str(out)]) == 0
    series = {r["series"] for r in read_csv(out / "plotdata.csv")}
    assert series == {"consensus", "consensus_lower", "consensus_upper", "baseline", "study:p1", "study:r1", "study:o1"}
    cons = [float(r["mean"]) for r in read_csv(run / "consensus.csv")]
    plotted = [float(r["value"]) for r in read_csv(out / "plotdata.csv")
               if r["series"] == "consensus" and r["age"] in ("40", "50", "60", "70", "80")]
    assert np.allclose(plotted, cons, atol=1e-9)


def test_study_curve_is_a_fixed_point_of_the_fit():
    baseline = parse_baseline("weibull:3.65,143.2426,185")
    rec = StudyRecord("rr3", "RR", 919, 2.4, 1.3, 4.3)
    model = study_curve(rec, baseline)
    grid = np.arange(5.0, 95.0, 5.0)
    refit = fit_weibull_to_curve(grid, model.cdf(grid))
    assert refit.shape == pytest.approx(model.shape, rel=1e-6)
    assert np.max(np.abs(refit.cdf(grid) - model.cdf(grid))) < 1e-6
    # the fit stays close to the RR-implied points it was built from
    implied = 2.4 * baseline.cdf(grid)
    assert np.max(np.abs(model.cdf(grid) - implied)) < 0.05


def test_csv_study_file_is_accepted(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("id,modality,n,estimate,ci_lower,ci_upper\nr1,RR,919,2.4,1.3,4.3\n")
    assert main(["fixed", "--studies", str(path), "--out", str(tmp_path / "o"), "--seed", "1"]) == 0
