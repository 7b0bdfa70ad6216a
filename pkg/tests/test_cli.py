import csv
import json

import numpy as np
import pytest

from helpers import P2
from priorshift.cli import main


@pytest.fixture
def files(tmp_path):
    def put(name, obj):
        path = tmp_path / name
        path.write_text(obj if isinstance(obj, str) else json.dumps(obj))
        return str(path)

    put("p2.json", P2.to_dict())
    put("prior.json", {"kind": "prior", "priors": [0.7, 0.3]})
    put("qx.json", {"x1": 0.62, "x2": 0.38})
    put("const.json", {"regions": {"x1": 0, "x2": 0}})
    return tmp_path, put


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_synth_writes_prior_shifted_target(files, capsys):
    d, _ = files
    code, out, _ = run(["synth", "--source", str(d / "p2.json"), "--shift", str(d / "prior.json")], capsys)
    assert code == 0
    mass = np.array(json.loads(out)["mass"])
    np.testing.assert_allclose(mass.sum(axis=0), [0.7, 0.3], atol=1e-12)
    np.testing.assert_allclose(mass.sum(axis=1), [0.62, 0.38], atol=1e-12)


def test_estimate_exact(files, capsys):
    d, _ = files
    argv = ["estimate", "--source", str(d / "p2.json"), "--target", str(d / "qx.json"), "--method", "em", "ccm", "pcc"]
    code, out, _ = run(argv, capsys)
    assert code == 0
    res = json.loads(out)
    np.testing.assert_allclose(res["em"]["priors"], [0.7, 0.3], atol=1e-8)
    np.testing.assert_allclose(res["ccm"]["priors"], [0.7, 0.3], atol=1e-8)
    np.testing.assert_allclose(res["pcc"]["priors"], [0.572, 0.428], atol=1e-12)


def test_estimate_markdown_to_file(files, capsys):
    d, _ = files
    out_path = d / "est.md"
    argv = ["estimate", "--source", str(d / "p2.json"), "--target", str(d / "qx.json"),
            "--format", "md", "--out", str(out_path)]
    code, out, _ = run(argv, capsys)
    assert code == 0 and out == ""
    assert "| em | 0.7, 0.3 |" in out_path.read_text()


def test_estimate_from_csv(files, capsys):
    d, put = files
    labeled = "feature,label\n" + "x1,0\n" * 4 + "x1,1\n" + "x2,0\n" + "x2,1\n" * 4
    unlabeled = "feature\n" + "x1\n" * 62 + "x2\n" * 38
    argv = ["estimate", "--labeled", put("l.csv", labeled), "--unlabeled", put("u.csv", unlabeled),
            "--smoothing", "0", "--method", "em"]
    code, out, _ = run(argv, capsys)
    assert code == 0
    np.testing.assert_allclose(json.loads(out)["em"]["priors"], [0.7, 0.3], atol=1e-8)


def test_estimate_singular_classifier_exit_4(files, capsys):
    d, _ = files
    argv = ["estimate", "--source", str(d / "p2.json"), "--target", str(d / "qx.json"),
            "--method", "em", "ccm", "--classifier", str(d / "const.json")]
    code, out, err = run(argv, capsys)
    assert code == 4
    assert "SingularStratum" in err
    assert "em" in json.loads(out)  # the other estimator still reports


def test_estimate_fjs_without_solution_exit_3(files, capsys):
    d, put = files
    argv = ["estimate", "--source", str(d / "p2.json"), "--target", put("px.json", {"x1": 0.5, "x2": 0.5}),
            "--method", "fjs_q", "--rho", "0.2"]
    code, _, err = run(argv, capsys)
    assert code == 3
    assert "NoConvergence" in err


def test_invalid_json_exit_2(files, capsys):
    d, put = files
    bad = put("bad.json", {"features": ["x1", "x2"], "classes": 2, "mass": [[0.5, 0.5], [0.5, 0.5]]})
    code, _, err = run(["synth", "--source", bad, "--shift", str(d / "prior.json")], capsys)
    assert code == 2
    assert "total mass" in err
    code, _, _ = run(["synth", "--source", put("junk.json", "{not json"), "--shift", str(d / "prior.json")], capsys)
    assert code == 2


def test_diagnose(files, capsys):
    d, put = files
    run(["synth", "--source", str(d / "p2.json"), "--shift", str(d / "prior.json"), "--out", str(d / "q.json")], capsys)
    code, out, _ = run(["diagnose", "--source", str(d / "p2.json"), "--target", str(d / "q.json")], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["verdicts"]["prior"]["holds"] is True
    assert rep["verdicts"]["covariate"]["holds"] is False
    assert rep["rank"]["overall_identifiable"] is True


def test_run_scenarios_and_failure_code(files, capsys):
    d, put = files
    cfg = put("run.json", {
        "seed": 3,
        "scenarios": [
            {"name": "ok", "source": "p2.json", "shift": {"kind": "prior", "priors": [0.7, 0.3]},
             "estimators": ["em", "pcc"], "sample_sizes": [2000, 2000]},
            {"name": "bad", "source": "p2.json", "shift": {"kind": "fjs", "u": [5, 5], "v": [1, 1]},
             "estimators": ["em"]},
        ],
    })
    code, out, _ = run(["run", cfg], capsys)
    reports = json.loads(out)
    assert [r["name"] for r in reports] == ["ok", "bad"]
    assert reports[1]["error"] == "NotNormalized"
    assert code == 2
    np.testing.assert_allclose(reports[0]["per_estimator"]["exact"]["em"]["priors"], [0.7, 0.3], atol=1e-8)
    # same config, same bytes
    _, again, _ = run(["run", cfg], capsys)
    assert again == out


def test_sample(files, capsys):
    d, _ = files
    code, _, _ = run(["sample", "--dist", str(d / "p2.json"), "-n", "5"], capsys)
    assert code == 2
    code, out, _ = run(["sample", "--dist", str(d / "p2.json"), "-n", "5", "--seed", "1"], capsys)
    assert code == 0
    rows = list(csv.reader(out.splitlines()))
    assert rows[0] == ["feature", "label"] and len(rows) == 6
    _, again, _ = run(["sample", "--dist", str(d / "p2.json"), "-n", "5", "--seed", "1"], capsys)
    assert again == out
