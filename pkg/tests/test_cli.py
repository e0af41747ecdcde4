import json

import pytest

from hmfem.cli import main
from hmfem.harness import ExperimentSpec, read_vtu


def test_solve_prints_summary(capsys, tmp_path):
    assert main(["solve", "--example", "inv_stereo", "--level", "3", "--out", str(tmp_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["converged"] and summary["level"] == 3
    assert (tmp_path / "trace.csv").read_text().startswith("step,correction_norm,residual_norm,seconds")


def test_solve_reports_non_convergence(capsys, tmp_path):
    config = tmp_path / "spec.json"
    config.write_text(json.dumps({"example": "inv_stereo", "max_iter": 1}))
    assert main(["solve", "--config", str(config), "--level", "4", "--rho-rule", "1"]) == 2
    assert json.loads(capsys.readouterr().out)["converged"] is False


def test_convergence_writes_reports(capsys, tmp_path):
    assert main(["convergence", "--level", "3", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "level,n_vertices,e_X,eoc_lambda_l2,eoc_lambda_hm1,eoc_e_X"
    data = json.loads((tmp_path / "convergence.json").read_text())
    assert [r["level"] for r in data["levels"]] == [1, 2, 3]


def test_perturbed_convergence_uses_seed(tmp_path):
    assert main(["convergence", "--level", "2", "--perturbed", "--seed", "5", "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "convergence.json").read_text())
    assert data["spec"]["mesh_mode"] == "perturbed"
    assert data["seeds"]["mesh_seed"] == 5


def test_basin_from_config(capsys, tmp_path):
    config = tmp_path / "basin.json"
    config.write_text(json.dumps(ExperimentSpec(levels=(1, 2), rho_rules=("0", "h")).to_dict()))
    assert main(["basin", "--config", str(config)]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "level,rho_0,rho_h"


def test_export_writes_vtu(tmp_path):
    assert main(["export", "--example", "radial", "--level", "2", "--out", str(tmp_path)]) == 0
    data = read_vtu(tmp_path / "solution.vtu")
    assert data["n_points"] == 125


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["solve", "--level", "x"],
        ["solve", "--example", "torus"],
        ["solve", "--rho-rule", "h9", "--level", "1"],
        ["convergence", "--example", "radial", "--level", "6"],
        ["export", "--level", "1"],
        ["basin", "--config", "/nonexistent/spec.json"],
    ],
)
def test_usage_errors_exit_with_one(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        code = main(argv)
        raise SystemExit(code)
    assert exc.value.code == 1


def test_malformed_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["solve", "--config", str(bad)]) == 1
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"colour": "red"}))
    assert main(["solve", "--config", str(unknown)]) == 1
