"""
Tests for the run file parser and the verifem command line
"""

import json

import pytest

from verifem.api.commands import run
from verifem.config import RunConfig, parse_config
from verifem.errors import ConfigError, ContractViolation, InputError
from verifem.main import main
from verifem.services.estimators import EstimationSession
from verifem.services.reports import BoundKind, EstimateReport


@pytest.fixture
def write_config(tmp_path):
    """Write a run file into the test directory and return its path"""

    def _write(text, name="run.ini"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write


class TestParseConfig:
    def test_minimal_file(self, write_config):
        """Test defaults around a minimal run file"""
        config = parse_config(write_config("problem=sin_sin\nn=8\nestimators=cre_analytic\n"))
        assert config.problem == "sin_sin"
        assert config.n == 8
        assert config.estimators == ["cre_analytic"]
        assert config.patch_enrichment == 2
        assert config.fe_enrichment == 3
        assert config.goal is None and config.adapt is None

    def test_estimator_list_keeps_order(self, write_config):
        """Test comma separated estimators"""
        config = parse_config(write_config("problem=sin_sin\nestimators=zz, cre_fe\n"))
        assert config.estimators == ["zz", "cre_fe"]

    def test_sections(self, write_config):
        """Test section values and the lambda alias"""
        text = (
            "# adaptive L-shape\n"
            "problem = lshape_singular\n"
            "n = 2\n"
            "[adapt]\n"
            "lambda = 0.6\n"
            "max_iterations = 5\n"
            "[goal]\n"
            "region = 0.0, 0.5, 0.0, 0.5\n"
            "methods = cre, dwr\n"
        )
        config = parse_config(write_config(text))
        assert config.adapt.lambda_ == 0.6
        assert config.adapt.max_iterations == 5
        assert config.goal.region == (0.0, 0.5, 0.0, 0.5)
        assert config.goal.methods == ["cre", "dwr"]

    def test_lambda_out_of_range(self, write_config):
        """Test the error names the rule and the line"""
        with pytest.raises(ConfigError) as exc_info:
            parse_config(write_config("problem=sin_sin\n[adapt]\nlambda=1.5\n"))
        assert "lambda out of [0,1]" in exc_info.value.message
        assert exc_info.value.line == 3

    def test_unknown_key(self, write_config):
        """Test unknown keys are rejected with their line"""
        with pytest.raises(ConfigError) as exc_info:
            parse_config(write_config("problem=sin_sin\nmesh_size=4\n"))
        assert "unknown key 'mesh_size'" in exc_info.value.message
        assert exc_info.value.line == 2

    def test_unknown_section(self, write_config):
        """Test section names are checked"""
        with pytest.raises(ConfigError) as exc_info:
            parse_config(write_config("problem=sin_sin\n[plots]\n"))
        assert exc_info.value.line == 2

    def test_missing_problem(self, write_config):
        """Test the problem key is required"""
        with pytest.raises(ConfigError, match="missing required key 'problem'"):
            parse_config(write_config("n=4\n"))

    def test_unknown_estimator(self, write_config):
        """Test estimator names are validated"""
        with pytest.raises(ConfigError, match="unknown estimators"):
            parse_config(write_config("problem=sin_sin\nestimators=zz,magic\n"))

    def test_missing_file(self, tmp_path):
        """Test a missing run file"""
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "absent.ini")

    def test_custom_parameters(self):
        """Test custom problem parameters only apply to the custom problem"""
        assert RunConfig(problem="sin_sin").custom_parameters() == {}
        parameters = RunConfig(problem="custom", custom={"f": 2.0}).custom_parameters()
        assert parameters["f"] == 2.0
        assert parameters["domain"] == "square"


class TestCommands:
    def test_estimate_writes_report(self, write_config, tmp_path):
        """Test the fig1 estimate run and its report schema"""
        path = write_config("problem=fig1_square\nn=8\nestimators=explicit,cre_analytic\n[output]\nvtk=false\n")
        out = tmp_path / "estimate"
        assert main(["estimate", "--config", str(path), "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert [entry["estimator"] for entry in report["estimates"]] == ["explicit", "cre"]
        assert report["estimates"][1]["bound_kind"] == "guaranteed_upper"
        assert report["estimates"][0]["bound_kind"] == "indicator"
        assert (out / "tractions.csv").read_text().startswith("edge,c1,c2\n")

    def test_solve_writes_vtk(self, write_config, tmp_path):
        """Test the solve command writes the mesh"""
        path = write_config("problem=sin_sin\nn=2\n")
        result = run("solve", parse_config(path), str(tmp_path / "solve"))
        vtk = (tmp_path / "solve" / "mesh_00.vtk").read_text()
        assert vtk.startswith("# vtk DataFile Version 3.0\n")
        assert "CELL_TYPES 8\n" in vtk
        assert len(result.files) == 2

    def test_study_is_deterministic(self, write_config, tmp_path):
        """Test two study runs write byte-identical CSV files"""
        path = write_config("problem=sin_sin\nn=4\n[study]\niterations=3\nestimator=zz\n")
        for name in ("first", "second"):
            assert main(["study", "--config", str(path), "--out", str(tmp_path / name)]) == 0
        first = (tmp_path / "first" / "study.csv").read_bytes()
        assert first == (tmp_path / "second" / "study.csv").read_bytes()
        assert first.startswith(b"iteration,N,h,eta,ref_error,i_eff,seconds\n")
        assert len(first.splitlines()) == 4

    def test_estimate_needs_work(self, write_config, tmp_path):
        """Test an estimate run without estimators or a goal"""
        with pytest.raises(InputError):
            run("estimate", parse_config(write_config("problem=sin_sin\n")), str(tmp_path))

    def test_bad_config_exit_code(self, write_config, tmp_path):
        """Test input errors map to exit code 1"""
        path = write_config("problem=sin_sin\n[adapt]\nlambda=1.5\n")
        assert main(["adapt", "--config", str(path), "--out", str(tmp_path)]) == 1

    def test_adapt_requires_section(self, write_config, tmp_path):
        """Test the adapt command without an [adapt] section"""
        path = write_config("problem=sin_sin\nn=2\n")
        assert main(["adapt", "--config", str(path), "--out", str(tmp_path)]) == 1

    def test_estimate_vtk_carries_equilibrated_flux(self, write_config, tmp_path):
        """Test q_hat and its divergence defect are written per element"""
        path = write_config("problem=fig1_square\nn=4\nestimators=cre_analytic\n")
        out = tmp_path / "estimate"
        assert main(["estimate", "--config", str(path), "--out", str(out)]) == 0
        vtk = (out / "mesh_00.vtk").read_text()
        assert "VECTORS q_hat_analytic double\n" in vtk
        assert "SCALARS defect_analytic double 1\n" in vtk
        assert "SCALARS cre_guaranteed_upper_analytic double 1\n" in vtk

    def test_adapt_writes_size_maps(self, write_config, tmp_path):
        """Test every adaptive iteration carries its size map"""
        path = write_config(
            "problem=lshape_singular\nn=1\n[adapt]\nlambda=0.5\nepsilon0=1e-6\nmax_iterations=3\nestimator=zz\n"
        )
        out = tmp_path / "adapt"
        assert main(["adapt", "--config", str(path), "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert len(report["final_size_map"]) == report["final_mesh"]["elements"]
        assert all(ratio > 0.0 for ratio in report["final_size_map"])
        for index in range(3):
            assert "SCALARS size_map double 1\n" in (out / f"mesh_{index:02d}.vtk").read_text()

    def test_report_contract_exit_code(self, write_config, tmp_path, monkeypatch):
        """Test a report failing its own validation maps to exit code 2"""

        def inconsistent_run(self, name):
            return [EstimateReport(estimator=name, value=1.0, bound_kind=BoundKind.INDICATOR, contributions=[0.5])]

        monkeypatch.setattr(EstimationSession, "run", inconsistent_run)
        path = write_config("problem=sin_sin\nn=2\nestimators=zz\n")
        assert main(["estimate", "--config", str(path), "--out", str(tmp_path / "cli")]) == 2
        with pytest.raises(ContractViolation):
            run("estimate", parse_config(path), str(tmp_path / "direct"))
