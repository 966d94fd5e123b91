"""
Tests for the report, CSV and VTK writers
"""

import json

import numpy as np
import pytest

from verifem.api.commands import flux_cell_fields
from verifem.errors import InputError
from verifem.exports.writers import format_float, write_report, write_study_csv, write_tractions_csv, write_vtk
from verifem.services.equilibration import equilibrate_solution
from verifem.services.mesh import unit_square_mesh
from verifem.services.reports import BoundKind, EstimateReport, StudyRecord


class TestReport:
    def test_floats_round_trip(self, tmp_path):
        """Test the shortest repr of a double is written and read back exactly"""
        value = 0.1 + 0.2
        assert float(format_float(value)) == value
        path = write_report(tmp_path / "report.json", {"value": value, "count": 3, "flag": True})
        text = path.read_text()
        assert "\n  \"value\": 0.30000000000000004,\n" in text
        assert text.endswith("}\n")
        assert json.loads(text) == {"value": value, "count": 3, "flag": True}

    def test_models_and_non_finite(self, tmp_path):
        """Test pydantic models are dumped and inf becomes null"""
        report = EstimateReport(estimator="zz", value=0.5, bound_kind=BoundKind.INDICATOR)
        path = write_report(tmp_path / "report.json", {"estimate": report, "ratio": float("inf"),
                                                       "array": np.array([1.0, 2.0])})
        data = json.loads(path.read_text())
        assert data["estimate"]["bound_kind"] == "indicator"
        assert data["ratio"] is None
        assert data["array"] == [1.0, 2.0]

    def test_identical_payloads_identical_bytes(self, tmp_path):
        """Test the writer is deterministic"""
        payload = {"b": [1.0 / 3.0, 2.0], "a": {"x": np.float64(7.25)}}
        first = write_report(tmp_path / "one.json", payload).read_bytes()
        assert first == write_report(tmp_path / "two.json", payload).read_bytes()


class TestCsv:
    def test_study_rows(self, tmp_path):
        """Test the study header and empty optional columns"""
        records = [
            StudyRecord(iteration=0, N=25, h=0.25, eta=0.5, ref_error=0.4, i_eff=1.25),
            StudyRecord(iteration=1, N=81, h=0.125, eta=0.25),
        ]
        lines = write_study_csv(tmp_path / "study.csv", records).read_text().splitlines()
        assert lines[0] == "iteration,N,h,eta,ref_error,i_eff,seconds"
        assert lines[1] == "0,25,0.25,0.5,0.40000000000000002,1.25,"
        assert lines[2] == "1,81,0.125,0.25,,,"

    def test_tractions(self, tmp_path):
        """Test one row per edge"""
        text = write_tractions_csv(tmp_path / "tractions.csv", [(0, 1.0, -0.5), (1, 0.0, 2.0)]).read_text()
        assert text == "edge,c1,c2\n0,1,-0.5\n1,0,2\n"


class TestVtk:
    def test_unstructured_grid(self, tmp_path):
        """Test header, cells and cell types of a 2x2 mesh"""
        mesh = unit_square_mesh(2)
        text = write_vtk(tmp_path / "mesh.vtk", mesh).read_text()
        lines = text.splitlines()
        assert lines[0] == "# vtk DataFile Version 3.0"
        assert lines[2] == "ASCII"
        assert lines[3] == "DATASET UNSTRUCTURED_GRID"
        assert lines[4] == "POINTS 9 double"
        assert "CELLS 8 32" in lines
        types = lines.index("CELL_TYPES 8")
        assert lines[types + 1:types + 9] == ["5"] * 8

    def test_point_and_cell_data(self, tmp_path):
        """Test scalars and padded vectors"""
        mesh = unit_square_mesh(1)
        text = write_vtk(tmp_path / "mesh.vtk", mesh, {"u_h": np.arange(4.0)},
                         {"flux": np.array([[1.0, 2.0], [3.0, 4.0]])}).read_text()
        assert "POINT_DATA 4\nSCALARS u_h double 1\nLOOKUP_TABLE default\n0\n1\n2\n3\n" in text
        assert "CELL_DATA 2\nVECTORS flux double\n1 2 0\n3 4 0\n" in text

    def test_size_mismatch(self, tmp_path):
        """Test fields must match the mesh"""
        with pytest.raises(InputError):
            write_vtk(tmp_path / "mesh.vtk", unit_square_mesh(1), {"u_h": np.zeros(3)})

    def test_equilibrated_flux_fields(self, tmp_path, fig1_solution):
        """Test element means of q_hat become vectors and its defect a scalar"""
        q_hat = equilibrate_solution(fig1_solution)
        fields = flux_cell_fields({q_hat.backend: q_hat, "fe": None})
        assert set(fields) == {"q_hat_analytic", "defect_analytic"}
        mesh = fig1_solution.mesh
        assert fields["q_hat_analytic"].shape == (mesh.num_elements, 2)
        assert fields["defect_analytic"].shape == (mesh.num_elements,)
        text = write_vtk(tmp_path / "mesh.vtk", mesh, cell_data=fields).read_text()
        assert "VECTORS q_hat_analytic double\n" in text
        assert "SCALARS defect_analytic double 1\n" in text
