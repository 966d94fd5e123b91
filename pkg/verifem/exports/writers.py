"""
Writers for report.json, study.csv, tractions.csv and legacy VTK meshes

JSON floats use the shortest repr that round-trips; CSV and VTK floats are
written with 17 significant digits. Reruns produce byte-identical files.
"""

import csv
import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from verifem.errors import InputError
from verifem.exports.templates import (
    FLOAT_FORMAT,
    STUDY_HEADER,
    TRACTIONS_HEADER,
    VTK_CELL_TYPES,
    VTK_CELLS,
    VTK_HEADER,
    VTK_SCALARS,
    VTK_TRIANGLE,
    VTK_VECTORS,
)
from verifem.services.mesh import Mesh
from verifem.services.reports import StudyRecord

logger = logging.getLogger(__name__)

JSON_INDENT = 2


def format_float(value) -> str:
    return FLOAT_FORMAT.format(float(value))


def _csv_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    return str(value)


def _jsonable(value):
    """Plain JSON types; non-finite floats become null"""
    if isinstance(value, BaseModel):
        value = value.model_dump(mode="json")
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (np.ndarray, np.generic)):
        value = value.tolist()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_report(path, payload: Dict) -> Path:
    """JSON report; pydantic models are dumped with their provenance fields"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_jsonable(payload), indent=JSON_INDENT, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")
    logger.info(f"Wrote report {path}")
    return path


def write_study_csv(path, records: Sequence[StudyRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(STUDY_HEADER)
        for record in records:
            row = record.model_dump()
            writer.writerow([_csv_value(row[column]) for column in STUDY_HEADER])
    logger.info(f"Wrote {len(records)} study rows to {path}")
    return path


def write_tractions_csv(path, rows: Iterable[Tuple[int, float, float]]) -> Path:
    """One row per edge: id and the two nodal values of the linear traction"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TRACTIONS_HEADER)
        for edge, c1, c2 in rows:
            writer.writerow([edge, format_float(c1), format_float(c2)])
    return path


def write_vtk(path, mesh: Mesh, point_data: Optional[Dict[str, np.ndarray]] = None,
              cell_data: Optional[Dict[str, np.ndarray]] = None, title: str = "verifem mesh") -> Path:
    """
    Legacy ASCII unstructured grid of linear triangles. Arrays of shape (n,)
    become SCALARS, arrays of shape (n, 2) become VECTORS with a zero third
    component.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines: List[str] = [VTK_HEADER.format(title=title, num_points=mesh.num_vertices)]
    for x, y in mesh.vertices:
        lines.append(f"{format_float(x)} {format_float(y)} 0\n")
    lines.append(VTK_CELLS.format(num_cells=mesh.num_elements, size=4 * mesh.num_elements))
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}\n")
    lines.append(VTK_CELL_TYPES.format(num_cells=mesh.num_elements))
    lines.append(f"{VTK_TRIANGLE}\n" * mesh.num_elements)

    for section, size, fields in (("POINT_DATA", mesh.num_vertices, point_data),
                                  ("CELL_DATA", mesh.num_elements, cell_data)):
        if not fields:
            continue
        lines.append(f"{section} {size}\n")
        for name, values in fields.items():
            values = np.asarray(values, dtype=float)
            if values.shape[0] != size:
                raise InputError(f"Field '{name}' has {values.shape[0]} entries, expected {size}")
            if values.ndim == 1:
                lines.append(VTK_SCALARS.format(name=name))
                lines.extend(f"{format_float(v)}\n" for v in values)
            elif values.ndim == 2 and values.shape[1] == 2:
                lines.append(VTK_VECTORS.format(name=name))
                lines.extend(f"{format_float(u)} {format_float(v)} 0\n" for u, v in values)
            else:
                raise InputError(f"Field '{name}' must be scalar or a 2-vector per entry")

    path.write_text("".join(lines), encoding="utf-8")
    logger.info(f"Wrote {path} ({mesh.num_elements} cells)")
    return path
