"""
Text templates for the verifem output files
"""

VTK_HEADER = """# vtk DataFile Version 3.0
{title}
ASCII
DATASET UNSTRUCTURED_GRID
POINTS {num_points} double
"""

VTK_CELLS = "CELLS {num_cells} {size}\n"

VTK_CELL_TYPES = "CELL_TYPES {num_cells}\n"

# legacy VTK cell type of a linear triangle
VTK_TRIANGLE = 5

VTK_SCALARS = """SCALARS {name} double 1
LOOKUP_TABLE default
"""

VTK_VECTORS = "VECTORS {name} double\n"

STUDY_HEADER = ("iteration", "N", "h", "eta", "ref_error", "i_eff", "seconds")

TRACTIONS_HEADER = ("edge", "c1", "c2")

# 17 significant digits round-trip every double
FLOAT_FORMAT = "{:.17g}"
