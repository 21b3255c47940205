"""Legacy ASCII VTK unstructured-grid I/O.

This is the interchange format between the solver, the CLI, and external
visualization tools: POINTS / CELLS (type 5) plus optional POINT_DATA scalar
fields and CELL_DATA tensor fields.
"""

import numpy as np

from .mesh import Triangulation

_HEADER = "# vtk DataFile Version 3.0"


def write_vtk(path, mesh, point_scalars=None, cell_tensors=None, title="apmefem mesh"):
    """Write a triangulation, optionally with nodal scalars and element tensors.

    Parameters
    ----------
    point_scalars : dict[str, (N_v,) array], optional
    cell_tensors : dict[str, (N, 2, 2) array], optional
        Written as 3x3 VTK tensors with zero out-of-plane entries.
    """
    v = mesh.vertices
    t = mesh.triangles
    lines = [
        _HEADER,
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {len(v)} double",
    ]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in v]
    lines.append(f"CELLS {len(t)} {4 * len(t)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in t]
    lines.append(f"CELL_TYPES {len(t)}")
    lines += ["5"] * len(t)

    if point_scalars:
        lines.append(f"POINT_DATA {len(v)}")
        for name, values in point_scalars.items():
            values = np.asarray(values, dtype=float)
            if values.shape != (len(v),):
                raise ValueError(f"scalar field {name!r} has wrong length")
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines += [f"{val:.17g}" for val in values]

    if cell_tensors:
        lines.append(f"CELL_DATA {len(t)}")
        for name, tensors in cell_tensors.items():
            tensors = np.asarray(tensors, dtype=float)
            if tensors.shape != (len(t), 2, 2):
                raise ValueError(f"tensor field {name!r} has wrong shape")
            lines.append(f"TENSORS {name} double")
            for m in tensors:
                lines.append(f"{m[0, 0]:.17g} {m[0, 1]:.17g} 0")
                lines.append(f"{m[1, 0]:.17g} {m[1, 1]:.17g} 0")
                lines.append("0 0 0")

    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_vtk(path):
    """Read a legacy ASCII VTK triangle mesh.

    Returns ``(mesh, point_scalars)`` where ``point_scalars`` maps field names
    to nodal arrays (empty when the file has no POINT_DATA).
    """
    with open(path) as f:
        tokens = f.read().split()

    pos = 0

    def expect(word):
        nonlocal pos
        if pos >= len(tokens) or tokens[pos].upper() != word:
            raise ValueError(f"malformed VTK file: expected {word} near token {pos}")
        pos += 1

    def seek(word):
        nonlocal pos
        while pos < len(tokens) and tokens[pos].upper() != word:
            pos += 1
        if pos == len(tokens):
            raise ValueError(f"malformed VTK file: missing {word}")
        pos += 1

    seek("DATASET")
    if tokens[pos].upper() != "UNSTRUCTURED_GRID":
        raise ValueError("only UNSTRUCTURED_GRID datasets are supported")
    pos += 1

    seek("POINTS")
    n_pts = int(tokens[pos]); pos += 2  # count, dtype
    coords = np.array(tokens[pos:pos + 3 * n_pts], dtype=float).reshape(n_pts, 3)
    pos += 3 * n_pts
    vertices = coords[:, :2]

    expect("CELLS")
    n_cells = int(tokens[pos]); pos += 1
    total = int(tokens[pos]); pos += 1
    flat = np.array(tokens[pos:pos + total], dtype=np.int64)
    pos += total

    triangles = np.empty((n_cells, 3), dtype=np.int64)
    cursor = 0
    for k in range(n_cells):
        cnt = flat[cursor]
        if cnt != 3:
            raise ValueError("only triangle cells (3 points) are supported")
        triangles[k] = flat[cursor + 1:cursor + 4]
        cursor += 4

    expect("CELL_TYPES")
    n_types = int(tokens[pos]); pos += 1
    types = np.array(tokens[pos:pos + n_types], dtype=int)
    pos += n_types
    if not np.all(types == 5):
        raise ValueError("only VTK_TRIANGLE (type 5) cells are supported")

    # repair orientation before validating conformity
    p = vertices[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    signed = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    flip = signed < 0
    triangles[flip] = triangles[flip][:, ::-1]

    scalars = {}
    while pos < len(tokens):
        word = tokens[pos].upper()
        if word == "POINT_DATA":
            pos += 2
        elif word == "SCALARS":
            name = tokens[pos + 1]
            pos += 3  # SCALARS name dtype
            if tokens[pos].isdigit():
                pos += 1  # optional component count
            if tokens[pos].upper() == "LOOKUP_TABLE":
                pos += 2
            scalars[name] = np.array(tokens[pos:pos + n_pts], dtype=float)
            pos += n_pts
        elif word == "CELL_DATA":
            break  # tensors are write-only output, skip on read
        else:
            pos += 1

    return Triangulation(vertices, triangles), scalars
