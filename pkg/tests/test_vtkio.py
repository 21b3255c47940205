import numpy as np
import pytest

from apmefem.mesh import Rectangle, generate_fixed_mesh
from apmefem.vtkio import read_vtk, write_vtk


def test_roundtrip_mesh_and_scalars(tmp_path, coarse_domain_mesh):
    mesh = coarse_domain_mesh
    u = np.sin(mesh.vertices[:, 0]) * mesh.vertices[:, 1]
    path = tmp_path / "mesh.vtk"
    write_vtk(path, mesh, point_scalars={"u": u})
    mesh2, scalars = read_vtk(path)
    np.testing.assert_allclose(mesh2.vertices, mesh.vertices, atol=0)
    np.testing.assert_array_equal(mesh2.triangles, mesh.triangles)
    np.testing.assert_allclose(scalars["u"], u, atol=0)


def test_roundtrip_exact_counts(tmp_path):
    mesh = generate_fixed_mesh(Rectangle(-3, 3, -3, 3), 3, 2)
    path = tmp_path / "m.vtk"
    write_vtk(path, mesh)
    mesh2, scalars = read_vtk(path)
    assert scalars == {}
    assert mesh2.num_elements == mesh.num_elements
    assert mesh2.num_vertices == mesh.num_vertices
    assert mesh2.total_area == pytest.approx(36.0)


def test_reader_repairs_orientation(tmp_path):
    path = tmp_path / "cw.vtk"
    path.write_text(
        "# vtk DataFile Version 3.0\n"
        "clockwise triangle pair\n"
        "ASCII\n"
        "DATASET UNSTRUCTURED_GRID\n"
        "POINTS 4 double\n"
        "0 0 0\n1 0 0\n0 1 0\n1 1 0\n"
        "CELLS 2 8\n"
        "3 0 2 1\n"      # clockwise on purpose
        "3 1 2 3\n"
        "CELL_TYPES 2\n5\n5\n"
    )
    mesh, _ = read_vtk(path)
    assert mesh.areas.min() > 0


def test_cell_tensor_output_is_parseable_text(tmp_path, unit_square_mesh):
    mesh = unit_square_mesh
    tensors = np.tile(np.diag([2.0, 0.5]), (mesh.num_elements, 1, 1))
    path = tmp_path / "tens.vtk"
    write_vtk(path, mesh, cell_tensors={"metric": tensors})
    text = path.read_text()
    assert f"CELL_DATA {mesh.num_elements}" in text
    assert "TENSORS metric double" in text


def test_reader_rejects_non_triangles(tmp_path):
    path = tmp_path / "quad.vtk"
    path.write_text(
        "# vtk DataFile Version 3.0\nq\nASCII\n"
        "DATASET UNSTRUCTURED_GRID\n"
        "POINTS 4 double\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n"
        "CELLS 1 5\n4 0 1 2 3\n"
        "CELL_TYPES 1\n9\n"
    )
    with pytest.raises(ValueError):
        read_vtk(path)
