import numpy as np
import pytest

from apmefem.mesh import (
    DegenerateElementError,
    OutsideDomainError,
    Rectangle,
    Triangulation,
    generate_fixed_mesh,
)

from conftest import jittered_mesh


class TestGenerateFixedMesh:
    def test_paper_count_40x40(self):
        mesh = generate_fixed_mesh(Rectangle(-3, 3, -3, 3), 40, 40)
        assert mesh.num_elements == 6400

    def test_single_cell(self):
        mesh = generate_fixed_mesh(Rectangle(-3, 3, -3, 3), 1, 1)
        assert mesh.num_elements == 4
        assert mesh.num_vertices == 5
        assert mesh.total_area == pytest.approx(36.0, rel=1e-14)

    def test_two_by_one_enumerated(self):
        mesh = generate_fixed_mesh(Rectangle(0, 1, 0, 1), 2, 1)
        assert mesh.num_elements == 8
        assert mesh.num_vertices == 8
        np.testing.assert_allclose(mesh.areas, 0.125, rtol=1e-14)

    @pytest.mark.parametrize("nx,ny", [(0, 3), (3, 0), (-1, 2)])
    def test_bad_counts(self, nx, ny):
        with pytest.raises(ValueError):
            generate_fixed_mesh(Rectangle(0, 1, 0, 1), nx, ny)

    @pytest.mark.parametrize("nx,ny", [(1, 1), (3, 2), (7, 5)])
    def test_area_and_conformity(self, nx, ny):
        domain = Rectangle(-1.5, 2.0, 0.0, 1.0)
        mesh = generate_fixed_mesh(domain, nx, ny)
        assert mesh.num_elements == 4 * nx * ny
        assert mesh.total_area == pytest.approx(domain.area, rel=1e-12)
        mesh.validate()
        counts = (mesh.edge_tris >= 0).sum(axis=1)
        assert set(counts.tolist()) <= {1, 2}

    def test_interior_count(self):
        mesh = generate_fixed_mesh(Rectangle(0, 1, 0, 1), 3, 3)
        boundary = 2 * 3 + 2 * 3 + 4 - 4 + 4  # 3 segments per side + corners
        assert mesh.num_interior_vertices + boundary == mesh.num_vertices


class TestOrientationAndGeometry:
    def test_constructor_rejects_clockwise(self):
        verts = np.array([[0, 0], [1, 0], [0, 1]], float)
        with pytest.raises(DegenerateElementError):
            Triangulation(verts, np.array([[0, 2, 1]]))

    def test_unit_right_triangle_geometry(self):
        verts = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float)
        mesh = Triangulation(verts, np.array([[0, 1, 2], [1, 3, 2]]))
        geo = mesh.element_geometry(0)
        assert geo.area == pytest.approx(0.5)
        expected = np.array([[-1, -1], [1, 0], [0, 1]], float)
        np.testing.assert_allclose(geo.basis_gradients, expected, atol=1e-14)

    def test_basis_gradients_sum_to_zero(self, coarse_domain_mesh):
        sums = coarse_domain_mesh.basis_gradients.sum(axis=1)
        np.testing.assert_allclose(sums, 0.0, atol=1e-12)

    def test_jacobian_determinant_equals_area(self, coarse_domain_mesh):
        det = np.linalg.det(coarse_domain_mesh.jacobians)
        np.testing.assert_allclose(det, coarse_domain_mesh.areas, rtol=1e-12)

    def test_equilateral_maps_to_scaled_rotation(self):
        # an equilateral element makes F'^T F' a multiple of the identity
        a = 2.0
        verts = np.array([[0, 0], [a, 0], [a / 2, a * np.sqrt(3) / 2], [a / 2, -a * np.sqrt(3) / 2]])
        mesh = Triangulation(verts, np.array([[0, 1, 2], [1, 0, 3]]))
        F = mesh.jacobians[0]
        JtJ = F.T @ F
        np.testing.assert_allclose(JtJ, JtJ[0, 0] * np.eye(2), atol=1e-13)

    def test_element_geometry_bad_index(self, unit_square_mesh):
        with pytest.raises(IndexError):
            unit_square_mesh.element_geometry(unit_square_mesh.num_elements)


class TestLocatePoint:
    def test_vertex_hits_permutation_of_unit(self, unit_square_mesh):
        mesh = unit_square_mesh
        k = 7
        for v in mesh.triangles[k]:
            ke, lam = mesh.locate_point(mesh.vertices[v], hint=k)
            assert v in mesh.triangles[ke]
            assert lam.max() == pytest.approx(1.0, abs=1e-12)
            assert lam.sum() == pytest.approx(1.0)

    def test_centroids_locate_home(self, coarse_domain_mesh):
        mesh = coarse_domain_mesh
        cents = mesh.centroids()
        for k in range(mesh.num_elements):
            ke, lam = mesh.locate_point(cents[k], hint=max(0, k - 3))
            assert ke == k
            np.testing.assert_allclose(lam, 1 / 3, atol=1e-10)

    def test_outside_raises(self, paper_domain):
        mesh = generate_fixed_mesh(paper_domain, 5, 5)
        with pytest.raises(OutsideDomainError):
            mesh.locate_point(np.array([10.0, 10.0]))

    def test_walk_from_far_hint(self, coarse_domain_mesh):
        mesh = coarse_domain_mesh
        target = mesh.centroids()[0]
        k, _ = mesh.locate_point(target, hint=mesh.num_elements - 1)
        assert k == 0

    def test_locate_nearest_outside(self, unit_square_mesh):
        k, lam, worst = unit_square_mesh.locate_nearest(np.array([2.0, 0.5]))
        assert worst < 0
        assert lam.min() >= 0
        assert lam.sum() == pytest.approx(1.0)


class TestJitteredMeshes:
    def test_jittered_mesh_valid(self, paper_domain):
        mesh = jittered_mesh(paper_domain, 8, 8, seed=3)
        mesh.validate()
        assert mesh.total_area == pytest.approx(paper_domain.area, rel=1e-12)

    def test_locate_all_centroids_jittered(self, paper_domain):
        mesh = jittered_mesh(paper_domain, 6, 6, seed=1)
        for k, c in enumerate(mesh.centroids()):
            ke, _ = mesh.locate_point(c, hint=0)
            assert ke == k
