import numpy as np
import pytest

from apmefem import fem
from apmefem.fem import P1Assembler, SolutionField, cutoff, l2_error, total_mass, transfer
from apmefem.mesh import Rectangle, Triangulation, generate_fixed_mesh

from conftest import jittered_mesh

EX1_D = np.array([[5.5, 4.5], [4.5, 5.5]])


def interior_matrix(mesh, A):
    inter = ~mesh.boundary_vertex_flags
    return A.toarray()[np.ix_(inter, inter)]


class TestMass:
    def test_local_entries_single_interior_patch(self, coarse_domain_mesh):
        # m_ii = sum_K |K|/6 and m_ij = sum_K |K|/12 over shared elements
        mesh = coarse_domain_mesh
        M = fem.assemble_mass(mesh).toarray()
        inter = np.flatnonzero(~mesh.boundary_vertex_flags)
        i = inter[0]
        patch = np.flatnonzero((mesh.triangles == i).any(axis=1))
        assert M[i, i] == pytest.approx(mesh.areas[patch].sum() / 6.0, rel=1e-13)
        j = next(v for v in mesh.triangles[patch[0]] if v != i)
        shared = [k for k in patch if j in mesh.triangles[k]]
        assert M[i, j] == pytest.approx(mesh.areas[shared].sum() / 12.0, rel=1e-13)

    def test_boundary_rows_zero(self, coarse_domain_mesh):
        M = fem.assemble_mass(coarse_domain_mesh)
        rows = np.asarray(np.abs(M).sum(axis=1)).ravel()
        assert rows[coarse_domain_mesh.boundary_vertex_flags].max() == 0.0

    def test_interior_block_spd(self, paper_domain):
        mesh = jittered_mesh(paper_domain, 5, 5, seed=2)
        Mi = interior_matrix(mesh, fem.assemble_mass(mesh))
        np.testing.assert_allclose(Mi, Mi.T, atol=1e-15)
        assert np.linalg.eigvalsh(Mi).min() > 0


class TestStiffness:
    def test_unit_right_triangle_m0(self):
        # all-interior reference values require a synthetic free patch, so
        # check the element contribution through a one-element assembler
        verts = np.array([[0, 0], [1, 0], [0, 1]], float)
        mesh = Triangulation(verts, np.array([[0, 1, 2]]), check=False)
        mesh.boundary_vertex_flags[:] = False  # treat all as interior
        asm = P1Assembler(mesh, np.eye(2))
        A = asm.stiffness(np.ones(3), 0.0).toarray()
        expected = np.array([[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]])
        np.testing.assert_allclose(A, expected, atol=1e-14)

    def test_zero_solution_kills_element(self, coarse_domain_mesh):
        mesh = coarse_domain_mesh
        u = SolutionField(mesh, np.zeros(mesh.num_vertices))
        A = fem.assemble_stiffness(mesh, u, EX1_D, 1.0)
        inter = ~mesh.boundary_vertex_flags
        assert np.abs(interior_matrix(mesh, A)).max() == 0.0
        # boundary rows are identity
        b = np.flatnonzero(~inter)
        assert A[b[0], b[0]] == 1.0

    def test_constant_solution_scales_m0_case(self, coarse_domain_mesh):
        mesh = coarse_domain_mesh
        c = 0.37
        A0 = fem.assemble_stiffness(
            mesh, SolutionField(mesh, np.ones(mesh.num_vertices)), EX1_D, 0.0
        )
        Ac = fem.assemble_stiffness(
            mesh, SolutionField(mesh, np.full(mesh.num_vertices, c)), EX1_D, 1.0
        )
        i = interior_matrix(mesh, A0) * c
        np.testing.assert_allclose(interior_matrix(mesh, Ac), i, atol=1e-13)

    def test_quadrature_exact_for_m0_constant_D(self, paper_domain):
        mesh = jittered_mesh(paper_domain, 4, 4, seed=5)
        u = SolutionField(mesh, np.zeros(mesh.num_vertices))
        A = fem.assemble_stiffness(mesh, u, EX1_D, 0.0).toarray()
        exact = np.zeros_like(A)
        inter = ~mesh.boundary_vertex_flags
        for k in range(mesh.num_elements):
            g = mesh.basis_gradients[k]
            loc = mesh.areas[k] * g @ EX1_D @ g.T
            for a in range(3):
                ia = mesh.triangles[k, a]
                if inter[ia]:
                    for b in range(3):
                        exact[ia, mesh.triangles[k, b]] += loc[a, b]
        for bidx in np.flatnonzero(~inter):
            exact[bidx, bidx] = 1.0
        np.testing.assert_allclose(A, exact, atol=1e-12)

    def test_interior_symmetry_and_row_sums(self, paper_domain):
        mesh = jittered_mesh(paper_domain, 6, 6, seed=7)
        rng = np.random.default_rng(0)
        vals = rng.random(mesh.num_vertices)
        u = SolutionField(mesh, vals)
        A = fem.assemble_stiffness(mesh, u, EX1_D, 1.0)
        Ai = interior_matrix(mesh, A)
        assert np.abs(Ai - Ai.T).max() <= 1e-12 * np.abs(Ai).max()
        # rows of vertices whose entire patch is interior sum to zero
        deep = (~mesh.boundary_vertex_flags).copy()
        for a, b in mesh.edges:
            if mesh.boundary_vertex_flags[a] or mesh.boundary_vertex_flags[b]:
                deep[a] = deep[b] = False
        sums = np.asarray(A.sum(axis=1)).ravel()
        assert np.abs(sums[deep]).max() < 1e-12

    def test_negative_values_clamped(self, coarse_domain_mesh):
        mesh = coarse_domain_mesh
        u = SolutionField(mesh, np.full(mesh.num_vertices, -1.0))
        A = fem.assemble_stiffness(mesh, u, EX1_D, 1.5)  # fractional power
        assert np.isfinite(A.toarray()).all()
        assert np.abs(interior_matrix(mesh, A)).max() == 0.0


class TestFunctionals:
    def test_l2_error_self_is_zero(self, coarse_domain_mesh):
        mesh = coarse_domain_mesh
        vals = np.cos(mesh.vertices[:, 0])
        u = SolutionField(mesh, vals)

        def as_interp(pts):
            out = np.empty(pts.shape[:-1])
            flat = pts.reshape(-1, 2)
            res = np.empty(len(flat))
            for i, x in enumerate(flat):
                k, lam = mesh.locate_point(x)
                res[i] = vals[mesh.triangles[k]] @ lam
            return res.reshape(pts.shape[:-1])

        assert l2_error(mesh, u, as_interp) < 1e-13

    def test_l2_error_zero_vs_one(self, coarse_domain_mesh):
        mesh = coarse_domain_mesh
        z = SolutionField(mesh, np.zeros(mesh.num_vertices))
        err = l2_error(mesh, z, lambda p: np.ones(p.shape[:-1]))
        assert err == pytest.approx(6.0, rel=1e-12)

    def test_l2_interpolant_second_order(self, paper_domain):
        errs = []
        for n in (8, 16, 32):
            mesh = generate_fixed_mesh(paper_domain, n, n)
            vals = mesh.vertices[:, 0] ** 2
            u = SolutionField(mesh, vals)
            errs.append(l2_error(mesh, u, lambda p: p[..., 0] ** 2))
        slope = np.polyfit(np.log([8, 16, 32]), np.log(errs), 1)[0]
        assert slope == pytest.approx(-2.0, abs=0.05)

    def test_total_mass(self, coarse_domain_mesh):
        mesh = coarse_domain_mesh
        assert total_mass(mesh, np.ones(mesh.num_vertices)) == pytest.approx(36.0)
        assert total_mass(mesh, np.zeros(mesh.num_vertices)) == 0.0

    def test_total_mass_hat_function(self, coarse_domain_mesh):
        mesh = coarse_domain_mesh
        i = int(np.flatnonzero(~mesh.boundary_vertex_flags)[0])
        vals = np.zeros(mesh.num_vertices)
        vals[i] = 1.0
        patch = np.flatnonzero((mesh.triangles == i).any(axis=1))
        assert total_mass(mesh, vals) == pytest.approx(mesh.areas[patch].sum() / 3.0)


class TestCutoff:
    def test_mixed_values(self, unit_square_mesh):
        mesh = unit_square_mesh
        vals = np.zeros(mesh.num_vertices)
        vals[0] = -0.1
        vals[1] = 0.5
        out, rep = cutoff(SolutionField(mesh, vals))
        assert rep.clipped == 1
        assert out.values[0] == 0.0
        assert out.values[1] == 0.5
        assert rep.mass_added > 0

    def test_identity_when_nonnegative(self, unit_square_mesh):
        mesh = unit_square_mesh
        vals = np.abs(np.sin(np.arange(mesh.num_vertices, dtype=float)))
        out, rep = cutoff(SolutionField(mesh, vals))
        assert rep.clipped == 0
        assert rep.mass_added == 0.0
        np.testing.assert_array_equal(out.values, vals)

    def test_all_negative(self, unit_square_mesh):
        mesh = unit_square_mesh
        out, rep = cutoff(SolutionField(mesh, -np.ones(mesh.num_vertices)))
        assert rep.clipped == mesh.num_vertices
        assert out.values.max() == 0.0


class TestTransfer:
    def test_identity_transfer(self, coarse_domain_mesh):
        mesh = coarse_domain_mesh
        rng = np.random.default_rng(4)
        vals = rng.random(mesh.num_vertices)
        vals[mesh.boundary_vertex_flags] = 0.0
        out = transfer(SolutionField(mesh, vals), mesh)
        np.testing.assert_allclose(out.values, vals, atol=1e-13)

    def test_linear_field_reproduced(self, paper_domain):
        mesh_old = generate_fixed_mesh(paper_domain, 9, 7)
        mesh_new = jittered_mesh(paper_domain, 12, 11, seed=9)
        lin = 0.3 + 1.2 * mesh_old.vertices[:, 0] - 0.7 * mesh_old.vertices[:, 1]
        out = transfer(SolutionField(mesh_old, lin), mesh_new)
        expect = 0.3 + 1.2 * mesh_new.vertices[:, 0] - 0.7 * mesh_new.vertices[:, 1]
        expect[mesh_new.boundary_vertex_flags] = 0.0
        expect = np.clip(expect, 0.0, None)  # transfer applies the cut-off
        np.testing.assert_allclose(out.values, expect, atol=1e-12)

    def test_hat_refinement_midpoints(self, paper_domain):
        mesh_old = generate_fixed_mesh(paper_domain, 4, 4)
        mesh_new = generate_fixed_mesh(paper_domain, 8, 8)
        i = int(np.flatnonzero(~mesh_old.boundary_vertex_flags)[0])
        vals = np.zeros(mesh_old.num_vertices)
        vals[i] = 1.0
        out = transfer(SolutionField(mesh_old, vals), mesh_new)
        # the old vertex exists in the new mesh; neighbors at half spacing
        j = int(np.argmin(np.linalg.norm(mesh_new.vertices - mesh_old.vertices[i], axis=1)))
        assert out.values[j] == pytest.approx(1.0, abs=1e-12)
        assert out.values.max() == pytest.approx(1.0, abs=1e-12)

    def test_never_increases_max(self, paper_domain):
        mesh_old = jittered_mesh(paper_domain, 7, 7, seed=11)
        mesh_new = jittered_mesh(paper_domain, 10, 9, seed=12)
        rng = np.random.default_rng(5)
        vals = rng.random(mesh_old.num_vertices)
        out = transfer(SolutionField(mesh_old, vals), mesh_new)
        assert np.abs(out.values).max() <= np.abs(vals).max() + 1e-12
