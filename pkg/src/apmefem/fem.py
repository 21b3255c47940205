"""Linear finite elements on triangulations.

Assembly of the consistent mass matrix and the solution-dependent stiffness
matrix for ``u_t = div(u^m D grad u)``, plus the L2-error and mass
functionals, the nonnegativity cut-off, and cross-mesh solution transfer.

Boundary conditions are imposed by row replacement: mass rows of boundary
vertices are zero and stiffness rows are identity rows, which keeps the
semi-discrete system square in all vertices and pins the boundary values.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import OutsideDomainError

logger = logging.getLogger(__name__)

# degree-2 rule (3 interior points, weights |K|/3)
QUAD3_BARY = np.array(
    [[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]
)
QUAD3_W = np.full(3, 1 / 3)

# degree-5 rule (7 points)
_A1 = 0.4701420641051151
_A2 = 0.1012865073234563
QUAD7_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _A1, 1 - 2 * _A1],
        [_A1, 1 - 2 * _A1, _A1],
        [1 - 2 * _A1, _A1, _A1],
        [_A2, _A2, 1 - 2 * _A2],
        [_A2, 1 - 2 * _A2, _A2],
        [1 - 2 * _A2, _A2, _A2],
    ]
)
QUAD7_W = np.array(
    [0.225]
    + [0.1323941527885062] * 3
    + [0.1259391805448272] * 3
)


class SolutionField:
    """Nodal values of a piecewise-linear field on a mesh, with a time stamp."""

    def __init__(self, mesh, values, time=0.0):
        values = np.asarray(values, dtype=float)
        if values.shape != (mesh.num_vertices,):
            raise ValueError("values length must equal the vertex count")
        self.mesh = mesh
        self.values = values.copy()
        self.time = float(time)

    def copy(self):
        return SolutionField(self.mesh, self.values, self.time)

    def with_values(self, values):
        return SolutionField(self.mesh, values, self.time)


@dataclass(frozen=True)
class CutoffReport:
    clipped: int
    mass_added: float


def cutoff(u):
    """Clamp negative nodal values to zero.

    Returns the clipped field and a report with the number of clipped nodes
    and the mass the clamp added.
    """
    neg = u.values < 0.0
    clipped = int(np.count_nonzero(neg))
    if clipped == 0:
        return u.copy(), CutoffReport(0, 0.0)
    new_values = np.where(neg, 0.0, u.values)
    added = total_mass(u.mesh, new_values) - total_mass(u.mesh, u.values)
    out = u.with_values(new_values)
    return out, CutoffReport(clipped, float(added))


def _eval_diffusion(D, points):
    """Evaluate a diffusion spec at stacked points: callable or constant matrix."""
    if callable(D):
        return np.asarray(D(points), dtype=float)
    D = np.asarray(D, dtype=float)
    return np.broadcast_to(D, points.shape[:-1] + (2, 2))


class P1Assembler:
    """Per-mesh precomputation for repeated matrix assembly.

    Caches element geometry and the (time-independent) diffusion tensor at
    the stiffness quadrature points, so that only the solution-dependent
    weight is recomputed inside Newton iterations.
    """

    def __init__(self, mesh, D=None):
        self.mesh = mesh
        self.D = D
        tris = mesh.triangles
        self.rows = np.repeat(tris, 3, axis=1).ravel()  # (9N,) local i index
        self.cols = np.tile(tris, (1, 3)).ravel()       # (9N,) local j index
        self.areas = mesh.areas
        self.grads = mesh.basis_gradients
        self.interior = ~mesh.boundary_vertex_flags
        pts = np.einsum("qv,nvx->nqx", QUAD3_BARY, mesh.vertices[tris])
        self.quad_points = pts
        if D is not None:
            self.D_quad = _eval_diffusion(D, pts)  # (N, 3, 2, 2)
            # g_i . D g_j at each quadrature point, reused every assembly
            self._gDg = np.einsum(
                "nai,nqij,nbj->nqab", self.grads, self.D_quad, self.grads
            )

    def mass(self):
        """Consistent mass matrix with zeroed boundary rows."""
        n = self.mesh.num_elements
        local = (np.full((3, 3), 1.0) + np.eye(3)) / 12.0
        data = self.areas[:, None, None] * local
        return self._scatter(data, boundary="zero")

    def stiffness(self, values, m, with_derivative=False):
        """State-dependent stiffness matrix (identity rows on the boundary).

        The nonlinear weight ``(u^h)^m`` is evaluated at the quadrature
        points with clamping at zero, matching the cut-off convention. With
        ``with_derivative=True`` also returns the matrix
        ``G[i,l] = sum_j d a_ij / d u_l * u_j`` needed for the full Jacobian
        of ``A(u) u``.
        """
        mesh = self.mesh
        u_elem = values[mesh.triangles]                      # (N, 3)
        u_q = np.clip(u_elem @ QUAD3_BARY.T, 0.0, None)      # (N, 3q)
        w = (self.areas[:, None] / 3.0) * np.power(u_q, m)   # (N, 3q)
        data = np.einsum("nq,nqab->nab", w, self._gDg)
        A = self._scatter(data, boundary="identity")
        if not with_derivative:
            return A

        grad_u = np.einsum("nai,na->ni", self.grads, u_elem)  # (N, 2)
        gDgu = np.einsum("nai,nqij,nj->nqa", self.grads, self.D_quad, grad_u)
        dw = (self.areas[:, None] / 3.0) * np.where(
            u_q > 0.0, m * np.power(u_q, m - 1.0), 0.0
        )
        ddata = np.einsum("nq,nqa,qb->nab", dw, gDgu, QUAD3_BARY)
        G = self._scatter(ddata, boundary="zero")
        return A, G

    def _scatter(self, local, boundary):
        """Accumulate (N, 3, 3) local matrices into CSR with BC row handling."""
        data = local.ravel()
        keep = self.interior[self.rows]
        A = sp.coo_matrix(
            (data[keep], (self.rows[keep], self.cols[keep])),
            shape=(self.mesh.num_vertices,) * 2,
        ).tocsr()
        if boundary == "identity":
            bidx = np.flatnonzero(~self.interior)
            A += sp.coo_matrix(
                (np.ones(len(bidx)), (bidx, bidx)), shape=A.shape
            ).tocsr()
        return A


def assemble_mass(mesh):
    return P1Assembler(mesh).mass()


def assemble_stiffness(mesh, u, D, m):
    return P1Assembler(mesh, D).stiffness(u.values, m)


def _quad_points(mesh, bary):
    return np.einsum("qv,nvx->nqx", bary, mesh.vertices[mesh.triangles])


def l2_error(mesh, u, reference):
    """L2 norm of ``u^h - reference`` by a degree-5 rule per element."""
    values = u.values if isinstance(u, SolutionField) else np.asarray(u)
    pts = _quad_points(mesh, QUAD7_BARY)
    uh = values[mesh.triangles] @ QUAD7_BARY.T
    ref = np.asarray(reference(pts), dtype=float)
    diff2 = (uh - ref) ** 2
    total = np.einsum("n,q,nq->", mesh.areas, QUAD7_W, diff2)
    return float(np.sqrt(total))


def total_mass(mesh, u):
    """Exact integral of the piecewise-linear field."""
    values = u.values if isinstance(u, SolutionField) else np.asarray(u)
    return float(np.einsum("n,nv->", mesh.areas / 3.0, values[mesh.triangles]))


def transfer(u_old, mesh_new):
    """Interpolate a field onto a new mesh of the same domain.

    Each new vertex takes the linear interpolant of the old field at its
    location (point location seeded from the nearest old element centroid).
    Vertices falling outside the old mesh beyond tolerance are projected to
    the nearest element. Boundary values are forced to zero and the cut-off
    is applied afterwards.
    """
    old_mesh = u_old.mesh
    tree = cKDTree(old_mesh.centroids())
    _, hints = tree.query(mesh_new.vertices)

    values = np.empty(mesh_new.num_vertices)
    projected = 0
    for j, x in enumerate(mesh_new.vertices):
        try:
            k, lam = old_mesh.locate_point(x, hint=int(hints[j]), max_walk=64)
        except OutsideDomainError:
            k, lam, _ = old_mesh.locate_nearest(x)
            projected += 1
        values[j] = u_old.values[old_mesh.triangles[k]] @ lam
    if projected:
        logger.info("transfer projected %d vertices onto the old mesh", projected)

    values[mesh_new.boundary_vertex_flags] = 0.0
    out, _ = cutoff(SolutionField(mesh_new, values, u_old.time))
    return out
