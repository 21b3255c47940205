"""Metric tensor fields that steer anisotropic mesh adaptation.

Three constructions are provided: an interpolation-error metric built from a
recovered Hessian, a diffusion-alignment metric ``D_K^{-1}``, and their
combination. A mesh is considered well adapted when every element has unit
size (equidistribution) and equilateral shape (alignment) under the metric;
``quality_measures`` quantifies both.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor2
from .fem import QUAD3_BARY

_EYE2 = np.eye(2)


@dataclass(frozen=True)
class SinCosAngle:
    """Rotation-angle formula ``theta = amplitude * sin(fx*x) * cos(fy*y)``."""

    amplitude: float = np.pi
    freq_x: float = 0.2
    freq_y: float = 0.1

    def __call__(self, points):
        p = np.asarray(points, dtype=float)
        return self.amplitude * np.sin(self.freq_x * p[..., 0]) * np.cos(
            self.freq_y * p[..., 1]
        )


class DiffusionField:
    """Evaluator x -> D(x), a symmetric positive definite 2x2 matrix.

    Either constant, or in rotation form ``R(theta) diag(l1, l2) R(theta)^T``
    with a position-dependent angle.
    """

    def __init__(self, kind, matrix=None, eigenvalues=None, angle=None):
        self.kind = kind
        if kind == "constant":
            matrix = np.asarray(matrix, dtype=float)
            if matrix.shape != (2, 2) or not np.allclose(matrix, matrix.T, atol=1e-12):
                raise ValueError("constant diffusion must be a symmetric 2x2 matrix")
            if tensor2.eigh2(matrix)[0][0] <= 0:
                raise ValueError("diffusion matrix must be positive definite")
            self.matrix = matrix
            self.eigenvalues = tuple(tensor2.eigh2(matrix)[0])
            self.angle = None
        elif kind == "rotation":
            l1, l2 = float(eigenvalues[0]), float(eigenvalues[1])
            if l1 <= 0 or l2 <= 0:
                raise ValueError("eigenvalues must be positive")
            self.matrix = None
            self.eigenvalues = (l1, l2)
            self.angle = angle
        else:
            raise ValueError(f"unknown diffusion kind {kind!r}")

    @classmethod
    def constant(cls, matrix):
        return cls("constant", matrix=matrix)

    @classmethod
    def isotropic(cls, value=1.0):
        return cls("constant", matrix=value * _EYE2)

    @classmethod
    def rotation(cls, eigenvalues, angle):
        """Rotation form; ``angle`` maps points to the first-eigenvector angle."""
        return cls("rotation", eigenvalues=eigenvalues, angle=angle)

    @classmethod
    def sincos(cls, eigenvalues=(50.0, 1.0), amplitude=np.pi, freq_x=0.2, freq_y=0.1):
        """Built-in heterogeneous preset with a sinusoidally rotating axis."""
        return cls.rotation(eigenvalues, SinCosAngle(amplitude, freq_x, freq_y))

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        if self.kind == "constant":
            return np.broadcast_to(self.matrix, points.shape[:-1] + (2, 2)).copy()
        theta = self.angle(points)
        c, s = np.cos(theta), np.sin(theta)
        l1, l2 = self.eigenvalues
        out = np.empty(points.shape[:-1] + (2, 2))
        out[..., 0, 0] = l1 * c * c + l2 * s * s
        out[..., 1, 1] = l1 * s * s + l2 * c * c
        out[..., 0, 1] = (l1 - l2) * c * s
        out[..., 1, 0] = out[..., 0, 1]
        return out

    def element_averages(self, mesh):
        """Element averages by the 3-point rule (exact for constant fields)."""
        pts = np.einsum("qv,nvx->nqx", QUAD3_BARY, mesh.vertices[mesh.triangles])
        return self(pts).mean(axis=1)


@dataclass
class RecoveredHessian:
    """Least-squares recovered second derivatives of a nodal field."""

    vertex_hessians: np.ndarray  # (N_v, 2, 2)
    element_hessians: np.ndarray  # (N, 2, 2)


@dataclass
class MetricField:
    """Per-element SPD tensors plus their equidistribution normalizer."""

    mesh: object
    tensors: np.ndarray  # (N, 2, 2)
    strategy: str
    alpha_h: float | None = None
    sigma_h: float = field(init=False)

    def __post_init__(self):
        self.tensors = np.asarray(self.tensors, dtype=float)
        if self.tensors.shape != (self.mesh.num_elements, 2, 2):
            raise ValueError("one 2x2 tensor per element required")
        wmin = tensor2.eigh2(self.tensors)[0][..., 0]
        if np.any(wmin <= 0.0):
            raise ValueError("metric tensors must be positive definite")
        self.sigma_h = float(
            np.sum(np.sqrt(tensor2.det2(self.tensors)) * self.mesh.areas)
        )

    def scaled(self, s):
        return MetricField(self.mesh, s * self.tensors, self.strategy, self.alpha_h)


def vertex_neighbors(mesh):
    """Adjacency lists: for each vertex, the indices of edge-connected vertices."""
    nbrs = [[] for _ in range(mesh.num_vertices)]
    for a, b in mesh.edges:
        nbrs[a].append(int(b))
        nbrs[b].append(int(a))
    return nbrs


def _fit_hessian(coords, center, values, scale):
    """Quadratic least-squares fit; returns (H, rank)."""
    dx = (coords - center) / scale
    basis = np.column_stack(
        [
            np.ones(len(dx)),
            dx[:, 0],
            dx[:, 1],
            dx[:, 0] ** 2,
            dx[:, 0] * dx[:, 1],
            dx[:, 1] ** 2,
        ]
    )
    coef, _, rank, _ = np.linalg.lstsq(basis, values, rcond=None)
    H = np.array([[2.0 * coef[3], coef[4]], [coef[4], 2.0 * coef[5]]]) / scale ** 2
    return H, rank


def recover_hessian(mesh, u):
    """Recover nodal Hessians by quadratic patch fits, then element averages.

    Each vertex fits a full quadratic over its one-ring (itself plus edge
    neighbors); rank-deficient patches grow to the two-ring. Patches that
    stay rank-deficient get a zero Hessian and a warning. The fit is exact
    for globally quadratic data.
    """
    values = u.values if hasattr(u, "values") else np.asarray(u, dtype=float)
    nbrs = vertex_neighbors(mesh)
    Hv = np.zeros((mesh.num_vertices, 2, 2))
    flat = 0
    for v in range(mesh.num_vertices):
        ring = nbrs[v]
        patch = [v] + ring
        H = None
        for attempt in range(2):
            if len(patch) >= 6:
                coords = mesh.vertices[patch]
                scale = max(np.linalg.norm(coords - mesh.vertices[v], axis=1).max(), 1e-300)
                H, rank = _fit_hessian(coords, mesh.vertices[v], values[patch], scale)
                if rank == 6:
                    break
                H = None
            if attempt == 0:
                two_ring = set(patch)
                for w in ring:
                    two_ring.update(nbrs[w])
                patch = sorted(two_ring)
        if H is None:
            flat += 1
            H = np.zeros((2, 2))
        Hv[v] = H
    if flat:
        warnings.warn(f"hessian recovery: {flat} flat patches set to zero", stacklevel=2)
    He = Hv[mesh.triangles].mean(axis=1)
    return RecoveredHessian(Hv, He)


def abs_matrix(H):
    """Symmetric matrix with eigenvalues replaced by their absolute values."""
    return tensor2.abs_sym(H)


def metric_adap(mesh, hessian, alpha_h):
    """Interpolation-error metric ``|G|^(2/5) det(G)^(-1/5) G`` with
    ``G = I + |H_K|/alpha_h`` (two space dimensions only)."""
    if alpha_h <= 0:
        raise ValueError("alpha_h must be positive")
    G = _EYE2 + tensor2.abs_sym(hessian.element_hessians) / alpha_h
    norm = tensor2.spectral_norm(G)
    det = tensor2.det2(G)
    scale = norm ** 0.4 * det ** (-0.2)
    return MetricField(mesh, scale[:, None, None] * G, "adap", alpha_h)


def metric_dmp(mesh, D):
    """Diffusion-alignment metric: inverse of the element-averaged diffusion."""
    DK = D.element_averages(mesh)
    return MetricField(mesh, tensor2.inv2(DK), "dmp")


def metric_dmp_adap(mesh, D, hessian):
    """Combined diffusion/interpolation metric.

    The regularization ``alpha_h`` is computed from the roughness indicator
    ``B_K = det(D_K)^(-1/2) |D_K^{-1}| |D_K |H_K||^2`` so the prefactor is
    dimensionless; a zero Hessian field degenerates to the pure alignment
    metric ``det(D_K)^(1/2) D_K^{-1}``.
    """
    DK = D.element_averages(mesh)
    DK_inv = tensor2.inv2(DK)
    detD = tensor2.det2(DK)
    absH = tensor2.abs_sym(hessian.element_hessians)
    B = (
        detD ** -0.5
        * tensor2.spectral_norm(DK_inv)
        * tensor2.op_norm(np.einsum("nij,njk->nik", DK, absH)) ** 2
    )
    area = mesh.areas
    alpha_h = float((np.sum(area * np.sqrt(B)) / np.sum(area)) ** 2)
    base = detD[:, None, None] ** 0.5 * DK_inv
    if alpha_h == 0.0:
        return MetricField(mesh, base, "dmp_adap", alpha_h)
    pref = (1.0 + B / alpha_h) ** 0.5
    return MetricField(mesh, pref[:, None, None] * base, "dmp_adap", alpha_h)


def quality_measures(mesh, metric):
    """Per-element equidistribution and alignment qualities.

    ``Q_eq`` is 1 exactly when the element has its equidistributed share of
    the total metric area; ``Q_ali >= 1`` with equality for elements that are
    equilateral under the metric.
    """
    M = metric.tensors
    q_eq = mesh.areas * np.sqrt(tensor2.det2(M)) * mesh.num_elements / metric.sigma_h
    F = mesh.jacobians
    J = np.einsum("nki,nkl,nlj->nij", F, M, F)
    q_ali = 0.5 * tensor2.trace2(J) / np.sqrt(tensor2.det2(J))
    return q_eq, q_ali


def vertex_metrics(mesh, metric):
    """Arithmetic average of the incident element tensors at each vertex.

    Convex combinations of SPD matrices stay SPD, so no eigenvalue clipping
    is needed.
    """
    sums = np.zeros((mesh.num_vertices, 2, 2))
    counts = np.zeros(mesh.num_vertices)
    for a in range(3):
        np.add.at(sums, mesh.triangles[:, a], metric.tensors)
        np.add.at(counts, mesh.triangles[:, a], 1.0)
    return sums / counts[:, None, None]
