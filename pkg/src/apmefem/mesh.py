"""Conforming 2D triangulations: storage, structured generation, geometry.

A :class:`Triangulation` is an index-based flat-array mesh (vertices,
triangles, boundary flags) with adjacency rebuilt eagerly at construction.
It is treated as immutable once built; mesh adaptation constructs a new one.
"""

from dataclasses import dataclass

import numpy as np

# Reference element: the equilateral triangle scaled to unit area. With this
# choice the alignment quality of an element equals 1 exactly when the element
# is equilateral under the metric.
_REF_SIDE = 2.0 / 3.0 ** 0.25
REF_VERTICES = np.array(
    [
        [0.0, 0.0],
        [_REF_SIDE, 0.0],
        [0.5 * _REF_SIDE, 0.5 * np.sqrt(3.0) * _REF_SIDE],
    ]
)
REF_AREA = 1.0
# columns are the reference edge vectors v1-v0, v2-v0
_REF_EDGE_MATRIX = np.column_stack([REF_VERTICES[1] - REF_VERTICES[0],
                                    REF_VERTICES[2] - REF_VERTICES[0]])
_REF_EDGE_INV = np.linalg.inv(_REF_EDGE_MATRIX)


class DegenerateElementError(ValueError):
    """A triangle has non-positive signed area."""


class OutsideDomainError(ValueError):
    """A query point lies outside the meshed domain beyond tolerance."""


class NonConformingError(ValueError):
    """The triangle connectivity does not form a conforming mesh."""


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned rectangle [xmin, xmax] x [ymin, ymax]."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError("rectangle must have positive width and height")

    @property
    def width(self):
        return self.xmax - self.xmin

    @property
    def height(self):
        return self.ymax - self.ymin

    @property
    def area(self):
        return self.width * self.height

    @property
    def diameter(self):
        return np.hypot(self.width, self.height)

    def contains(self, points, tol=0.0):
        p = np.asarray(points, dtype=float)
        return (
            (p[..., 0] >= self.xmin - tol)
            & (p[..., 0] <= self.xmax + tol)
            & (p[..., 1] >= self.ymin - tol)
            & (p[..., 1] <= self.ymax + tol)
        )

    @property
    def corners(self):
        return np.array(
            [
                [self.xmin, self.ymin],
                [self.xmax, self.ymin],
                [self.xmax, self.ymax],
                [self.xmin, self.ymax],
            ]
        )


@dataclass(frozen=True)
class ElementGeometry:
    """Affine geometry of one triangle.

    ``jacobian`` maps the unit-area equilateral reference element onto the
    triangle; ``basis_gradients[i]`` is the (constant) gradient of the linear
    hat function of local vertex i.
    """

    index: int
    area: float
    jacobian: np.ndarray
    basis_gradients: np.ndarray


def _signed_areas(vertices, triangles):
    p = vertices[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


class Triangulation:
    """Conforming triangular mesh with counterclockwise elements.

    Parameters
    ----------
    vertices : (N_v, 2) float array
    triangles : (N, 3) int array
        Vertex index triples, each in counterclockwise order.
    check : bool
        Validate orientation and conformity (default True).
    """

    def __init__(self, vertices, triangles, check=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValueError("vertices must be an (N_v, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must be an (N, 3) array")

        self._signed = _signed_areas(self.vertices, self.triangles)
        if check and self.num_elements and self._signed.min() <= 0.0:
            k = int(np.argmin(self._signed))
            raise DegenerateElementError(
                f"triangle {k} has signed area {self._signed[k]:.3e}"
            )

        self._build_adjacency(check)
        self._grads = None
        self._jacobians = None
        self._bary_solvers = None

    # -- counts ----------------------------------------------------------

    @property
    def num_elements(self):
        return self.triangles.shape[0]

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_interior_vertices(self):
        return self.num_vertices - int(np.count_nonzero(self.boundary_vertex_flags))

    # -- adjacency -------------------------------------------------------

    def _build_adjacency(self, check):
        tris = self.triangles
        n = self.num_elements
        # local edge e is opposite local vertex e: (1,2), (2,0), (0,1)
        raw = np.stack(
            [tris[:, [1, 2]], tris[:, [2, 0]], tris[:, [0, 1]]], axis=1
        ).reshape(-1, 2)
        key = np.sort(raw, axis=1)
        self.edges, inverse, counts = np.unique(
            key, axis=0, return_inverse=True, return_counts=True
        )
        if check and counts.max(initial=0) > 2:
            raise NonConformingError("an edge is shared by more than two triangles")

        inverse = inverse.reshape(-1)
        self.edge_tris = np.full((len(self.edges), 2), -1, dtype=np.int64)
        tri_of_slot = np.repeat(np.arange(n), 3)
        # deterministic fill: lowest incident triangle index lands in slot 0
        order = np.argsort(inverse, kind="stable")
        eid = inverse[order]
        tid = tri_of_slot[order]
        first = np.ones(len(eid), dtype=bool)
        first[1:] = eid[1:] != eid[:-1]
        self.edge_tris[eid[first], 0] = tid[first]
        self.edge_tris[eid[~first], 1] = tid[~first]

        self.tri_edges = inverse.reshape(n, 3)
        self.boundary_edge_flags = counts == 1

        self.boundary_vertex_flags = np.zeros(self.num_vertices, dtype=bool)
        self.boundary_vertex_flags[self.edges[self.boundary_edge_flags].ravel()] = True

        # neighbor across the edge opposite local vertex j (-1 on the boundary)
        both = self.edge_tris[self.tri_edges]  # (n, 3, 2)
        own = np.arange(n)[:, None]
        self.tri_neighbors = np.where(both[:, :, 0] == own, both[:, :, 1], both[:, :, 0])

        if check:
            used = np.zeros(self.num_vertices, dtype=bool)
            used[tris.ravel()] = True
            if not used.all():
                raise NonConformingError("mesh contains vertices not used by any triangle")

    # -- geometry --------------------------------------------------------

    @property
    def areas(self):
        return self._signed

    @property
    def total_area(self):
        return float(self._signed.sum())

    @property
    def basis_gradients(self):
        """(N, 3, 2) gradients of the three hat functions on each element."""
        if self._grads is None:
            p = self.vertices[self.triangles]
            # grad of hat i = perpendicular of opposite edge / (2|K|)
            e0 = p[:, 2] - p[:, 1]
            e1 = p[:, 0] - p[:, 2]
            e2 = p[:, 1] - p[:, 0]
            perp = np.stack([e0, e1, e2], axis=1)[:, :, ::-1] * np.array([-1.0, 1.0])
            self._grads = perp / (2.0 * self._signed)[:, None, None]
        return self._grads

    @property
    def jacobians(self):
        """(N, 2, 2) affine maps from the reference element onto each triangle."""
        if self._jacobians is None:
            p = self.vertices[self.triangles]
            phys = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
            self._jacobians = phys @ _REF_EDGE_INV
        return self._jacobians

    def element_geometry(self, k):
        """Geometry of triangle ``k`` (area, reference map, basis gradients)."""
        if not 0 <= k < self.num_elements:
            raise IndexError(f"element index {k} out of range")
        area = float(self._signed[k])
        if area <= 0.0:
            raise DegenerateElementError(f"triangle {k} has area {area:.3e}")
        return ElementGeometry(
            index=k,
            area=area,
            jacobian=self.jacobians[k].copy(),
            basis_gradients=self.basis_gradients[k].copy(),
        )

    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @property
    def bounding_box(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return Rectangle(lo[0], hi[0], lo[1], hi[1])

    # -- point location --------------------------------------------------

    def _bary_matrices(self):
        if self._bary_solvers is None:
            p = self.vertices[self.triangles]
            t = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
            self._bary_solvers = np.linalg.inv(t)
        return self._bary_solvers

    def barycentric(self, k, x):
        """Barycentric coordinates of ``x`` in triangle ``k`` (unclipped)."""
        inv = self._bary_matrices()[k]
        rel = np.asarray(x, dtype=float) - self.vertices[self.triangles[k, 0]]
        l12 = inv @ rel
        return np.array([1.0 - l12[0] - l12[1], l12[0], l12[1]])

    def locate_point(self, x, hint=None, max_walk=None):
        """Find the element containing ``x`` by walking from ``hint``.

        Returns ``(element index, barycentric coords)`` with the coordinates
        clipped to the simplex. Raises :class:`OutsideDomainError` when ``x``
        lies outside the mesh beyond ``1e-10 * diam``.
        """
        x = np.asarray(x, dtype=float)
        tol = 1e-10 * self.bounding_box.diameter
        if max_walk is None:
            max_walk = self.num_elements + 4

        k = 0 if hint is None else int(hint)
        if not 0 <= k < self.num_elements:
            k = 0
        for _ in range(max_walk):
            lam = self.barycentric(k, x)
            worst = int(np.argmin(lam))
            if lam[worst] >= -tol:
                return k, _clip_bary(lam)
            nxt = self.tri_neighbors[k, worst]
            if nxt < 0:
                break
            k = nxt
        return self._locate_exhaustive(x, tol)

    def _locate_exhaustive(self, x, tol):
        k, lam, worst = self.locate_nearest(x)
        if worst < -tol:
            raise OutsideDomainError(f"point {x.tolist()} is outside the mesh")
        return k, lam

    def locate_nearest(self, x):
        """Best-matching element for ``x`` even if outside the mesh.

        Returns ``(element, clipped barycentric, worst raw coordinate)``;
        the worst coordinate is negative when ``x`` lies outside.
        """
        x = np.asarray(x, dtype=float)
        inv = self._bary_matrices()
        rel = x - self.vertices[self.triangles[:, 0]]
        l12 = np.einsum("nij,nj->ni", inv, rel)
        lam = np.column_stack([1.0 - l12.sum(axis=1), l12])
        worst = lam.min(axis=1)
        k = int(np.argmax(worst))
        return k, _clip_bary(lam[k]), float(worst[k])

    # -- diagnostics -----------------------------------------------------

    def validate(self):
        """Re-check orientation and conformity; raises on violation."""
        if self.num_elements == 0:
            raise NonConformingError("empty mesh")
        if self._signed.min() <= 0.0:
            raise DegenerateElementError("mesh contains an inverted or flat triangle")
        counts = np.where(self.boundary_edge_flags, 1, 2)
        actual = (self.edge_tris >= 0).sum(axis=1)
        if not np.array_equal(counts, actual):
            raise NonConformingError("edge incidence counts are inconsistent")
        return self


def _clip_bary(lam):
    lam = np.clip(lam, 0.0, None)
    return lam / lam.sum()


def generate_fixed_mesh(domain, nx, ny):
    """Structured mesh: nx-by-ny sub-rectangles, each cut into 4 by its diagonals.

    Every sub-rectangle gets a center vertex, so the element count is
    ``4 * nx * ny``.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be positive")
    if not isinstance(domain, Rectangle):
        domain = Rectangle(*domain)

    xs = np.linspace(domain.xmin, domain.xmax, nx + 1)
    ys = np.linspace(domain.ymin, domain.ymax, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    corners = np.column_stack([gx.ravel(), gy.ravel()])

    cx = 0.5 * (xs[:-1] + xs[1:])
    cy = 0.5 * (ys[:-1] + ys[1:])
    gx, gy = np.meshgrid(cx, cy, indexing="xy")
    centers = np.column_stack([gx.ravel(), gy.ravel()])

    vertices = np.vstack([corners, centers])
    n_corner = corners.shape[0]

    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    i = i.ravel()
    j = j.ravel()
    v00 = j * (nx + 1) + i
    v10 = v00 + 1
    v01 = v00 + (nx + 1)
    v11 = v01 + 1
    ctr = n_corner + j * nx + i

    triangles = np.concatenate(
        [
            np.column_stack([v00, v10, ctr]),
            np.column_stack([v10, v11, ctr]),
            np.column_stack([v11, v01, ctr]),
            np.column_stack([v01, v00, ctr]),
        ]
    )
    return Triangulation(vertices, triangles)
