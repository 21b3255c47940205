"""Metric-conforming local remeshing.

Drives every edge toward unit length under a metric field and every element
toward alignment quality 1 via passes of edge splits, edge collapses, edge
flips and vertex smoothing. The boundary polygon is preserved exactly:
corner vertices never move or disappear, and other boundary vertices are
only created or removed along their straight boundary segment.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .fem import SolutionField
from .mesh import Triangulation
from .metric import MetricField, vertex_metrics

# metric area of the ideal (unit-edge equilateral) element
UNIT_ELEMENT_AREA = np.sqrt(3.0) / 4.0

# coefficients of tr((F'_K)^T M F'_K) in terms of edge vectors u = p1-p0,
# v = p2-p0: trace = C00*u.Mu + 2*C01*u.Mv + C11*v.Mv, for the unit-area
# equilateral reference element
_C00 = 1.0 / np.sqrt(3.0)
_C01 = -0.5 / np.sqrt(3.0)

_IMPROVE_EPS = 1e-12
_IMPROVE_REL = 1e-6  # required relative quality gain for flips and smoothing
_AREA_FLOOR = 1e-13  # reject elements thinner than this times the squared longest edge
_INF = float("inf")


class EmptyMetricError(ValueError):
    """The metric field has zero total metric area."""


@dataclass
class AdaptParams:
    """Knobs of the local remesher.

    ``L_low``/``L_high`` bound the accepted metric edge lengths (the
    classical half/double band around 1 prevents split/collapse cycles);
    elements with alignment quality at most ``min_quality`` are left alone
    by flips and smoothing.
    """

    target_N: int
    L_low: float = 1.0 / np.sqrt(2.0)
    L_high: float = np.sqrt(2.0)
    max_passes: int = 10
    min_quality: float = 1.2
    collapse_quality_cap: float = 15.0

    def __post_init__(self):
        if not 0 < self.L_low < 1 < self.L_high:
            raise ValueError("need 0 < L_low < 1 < L_high")
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")


def normalize_metric(metric, target_N):
    """Scale the metric so a unit-edge mesh would have ``target_N`` elements.

    The total metric area is driven to ``target_N`` times the area of a
    unit-edge equilateral triangle; scaling preserves anisotropy ratios and
    eigenvector directions.
    """
    if target_N < 1:
        raise ValueError("target_N must be >= 1")
    if metric.sigma_h <= 0.0:
        raise EmptyMetricError("metric field has zero total metric area")
    s = target_N * UNIT_ELEMENT_AREA / metric.sigma_h
    return metric.scaled(s)


def metric_edge_length(mesh, metric, edge):
    """Length of one mesh edge under the vertex-averaged metric."""
    vm = vertex_metrics(mesh, metric)
    a, b = edge
    e = mesh.vertices[b] - mesh.vertices[a]
    M = 0.5 * (vm[a] + vm[b])
    return float(np.sqrt(e @ M @ e))


def edge_lengths_under(mesh, metric):
    """Metric lengths of all mesh edges (same order as ``mesh.edges``)."""
    vm = vertex_metrics(mesh, metric)
    a = mesh.edges[:, 0]
    b = mesh.edges[:, 1]
    e = mesh.vertices[b] - mesh.vertices[a]
    M = 0.5 * (vm[a] + vm[b])
    return np.sqrt(np.einsum("ni,nij,nj->n", e, M, e))


class _EditableMesh:
    """Mutable triangle soup with incremental vertex-to-triangle adjacency.

    Coordinates and (packed symmetric) vertex metrics live in plain Python
    lists: the accept tests of the local operations are scalar-heavy and
    list access is several times faster than numpy scalar indexing. The
    vectorized per-pass scans build numpy snapshots on demand.
    """

    def __init__(self, mesh, vmetric, params):
        self.params = params
        self.xl = mesh.vertices[:, 0].tolist()
        self.yl = mesh.vertices[:, 1].tolist()
        self.m0 = vmetric[:, 0, 0].tolist()
        self.m1 = vmetric[:, 0, 1].tolist()
        self.m2 = vmetric[:, 1, 1].tolist()
        self.vbnd = mesh.boundary_vertex_flags.tolist()
        self.vcorner = _corner_flags(mesh).tolist()
        self.valive = [True] * mesh.num_vertices
        self.tris = [tuple(t) for t in mesh.triangles.tolist()]
        self.talive = [True] * mesh.num_elements
        self.v2t = [set() for _ in range(mesh.num_vertices)]
        for t, tri in enumerate(self.tris):
            for v in tri:
                self.v2t[v].add(t)

    # -- mutation --------------------------------------------------------

    def add_vertex(self, x, y, m0, m1, m2, boundary):
        idx = len(self.xl)
        self.xl.append(x)
        self.yl.append(y)
        self.m0.append(m0)
        self.m1.append(m1)
        self.m2.append(m2)
        self.vbnd.append(boundary)
        self.vcorner.append(False)
        self.valive.append(True)
        self.v2t.append(set())
        return idx

    def add_tri(self, a, b, c):
        t = len(self.tris)
        self.tris.append((a, b, c))
        self.talive.append(True)
        self.v2t[a].add(t)
        self.v2t[b].add(t)
        self.v2t[c].add(t)
        return t

    def del_tri(self, t):
        self.talive[t] = False
        for v in self.tris[t]:
            self.v2t[v].discard(t)

    # -- queries ---------------------------------------------------------

    def live_tris_array(self):
        return np.array(
            [tri for tri, alive in zip(self.tris, self.talive) if alive],
            dtype=np.int64,
        )

    def live_edges(self):
        tris = self.live_tris_array()
        raw = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
        return np.unique(np.sort(raw, axis=1), axis=0)

    def edge_incidence(self):
        """All live edges with their one or two incident triangle ids."""
        ids = np.flatnonzero(self.talive)
        tris = np.array(self.tris, dtype=np.int64)[ids]
        raw = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
        owner = np.concatenate([ids, ids, ids])
        edges, inverse = np.unique(np.sort(raw, axis=1), axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        eid = inverse[order]
        tid = owner[order]
        t0 = np.full(len(edges), -1, dtype=np.int64)
        t1 = np.full(len(edges), -1, dtype=np.int64)
        first = np.ones(len(eid), dtype=bool)
        first[1:] = eid[1:] != eid[:-1]
        t0[eid[first]] = tid[first]
        t1[eid[~first]] = tid[~first]
        return edges, t0, t1

    def edge_tris(self, a, b):
        return sorted(self.v2t[a] & self.v2t[b])

    def ring(self, v):
        out = set()
        for t in self.v2t[v]:
            out.update(self.tris[t])
        out.discard(v)
        return sorted(out)

    def edge_len(self, a, b):
        ex = self.xl[b] - self.xl[a]
        ey = self.yl[b] - self.yl[a]
        m0 = 0.5 * (self.m0[a] + self.m0[b])
        m1 = 0.5 * (self.m1[a] + self.m1[b])
        m2 = 0.5 * (self.m2[a] + self.m2[b])
        return (m0 * ex * ex + 2.0 * m1 * ex * ey + m2 * ey * ey) ** 0.5

    def edge_lengths(self, edges):
        xy = np.column_stack([self.xl, self.yl])
        m = np.column_stack([self.m0, self.m1, self.m2])
        e = xy[edges[:, 1]] - xy[edges[:, 0]]
        me = 0.5 * (m[edges[:, 0]] + m[edges[:, 1]])
        return np.sqrt(
            me[:, 0] * e[:, 0] ** 2
            + 2.0 * me[:, 1] * e[:, 0] * e[:, 1]
            + me[:, 2] * e[:, 1] ** 2
        )

    def _tri_eval(self, a, b, c):
        """(signed area, alignment quality, squared longest edge)."""
        xl = self.xl
        yl = self.yl
        ax = xl[a]; ay = yl[a]
        ux = xl[b] - ax; uy = yl[b] - ay
        vx = xl[c] - ax; vy = yl[c] - ay
        wx = vx - ux; wy = vy - uy
        lmax2 = max(ux * ux + uy * uy, vx * vx + vy * vy, wx * wx + wy * wy)
        area = 0.5 * (ux * vy - uy * vx)
        if area <= 0.0:
            return area, _INF, lmax2
        m0 = (self.m0[a] + self.m0[b] + self.m0[c]) / 3.0
        m1 = (self.m1[a] + self.m1[b] + self.m1[c]) / 3.0
        m2 = (self.m2[a] + self.m2[b] + self.m2[c]) / 3.0
        uMu = m0 * ux * ux + 2.0 * m1 * ux * uy + m2 * uy * uy
        uMv = m0 * ux * vx + m1 * (ux * vy + uy * vx) + m2 * uy * vy
        vMv = m0 * vx * vx + 2.0 * m1 * vx * vy + m2 * vy * vy
        trace = _C00 * (uMu + vMv) + 2.0 * _C01 * uMv
        det = area * area * (m0 * m2 - m1 * m1)
        if det <= 0.0:
            return area, _INF, lmax2
        return area, 0.5 * trace / det ** 0.5, lmax2

    def qualities(self, tris):
        """Vectorized alignment qualities for an (n, 3) triangle array."""
        xy = np.column_stack([self.xl, self.yl])
        m = np.column_stack([self.m0, self.m1, self.m2])
        u = xy[tris[:, 1]] - xy[tris[:, 0]]
        v = xy[tris[:, 2]] - xy[tris[:, 0]]
        area = 0.5 * (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
        mk = (m[tris[:, 0]] + m[tris[:, 1]] + m[tris[:, 2]]) / 3.0
        uMu = mk[:, 0] * u[:, 0] ** 2 + 2 * mk[:, 1] * u[:, 0] * u[:, 1] + mk[:, 2] * u[:, 1] ** 2
        uMv = (
            mk[:, 0] * u[:, 0] * v[:, 0]
            + mk[:, 1] * (u[:, 0] * v[:, 1] + u[:, 1] * v[:, 0])
            + mk[:, 2] * u[:, 1] * v[:, 1]
        )
        vMv = mk[:, 0] * v[:, 0] ** 2 + 2 * mk[:, 1] * v[:, 0] * v[:, 1] + mk[:, 2] * v[:, 1] ** 2
        trace = _C00 * (uMu + vMv) + 2.0 * _C01 * uMv
        det = area ** 2 * (mk[:, 0] * mk[:, 2] - mk[:, 1] ** 2)
        return 0.5 * trace / np.sqrt(det)

    # -- local operations --------------------------------------------------

    def split_edge(self, a, b):
        ts = self.edge_tris(a, b)
        if not ts:
            return False
        m = self.add_vertex(
            0.5 * (self.xl[a] + self.xl[b]),
            0.5 * (self.yl[a] + self.yl[b]),
            0.5 * (self.m0[a] + self.m0[b]),
            0.5 * (self.m1[a] + self.m1[b]),
            0.5 * (self.m2[a] + self.m2[b]),
            len(ts) == 1,
        )
        for t in ts:
            tri = self.tris[t]
            self.del_tri(t)
            # midpoint takes each endpoint's slot in turn; cyclic order kept
            self.add_tri(*(m if v == b else v for v in tri))
            self.add_tri(*(m if v == a else v for v in tri))
        return True

    def try_collapse(self, r, k):
        """Remove vertex r by merging it into its neighbor k."""
        if self.vcorner[r]:
            return False
        if self.vbnd[r]:
            if not self.vbnd[k]:
                return False
            if len(self.edge_tris(r, k)) != 1:
                return False  # chord between boundary vertices, not a boundary edge

        shared = self.edge_tris(r, k)
        if not shared:
            return False
        ring_r = set(self.ring(r))
        ring_k = set(self.ring(k))
        opposite = set()
        for t in shared:
            opposite.update(v for v in self.tris[t] if v != r and v != k)
        if (ring_r & ring_k) != opposite:
            return False  # collapse would pinch the mesh

        # simulate the retargeted triangles
        new_tris = []
        new_max = 0.0
        for t in sorted(self.v2t[r]):
            tri = self.tris[t]
            if k in tri:
                continue
            sim = tuple(k if v == r else v for v in tri)
            area, q, lmax2 = self._tri_eval(*sim)
            if area <= _AREA_FLOOR * lmax2:
                return False
            new_max = max(new_max, q)
            new_tris.append(sim)

        # no overlong edges out of the merged vertex
        for w in sorted(ring_r - {k} - opposite):
            if self.edge_len(k, w) > self.params.L_high:
                return False

        # quality cap, relaxed to "no worse than before" in bad regions
        if new_max > self.params.collapse_quality_cap:
            old_max = 0.0
            for t in sorted(self.v2t[r] | self.v2t[k]):
                old_max = max(old_max, self._tri_eval(*self.tris[t])[1])
            if new_max > old_max:
                return False

        for t in sorted(self.v2t[r]):
            self.del_tri(t)
        for sim in new_tris:
            self.add_tri(*sim)
        self.valive[r] = False
        return True

    def try_flip(self, a, b):
        ts = self.edge_tris(a, b)
        if len(ts) != 2:
            return False
        t1, t2 = ts
        tri1 = self.tris[t1]
        # orient so that tri1 traverses a -> b
        if (tri1.index(b) - tri1.index(a)) % 3 != 1:
            t1, t2 = t2, t1
            tri1 = self.tris[t1]
        tri2 = self.tris[t2]
        c = next(v for v in tri1 if v != a and v != b)
        d = next(v for v in tri2 if v != a and v != b)
        if self.v2t[c] & self.v2t[d]:
            return False  # the flipped edge already exists elsewhere

        q1 = self._tri_eval(*tri1)[1]
        q2 = self._tri_eval(*tri2)[1]
        area1, qn1, lmax1 = self._tri_eval(a, d, c)
        area2, qn2, lmax2 = self._tri_eval(d, b, c)
        if area1 <= _AREA_FLOOR * lmax1 or area2 <= _AREA_FLOOR * lmax2:
            return False
        old_max = max(q1, q2)
        if not (
            max(qn1, qn2) < old_max - _IMPROVE_REL * old_max
            and qn1 + qn2 <= q1 + q2 + _IMPROVE_EPS
        ):
            return False

        self.del_tri(t1)
        self.del_tri(t2)
        self.add_tri(a, d, c)
        self.add_tri(d, b, c)
        return True

    def try_smooth(self, v):
        tri_ids = sorted(self.v2t[v])
        if not tri_ids:
            return False
        tris = [self.tris[t] for t in tri_ids]
        old_max = 0.0
        old_sum = 0.0
        for tri in tris:
            q = self._tri_eval(*tri)[1]
            old_sum += q
            old_max = max(old_max, q)
        if old_max <= self.params.min_quality:
            return False

        # metric-weighted average of the neighbors (edge metrics as weights)
        w00 = w01 = w11 = r0 = r1 = 0.0
        mv0 = self.m0[v]; mv1 = self.m1[v]; mv2 = self.m2[v]
        for j in self.ring(v):
            e00 = 0.5 * (mv0 + self.m0[j])
            e01 = 0.5 * (mv1 + self.m1[j])
            e11 = 0.5 * (mv2 + self.m2[j])
            w00 += e00; w01 += e01; w11 += e11
            r0 += e00 * self.xl[j] + e01 * self.yl[j]
            r1 += e01 * self.xl[j] + e11 * self.yl[j]
        det = w00 * w11 - w01 * w01
        if det <= 0.0:
            return False
        tx = (w11 * r0 - w01 * r1) / det
        ty = (w00 * r1 - w01 * r0) / det

        x_old = self.xl[v]; y_old = self.yl[v]
        for step in (1.0, 0.5):
            self.xl[v] = x_old + step * (tx - x_old)
            self.yl[v] = y_old + step * (ty - y_old)
            ok = True
            new_sum = 0.0
            new_max = 0.0
            for tri in tris:
                area, q, lmax2 = self._tri_eval(*tri)
                if area <= _AREA_FLOOR * lmax2:
                    ok = False
                    break
                new_sum += q
                new_max = max(new_max, q)
            if (
                ok
                and new_max < old_max - _IMPROVE_REL * old_max
                and new_sum <= old_sum + _IMPROVE_EPS
            ):
                return True
            self.xl[v] = x_old
            self.yl[v] = y_old
        return False

    # -- passes ------------------------------------------------------------

    def split_pass(self):
        edges = self.live_edges()
        lens = self.edge_lengths(edges)
        sel = lens > self.params.L_high
        order = np.lexsort((edges[sel, 1], edges[sel, 0], -lens[sel]))
        count = 0
        for a, b in edges[sel][order]:
            if self.split_edge(int(a), int(b)):
                count += 1
        return count

    def collapse_pass(self):
        edges = self.live_edges()
        lens = self.edge_lengths(edges)
        sel = lens < self.params.L_low
        order = np.lexsort((edges[sel, 1], edges[sel, 0], lens[sel]))
        count = 0
        for a, b in edges[sel][order]:
            a, b = int(a), int(b)
            if not (self.valive[a] and self.valive[b]):
                continue
            # deterministic removal preference: interior endpoint first
            if self.vbnd[a] and not self.vbnd[b]:
                orders = [(b, a)]
            elif self.vbnd[b] and not self.vbnd[a]:
                orders = [(a, b)]
            else:
                orders = [(b, a), (a, b)]
            for r, k in orders:
                if self.try_collapse(r, k):
                    count += 1
                    break
        return count

    def flip_pass(self):
        edges, t0, t1 = self.edge_incidence()
        interior = t1 >= 0
        if not interior.any():
            return 0
        q = np.zeros(len(self.tris))
        ids = np.flatnonzero(self.talive)
        q[ids] = self.qualities(np.array(self.tris, dtype=np.int64)[ids])
        edges = edges[interior]
        local_max = np.maximum(q[t0[interior]], q[t1[interior]])
        sel = local_max > self.params.min_quality
        order = np.lexsort((edges[sel, 1], edges[sel, 0], -local_max[sel]))
        count = 0
        for a, b in edges[sel][order]:
            if self.try_flip(int(a), int(b)):
                count += 1
        return count

    def smooth_pass(self):
        # vectorized prefilter: only vertices touching a low-quality element
        tris = self.live_tris_array()
        q = self.qualities(tris)
        vmax = np.zeros(len(self.xl))
        np.maximum.at(vmax, tris.ravel(), np.repeat(q, 3))
        alive = np.array(self.valive)
        bnd = np.array(self.vbnd)
        candidates = np.flatnonzero(alive & ~bnd & (vmax > self.params.min_quality))
        count = 0
        for v in candidates:
            if self.try_smooth(int(v)):
                count += 1
        return count

    def to_triangulation(self):
        tris = self.live_tris_array()
        used = np.zeros(len(self.xl), dtype=bool)
        used[tris.ravel()] = True
        remap = -np.ones(len(self.xl), dtype=np.int64)
        remap[used] = np.arange(int(used.sum()))
        xy = np.column_stack([self.xl, self.yl])[used]
        return Triangulation(xy, remap[tris])


def _corner_flags(mesh):
    """Boundary vertices whose two boundary edges are not collinear."""
    flags = np.zeros(mesh.num_vertices, dtype=bool)
    b_edges = mesh.edges[mesh.boundary_edge_flags]
    incident = {}
    for a, b in b_edges:
        incident.setdefault(int(a), []).append(int(b))
        incident.setdefault(int(b), []).append(int(a))
    for v, nbrs in incident.items():
        if len(nbrs) != 2:
            flags[v] = True  # non-manifold boundary joint: pin it
            continue
        d1 = mesh.vertices[nbrs[0]] - mesh.vertices[v]
        d2 = mesh.vertices[nbrs[1]] - mesh.vertices[v]
        cross = d1[0] * d2[1] - d1[1] * d2[0]
        if abs(cross) > 1e-12 * np.linalg.norm(d1) * np.linalg.norm(d2):
            flags[v] = True
    return flags


def adapt_once(mesh, metric, params, log=None):
    """One adaptation sweep: repeated split/collapse/flip/smooth passes.

    The metric must already be normalized to the desired element count.
    Returns a new conforming, positively oriented triangulation; emits a
    warning when ``max_passes`` is exhausted while many edges are still
    outside the length band.
    """
    em = _EditableMesh(mesh, vertex_metrics(mesh, metric), params)

    converged = False
    for p in range(params.max_passes):
        ops = em.split_pass()
        ops += em.collapse_pass()
        ops += em.flip_pass()
        ops += em.smooth_pass()
        if log is not None:
            q = em.qualities(em.live_tris_array())
            lens = em.edge_lengths(em.live_edges())
            log.append(
                {
                    "pass": p + 1,
                    "n_elements": int(sum(em.talive)),
                    "ops": ops,
                    "mean_q_ali": float(q.mean()),
                    "max_q_ali": float(q.max()),
                    "len_q10": float(np.quantile(lens, 0.1)),
                    "len_q50": float(np.quantile(lens, 0.5)),
                    "len_q90": float(np.quantile(lens, 0.9)),
                }
            )
        if ops == 0:
            converged = True
            break
    if not converged:
        lens = em.edge_lengths(em.live_edges())
        in_band = np.mean((lens >= params.L_low) & (lens <= params.L_high))
        if in_band < 0.9:
            warnings.warn(
                f"adaptation stopped after {params.max_passes} passes with "
                f"{100 * in_band:.1f}% of edges in the length band",
                stacklevel=2,
            )
    return em.to_triangulation()


def iterate_initial_mesh(u0, seed_mesh, metric_builder, params, iterations=5, log=None):
    """Bootstrap a solution-adapted initial mesh from a coarse seed.

    Each iteration samples ``u0`` at the vertices (exact point evaluation,
    not transfer), builds a metric via ``metric_builder(mesh, field)``,
    normalizes it to the target element count, and adapts once. Returns the
    final mesh and ``u0`` sampled on it.
    """
    mesh = seed_mesh
    for _ in range(iterations):
        field = SolutionField(mesh, u0(mesh.vertices))
        metric = metric_builder(mesh, field)
        metric = normalize_metric(metric, params.target_N)
        mesh = adapt_once(mesh, metric, params, log=log)
    return mesh, SolutionField(mesh, u0(mesh.vertices))
