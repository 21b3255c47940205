import numpy as np
import pytest

from apmefem.mesh import Rectangle, Triangulation, generate_fixed_mesh


@pytest.fixture
def unit_square_mesh():
    return generate_fixed_mesh(Rectangle(0.0, 1.0, 0.0, 1.0), 4, 4)


@pytest.fixture
def paper_domain():
    return Rectangle(-3.0, 3.0, -3.0, 3.0)


@pytest.fixture
def coarse_domain_mesh(paper_domain):
    return generate_fixed_mesh(paper_domain, 10, 10)


def jittered_mesh(domain, nx, ny, seed=0, amplitude=0.25):
    """Structured mesh with randomly perturbed interior vertices.

    The perturbation is kept small enough that all triangles stay positively
    oriented, giving a deterministic 'unstructured' mesh for recovery tests.
    """
    base = generate_fixed_mesh(domain, nx, ny)
    rng = np.random.default_rng(seed)
    verts = base.vertices.copy()
    h = min(domain.width / nx, domain.height / ny)
    interior = ~base.boundary_vertex_flags
    verts[interior] += amplitude * h * rng.uniform(-1.0, 1.0, size=(interior.sum(), 2))
    return Triangulation(verts, base.triangles)
