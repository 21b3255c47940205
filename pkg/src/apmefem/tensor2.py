"""Closed-form linear algebra for (arrays of) symmetric 2x2 matrices.

All routines accept stacked input of shape (..., 2, 2) and are branch-free,
which keeps metric construction and mesh quality evaluation vectorized.
"""

import numpy as np


def eigh2(a):
    """Eigen-decomposition of symmetric 2x2 matrices.

    Returns (w, v) with eigenvalues ``w[..., 0] <= w[..., 1]`` and
    orthonormal eigenvectors in the columns of ``v``.
    """
    a = np.asarray(a, dtype=float)
    a11 = a[..., 0, 0]
    a22 = a[..., 1, 1]
    a12 = 0.5 * (a[..., 0, 1] + a[..., 1, 0])

    half_tr = 0.5 * (a11 + a22)
    half_diff = 0.5 * (a11 - a22)
    disc = np.hypot(half_diff, a12)
    w = np.stack([half_tr - disc, half_tr + disc], axis=-1)

    # eigenvector for the larger eigenvalue; pick the numerically larger of
    # the two equivalent cross-product forms to avoid cancellation
    c1 = np.stack([a12, w[..., 1] - a11], axis=-1)
    c2 = np.stack([w[..., 1] - a22, a12], axis=-1)
    use_c2 = np.abs(half_diff + disc) > np.abs(disc - half_diff)
    vmax = np.where(use_c2[..., None], c2, c1)
    norm = np.linalg.norm(vmax, axis=-1, keepdims=True)
    # degenerate (isotropic) case: any orthonormal pair will do
    e1 = np.zeros_like(vmax)
    e1[..., 0] = 1.0
    vmax = np.where(norm > 0.0, vmax / np.where(norm == 0.0, 1.0, norm), e1)
    vmin = np.stack([-vmax[..., 1], vmax[..., 0]], axis=-1)
    v = np.stack([vmin, vmax], axis=-1)
    return w, v


def from_eigh(w, v):
    """Rebuild symmetric matrices from eigenvalues and eigenvector columns."""
    return np.einsum("...ik,...k,...jk->...ij", v, w, v)


def abs_sym(a):
    """Replace the eigenvalues of symmetric matrices by their absolute values."""
    w, v = eigh2(a)
    return from_eigh(np.abs(w), v)


def spectral_norm(a):
    """Largest absolute eigenvalue of symmetric 2x2 matrices."""
    w, _ = eigh2(a)
    return np.max(np.abs(w), axis=-1)


def op_norm(a):
    """Largest singular value of general 2x2 matrices."""
    a = np.asarray(a, dtype=float)
    ata = np.einsum("...ki,...kj->...ij", a, a)
    w, _ = eigh2(ata)
    return np.sqrt(np.clip(w[..., 1], 0.0, None))


def det2(a):
    a = np.asarray(a, dtype=float)
    return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]


def inv2(a):
    """Inverse of (stacked) 2x2 matrices."""
    a = np.asarray(a, dtype=float)
    d = det2(a)
    out = np.empty_like(a)
    out[..., 0, 0] = a[..., 1, 1]
    out[..., 1, 1] = a[..., 0, 0]
    out[..., 0, 1] = -a[..., 0, 1]
    out[..., 1, 0] = -a[..., 1, 0]
    return out / d[..., None, None]


def sym_power(a, p):
    """Matrix power of symmetric positive definite 2x2 matrices."""
    w, v = eigh2(a)
    return from_eigh(np.power(w, p), v)


def is_spd(a, tol=0.0):
    """True where the symmetric part is positive definite (min eigenvalue > tol)."""
    w, _ = eigh2(a)
    return w[..., 0] > tol


def trace2(a):
    a = np.asarray(a, dtype=float)
    return a[..., 0, 0] + a[..., 1, 1]
