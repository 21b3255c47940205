"""Closed-form self-similar solutions of the porous medium equation.

Provides the classical compact-support similarity solution, its extension to
a constant anisotropic diffusion matrix via the change of variables
``x_tilde = D^{-1/2} x``, and a finite-difference residual oracle that checks
a candidate solution against the PDE ``u_t = div(u^m D grad u)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor2


class InvalidTimeError(ValueError):
    """Evaluation time precedes the similarity start time."""


class StencilOutsideSupportError(ValueError):
    """The finite-difference stencil leaves the solution support."""


@dataclass(frozen=True)
class BarenblattParams:
    """Similarity parameters for the compact-support solution.

    ``beta = 1/(d*m + 2)`` and the start time ``t0 = beta*m*r0^2/2`` are
    derived from the exponent ``m``, dimension ``d`` and initial support
    radius ``r0``.
    """

    m: float
    r0: float
    d: int = 2
    beta: float = field(init=False)
    t0: float = field(init=False)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("exponent m must be >= 1")
        if self.r0 <= 0:
            raise ValueError("initial support radius r0 must be positive")
        object.__setattr__(self, "beta", 1.0 / (self.d * self.m + 2.0))
        object.__setattr__(self, "t0", 0.5 * self.beta * self.m * self.r0 ** 2)

    def kappa(self, t):
        if np.any(np.asarray(t) < self.t0 * (1.0 - 1e-12)):
            raise InvalidTimeError(f"t={t} is before the start time t0={self.t0}")
        return (np.asarray(t, dtype=float) / self.t0) ** self.beta


def _profile(p, quad, t):
    """Evaluate max{kappa^-d (1 - quad/(r0 kappa)^2)^(1/m), 0}."""
    kappa = p.kappa(t)
    arg = 1.0 - quad / (p.r0 ** 2 * kappa ** 2)
    return kappa ** (-p.d) * np.power(np.clip(arg, 0.0, None), 1.0 / p.m)


def pme_solution(p, x, t):
    """Isotropic solution at points ``x`` (shape (..., 2)) and time ``t >= t0``."""
    x = np.asarray(x, dtype=float)
    return _profile(p, np.sum(x * x, axis=-1), t)


def pme_initial(p, x):
    """Compactly supported initial data ``max{(1 - |x|^2/r0^2)^(1/m), 0}``."""
    x = np.asarray(x, dtype=float)
    arg = 1.0 - np.sum(x * x, axis=-1) / p.r0 ** 2
    return np.power(np.clip(arg, 0.0, None), 1.0 / p.m)


class AnisotropicExact:
    """Exact solution for constant SPD diffusion, by mapping through D^{-1/2}.

    The support at time t is the ellipse ``x^T D^{-1} x = (r0 kappa)^2``.
    """

    def __init__(self, params, D):
        D = np.asarray(D, dtype=float)
        if D.shape != (2, 2) or not np.allclose(D, D.T, atol=1e-12):
            raise ValueError("D must be a symmetric 2x2 matrix")
        w, v = tensor2.eigh2(D)
        if w[0] <= 0:
            raise ValueError("D must be positive definite")
        self.params = params
        self.D = D
        self.D_inv = tensor2.from_eigh(1.0 / w, v)
        self.D_inv_sqrt = tensor2.from_eigh(1.0 / np.sqrt(w), v)

    def quad_form(self, x):
        """x^T D^{-1} x, vectorized over the leading axes of ``x``."""
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.D_inv, x)

    def solution(self, x, t):
        """Value at points ``x`` and time ``t >= t0``."""
        return _profile(self.params, self.quad_form(x), t)

    def initial(self, x):
        """Initial data at ``t = t0`` (ellipsoidal compact support)."""
        p = self.params
        arg = 1.0 - self.quad_form(x) / p.r0 ** 2
        return np.power(np.clip(arg, 0.0, None), 1.0 / p.m)

    def __call__(self, x, t):
        return self.solution(x, t)

    def support_radius2(self, t):
        """Level ``(r0 kappa)^2`` of the quadratic form at the free boundary."""
        kappa = self.params.kappa(t)
        return (self.params.r0 * kappa) ** 2

    def support_area(self, t):
        """Area of the elliptical support at time ``t``."""
        return np.pi * self.support_radius2(t) * np.sqrt(tensor2.det2(self.D))


def apme_solution(e, x, t):
    return e.solution(x, t)


def apme_initial(e, x):
    return e.initial(x)


def pde_residual(field, D, m, x, t, h, ht=None):
    """|u_t - div(u^m D grad u)| at (x, t) by 2nd-order centered differences.

    ``field(points, t)`` must be vectorized over points and smooth on the
    stencil; ``D`` is a constant 2x2 matrix. The flux divergence is computed
    from the potential ``w = u^(m+1)/(m+1)``, for which the PDE reads
    ``u_t = D:H(w)``. The time step defaults to ``ht = t*h`` so both
    truncation terms shrink like h^2.
    """
    D = np.asarray(D, dtype=float)
    x = np.asarray(x, dtype=float)
    if ht is None:
        ht = h * t

    pts = x + h * np.array(
        [
            [0.0, 0.0],
            [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0],
            [1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0],
        ]
    )
    u = np.asarray(field(pts, t), dtype=float)
    w = np.power(u, m + 1.0) / (m + 1.0)

    wxx = (w[1] - 2.0 * w[0] + w[2]) / h ** 2
    wyy = (w[3] - 2.0 * w[0] + w[4]) / h ** 2
    wxy = (w[5] - w[6] - w[7] + w[8]) / (4.0 * h ** 2)
    div_flux = D[0, 0] * wxx + 2.0 * D[0, 1] * wxy + D[1, 1] * wyy

    u_t = (field(x, t + ht) - field(x, t - ht)) / (2.0 * ht)
    return float(abs(u_t - div_flux))


def residual_check(e, x, t, h=None, margin=4.0):
    """PDE residual of the exact anisotropic solution at one point.

    Raises :class:`StencilOutsideSupportError` unless the ``margin*h``
    neighborhood of ``x`` stays strictly inside the support at ``t -/+ t*h``.
    """
    if h is None:
        h = 1e-3 * e.params.r0
    x = np.asarray(x, dtype=float)
    box = x + margin * h * np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float)
    ht = h * t
    r2 = e.support_radius2(t - ht)
    if np.max(e.quad_form(box)) >= r2:
        raise StencilOutsideSupportError(
            f"stencil around {x.tolist()} leaves the support at t={t}"
        )
    return pde_residual(e.solution, e.D, e.params.m, x, t, h, ht=ht)
