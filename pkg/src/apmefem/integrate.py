"""Stiff time integration of the semi-discrete system M du/dt = -A(u) u.

Three-stage Radau IIA (order 5) with a mass matrix, full Newton stage
solves on the coupled 3n system, an embedded error estimate refined with
previous-step information, and a predictive step-size controller. The
boundary rows of the FEM system (zero mass rows, identity stiffness rows)
make it an index-1 DAE whose algebraic constraints pin the boundary values;
the formulation here handles that directly.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fem import P1Assembler, SolutionField

_S6 = np.sqrt(6.0)

RADAU_C = np.array([(4.0 - _S6) / 10.0, (4.0 + _S6) / 10.0, 1.0])
RADAU_A = np.array(
    [
        [(88.0 - 7.0 * _S6) / 360.0, (296.0 - 169.0 * _S6) / 1800.0, (-2.0 + 3.0 * _S6) / 225.0],
        [(296.0 + 169.0 * _S6) / 1800.0, (88.0 + 7.0 * _S6) / 360.0, (-2.0 - 3.0 * _S6) / 225.0],
        [(16.0 - _S6) / 36.0, (16.0 + _S6) / 36.0, 1.0 / 9.0],
    ]
)
# embedded-error weights and the real eigenvalue of inv(A)
RADAU_E = np.array([-13.0 - 7.0 * _S6, -13.0 + 7.0 * _S6, -1.0]) / 3.0
MU_REAL = 3.0 + 3.0 ** (2.0 / 3.0) - 3.0 ** (1.0 / 3.0)

MIN_FACTOR = 0.2
MAX_FACTOR = 10.0


class StiffFailureError(RuntimeError):
    """Integration could not proceed; carries the failure time."""

    def __init__(self, message, time):
        super().__init__(message)
        self.time = time


@dataclass
class IntegratorConfig:
    rtol: float = 1e-6
    atol: float = 1e-8
    dt_init: float | None = None
    dt_min: float = 1e-12
    dt_max: float = np.inf
    newton_tol: float | None = None
    newton_max_iters: int = 10
    jacobian_mode: str = "analytic"  # analytic | lagged | full

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if self.dt_init is not None and not self.dt_min <= self.dt_init <= self.dt_max:
            raise ValueError("need dt_min <= dt_init <= dt_max")
        if self.newton_max_iters < 1:
            raise ValueError("newton_max_iters must be >= 1")
        if self.jacobian_mode not in ("analytic", "lagged", "full"):
            raise ValueError("jacobian_mode must be 'analytic', 'lagged' or 'full'")

    def effective_newton_tol(self):
        if self.newton_tol is not None:
            return self.newton_tol
        return max(10.0 * np.finfo(float).eps / self.rtol, min(0.03, self.rtol ** 0.5))


class OdeRightHandSide:
    """f(u) = -A(u) u for the APME semi-discrete system, with its Jacobian.

    ``jacobian`` includes the derivative of the nonlinear stiffness weight
    (exact linearization); ``jacobian_lagged`` drops it (Picard form).
    """

    def __init__(self, mesh, D, m):
        self.mesh = mesh
        self.D = D
        self.m = float(m)
        self._asm = P1Assembler(mesh, D)

    def __call__(self, u):
        A = self._asm.stiffness(u, self.m)
        return -(A @ u)

    def jacobian(self, u):
        A, G = self._asm.stiffness(u, self.m, with_derivative=True)
        return (-(A + G)).tocsc()

    def jacobian_lagged(self, u):
        return (-self._asm.stiffness(u, self.m)).tocsc()

    def mass(self):
        return self._asm.mass().tocsc()


def _rms(x):
    return float(np.sqrt(np.mean(x * x)))


def solve_stages(fun, jac, mass, y, h, cfg, scale, z0=None):
    """Simplified Newton solve of the coupled Radau stage system.

    Returns ``(Z, n_iters, converged, residual_history)`` where ``Z`` holds
    the three stage increments. The default modes (``analytic``/``lagged``)
    factorize the coupled 3n Jacobian once per step attempt, from the exact
    or Picard linearization at the step start; ``full`` reassembles the
    stage Jacobians every iteration (quadratic convergence, for diagnostics
    and hard nonlinear states).
    """
    n = len(y)
    tol = cfg.effective_newton_tol()
    Z = np.zeros((3, n)) if z0 is None else z0.copy()
    scale3 = np.tile(scale, 3)
    full = cfg.jacobian_mode == "full"

    lu = None
    res_history = []
    res0 = None
    dz_prev = None
    n_iters = 0
    for k in range(1, cfg.newton_max_iters + 1):
        if not Z.any():
            F = np.tile(fun(y), (3, 1))
        else:
            F = np.array([fun(y + Z[i]) for i in range(3)])
        if not np.all(np.isfinite(F)):
            return Z, n_iters, False, res_history
        R = (mass @ Z.T).T - h * (RADAU_A @ F)
        res = _rms(R)
        res_history.append(res)
        if res0 is None:
            res0 = res
        if res <= 1e-12 * (1.0 + res0):
            return Z, n_iters, True, res_history

        if lu is None or full:
            if full and Z.any():
                J = [jac(y + Z[i]) for i in range(3)]
            else:
                J = [jac(y)] * 3
            blocks = [
                [_join(mass if i == j else None, -h * RADAU_A[i, j] * J[j]) for j in range(3)]
                for i in range(3)
            ]
            lu = splu(sp.bmat(blocks, format="csc"))

        dz = lu.solve(-R.ravel())
        if not np.all(np.isfinite(dz)):
            return Z, n_iters, False, res_history
        Z = Z + dz.reshape(3, n)
        n_iters = k
        dz_norm = _rms(dz / scale3)
        rate = None if dz_prev is None else dz_norm / dz_prev
        if rate is not None and rate >= 1.0:
            return Z, n_iters, False, res_history
        if dz_norm < tol or (rate is not None and rate / (1.0 - rate) * dz_norm < tol):
            return Z, n_iters, True, res_history
        if (
            not full
            and rate is not None
            and rate ** (cfg.newton_max_iters - k) / (1.0 - rate) * dz_norm > tol
        ):
            # geometric extrapolation says the frozen-Jacobian iteration
            # cannot reach the tolerance in the remaining iterations
            return Z, n_iters, False, res_history
        dz_prev = dz_norm
    return Z, n_iters, False, res_history


def _join(mb, jb):
    return jb if mb is None else mb + jb


def _predict_factor(h, h_old, err, err_old):
    """Predictive (two-step) step-size factor from the last two error norms."""
    err = max(err, 1e-16)
    if err_old is None or h_old is None:
        multiplier = 1.0
    else:
        multiplier = h / h_old * (err_old / err) ** 0.25
    return min(1.0, multiplier) * err ** -0.25


def radau5(fun, jac, mass, y0, t_span, cfg, post_accept=None, log=None):
    """Integrate M y' = f(y) over ``t_span`` with adaptive Radau IIA steps.

    ``post_accept(t, y) -> (y, extras)`` is applied after every accepted
    substep (the PDE driver clips negative values there); ``extras`` is
    merged into the step log row. Raises :class:`StiffFailureError` when the
    controller wants a step below ``dt_min`` or Newton keeps failing there.
    """
    t_a, t_b = float(t_span[0]), float(t_span[1])
    if not t_b > t_a:
        raise ValueError("t_span must satisfy t_b > t_a")
    mass = sp.csc_matrix(mass)
    y = np.asarray(y0, dtype=float).copy()
    span = t_b - t_a

    h = cfg.dt_init if cfg.dt_init is not None else span / 100.0
    h = float(np.clip(h, cfg.dt_min, min(cfg.dt_max, span)))

    t = t_a
    h_old = None
    err_old = None
    rejected = False
    while t_b - t > 1e-13 * span:
        h_attempt = min(h, t_b - t)
        scale = cfg.atol + cfg.rtol * np.abs(y)

        Z, n_iters, converged, _ = solve_stages(fun, jac, mass, y, h_attempt, cfg, scale)
        safety = 0.9 * (2.0 * cfg.newton_max_iters + 1.0) / (
            2.0 * cfg.newton_max_iters + max(n_iters, 1)
        )
        if not converged:
            if log is not None:
                log.append(_row(t, h_attempt, n_iters, np.nan, False, 0))
            if h_attempt <= cfg.dt_min * (1.0 + 1e-12):
                raise StiffFailureError(
                    f"Newton failed to converge at t={t:.6g} with dt={h_attempt:.3e}", t
                )
            h = max(0.5 * h_attempt, cfg.dt_min)
            rejected = True
            continue

        y_new = y + Z[2]
        scale_new = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))

        # embedded estimate, filtered through the real-eigenvalue system
        J0 = jac(y)
        lu_err = splu((MU_REAL / h_attempt) * mass - J0)
        ze = (RADAU_E @ Z) / h_attempt
        f0 = fun(y)
        err = lu_err.solve(f0 + mass @ ze)
        err_norm = _rms(err / scale_new)
        if err_norm > 1.0:
            # refine with the perturbed right-hand side (two-step estimator)
            err = lu_err.solve(fun(y + err) + mass @ ze)
            err_norm = _rms(err / scale_new)

        if err_norm > 1.0:
            if log is not None:
                log.append(_row(t, h_attempt, n_iters, err_norm, False, 0))
            factor = max(MIN_FACTOR, safety * _predict_factor(h_attempt, h_old, err_norm, err_old))
            h_next = h_attempt * factor
            if h_next < cfg.dt_min * (1.0 - 1e-12) or h_attempt <= cfg.dt_min * (1.0 + 1e-12):
                raise StiffFailureError(
                    f"error control wants dt below dt_min at t={t:.6g}", t
                )
            h = max(h_next, cfg.dt_min)
            rejected = True
            continue

        t = t + h_attempt
        extras = {}
        if post_accept is not None:
            y_new, extras = post_accept(t, y_new)
        if log is not None:
            row = _row(t, h_attempt, n_iters, err_norm, True, extras.pop("clipped", 0))
            row.update(extras)
            log.append(row)

        factor = min(MAX_FACTOR, safety * _predict_factor(h_attempt, h_old, err_norm, err_old))
        if rejected:
            factor = min(1.0, factor)
        h_old = h_attempt
        err_old = max(err_norm, 1e-16)
        y = y_new
        rejected = False
        h = float(np.clip(h_attempt * factor, cfg.dt_min, cfg.dt_max))
    return y


def _row(t, dt, newton_iters, error_norm, accepted, clipped):
    return {
        "t": t,
        "dt": dt,
        "newton_iters": newton_iters,
        "error_estimate": error_norm,
        "accepted": accepted,
        "clipped_nodes": clipped,
    }


def integrate_interval(rhs, M, u0, t_span, cfg, log=None):
    """Advance a nodal FEM field through one inter-adaptation interval.

    After every accepted substep the boundary values are re-pinned to zero
    exactly and negative nodal values are clipped (cut-off); the number of
    clipped nodes lands in the step log. Returns the field at ``t_span[1]``.
    """
    boundary = rhs.mesh.boundary_vertex_flags

    def post_accept(t, y):
        y[boundary] = 0.0
        neg = y < 0.0
        clipped = int(np.count_nonzero(neg))
        if clipped:
            y = np.where(neg, 0.0, y)
        return y, {"clipped": clipped}

    jac = rhs.jacobian_lagged if cfg.jacobian_mode == "lagged" else rhs.jacobian
    y_end = radau5(rhs, jac, M, u0.values, t_span, cfg, post_accept=post_accept, log=log)
    return SolutionField(rhs.mesh, y_end, t_span[1])
