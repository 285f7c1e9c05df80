"""Euclidean projection onto equality-constraint manifolds.

Linear constraint sets project in closed form through the normal equations;
nonlinear sets run Newton's method on the KKT conditions of

    min ||v - v0||^2  subject to  residual(v) = 0.

Both directions are differentiable: ``project_backward`` turns an upstream
gradient at the projected point into a gradient at the input by solving one
transposed KKT system, so projection can sit inside a training loop as an
ordinary layer.  Projections are stateless; multipliers always start at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .physics import ConstraintSet


class SingularKKTError(np.linalg.LinAlgError):
    """KKT matrix remained singular after all diagonal shifts."""


class ProjectionNonConvergenceError(RuntimeError):
    """Newton projection hit the iteration cap; carries the best iterate."""

    def __init__(self, message: str, best: "ProjectionResult"):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class ProjectionResult:
    v_proj: np.ndarray
    iterations: int
    final_residual_norm: float
    multipliers: np.ndarray


# Diagonal regularization ladder for near-singular KKT systems.
_SHIFT_INIT = 1e-8
_SHIFT_GROWTH = 10.0
_SHIFT_MAX = 1e-2

_BACKTRACK_FACTOR = 0.5
_MAX_BACKTRACKS = 30


def _solve_regularized(kmat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve kmat x = rhs, adding a growing diagonal shift if singular."""
    shift = 0.0
    while True:
        m = kmat if shift == 0.0 else kmat + shift * np.eye(kmat.shape[0])
        try:
            sol = np.linalg.solve(m, rhs)
        except np.linalg.LinAlgError:
            sol = None
        if sol is not None and np.all(np.isfinite(sol)):
            # reject numerically meaningless solutions of an ill-conditioned solve
            if np.max(np.abs(m @ sol - rhs)) <= 1e-6 * (1.0 + np.max(np.abs(rhs))):
                return sol
        shift = _SHIFT_INIT if shift == 0.0 else shift * _SHIFT_GROWTH
        if shift > _SHIFT_MAX:
            raise SingularKKTError("KKT matrix singular despite diagonal shifts")


def linear_project(v, a, b) -> ProjectionResult:
    """Closed-form nearest feasible point for Av = b: v - A^T (AA^T)^-1 (Av - b)."""
    v = np.asarray(v, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or v.shape != (a.shape[1],) or b.shape != (a.shape[0],):
        raise ValueError(f"incompatible shapes: v {v.shape}, A {a.shape}, b {b.shape}")
    gram = a @ a.T
    try:
        coeff = np.linalg.solve(gram, a @ v - b)
    except np.linalg.LinAlgError as err:
        raise SingularKKTError("A must have full row rank") from err
    if not np.all(np.isfinite(coeff)) or np.max(np.abs(gram @ coeff - (a @ v - b))) > 1e-8 * (
        1.0 + np.max(np.abs(a @ v - b))
    ):
        raise SingularKKTError("A must have full row rank")
    v_proj = v - a.T @ coeff
    resid = np.max(np.abs(a @ v_proj - b)) if b.size else 0.0
    # stationarity convention (v_proj - v) - A^T lam = 0, hence lam = -coeff
    return ProjectionResult(v_proj, 1, float(resid), -coeff)


def newton_project(v0, cs: ConstraintSet, tol: float = 1e-10, max_iters: int = 50, u=None) -> ProjectionResult:
    """Project v0 onto residual(v) = 0 by Newton iteration on the KKT system.

    Converged when both the constraint residual and the stationarity residual
    (v - v0) - J(v)^T lam fall below tol in the infinity norm.  A backtracking
    line search on the KKT residual norm keeps steps from overshooting; an
    already-feasible v0 returns unchanged after zero iterations.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    v0 = np.asarray(v0, dtype=np.float64)
    n = cs.n
    m = cs.n_constraints
    v = v0.copy()
    lam = np.zeros(m)

    def kkt_parts(v, lam):
        r = cs.residual(u, v)
        jac = cs.residual_jacobian(u, v)
        stat = (v - v0) - jac.T @ lam
        return r, jac, stat

    r, jac, stat = kkt_parts(v, lam)
    norm = max(np.max(np.abs(r)), np.max(np.abs(stat)))
    best = ProjectionResult(v.copy(), 0, float(np.max(np.abs(r))), lam.copy())
    if norm <= tol:
        return best

    for it in range(1, max_iters + 1):
        # d(stat)/dv picks up the constraint curvature where Hessians exist;
        # otherwise this is a Gauss-Newton step
        kmat = np.zeros((n + m, n + m))
        kmat[:n, :n] = np.eye(n) - cs.multiplier_hessian(u, v, lam)
        kmat[:n, n:] = -jac.T
        kmat[n:, :n] = jac
        step = _solve_regularized(kmat, -np.concatenate([stat, r]))
        dv, dlam = step[:n], step[n:]

        alpha = 1.0
        for _ in range(_MAX_BACKTRACKS):
            r_new, jac_new, stat_new = kkt_parts(v + alpha * dv, lam + alpha * dlam)
            norm_new = max(np.max(np.abs(r_new)), np.max(np.abs(stat_new)))
            if norm_new < norm:
                break
            alpha *= _BACKTRACK_FACTOR
        else:
            r_new, jac_new, stat_new = kkt_parts(v + alpha * dv, lam + alpha * dlam)
            norm_new = max(np.max(np.abs(r_new)), np.max(np.abs(stat_new)))

        v = v + alpha * dv
        lam = lam + alpha * dlam
        r, jac, stat, norm = r_new, jac_new, stat_new, norm_new
        if np.max(np.abs(r)) < best.final_residual_norm:
            best = ProjectionResult(v.copy(), it, float(np.max(np.abs(r))), lam.copy())
        if norm <= tol:
            return ProjectionResult(v.copy(), it, float(np.max(np.abs(r))), lam.copy())

    raise ProjectionNonConvergenceError(
        f"projection did not converge in {max_iters} iterations "
        f"(best residual {best.final_residual_norm:.3e})",
        best,
    )


def project(v, cs: ConstraintSet, tol: float = 1e-10, max_iters: int = 50, u=None) -> ProjectionResult:
    """Dispatch: closed form for purely linear sets, Newton otherwise."""
    if cs.has_linear_only:
        return linear_project(v, cs.a, cs.rhs_vector(u))
    return newton_project(v, cs, tol=tol, max_iters=max_iters, u=u)


def project_backward(result: ProjectionResult, cs: ConstraintSet, v0, upstream_grad, u=None) -> np.ndarray:
    """Gradient of a scalar loss with respect to v0, given its gradient at v_proj.

    Differentiates the KKT conditions implicitly: the projected point and the
    multipliers solve F(v, lam; v0) = 0, so dL/dv0 comes from one solve with
    the transposed KKT matrix evaluated at the solution.  For purely linear
    sets this reduces to applying I - A^T (AA^T)^-1 A to the upstream gradient.
    """
    v0 = np.asarray(v0, dtype=np.float64)
    g = np.asarray(upstream_grad, dtype=np.float64)
    n = cs.n
    m = cs.n_constraints
    jac = cs.residual_jacobian(u, result.v_proj)
    kmat = np.zeros((n + m, n + m))
    kmat[:n, :n] = np.eye(n) - cs.multiplier_hessian(u, result.v_proj, result.multipliers)
    kmat[:n, n:] = -jac.T
    kmat[n:, :n] = jac
    sol = _solve_regularized(kmat.T, np.concatenate([g, np.zeros(m)]))
    return sol[:n]
