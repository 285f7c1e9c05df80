"""Physical knowledge carriers: constraint sets, ODE systems, RK4 integration.

Constraint sets define the feasibility manifold that projections and
penalties act on.  They stack an optional linear block ``A v = b`` (where
``b`` may depend on the model input, as in per-sample mass balances) with a
list of scalar nonlinear residuals that carry analytic Jacobian rows and,
optionally, Hessians (the Hessians let the Newton projector converge
quadratically; they are optional and everything falls back to a
Gauss-Newton KKT step without them).

The integrator is fixed-step classic RK4, rolled out either numerically or
into an :class:`~pcml.autodiff.ExprGraph` for discretize-then-optimize
training of neural differential models.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import ExprGraph

__all__ = [
    "ConstraintSet",
    "NonlinearConstraint",
    "ODESystem",
    "IntegratorConfig",
    "OdeBlowUpError",
    "integrate",
    "emit_trajectory",
    "make_species_balance",
    "sphere_constraint",
    "product_constraint",
]


class OdeBlowUpError(ArithmeticError):
    """Integration produced a non-finite state; carries the time stamp."""

    def __init__(self, t: float):
        super().__init__(f"ODE state became non-finite at t = {t:.6g}")
        self.t = t


@dataclass(frozen=True)
class NonlinearConstraint:
    """Scalar equality residual c(u, v) = 0 with analytic first derivatives.

    ``jac`` returns the gradient row with respect to v.  ``hess`` (optional)
    returns the n-by-n second-derivative matrix with respect to v.
    """

    fn: Callable
    jac: Callable
    hess: Optional[Callable] = None


class ConstraintSet:
    """Equality constraints defining the physics manifold for n variables.

    The stacked residual is ``[A v - b(u); c_1(u, v); ...]``.  The linear
    right-hand side may be a constant vector or a callable of the sample
    input u.  A must have full row rank and the total constraint count must
    stay below n, so the manifold is nontrivial.
    """

    def __init__(self, n: int, linear=None, nonlinear: Sequence[NonlinearConstraint] = (), name: str = ""):
        self.n = int(n)
        self.name = name
        self.nonlinear = tuple(nonlinear)
        if linear is not None:
            a, b = linear
            a = np.asarray(a, dtype=np.float64)
            if a.ndim != 2 or a.shape[1] != self.n:
                raise ValueError(f"A must be (m, {self.n}), got {a.shape}")
            if np.linalg.matrix_rank(a, tol=1e-10) < a.shape[0]:
                raise ValueError("linear constraint matrix A is rank deficient (tol 1e-10)")
            self.a = a
            self.b = b if callable(b) else np.asarray(b, dtype=np.float64)
            if not callable(self.b) and self.b.shape != (a.shape[0],):
                raise ValueError(f"b must have shape ({a.shape[0]},)")
        else:
            self.a = None
            self.b = None
        if self.n_constraints >= self.n:
            raise ValueError(
                f"{self.n_constraints} constraints on {self.n} variables leave no freedom; "
                "the manifold must be under-determined"
            )

    @property
    def n_constraints(self) -> int:
        m = 0 if self.a is None else self.a.shape[0]
        return m + len(self.nonlinear)

    @property
    def has_linear_only(self) -> bool:
        return self.a is not None and not self.nonlinear

    def rhs_vector(self, u) -> Optional[np.ndarray]:
        if self.a is None:
            return None
        return np.asarray(self.b(u), dtype=np.float64) if callable(self.b) else self.b

    def residual(self, u, v) -> np.ndarray:
        """Stacked equality residual; zero iff v lies on the manifold."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n,):
            raise ValueError(f"v must have shape ({self.n},), got {v.shape}")
        parts = []
        if self.a is not None:
            parts.append(self.a @ v - self.rhs_vector(u))
        for c in self.nonlinear:
            parts.append(np.atleast_1d(float(c.fn(u, v))))
        return np.concatenate(parts) if parts else np.zeros(0)

    def residual_jacobian(self, u, v) -> np.ndarray:
        """Stacked Jacobian [A; grad c_1; ...] with respect to v."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n,):
            raise ValueError(f"v must have shape ({self.n},), got {v.shape}")
        rows = []
        if self.a is not None:
            rows.append(self.a)
        for c in self.nonlinear:
            rows.append(np.asarray(c.jac(u, v), dtype=np.float64).reshape(1, self.n))
        return np.vstack(rows) if rows else np.zeros((0, self.n))

    def multiplier_hessian(self, u, v, lam) -> np.ndarray:
        """Sum of lam_j * hess(c_j); zero where Hessians are not provided."""
        h = np.zeros((self.n, self.n))
        m_lin = 0 if self.a is None else self.a.shape[0]
        for j, c in enumerate(self.nonlinear):
            if c.hess is not None:
                h += lam[m_lin + j] * np.asarray(c.hess(u, v), dtype=np.float64)
        return h

    def violation(self, u, v) -> float:
        """Infinity norm of the stacked residual."""
        r = self.residual(u, v)
        return float(np.max(np.abs(r))) if r.size else 0.0


def make_species_balance(initial_concentrations, stoichiometry=None) -> ConstraintSet:
    """Total-concentration conservation for a closed batch reaction network.

    Returns the linear constraint ``sum_i C_i = sum_i C_i(0)`` over predicted
    concentrations.  If a stoichiometry matrix (species x reactions) is
    given, each column must conserve total moles (sum to zero); otherwise
    the balance would not hold along trajectories.
    """
    c0 = np.asarray(initial_concentrations, dtype=np.float64)
    if stoichiometry is not None:
        s = np.asarray(stoichiometry, dtype=np.float64)
        col_sums = s.sum(axis=0)
        if np.any(np.abs(col_sums) > 1e-12):
            raise ValueError("stoichiometry does not conserve total moles")
    n = c0.size
    return ConstraintSet(
        n=n,
        linear=(np.ones((1, n)), np.array([float(c0.sum())])),
        name="total-concentration balance",
    )


def sphere_constraint(radius: float = 1.0, n: int = 2) -> NonlinearConstraint:
    """|v|^2 = radius^2 (the circle for n = 2)."""
    r2 = float(radius) ** 2
    return NonlinearConstraint(
        fn=lambda u, v: float(v @ v) - r2,
        jac=lambda u, v: 2.0 * v,
        hess=lambda u, v: 2.0 * np.eye(len(v)),
    )


def product_constraint(level: float = 1.0) -> NonlinearConstraint:
    """v1 * v2 = level (a hyperbola)."""
    return NonlinearConstraint(
        fn=lambda u, v: float(v[0] * v[1]) - float(level),
        jac=lambda u, v: np.array([v[1], v[0]]),
        hess=lambda u, v: np.array([[0.0, 1.0], [1.0, 0.0]]),
    )


@dataclass
class ODESystem:
    """First-order system dx/dt = f(t, x, theta) on a fixed horizon.

    ``rhs`` must be written against the generic array operations so that the
    same definition evaluates on plain numpy arrays and on tape variables
    (see :mod:`pcml.autodiff`): ``f(t, x, theta) -> dx`` where ``t`` is a
    float and ``x``/``theta`` are arrays or Vars.
    """

    state_dim: int
    rhs: Callable
    x0: np.ndarray
    t_span: tuple

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        if self.x0.shape != (self.state_dim,):
            raise ValueError(f"x0 must have shape ({self.state_dim},)")
        t0, tf = self.t_span
        if not tf > t0:
            raise ValueError("time horizon must satisfy t_f > t_0")


@dataclass
class IntegratorConfig:
    """Fixed-step RK4 settings.

    ``step * steps_per_interval`` must tile the horizon into a whole number
    of observation intervals; the trajectory is reported at the interval
    boundaries (including t0).
    """

    step: float
    steps_per_interval: int = 1
    method: str = "rk4"

    def __post_init__(self):
        if self.method != "rk4":
            raise ValueError("only the classic rk4 method is supported")
        if self.step <= 0 or self.steps_per_interval < 1:
            raise ValueError("step must be positive and steps_per_interval >= 1")

    def grid(self, t_span) -> tuple[np.ndarray, int]:
        """Observation times and step count per interval for a horizon."""
        t0, tf = t_span
        interval = self.step * self.steps_per_interval
        n_intervals = (tf - t0) / interval
        n_round = round(n_intervals)
        if n_round < 1 or abs(n_intervals - n_round) > 1e-9 * max(1.0, abs(n_round)):
            raise ValueError(
                f"step * steps_per_interval = {interval} does not tile the horizon {t_span} exactly"
            )
        times = t0 + interval * np.arange(n_round + 1)
        return times, self.steps_per_interval


def _rk4_step(rhs, t, x, theta, h):
    k1 = rhs(t, x, theta)
    k2 = rhs(t + 0.5 * h, x + k1 * (0.5 * h), theta)
    k3 = rhs(t + 0.5 * h, x + k2 * (0.5 * h), theta)
    k4 = rhs(t + h, x + k3 * h, theta)
    return x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)


def integrate(sys: ODESystem, cfg: IntegratorConfig, theta) -> tuple[np.ndarray, np.ndarray]:
    """Numeric RK4 rollout; returns (observation times, states matrix).

    The first row of the trajectory is x0.  Deterministic; raises
    :class:`OdeBlowUpError` with the offending time if the state leaves the
    finite range.
    """
    times, steps = cfg.grid(sys.t_span)
    x = sys.x0.copy()
    out = np.empty((times.size, sys.state_dim))
    out[0] = x
    h = cfg.step
    # blow-up surfaces as a typed error, so intermediate overflow is expected
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(times.size - 1):
            t = times[k]
            for j in range(steps):
                x = _rk4_step(sys.rhs, t + j * h, x, theta, h)
            if not np.all(np.isfinite(x)):
                raise OdeBlowUpError(times[k + 1])
            out[k + 1] = x
    return times, out


def emit_trajectory(g: ExprGraph, sys: ODESystem, cfg: IntegratorConfig, theta) -> tuple[np.ndarray, list]:
    """Unroll the RK4 recursion into a graph; returns (times, state Vars).

    ``theta`` is a Var (or anything the rhs accepts).  The first entry is
    the constant initial state, so gradients flow through every later
    observation back to theta.
    """
    times, steps = cfg.grid(sys.t_span)
    x = g.constant(sys.x0)
    states = [x]
    h = cfg.step
    for k in range(times.size - 1):
        t = times[k]
        for j in range(steps):
            x = _rk4_step(sys.rhs, t + j * h, x, theta, h)
        states.append(x)
    return times, states
