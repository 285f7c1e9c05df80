"""Training regimes for hybrid models.

Three modes share one first-order optimizer (Adam, full batch):

    soft:               minimize lambda_d * L_data + lambda_p * L_physics
    hard_sequential:    project every prediction onto the constraint
                        manifold inside the forward pass; gradients flow
                        through the projection's implicit derivative
    hard_simultaneous:  augmented Lagrangian over per-sample equality
                        constraints; the optimizer, not a projection step,
                        enforces feasibility

Losses and constraint terms are evaluated in plain numpy; the model
structure lives on an expression tape built once per run, and gradient
seeds are spliced into it, so each epoch costs one forward and one
backward sweep.  For the bidirectional topology the structure equations
are implicit: soft mode differentiates through the solved fixed point by
an adjoint solve, and simultaneous mode introduces per-sample auxiliary
variables so everything becomes explicit.

``training_objective`` and ``training_gradient`` expose the exact value
and derivative each mode optimizes, so they can be finite-difference
checked without rerunning a training loop.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import ExprGraph
from .model import Dataset, FixedPointError, ParameterLayout, Topology
from .physics import ConstraintSet
from .project import ProjectionNonConvergenceError, project, project_backward

_MODES = ("soft", "hard_sequential", "hard_simultaneous")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the epoch index."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class ProjectionTrainingError(RuntimeError):
    """A per-sample projection failed during training."""

    def __init__(self, message: str, epoch: int, sample: int):
        super().__init__(message)
        self.epoch = epoch
        self.sample = sample


class SimultaneousStallError(RuntimeError):
    """Outer augmented-Lagrangian loop stopped making progress."""

    def __init__(self, message: str, report: "TrainReport", violations):
        super().__init__(message)
        self.report = report
        self.violations = list(violations)


@dataclass(frozen=True)
class AugmentedLagrangianConfig:
    initial_penalty: float = 10.0
    penalty_growth: float = 10.0
    shrink_ratio: float = 0.25
    outer_iters: int = 15
    stall_window: int = 3
    stall_ratio: float = 0.5

    def __post_init__(self):
        if self.initial_penalty <= 0 or self.penalty_growth <= 1.0:
            raise ValueError("penalty must be positive and growth factor > 1")
        if not 0.0 < self.shrink_ratio < 1.0 or not 0.0 < self.stall_ratio < 1.0:
            raise ValueError("shrink and stall ratios must lie in (0, 1)")
        if self.outer_iters < 1 or self.stall_window < 1:
            raise ValueError("outer_iters and stall_window must be at least 1")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "soft"
    data_weight: float = 1.0
    physics_weight: float = 1.0
    learning_rate: float = 0.01
    max_epochs: int = 500
    tol: float = 1e-12
    seed: int = 0
    projection_tol: float = 1e-10
    constraint_tol: float = 1e-6
    al: AugmentedLagrangianConfig = field(default_factory=AugmentedLagrangianConfig)
    z_bounds: Optional[tuple] = None

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.data_weight < 0 or self.physics_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.data_weight + self.physics_weight <= 0:
            raise ValueError("at least one of data_weight, physics_weight must be positive")
        if self.tol <= 0 or self.projection_tol <= 0 or self.constraint_tol <= 0:
            raise ValueError("all tolerances must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n: int, lr: float) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0, lr=float(lr))


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One Adam update with bias correction; mutates the moment state."""
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise ValueError("theta, grad and optimizer state must share a shape")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainReport:
    """Per-epoch loss trajectory plus the final parameters.

    Each row holds the losses at the parameters entering that epoch; the
    reported total is always data_weight * data + physics_weight * physics,
    even in simultaneous mode where the optimizer works on an augmented
    objective.
    """

    mode: str
    data_loss: list
    physics_loss: list
    total_loss: list
    max_violation: list
    theta: np.ndarray
    wall_time: float
    termination: str
    outer_violations: Optional[list] = None

    @property
    def epochs(self) -> int:
        return len(self.total_loss)

    def to_csv_text(self) -> str:
        lines = ["epoch,data_loss,physics_loss,total_loss,max_violation"]
        for k in range(self.epochs):
            lines.append(
                f"{k},{float(self.data_loss[k])!r},{float(self.physics_loss[k])!r},"
                f"{float(self.total_loss[k])!r},{float(self.max_violation[k])!r}"
            )
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "epochs": self.epochs,
            "termination": self.termination,
            "wall_time_s": float(self.wall_time),
            "final_data_loss": float(self.data_loss[-1]),
            "final_physics_loss": float(self.physics_loss[-1]),
            "final_total_loss": float(self.total_loss[-1]),
            "final_max_violation": float(self.max_violation[-1]),
        }


def data_loss(model, dataset: Dataset, theta) -> float:
    """Sum of squared errors of the raw model predictions."""
    Y, _ = model.predict_batch(dataset.u, theta)
    return float(np.sum((Y - dataset.y) ** 2))


def physics_loss(model, dataset: Dataset, theta, cs: ConstraintSet) -> float:
    """Sum of squared constraint residuals of the raw (unprojected) predictions."""
    if cs.n != model.output_dim:
        raise ValueError(f"constraint set acts on dim {cs.n}, model outputs dim {model.output_dim}")
    Y, _ = model.predict_batch(dataset.u, theta)
    return float(sum(cs.residual(u, y) @ cs.residual(u, y) for u, y in zip(dataset.u, Y)))


def _residual_rows(cs: Optional[ConstraintSet], U, Y):
    if cs is None:
        return [np.zeros(0) for _ in range(len(Y))]
    return [cs.residual(u, y) for u, y in zip(U, Y)]


def _max_violation(residuals) -> float:
    worst = 0.0
    for r in residuals:
        if r.size:
            worst = max(worst, float(np.max(np.abs(r))))
    return worst


def _check_setup(model, dataset: Dataset, cs: Optional[ConstraintSet]):
    if dataset.u.shape[1] != model.input_dim:
        raise ValueError(f"dataset inputs have dim {dataset.u.shape[1]}, model expects {model.input_dim}")
    if dataset.y.shape[1] != model.output_dim:
        raise ValueError(f"dataset outputs have dim {dataset.y.shape[1]}, model outputs {model.output_dim}")
    if cs is not None and cs.n != model.output_dim:
        raise ValueError(f"constraint set acts on dim {cs.n}, model outputs dim {model.output_dim}")


def _bounds_penalty_and_seed(z: np.ndarray, bounds, rho: float):
    lo, hi = bounds
    below = np.maximum(0.0, np.asarray(lo, dtype=np.float64) - z)
    above = np.maximum(0.0, z - np.asarray(hi, dtype=np.float64))
    value = 0.5 * rho * float(np.sum(below**2) + np.sum(above**2))
    seed = rho * (above - below)
    return value, seed


@dataclass
class _EpochEval:
    """One objective evaluation: reportable pieces plus the step direction."""

    data: float
    physics: float
    total: float
    violation: float
    objective: float
    grad: np.ndarray


class _ExplicitEngine:
    """Tape-based evaluation for models whose forward map is explicit.

    The expression graph is built once; each evaluation rebinds the
    parameter leaves, reads predictions off the tape and splices analytic
    seeds back into it.
    """

    def __init__(self, model, dataset: Dataset, cs: Optional[ConstraintSet], cfg: TrainConfig):
        self.model = model
        self.dataset = dataset
        self.cs = cs
        self.cfg = cfg
        self.graph = ExprGraph()
        self.leaves = model.layout.make_leaves(self.graph)
        self.y_vars, self.z_vars = model.emit_batch(self.graph, dataset.u, self.leaves)

    def forward(self, theta) -> np.ndarray:
        self.graph.forward_eval(self.model.layout.unflatten(theta))
        return np.vstack([self.graph.value(v) for v in self.y_vars])

    def grad_from_seeds(self, seeds_per_sample, zseeds_per_sample=None) -> np.ndarray:
        seeds = {}
        for var, s in zip(self.y_vars, seeds_per_sample):
            seeds[var] = seeds.get(var, 0.0) + s
        if zseeds_per_sample is not None:
            for var, s in zip(self.z_vars, zseeds_per_sample):
                seeds[var] = seeds.get(var, 0.0) + s
        grads = self.graph.backward_from(seeds)
        return self.model.layout.grad_vector(grads)

    def z_values(self):
        return [self.graph.value(v) for v in self.z_vars]

    def evaluate_soft(self, theta, epoch: int) -> _EpochEval:
        cfg, cs, U, Yd = self.cfg, self.cs, self.dataset.u, self.dataset.y
        Y = self.forward(theta)
        residuals = _residual_rows(cs, U, Y)
        L_d = float(np.sum((Y - Yd) ** 2))
        L_p = float(sum(r @ r for r in residuals))
        total = cfg.data_weight * L_d + cfg.physics_weight * L_p
        seeds = []
        for i in range(self.dataset.n):
            s = 2.0 * cfg.data_weight * (Y[i] - Yd[i])
            if residuals[i].size and cfg.physics_weight > 0:
                jac = cs.residual_jacobian(U[i], Y[i])
                s = s + 2.0 * cfg.physics_weight * (jac.T @ residuals[i])
            seeds.append(s)
        return _EpochEval(L_d, L_p, total, _max_violation(residuals), total, self.grad_from_seeds(seeds))

    def evaluate_sequential(self, theta, epoch: int) -> _EpochEval:
        cfg, cs, U, Yd = self.cfg, self.cs, self.dataset.u, self.dataset.y
        Y_raw = self.forward(theta)
        proj = []
        for i in range(self.dataset.n):
            try:
                proj.append(project(Y_raw[i], cs, tol=cfg.projection_tol, u=U[i]))
            except ProjectionNonConvergenceError as err:
                raise ProjectionTrainingError(
                    f"projection failed at epoch {epoch}, sample {i}: {err}", epoch, i
                ) from err
        Y_proj = np.vstack([p.v_proj for p in proj])
        raw_residuals = _residual_rows(cs, U, Y_raw)
        L_d = float(np.sum((Y_proj - Yd) ** 2))
        L_p = float(sum(r @ r for r in raw_residuals))
        total = cfg.data_weight * L_d + cfg.physics_weight * L_p
        viol = _max_violation(_residual_rows(cs, U, Y_proj))
        seeds = []
        for i in range(self.dataset.n):
            h = 2.0 * cfg.data_weight * (Y_proj[i] - Yd[i])
            s = project_backward(proj[i], cs, Y_raw[i], h, u=U[i])
            if cfg.physics_weight > 0:
                jac = cs.residual_jacobian(U[i], Y_raw[i])
                s = s + 2.0 * cfg.physics_weight * (jac.T @ raw_residuals[i])
            seeds.append(s)
        return _EpochEval(L_d, L_p, total, viol, total, self.grad_from_seeds(seeds))

    def evaluate_al(self, theta, epoch: int, lam, rho: float) -> _EpochEval:
        cfg, cs, U, Yd = self.cfg, self.cs, self.dataset.u, self.dataset.y
        Y = self.forward(theta)
        residuals = _residual_rows(cs, U, Y)
        L_d = float(np.sum((Y - Yd) ** 2))
        L_p = float(sum(r @ r for r in residuals))
        total = cfg.data_weight * L_d + cfg.physics_weight * L_p
        objective = total + sum(
            float(l @ r) + 0.5 * rho * float(r @ r) for l, r in zip(lam, residuals)
        )
        seeds = []
        for i in range(self.dataset.n):
            s = 2.0 * cfg.data_weight * (Y[i] - Yd[i])
            if residuals[i].size:
                jac = cs.residual_jacobian(U[i], Y[i])
                s = s + jac.T @ (
                    2.0 * cfg.physics_weight * residuals[i] + lam[i] + rho * residuals[i]
                )
            seeds.append(s)
        zseeds = None
        if cfg.z_bounds is not None:
            zseeds = []
            for z in self.z_values():
                pen, zs = _bounds_penalty_and_seed(z, cfg.z_bounds, rho)
                objective += pen
                zseeds.append(zs)
        grad = self.grad_from_seeds(seeds, zseeds)
        return _EpochEval(L_d, L_p, total, _max_violation(residuals), objective, grad)

    def residuals_at(self, theta):
        Y = self.forward(theta)
        return _residual_rows(self.cs, self.dataset.u, Y)


class _BidirectionalAdjoint:
    """Exact soft-mode gradients through the solved fixed point.

    Per sample, one structure graph holds z_out = phi_ML(u, y) and
    y_out = phi_P(u, z) with (z, y) as rebindable leaves.  After solving
    the fixed point numerically, upstream gradients are pulled through the
    implicit function theorem: solve the transposed coupling system, then
    seed both structure outputs.
    """

    def __init__(self, model, dataset: Dataset, cs: Optional[ConstraintSet], cfg: TrainConfig):
        self.model = model
        self.dataset = dataset
        self.cs = cs
        self.cfg = cfg
        self.graphs = []
        for u in dataset.u:
            g = ExprGraph()
            leaves = model.layout.make_leaves(g)
            z_in = g.leaf("z_in", (model.z_dim,))
            y_in = g.leaf("y_in", (model.output_dim,))
            z_out, y_out = model.emit_structure(g, u, leaves, z_in, y_in)
            self.graphs.append((g, z_out, y_out))

    def evaluate_soft(self, theta, epoch: int) -> _EpochEval:
        cfg, cs, U, Yd = self.cfg, self.cs, self.dataset.u, self.dataset.y
        try:
            Y, Z = self.model.predict_batch(U, theta)
        except FixedPointError as err:
            raise DivergenceError(f"fixed point failed at epoch {epoch}: {err}", epoch) from err
        residuals = _residual_rows(cs, U, Y)
        L_d = float(np.sum((Y - Yd) ** 2))
        L_p = float(sum(r @ r for r in residuals))
        total = cfg.data_weight * L_d + cfg.physics_weight * L_p

        arrays = self.model.layout.unflatten(theta)
        nz, ny = self.model.z_dim, self.model.output_dim
        grad = np.zeros(self.model.layout.size)
        for i, (g, z_out, y_out) in enumerate(self.graphs):
            gy = 2.0 * cfg.data_weight * (Y[i] - Yd[i])
            if residuals[i].size and cfg.physics_weight > 0:
                jac = cs.residual_jacobian(U[i], Y[i])
                gy = gy + 2.0 * cfg.physics_weight * (jac.T @ residuals[i])
            g.forward_eval(dict(arrays, z_in=Z[i], y_in=Y[i]))
            # coupling Jacobian blocks, one basis backward pass per row
            a = np.zeros((nz, ny))
            for k in range(nz):
                seed = np.zeros(nz)
                seed[k] = 1.0
                a[k] = g.backward_from({z_out: seed}).get("y_in", np.zeros(ny))
            b = np.zeros((ny, nz))
            for k in range(ny):
                seed = np.zeros(ny)
                seed[k] = 1.0
                b[k] = g.backward_from({y_out: seed}).get("z_in", np.zeros(nz))
            kmat = np.eye(nz + ny)
            kmat[:nz, nz:] = -a
            kmat[nz:, :nz] = -b
            w = np.linalg.solve(kmat.T, np.concatenate([np.zeros(nz), gy]))
            grads = g.backward_from({z_out: w[:nz], y_out: w[nz:]})
            grad += self.model.layout.grad_vector(grads)
        return _EpochEval(L_d, L_p, total, _max_violation(residuals), total, grad)


class _AuxALEngine:
    """Aux-variable augmented Lagrangian for the bidirectional topology.

    The unknown vector extends theta with per-sample (z_i, y_i); the
    structure equations become explicit equality constraints
    z_i = phi_ML(u_i, y_i) and y_i = phi_P(u_i, z_i), alongside the physics
    constraints on y_i.
    """

    def __init__(self, model, dataset: Dataset, cs: Optional[ConstraintSet], cfg: TrainConfig):
        self.model = model
        self.dataset = dataset
        self.cs = cs
        self.cfg = cfg
        n, nz, ny = dataset.n, model.z_dim, model.output_dim
        self.n, self.nz, self.ny = n, nz, ny
        self.m_phys = cs.n_constraints if cs is not None else 0
        aux = []
        for i in range(n):
            aux.append((f"aux.z{i}", (nz,)))
            aux.append((f"aux.y{i}", (ny,)))
        self.layout = ParameterLayout.build(list(zip(model.layout.names, model.layout.shapes)) + aux)
        self.graph = ExprGraph()
        self.leaves = self.layout.make_leaves(self.graph)
        self.outs = [
            model.emit_structure(
                self.graph, u, self.leaves, self.leaves[f"aux.z{i}"], self.leaves[f"aux.y{i}"]
            )
            for i, u in enumerate(dataset.u)
        ]

    def init_ext(self, theta0: np.ndarray) -> np.ndarray:
        """Warm start: aux outputs at the observations, aux z one map application away."""
        arrays0 = self.model.layout.unflatten(theta0)
        ext = np.zeros(self.layout.size)
        ext[: self.model.layout.size] = theta0
        for i in range(self.n):
            y_init = self.dataset.y[i]
            ext[self.layout.slice_of(f"aux.z{i}")] = self.model.ml.apply(
                np.concatenate([self.dataset.u[i], y_init]), arrays0
            )
            ext[self.layout.slice_of(f"aux.y{i}")] = y_init
        return ext

    def theta_of(self, ext: np.ndarray) -> np.ndarray:
        return ext[: self.model.layout.size].copy()

    def _state(self, ext):
        bindings = self.layout.unflatten(ext)
        self.graph.forward_eval(bindings)
        Z = np.vstack([bindings[f"aux.z{i}"] for i in range(self.n)])
        Y = np.vstack([bindings[f"aux.y{i}"] for i in range(self.n)])
        cz = [Z[i] - self.graph.value(self.outs[i][0]) for i in range(self.n)]
        cy = [Y[i] - self.graph.value(self.outs[i][1]) for i in range(self.n)]
        cp = _residual_rows(self.cs, self.dataset.u, Y)
        return Z, Y, cz, cy, cp

    def constraint_state(self, ext):
        Z, Y, cz, cy, cp = self._state(ext)
        return cz, cy, cp

    def evaluate(self, ext, epoch: int, lam_z, lam_y, lam_p, rho: float) -> _EpochEval:
        cfg, U, Yd = self.cfg, self.dataset.u, self.dataset.y
        Z, Y, cz, cy, cp = self._state(ext)
        L_d = float(np.sum((Y - Yd) ** 2))
        L_p = float(sum(r @ r for r in cp))
        total = cfg.data_weight * L_d + cfg.physics_weight * L_p
        objective = total
        for i in range(self.n):
            for l, c in ((lam_z[i], cz[i]), (lam_y[i], cy[i]), (lam_p[i], cp[i])):
                objective += float(l @ c) + 0.5 * rho * float(c @ c)
        viol = max(_max_violation(cz), _max_violation(cy), _max_violation(cp))

        # tape seeds: constraint terms reach theta (and the aux leaves)
        # only through the emitted structure outputs
        seeds = {}
        for i in range(self.n):
            seeds[self.outs[i][0]] = -(lam_z[i] + rho * cz[i])
            seeds[self.outs[i][1]] = -(lam_y[i] + rho * cy[i])
        grad = self.layout.grad_vector(self.graph.backward_from(seeds))
        for i in range(self.n):
            gz = lam_z[i] + rho * cz[i]
            gy = 2.0 * cfg.data_weight * (Y[i] - Yd[i]) + (lam_y[i] + rho * cy[i])
            if self.m_phys:
                jac = self.cs.residual_jacobian(U[i], Y[i])
                gy = gy + jac.T @ (2.0 * cfg.physics_weight * cp[i] + lam_p[i] + rho * cp[i])
            if cfg.z_bounds is not None:
                pen, zs = _bounds_penalty_and_seed(Z[i], cfg.z_bounds, rho)
                objective += pen
                gz = gz + zs
            grad[self.layout.slice_of(f"aux.z{i}")] += gz
            grad[self.layout.slice_of(f"aux.y{i}")] += gy
        return _EpochEval(L_d, L_p, total, viol, objective, grad)


def training_objective(model, dataset: Dataset, cs, cfg: TrainConfig, theta, lam=None, rho=None) -> float:
    """The scalar each mode's optimizer sees at ``theta``.

    For hard_simultaneous this is the augmented Lagrangian at multipliers
    ``lam`` (default zero) and penalty ``rho`` (default the initial one);
    for the other modes it is the weighted loss.
    """
    return _value_and_grad(model, dataset, cs, cfg, theta, lam, rho).objective


def training_gradient(model, dataset: Dataset, cs, cfg: TrainConfig, theta, lam=None, rho=None) -> np.ndarray:
    """Exact gradient of :func:`training_objective` with respect to ``theta``."""
    return _value_and_grad(model, dataset, cs, cfg, theta, lam, rho).grad


def _value_and_grad(model, dataset, cs, cfg, theta, lam, rho) -> _EpochEval:
    _check_setup(model, dataset, cs)
    bidirectional = getattr(model, "topology", None) is Topology.BIDIRECTIONAL
    if cfg.mode == "soft":
        engine = (
            _BidirectionalAdjoint(model, dataset, cs, cfg)
            if bidirectional
            else _ExplicitEngine(model, dataset, cs, cfg)
        )
        return engine.evaluate_soft(np.asarray(theta, dtype=np.float64), 0)
    if cfg.mode == "hard_sequential":
        _require_sequential_support(model, cs)
        engine = _ExplicitEngine(model, dataset, cs, cfg)
        return engine.evaluate_sequential(np.asarray(theta, dtype=np.float64), 0)
    if bidirectional:
        raise ValueError(
            "the bidirectional augmented Lagrangian works on the extended "
            "(theta, aux) vector; use its engine directly"
        )
    m = cs.n_constraints if cs is not None else 0
    if lam is None:
        lam = [np.zeros(m) for _ in range(dataset.n)]
    if rho is None:
        rho = cfg.al.initial_penalty
    engine = _ExplicitEngine(model, dataset, cs, cfg)
    return engine.evaluate_al(np.asarray(theta, dtype=np.float64), 0, lam, float(rho))


def _require_sequential_support(model, cs):
    if cs is None:
        raise ValueError("hard_sequential requires a constraint set")
    if getattr(model, "topology", None) is not Topology.ML_TO_P:
        raise ValueError("sequential projection supports the ml_to_physics topology only")


class _Recorder:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.rows = ([], [], [], [])
        self.t_start = time.perf_counter()

    def record(self, ev: _EpochEval):
        self.rows[0].append(ev.data)
        self.rows[1].append(ev.physics)
        self.rows[2].append(ev.total)
        self.rows[3].append(ev.violation)

    def finish(self, mode, theta, termination, outer_violations=None) -> TrainReport:
        return TrainReport(
            mode=mode,
            data_loss=self.rows[0],
            physics_loss=self.rows[1],
            total_loss=self.rows[2],
            max_violation=self.rows[3],
            theta=theta,
            wall_time=time.perf_counter() - self.t_start,
            termination=termination,
            outer_violations=outer_violations,
        )


def _descend(theta, frozen, cfg, evaluate, recorder) -> tuple:
    """Run Adam until the objective change drops below tol or the budget ends.

    Returns (theta, converged, decreased): whether the loss-change tol was
    hit, and whether the objective went down over the whole stretch.  Each
    recorded row reflects the parameters entering that epoch; frozen
    coordinates are pinned bitwise.
    """
    adam = AdamState.init(theta.size, cfg.learning_rate)
    prev_obj = first_obj = last_obj = None
    for epoch in range(cfg.max_epochs):
        ev = evaluate(theta, epoch)
        recorder.record(ev)
        if not np.isfinite(ev.objective):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch)
        if first_obj is None:
            first_obj = ev.objective
        last_obj = ev.objective
        if prev_obj is not None and abs(ev.objective - prev_obj) <= cfg.tol:
            return theta, True, last_obj < first_obj
        prev_obj = ev.objective
        grad = ev.grad
        grad[frozen] = 0.0
        theta_new = adam_step(adam, theta, grad)
        if frozen.size:
            theta_new[frozen] = theta[frozen]
        theta = theta_new
    return theta, False, last_obj < first_obj


def train_soft(model, dataset: Dataset, cs: Optional[ConstraintSet], cfg: TrainConfig) -> TrainReport:
    """Penalty-based training: Adam on lambda_d * L_data + lambda_p * L_physics."""
    if cfg.mode != "soft":
        raise ValueError(f"config mode is {cfg.mode!r}, expected 'soft'")
    _check_setup(model, dataset, cs)
    recorder = _Recorder(cfg)
    theta = model.init_parameters(cfg.seed)
    engine = (
        _BidirectionalAdjoint(model, dataset, cs, cfg)
        if getattr(model, "topology", None) is Topology.BIDIRECTIONAL
        else _ExplicitEngine(model, dataset, cs, cfg)
    )
    theta, converged, _ = _descend(theta, model.frozen_indices, cfg, engine.evaluate_soft, recorder)
    return recorder.finish("soft", theta, "loss_converged" if converged else "max_epochs")


def train_hard_sequential(model, dataset: Dataset, cs: ConstraintSet, cfg: TrainConfig) -> TrainReport:
    """Projected training: every prediction is projected onto the manifold.

    The data loss acts on projected predictions, so the reported violation
    sits at the projection tolerance from the very first epoch.  The
    physics penalty (if weighted) still acts on raw predictions and keeps
    them near the manifold.
    """
    if cfg.mode != "hard_sequential":
        raise ValueError(f"config mode is {cfg.mode!r}, expected 'hard_sequential'")
    _require_sequential_support(model, cs)
    _check_setup(model, dataset, cs)
    recorder = _Recorder(cfg)
    theta = model.init_parameters(cfg.seed)
    engine = _ExplicitEngine(model, dataset, cs, cfg)
    theta, converged, _ = _descend(theta, model.frozen_indices, cfg, engine.evaluate_sequential, recorder)
    return recorder.finish("hard_sequential", theta, "loss_converged" if converged else "max_epochs")


def _stalled(violations, al: AugmentedLagrangianConfig) -> bool:
    """No real progress: the best recent violation has not halved the best earlier one.

    Comparing bests rather than raw endpoints keeps a transient bounce
    (an undersolved inner problem after a penalty jump) from being read
    as a stall.
    """
    if len(violations) < al.stall_window + 1:
        return False
    recent = min(violations[-al.stall_window :])
    earlier = min(violations[: -al.stall_window])
    return recent > al.stall_ratio * earlier


def train_hard_simultaneous(model, dataset: Dataset, cs: Optional[ConstraintSet], cfg: TrainConfig) -> TrainReport:
    """All-at-once training by the augmented Lagrangian method.

    Multipliers follow the classic update lam <- lam + rho * c after each
    inner minimization; the penalty grows whenever an outer iteration fails
    to cut the violation by the configured ratio.  The outer loop ends when
    every per-sample residual is inside constraint_tol, and raises
    :class:`SimultaneousStallError` when several consecutive outer
    iterations fail to make real progress.
    """
    if cfg.mode != "hard_simultaneous":
        raise ValueError(f"config mode is {cfg.mode!r}, expected 'hard_simultaneous'")
    _check_setup(model, dataset, cs)
    if getattr(model, "topology", None) is Topology.BIDIRECTIONAL:
        return _simultaneous_aux(model, dataset, cs, cfg)
    return _simultaneous_reduced(model, dataset, cs, cfg)


def _simultaneous_reduced(model, dataset, cs, cfg) -> TrainReport:
    recorder = _Recorder(cfg)
    theta = model.init_parameters(cfg.seed)
    engine = _ExplicitEngine(model, dataset, cs, cfg)
    m = cs.n_constraints if cs is not None else 0
    lam = [np.zeros(m) for _ in range(dataset.n)]
    rho = cfg.al.initial_penalty
    violations = []

    for outer in range(cfg.al.outer_iters):
        theta, _, decreased = _descend(
            theta,
            model.frozen_indices,
            cfg,
            lambda th, ep: engine.evaluate_al(th, ep, lam, rho),
            recorder,
        )
        residuals = engine.residuals_at(theta)
        violation = _max_violation(residuals)
        violations.append(violation)
        if violation <= cfg.constraint_tol:
            return recorder.finish("hard_simultaneous", theta, "constraints_satisfied", violations)
        if _stalled(violations, cfg.al):
            report = recorder.finish("hard_simultaneous", theta, "stalled", violations)
            raise SimultaneousStallError(
                f"violation stuck at {violation:.3e} after {outer + 1} outer iterations "
                f"(rho {rho:.1e})",
                report,
                violations,
            )
        for i in range(dataset.n):
            lam[i] = lam[i] + rho * residuals[i]
        # grow the penalty only when the inner solve coped with the current
        # one; a diverging subproblem would only get stiffer
        if (
            len(violations) > 1
            and violation > cfg.al.shrink_ratio * violations[-2]
            and decreased
        ):
            rho *= cfg.al.penalty_growth
    return recorder.finish("hard_simultaneous", theta, "outer_iters_exhausted", violations)


def _simultaneous_aux(model, dataset, cs, cfg) -> TrainReport:
    recorder = _Recorder(cfg)
    engine = _AuxALEngine(model, dataset, cs, cfg)
    ext = engine.init_ext(model.init_parameters(cfg.seed))
    lam_z = [np.zeros(engine.nz) for _ in range(engine.n)]
    lam_y = [np.zeros(engine.ny) for _ in range(engine.n)]
    lam_p = [np.zeros(engine.m_phys) for _ in range(engine.n)]
    rho = cfg.al.initial_penalty
    violations = []

    for outer in range(cfg.al.outer_iters):
        ext, _, decreased = _descend(
            ext,
            model.frozen_indices,
            cfg,
            lambda e, ep: engine.evaluate(e, ep, lam_z, lam_y, lam_p, rho),
            recorder,
        )
        cz, cy, cp = engine.constraint_state(ext)
        violation = max(_max_violation(cz), _max_violation(cy), _max_violation(cp))
        violations.append(violation)
        if violation <= cfg.constraint_tol:
            return recorder.finish("hard_simultaneous", engine.theta_of(ext), "constraints_satisfied", violations)
        if _stalled(violations, cfg.al):
            report = recorder.finish("hard_simultaneous", engine.theta_of(ext), "stalled", violations)
            raise SimultaneousStallError(
                f"violation stuck at {violation:.3e} after {outer + 1} outer iterations "
                f"(rho {rho:.1e})",
                report,
                violations,
            )
        for i in range(engine.n):
            lam_z[i] = lam_z[i] + rho * cz[i]
            lam_y[i] = lam_y[i] + rho * cy[i]
            if engine.m_phys:
                lam_p[i] = lam_p[i] + rho * cp[i]
        # grow the penalty only when the inner solve coped with the current
        # one; a diverging subproblem would only get stiffer
        if (
            len(violations) > 1
            and violation > cfg.al.shrink_ratio * violations[-2]
            and decreased
        ):
            rho *= cfg.al.penalty_growth
    return recorder.finish("hard_simultaneous", engine.theta_of(ext), "outer_iters_exhausted", violations)


def train(model, dataset: Dataset, cs: Optional[ConstraintSet], cfg: TrainConfig) -> TrainReport:
    """Dispatch on cfg.mode."""
    if cfg.mode == "soft":
        return train_soft(model, dataset, cs, cfg)
    if cfg.mode == "hard_sequential":
        return train_hard_sequential(model, dataset, cs, cfg)
    return train_hard_simultaneous(model, dataset, cs, cfg)


@dataclass(frozen=True)
class Predictor:
    """Deployable prediction pipeline: a model plus its enforcement mode.

    Hard modes project every prediction onto the constraint manifold, so
    feasibility at unseen inputs is structural rather than learned; soft
    mode returns raw predictions.
    """

    model: object
    mode: str = "soft"
    cs: Optional[ConstraintSet] = None
    projection_tol: float = 1e-10

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.mode != "soft" and self.cs is None:
            raise ValueError("hard modes need a constraint set to project onto")

    def predict(self, U, theta) -> np.ndarray:
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        Y, _ = self.model.predict_batch(U, theta)
        if self.mode == "soft":
            return Y
        out = np.empty_like(Y)
        for i, (u, y) in enumerate(zip(U, Y)):
            out[i] = project(y, self.cs, tol=self.projection_tol, u=u).v_proj
        return out
