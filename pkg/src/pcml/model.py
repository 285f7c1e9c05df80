"""Hybrid model structures coupling a learned map with a physics map.

Three coupling topologies are supported:

    ml_to_physics:   z = phi_ML(u)            y_hat = phi_P(u, z)
    physics_to_ml:   w = phi_P(u)             y_hat = w + phi_ML([u; w])
    bidirectional:   z = phi_ML([u; y_hat])   y_hat = phi_P(u, z)

The bidirectional pair is a simultaneous system solved by damped Picard
iteration.  All parameters live in one flat vector; ``ParameterLayout``
maps named tensors to slices of it, so the same vector drives numeric
prediction, tape emission for gradients, and the optimizers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Optional

import numpy as np

from .autodiff import ExprGraph, GraphError, Var, concat
from .physics import OdeBlowUpError

_EMPTY = np.zeros(0)


class Topology(Enum):
    ML_TO_P = "ml_to_physics"
    P_TO_ML = "physics_to_ml"
    BIDIRECTIONAL = "bidirectional"


class FixedPointError(RuntimeError):
    """Damped Picard iteration failed to converge; carries the final residual."""

    def __init__(self, message: str, residual: float, row: Optional[int] = None):
        super().__init__(message)
        self.residual = float(residual)
        self.row = row


@dataclass(frozen=True)
class ParameterLayout:
    """Mapping between named tensors and slices of one flat parameter vector."""

    names: tuple
    shapes: tuple
    offsets: tuple
    size: int

    @classmethod
    def build(cls, named_shapes) -> "ParameterLayout":
        names, shapes, offsets = [], [], []
        pos = 0
        for name, shape in named_shapes:
            if name in names:
                raise ValueError(f"duplicate tensor name {name!r}")
            shape = tuple(int(s) for s in shape)
            names.append(name)
            shapes.append(shape)
            offsets.append(pos)
            pos += int(np.prod(shape)) if shape else 1
        return cls(tuple(names), tuple(shapes), tuple(offsets), pos)

    def shape_of(self, name: str):
        return self.shapes[self.names.index(name)]

    def slice_of(self, name: str) -> slice:
        i = self.names.index(name)
        count = int(np.prod(self.shapes[i])) if self.shapes[i] else 1
        return slice(self.offsets[i], self.offsets[i] + count)

    def flatten(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        flat = np.zeros(self.size)
        for name in self.names:
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != self.shape_of(name):
                raise ValueError(f"{name} has shape {arr.shape}, layout expects {self.shape_of(name)}")
            flat[self.slice_of(name)] = arr.ravel()
        return flat

    def unflatten(self, flat: np.ndarray) -> dict:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError(f"parameter vector must have shape ({self.size},), got {flat.shape}")
        return {
            name: flat[self.slice_of(name)].reshape(self.shape_of(name)).copy() for name in self.names
        }

    def make_leaves(self, g: ExprGraph) -> dict:
        return {name: g.leaf(name, self.shape_of(name)) for name in self.names}

    def grad_vector(self, grads: Mapping[str, np.ndarray]) -> np.ndarray:
        """Assemble leaf gradients into a flat vector; absent names mean zero."""
        flat = np.zeros(self.size)
        for name, grad in grads.items():
            if name in self.names:
                flat[self.slice_of(name)] = np.asarray(grad, dtype=np.float64).ravel()
        return flat


class MLComponent:
    """Dense tanh network; hidden layers activated, final layer linear.

    ``layer_sizes`` runs input to output, so ``[3, 6, 3]`` is one hidden
    layer and ``[4, 3]`` is a plain affine map.  The component owns its
    tensor shapes and initializer but not the values; those live in the
    parameter vector under names ``{prefix}.w{i}`` / ``{prefix}.b{i}``.
    """

    def __init__(self, layer_sizes):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"layer_sizes needs at least [in, out], all positive, got {layer_sizes}")
        self.layer_sizes = sizes

    @property
    def param_count(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes, self.layer_sizes[1:]))

    def tensor_shapes(self, prefix: str = "ml"):
        shapes = []
        for i, (n_in, n_out) in enumerate(zip(self.layer_sizes, self.layer_sizes[1:])):
            shapes.append((f"{prefix}.w{i}", (n_out, n_in)))
            shapes.append((f"{prefix}.b{i}", (n_out,)))
        return shapes

    def init_arrays(self, rng: np.random.Generator, prefix: str = "ml") -> dict:
        """Glorot-uniform weights, zero biases; draws in layer order."""
        arrays = {}
        for i, (n_in, n_out) in enumerate(zip(self.layer_sizes, self.layer_sizes[1:])):
            limit = np.sqrt(6.0 / (n_in + n_out))
            arrays[f"{prefix}.w{i}"] = rng.uniform(-limit, limit, size=(n_out, n_in))
            arrays[f"{prefix}.b{i}"] = np.zeros(n_out)
        return arrays

    def emit(self, g: ExprGraph, x, params: Mapping[str, Var], prefix: str = "ml") -> Var:
        h = x
        last = len(self.layer_sizes) - 2
        for i in range(len(self.layer_sizes) - 1):
            h = g.add(params[f"{prefix}.w{i}"] @ h, params[f"{prefix}.b{i}"])
            if i < last:
                h = g.tanh(h)
        return h

    def apply(self, x: np.ndarray, arrays: Mapping[str, np.ndarray], prefix: str = "ml") -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        last = len(self.layer_sizes) - 2
        for i in range(len(self.layer_sizes) - 1):
            h = arrays[f"{prefix}.w{i}"] @ h + arrays[f"{prefix}.b{i}"]
            if i < last:
                h = np.tanh(h)
        return h


@dataclass(frozen=True)
class PhysicsComponent:
    """Parameterized algebraic map y_hat = map(u, z, theta_p).

    ``map`` must be written against the generic operations so the same
    definition evaluates on arrays and tape variables.  ``trainable_mask``
    marks which physics parameters the optimizers may touch; frozen entries
    pass through every trainer bit-unchanged.
    """

    map: Callable
    output_dim: int
    theta_nominal: np.ndarray = field(default_factory=lambda: _EMPTY)
    trainable_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "theta_nominal", np.asarray(self.theta_nominal, dtype=np.float64).ravel())
        mask = self.trainable_mask
        if mask is None:
            mask = np.ones(self.theta_nominal.size, dtype=bool)
        mask = np.asarray(mask, dtype=bool).ravel()
        if mask.size != self.theta_nominal.size:
            raise ValueError("trainable_mask length must match theta_nominal")
        object.__setattr__(self, "trainable_mask", mask)
        if self.output_dim <= 0:
            raise ValueError("output_dim must be positive")

    @property
    def n_params(self) -> int:
        return self.theta_nominal.size

    def tensor_shapes(self, prefix: str = "phys"):
        return [(f"{prefix}.theta", (self.n_params,))] if self.n_params else []


def identity_physics(dim: int) -> PhysicsComponent:
    """Pass-through physics: y_hat = z."""
    return PhysicsComponent(map=lambda u, z, theta: z, output_dim=dim)


@dataclass(frozen=True)
class FixedPointConfig:
    damping: float = 0.5
    tol: float = 1e-10
    max_iters: int = 500

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.tol <= 0 or self.max_iters < 1:
            raise ValueError("tol must be positive and max_iters at least 1")


@dataclass(frozen=True)
class Dataset:
    """Paired samples (u, y); rows are samples, all entries finite."""

    u: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u, dtype=np.float64))
        y = np.atleast_2d(np.asarray(self.y, dtype=np.float64))
        if u.shape[0] < 1:
            raise ValueError("dataset needs at least one sample")
        if u.shape[0] != y.shape[0]:
            raise ValueError(f"u has {u.shape[0]} rows but y has {y.shape[0]}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
            raise ValueError("dataset entries must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.u.shape[0]


def _as_var(g: ExprGraph, value) -> Var:
    return value if isinstance(value, Var) else g.constant(np.asarray(value, dtype=np.float64))


class PCMLModel:
    """A coupled (ML, physics) pair with a fixed topology.

    The model itself is immutable; parameters are supplied per call as a
    flat vector laid out by ``self.layout``.
    """

    def __init__(
        self,
        ml: MLComponent,
        physics: PhysicsComponent,
        topology: Topology,
        input_dim: int,
        fixed_point: Optional[FixedPointConfig] = None,
    ):
        self.ml = ml
        self.physics = physics
        self.topology = topology
        self.input_dim = int(input_dim)
        self.output_dim = physics.output_dim
        self.fixed_point = fixed_point or FixedPointConfig()

        ml_in = self.input_dim if topology is Topology.ML_TO_P else self.input_dim + self.output_dim
        if ml.layer_sizes[0] != ml_in:
            raise ValueError(
                f"{topology.value} needs ML input dim {ml_in}, got {ml.layer_sizes[0]}"
            )
        if topology is Topology.P_TO_ML and ml.layer_sizes[-1] != self.output_dim:
            raise ValueError(
                f"additive correction needs ML output dim {self.output_dim}, got {ml.layer_sizes[-1]}"
            )
        self.z_dim = self.output_dim if topology is Topology.P_TO_ML else ml.layer_sizes[-1]
        self.layout = ParameterLayout.build(ml.tensor_shapes("ml") + physics.tensor_shapes("phys"))

    @property
    def frozen_indices(self) -> np.ndarray:
        """Flat indices the trainers must not modify."""
        if self.physics.n_params == 0 or np.all(self.physics.trainable_mask):
            return np.zeros(0, dtype=int)
        sl = self.layout.slice_of("phys.theta")
        return np.arange(sl.start, sl.stop)[~self.physics.trainable_mask]

    def init_parameters(self, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        arrays = self.ml.init_arrays(rng, "ml")
        if self.physics.n_params:
            arrays["phys.theta"] = self.physics.theta_nominal.copy()
        return self.layout.flatten(arrays)

    def _theta_p(self, arrays):
        return arrays.get("phys.theta", _EMPTY)

    def _check_u(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64).ravel()
        if u.shape != (self.input_dim,):
            raise ValueError(f"input must have shape ({self.input_dim},), got {u.shape}")
        return u

    def forward(self, u, theta):
        """One sample through the topology; returns (y_hat, z)."""
        u = self._check_u(u)
        arrays = self.layout.unflatten(theta)
        theta_p = self._theta_p(arrays)
        if self.topology is Topology.ML_TO_P:
            z = self.ml.apply(u, arrays)
            y = np.asarray(self.physics.map(u, z, theta_p), dtype=np.float64)
        elif self.topology is Topology.P_TO_ML:
            w = np.asarray(self.physics.map(u, None, theta_p), dtype=np.float64)
            y = w + self.ml.apply(np.concatenate([u, w]), arrays)
            z = w
        else:
            y, z, _ = self._picard(u, arrays, theta_p)
        return y, z

    def _picard(self, u, arrays, theta_p, trace=None):
        fp = self.fixed_point
        z = np.zeros(self.z_dim)
        y = np.zeros(self.output_dim)
        resid = np.inf
        for _ in range(fp.max_iters):
            gz = self.ml.apply(np.concatenate([u, y]), arrays)
            gy = np.asarray(self.physics.map(u, z, theta_p), dtype=np.float64)
            resid = max(np.max(np.abs(gz - z)), np.max(np.abs(gy - y)))
            if trace is not None:
                trace.append(resid)
            if resid <= fp.tol:
                return y, z, resid
            z = z + fp.damping * (gz - z)
            y = y + fp.damping * (gy - y)
        raise FixedPointError(
            f"fixed point not reached in {fp.max_iters} iterations (residual {resid:.3e})", resid
        )

    def fixed_point_trace(self, u, theta) -> list:
        """Per-iteration residual norms of the Picard solve (diagnostics)."""
        if self.topology is not Topology.BIDIRECTIONAL:
            raise ValueError("fixed-point trace only applies to the bidirectional topology")
        u = self._check_u(u)
        arrays = self.layout.unflatten(theta)
        trace: list = []
        self._picard(u, arrays, self._theta_p(arrays), trace=trace)
        return trace

    def predict_batch(self, U, theta):
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        if U.shape[0] < 1:
            raise ValueError("predict_batch needs at least one row")
        Y = np.zeros((U.shape[0], self.output_dim))
        Z = np.zeros((U.shape[0], self.z_dim))
        for i, row in enumerate(U):
            try:
                Y[i], Z[i] = self.forward(row, theta)
            except FixedPointError as err:
                raise FixedPointError(f"sample {i}: {err}", err.residual, row=i) from err
        return Y, Z

    # -- tape emission -----------------------------------------------------
    def emit_forward(self, g: ExprGraph, u, leaves: Mapping[str, Var]):
        """Emit one sample's forward map; returns (y_var, z_var).

        Only the explicit topologies can be emitted directly; the
        bidirectional structure is implicit and goes through
        ``emit_structure`` around a numerically solved fixed point.
        """
        u = self._check_u(u)
        theta_p = leaves.get("phys.theta", _EMPTY)
        if self.topology is Topology.ML_TO_P:
            z = self.ml.emit(g, u, leaves)
            y = _as_var(g, self.physics.map(u, z, theta_p))
            return y, z
        if self.topology is Topology.P_TO_ML:
            w = self.physics.map(u, None, theta_p)
            corr = self.ml.emit(g, concat([u, w]) if isinstance(w, Var) else np.concatenate([u, w]), leaves)
            y = corr + w
            return y, _as_var(g, w)
        raise GraphError("bidirectional forward is implicit; emit_structure instead")

    def emit_structure(self, g: ExprGraph, u, leaves: Mapping[str, Var], z_in: Var, y_in: Var):
        """Emit one application of the coupled maps at given (z, y) nodes.

        Returns (z_out, y_out) = (phi_ML(u, y_in), phi_P(u, z_in)).  At a
        fixed point these reproduce their inputs; the trainers differentiate
        through the fixed point by seeding these nodes.
        """
        u = self._check_u(u)
        if self.topology is not Topology.BIDIRECTIONAL:
            raise GraphError("structure emission applies to the bidirectional topology")
        theta_p = leaves.get("phys.theta", _EMPTY)
        z_out = self.ml.emit(g, concat([g.constant(u), y_in]), leaves)
        y_out = _as_var(g, self.physics.map(u, z_in, theta_p))
        return z_out, y_out

    def emit_batch(self, g: ExprGraph, U, leaves: Mapping[str, Var]):
        """Emit a whole batch; returns parallel lists (y_vars, z_vars)."""
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        if U.shape[0] < 1:
            raise ValueError("emit_batch needs at least one row")
        y_vars, z_vars = [], []
        for row in U:
            y, z = self.emit_forward(g, row, leaves)
            y_vars.append(y)
            z_vars.append(z)
        return y_vars, z_vars


class NeuralODEModel:
    """Learned dynamics dx/dt = NN(x), integrated by RK4 from a fixed start.

    Inputs are observation times; the prediction at time t is the integrated
    state x(t).  Query times are merged into one knot grid and each gap is
    tiled with steps no longer than ``target_step``, so a single rollout
    serves every requested time.  Exposes the same protocol as
    :class:`PCMLModel` (explicit topology, so trainers can emit it).
    """

    topology = Topology.ML_TO_P

    def __init__(self, ml: MLComponent, x0, t0: float = 0.0, target_step: float = 0.05):
        state_dim = len(np.asarray(x0).ravel())
        if ml.layer_sizes[0] != state_dim or ml.layer_sizes[-1] != state_dim:
            raise ValueError(
                f"rhs network must map state to state (dim {state_dim}), got {ml.layer_sizes}"
            )
        if target_step <= 0:
            raise ValueError("target_step must be positive")
        self.ml = ml
        self.x0 = np.asarray(x0, dtype=np.float64).ravel()
        self.t0 = float(t0)
        self.target_step = float(target_step)
        self.input_dim = 1
        self.output_dim = state_dim
        self.z_dim = state_dim
        self.layout = ParameterLayout.build(ml.tensor_shapes("ml"))

    @property
    def frozen_indices(self) -> np.ndarray:
        return np.zeros(0, dtype=int)

    def init_parameters(self, seed) -> np.ndarray:
        return self.layout.flatten(self.ml.init_arrays(np.random.default_rng(seed), "ml"))

    def _knots(self, U):
        times = np.atleast_2d(np.asarray(U, dtype=np.float64))[:, 0]
        if np.any(times < self.t0 - 1e-12):
            raise ValueError(f"query times must not precede t0 = {self.t0}")
        knots = np.unique(np.concatenate([[self.t0], times]))
        return times, knots

    def _rollout(self, knots, step_fn, x):
        """Walk the knot grid; returns the state at every knot."""
        states = [x]
        for t_a, t_b in zip(knots, knots[1:]):
            gap = t_b - t_a
            n = max(1, int(np.ceil(gap / self.target_step - 1e-9)))
            h = gap / n
            for j in range(n):
                x = step_fn(t_a + j * h, x, h)
            states.append(x)
        return states

    def _rk4(self, f, t, x, h):
        k1 = f(x)
        k2 = f(x + k1 * (h / 2.0))
        k3 = f(x + k2 * (h / 2.0))
        k4 = f(x + k3 * h)
        return x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)

    def predict_batch(self, U, theta):
        times, knots = self._knots(U)
        arrays = self.layout.unflatten(theta)
        f = lambda x: self.ml.apply(x, arrays)
        with np.errstate(over="raise", invalid="raise"):
            try:
                states = self._rollout(knots, lambda t, x, h: self._rk4(f, t, x, h), self.x0.copy())
            except FloatingPointError as err:
                raise OdeBlowUpError(float(knots[-1])) from err
        by_knot = {t: s for t, s in zip(knots, states)}
        Y = np.vstack([by_knot[t] for t in times])
        return Y, Y.copy()

    def forward(self, u, theta):
        Y, Z = self.predict_batch(np.atleast_2d(u), theta)
        return Y[0], Z[0]

    def emit_batch(self, g: ExprGraph, U, leaves: Mapping[str, Var]):
        times, knots = self._knots(U)
        x = g.constant(self.x0)
        f = lambda x: self.ml.emit(g, x, leaves)
        states = self._rollout(knots, lambda t, x, h: self._rk4(f, t, x, h), x)
        by_knot = {t: s for t, s in zip(knots, states)}
        y_vars = [by_knot[t] for t in times]
        return y_vars, list(y_vars)
