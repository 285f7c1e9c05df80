"""Reverse-mode automatic differentiation over dense vector/matrix expressions.

The engine is a Wengert tape: an :class:`ExprGraph` holds an append-only list
of operation records in topological order, each caching its value after a
forward pass.  Graphs are built once (symbolically, with named leaves) and
re-evaluated many times with different leaf bindings, which is what the
trainers rely on for full-batch epochs.

The op vocabulary is deliberately small: matrix-vector product, elementwise
add/sub/mul, scalar scale, tanh, softplus, square, sum, dot, and concat.
That covers shallow tanh networks, RK4 rollouts, and every constraint
residual used by the rest of the package.  Dense float64 storage only.

A graph instance is mutated during forward/backward and must stay on one
thread; distinct graphs are independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ExprGraph",
    "Var",
    "GraphError",
    "NumericOverflowError",
    "GradientCheckReport",
    "check_gradient_fd",
    "tanh",
    "softplus",
    "concat",
]


def tanh(x):
    """tanh that works on both tape variables and plain arrays."""
    return x.tanh() if isinstance(x, Var) else np.tanh(x)


def softplus(x):
    """softplus that works on both tape variables and plain arrays."""
    return x.softplus() if isinstance(x, Var) else np.logaddexp(0.0, x)


def concat(parts):
    """Vector concatenation that works on both tape variables and arrays."""
    if any(isinstance(p, Var) for p in parts):
        g = next(p.graph for p in parts if isinstance(p, Var))
        return g.concat([p if isinstance(p, Var) else g.constant(p) for p in parts])
    return np.concatenate([np.atleast_1d(p) for p in parts])


class GraphError(ValueError):
    """Malformed graph usage: shape mismatch, unbound leaf, stale backward."""


class NumericOverflowError(ArithmeticError):
    """A forward pass produced a non-finite intermediate value."""


@dataclass(frozen=True)
class Var:
    """Lightweight handle to a node in an :class:`ExprGraph`."""

    graph: "ExprGraph"
    index: int

    # keep numpy from consuming Var operands so reflected operators fire
    __array_ufunc__ = None

    @property
    def shape(self) -> tuple:
        return self.graph._shapes[self.index]

    @property
    def value(self) -> np.ndarray:
        return self.graph.value(self)

    # -- operator sugar (Var op Var, or Var op array/const) -----------------
    def __add__(self, other):
        return self.graph.add(self, self.graph._lift(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.sub(self, self.graph._lift(other, self.shape))

    def __rsub__(self, other):
        return self.graph.sub(self.graph._lift(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)) and not isinstance(other, bool):
            return self.graph.scale(float(other), self)
        return self.graph.mul(self, self.graph._lift(other, self.shape))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(-1.0, self)

    def __matmul__(self, other):
        return self.graph.matvec(self, self.graph._lift(other, None))

    def __rmatmul__(self, other):
        return self.graph.matvec(self.graph._lift(other, None), self)

    def tanh(self) -> "Var":
        return self.graph.tanh(self)

    def softplus(self) -> "Var":
        return self.graph.softplus(self)

    def square(self) -> "Var":
        return self.graph.square(self)

    def sum(self) -> "Var":
        return self.graph.sum(self)


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 2:
        raise GraphError(f"only scalars, vectors and matrices are supported, got shape {arr.shape}")
    return arr


class ExprGraph:
    """Append-only expression tape with cached values.

    Leaves are named placeholders bound at :meth:`forward_eval` time;
    constants are baked in at construction.  Every builder method performs
    shape inference immediately, so dimension mistakes fail at graph
    construction with the offending node named.
    """

    def __init__(self):
        self._ops: list[str] = []
        self._args: list[tuple[int, ...]] = []
        self._aux: list = []
        self._shapes: list[tuple] = []
        self._values: list = []
        self._labels: list = []
        self._leaf_index: dict[str, int] = {}
        self._outputs: list[int] = []
        self._evaluated = False

    # ------------------------------------------------------------------ build
    def _push(self, op: str, args: tuple[int, ...], shape: tuple, aux=None, label=None) -> Var:
        self._ops.append(op)
        self._args.append(args)
        self._aux.append(aux)
        self._shapes.append(shape)
        self._values.append(None)
        self._labels.append(label)
        self._evaluated = False
        return Var(self, len(self._ops) - 1)

    def _name(self, i: int) -> str:
        label = self._labels[i]
        tag = f" ({label!r})" if label else ""
        return f"node {i} [{self._ops[i]}]{tag}"

    def _lift(self, other, shape) -> Var:
        if isinstance(other, Var):
            if other.graph is not self:
                raise GraphError("cannot mix variables from different graphs")
            return other
        arr = _as_array(other)
        if arr.ndim == 0 and shape not in (None, ()):
            arr = np.full(shape, float(arr))
        return self.constant(arr)

    def leaf(self, name: str, shape) -> Var:
        """Named placeholder, bound per forward pass; gradients target leaves."""
        if name in self._leaf_index:
            raise GraphError(f"duplicate leaf name {name!r}")
        shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        v = self._push("leaf", (), shape, label=name)
        self._leaf_index[name] = v.index
        return v

    def constant(self, value) -> Var:
        arr = _as_array(value)
        v = self._push("const", (), arr.shape)
        self._values[v.index] = arr
        return v

    def matvec(self, m: Var, x: Var) -> Var:
        if len(m.shape) != 2 or len(x.shape) != 1:
            raise GraphError(f"matvec needs (matrix, vector), got shapes {m.shape} and {x.shape}")
        if m.shape[1] != x.shape[0]:
            raise GraphError(
                f"matvec inner dimensions disagree at {self._name(m.index)}: {m.shape} @ {x.shape}"
            )
        return self._push("matvec", (m.index, x.index), (m.shape[0],))

    def _binary(self, op: str, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise GraphError(
                f"{op} operands must share a shape, got {a.shape} at {self._name(a.index)} "
                f"and {b.shape} at {self._name(b.index)}"
            )
        return self._push(op, (a.index, b.index), a.shape)

    def add(self, a: Var, b: Var) -> Var:
        return self._binary("add", a, b)

    def sub(self, a: Var, b: Var) -> Var:
        return self._binary("sub", a, b)

    def mul(self, a: Var, b: Var) -> Var:
        return self._binary("mul", a, b)

    def scale(self, alpha: float, x: Var) -> Var:
        return self._push("scale", (x.index,), x.shape, aux=float(alpha))

    def tanh(self, x: Var) -> Var:
        return self._push("tanh", (x.index,), x.shape)

    def softplus(self, x: Var) -> Var:
        return self._push("softplus", (x.index,), x.shape)

    def square(self, x: Var) -> Var:
        return self._push("square", (x.index,), x.shape)

    def sum(self, x: Var) -> Var:
        return self._push("sum", (x.index,), ())

    def dot(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape or len(a.shape) != 1:
            raise GraphError(f"dot needs two equal-length vectors, got {a.shape} and {b.shape}")
        return self._push("dot", (a.index, b.index), ())

    def concat(self, parts: list[Var]) -> Var:
        if not parts:
            raise GraphError("concat of zero parts")
        for p in parts:
            if len(p.shape) != 1:
                raise GraphError(f"concat supports vectors only, got shape {p.shape}")
        n = sum(p.shape[0] for p in parts)
        return self._push("concat", tuple(p.index for p in parts), (n,))

    def output(self, v: Var) -> int:
        """Mark ``v`` as a graph output; returns its output index."""
        self._outputs.append(v.index)
        return len(self._outputs) - 1

    @property
    def n_nodes(self) -> int:
        return len(self._ops)

    @property
    def leaf_names(self) -> list[str]:
        return list(self._leaf_index)

    # ---------------------------------------------------------------- forward
    def forward_eval(self, leaf_values: dict) -> list[np.ndarray]:
        """Evaluate every node given ``{leaf name: array}`` bindings.

        Returns the output values in output order.  Deterministic for fixed
        inputs.  Raises :class:`NumericOverflowError` if any intermediate
        goes non-finite (overflow and invalid float operations are trapped
        at the op that produced them).
        """
        for name, idx in self._leaf_index.items():
            if name not in leaf_values:
                raise GraphError(f"leaf {name!r} is unbound")
            arr = np.asarray(leaf_values[name], dtype=np.float64)
            if arr.shape != self._shapes[idx]:
                raise GraphError(
                    f"leaf {name!r} expects shape {self._shapes[idx]}, got {arr.shape}"
                )
            self._values[idx] = arr

        ops, args, aux, values = self._ops, self._args, self._aux, self._values
        i = 0
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                for i in range(len(ops)):
                    op = ops[i]
                    if op == "leaf" or op == "const":
                        continue
                    a = args[i]
                    if op == "add":
                        values[i] = values[a[0]] + values[a[1]]
                    elif op == "sub":
                        values[i] = values[a[0]] - values[a[1]]
                    elif op == "mul":
                        values[i] = values[a[0]] * values[a[1]]
                    elif op == "matvec":
                        values[i] = values[a[0]] @ values[a[1]]
                    elif op == "scale":
                        values[i] = aux[i] * values[a[0]]
                    elif op == "tanh":
                        values[i] = np.tanh(values[a[0]])
                    elif op == "softplus":
                        values[i] = np.logaddexp(0.0, values[a[0]])
                    elif op == "square":
                        x = values[a[0]]
                        values[i] = x * x
                    elif op == "sum":
                        values[i] = np.sum(values[a[0]])
                    elif op == "dot":
                        values[i] = np.dot(values[a[0]], values[a[1]])
                    elif op == "concat":
                        values[i] = np.concatenate([values[j] for j in a])
                    else:  # pragma: no cover - op set is closed
                        raise GraphError(f"unknown op {op!r}")
        except FloatingPointError as exc:
            self._evaluated = False
            raise NumericOverflowError(
                f"non-finite value produced at {self._name(i)}: {exc}"
            ) from exc

        for oi in self._outputs:
            out = values[oi]
            if not np.all(np.isfinite(out)):
                self._evaluated = False
                raise NumericOverflowError(f"non-finite output at {self._name(oi)}")
        self._evaluated = True
        return [np.asarray(values[oi]) for oi in self._outputs]

    def value(self, v: Var) -> np.ndarray:
        val = self._values[v.index]
        if val is None:
            raise GraphError(f"{self._name(v.index)} has no cached value; run forward_eval first")
        return val

    # --------------------------------------------------------------- backward
    def backward(self, output: int = 0, seed=None) -> dict:
        """Gradient of ``seed . outputs[output]`` with respect to every leaf.

        ``seed`` defaults to ones of the output's shape (identity seed for a
        scalar output).  The result maps leaf name to an array shaped like
        the leaf.  Linear in the seed.
        """
        if not self._evaluated:
            raise GraphError("backward called on a stale graph; run forward_eval first")
        if not self._outputs:
            raise GraphError("graph has no outputs")
        oi = self._outputs[output]
        seed_arr = (
            np.ones(self._shapes[oi]) if seed is None else np.asarray(seed, dtype=np.float64)
        )
        if seed_arr.shape != self._shapes[oi]:
            raise GraphError(
                f"seed shape {seed_arr.shape} does not match output shape {self._shapes[oi]}"
            )
        return self.backward_from({oi: seed_arr})

    def backward_from(self, seeds: dict) -> dict:
        """Backward pass from arbitrary seed injections ``{node index or Var: array}``.

        Used by the trainers to splice analytic gradients (constraint
        penalties, projection backward passes) into the tape.
        """
        if not self._evaluated:
            raise GraphError("backward called on a stale graph; run forward_eval first")
        n = len(self._ops)
        adj: list = [None] * n
        for key, seed in seeds.items():
            idx = key.index if isinstance(key, Var) else int(key)
            arr = np.asarray(seed, dtype=np.float64)
            if arr.shape != self._shapes[idx]:
                raise GraphError(
                    f"seed shape {arr.shape} does not match {self._name(idx)} shape {self._shapes[idx]}"
                )
            adj[idx] = arr if adj[idx] is None else adj[idx] + arr

        ops, args, aux, values = self._ops, self._args, self._aux, self._values

        def _acc(j, g):
            adj[j] = g if adj[j] is None else adj[j] + g

        for i in range(n - 1, -1, -1):
            g = adj[i]
            if g is None:
                continue
            op = ops[i]
            if op == "leaf" or op == "const":
                continue
            a = args[i]
            if op == "add":
                _acc(a[0], g)
                _acc(a[1], g)
            elif op == "sub":
                _acc(a[0], g)
                _acc(a[1], -g)
            elif op == "mul":
                _acc(a[0], g * values[a[1]])
                _acc(a[1], g * values[a[0]])
            elif op == "matvec":
                _acc(a[0], np.outer(g, values[a[1]]))
                _acc(a[1], values[a[0]].T @ g)
            elif op == "scale":
                _acc(a[0], aux[i] * g)
            elif op == "tanh":
                _acc(a[0], g * (1.0 - values[i] * values[i]))
            elif op == "softplus":
                x = values[a[0]]
                _acc(a[0], g / (1.0 + np.exp(-x)))
            elif op == "square":
                _acc(a[0], 2.0 * g * values[a[0]])
            elif op == "sum":
                _acc(a[0], np.full(self._shapes[a[0]], float(g)))
            elif op == "dot":
                _acc(a[0], float(g) * values[a[1]])
                _acc(a[1], float(g) * values[a[0]])
            elif op == "concat":
                off = 0
                for j in a:
                    w = self._shapes[j][0]
                    _acc(j, g[off : off + w])
                    off += w

        out = {}
        for name, idx in self._leaf_index.items():
            gi = adj[idx]
            out[name] = np.zeros(self._shapes[idx]) if gi is None else gi
        return out


@dataclass
class GradientCheckReport:
    """Outcome of a finite-difference gradient verification."""

    max_rel_error: float
    per_leaf: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    passed: bool = True

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"gradient check {status}: max rel error {self.max_rel_error:.3e}"


def check_gradient_fd(
    graph: ExprGraph,
    leaf_values: dict,
    output: int = 0,
    h: float = 1e-6,
    tol: float = 1e-4,
    leaves=None,
) -> GradientCheckReport:
    """Compare ``backward`` against central finite differences, leaf by leaf.

    Comparison is relative, switching to absolute error when the analytic
    entry is below 1e-8 (relative error blows up near zero).  ``leaves``
    restricts the check to a subset of leaf names.
    """
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    outs = graph.forward_eval(leaf_values)
    if outs[output].shape != ():
        raise GraphError("check_gradient_fd expects a scalar output")
    analytic = graph.backward(output)
    names = list(leaf_values) if leaves is None else list(leaves)

    report = GradientCheckReport(max_rel_error=0.0)
    for name in names:
        base = np.asarray(leaf_values[name], dtype=np.float64)
        grad = analytic[name]
        fd = np.zeros_like(base)
        flat = base.reshape(-1)
        fd_flat = fd.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = float(graph.forward_eval(leaf_values)[output])
            flat[k] = orig - h
            down = float(graph.forward_eval(leaf_values)[output])
            flat[k] = orig
            fd_flat[k] = (up - down) / (2.0 * h)
        denom = np.abs(grad)
        err = np.abs(grad - fd)
        rel = np.where(denom < 1e-8, err, err / np.maximum(denom, 1e-300))
        worst = float(np.max(rel)) if rel.size else 0.0
        report.per_leaf[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
        if worst > tol:
            report.failures.append(name)
    # restore cached values for the unperturbed point
    graph.forward_eval(leaf_values)
    report.passed = not report.failures
    return report
