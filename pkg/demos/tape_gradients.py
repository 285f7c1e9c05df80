"""Build a computation graph once, evaluate it many times, differentiate it.

The graph records every operation on a tape; backward() sweeps the tape in
reverse and returns gradients for all leaves at once.
"""

import numpy as np

from pcml.autodiff import ExprGraph, check_gradient_fd

g = ExprGraph()
w = g.leaf("w", (3, 2))
b = g.leaf("b", (3,))
x = g.leaf("x", (2,))

# loss = sum(tanh(Wx + b)^2)
h = g.tanh(g.add(g.matvec(w, x), b))
loss = g.sum(g.square(h))
g.output(loss)
print(f"tape holds {g.n_nodes} nodes for leaves {g.leaf_names}")

rng = np.random.default_rng(0)
values = {"w": rng.standard_normal((3, 2)), "b": rng.standard_normal(3),
          "x": np.array([0.3, -0.7])}

# same tape, different bindings
for scale in (1.0, 0.5):
    bound = {k: scale * v for k, v in values.items()}
    out = g.forward_eval(bound)[-1]
    grads = g.backward()
    print(f"scale {scale}: loss {float(out):.6f}  |dL/dw| {np.abs(grads['w']).max():.6f}")

report = check_gradient_fd(g, values)
print(f"finite-difference check: max relative error {report.max_rel_error:.2e}")
