"""Project points onto linear and nonlinear constraint manifolds."""

import numpy as np

from pcml.physics import ConstraintSet, product_constraint, sphere_constraint
from pcml.project import linear_project, newton_project

# nearest point on the plane x + y + z = 3
res = linear_project([1.0, 0.0, 0.0], [[1.0, 1.0, 1.0]], [3.0])
print("plane:     ", np.round(res.v_proj, 6))

# two linear constraints at once
a = [[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]]
res = linear_project([0.0, 0.0, 0.0], a, [1.0, 1.0])
print("two planes:", np.round(res.v_proj, 6), " residual", np.abs(np.array(a) @ res.v_proj - 1.0).max())

# unit circle, radial projection
circle = ConstraintSet(2, nonlinear=[sphere_constraint(1.0)])
res = newton_project([2.0, 1.0], circle)
print("circle:    ", np.round(res.v_proj, 6), f" |v|={np.linalg.norm(res.v_proj):.12f}",
      f" iterations={res.iterations}")

# hyperbola xy = 1
hyper = ConstraintSet(2, nonlinear=[product_constraint(1.0)])
res = newton_project([2.5, 0.2], hyper)
print("hyperbola: ", np.round(res.v_proj, 6), f" x*y={res.v_proj[0] * res.v_proj[1]:.12f}")

# projecting the projection moves nothing
twice = newton_project(res.v_proj, hyper)
print("idempotent:", f"drift={np.max(np.abs(twice.v_proj - res.v_proj)):.2e}",
      f" iterations={twice.iterations}")

# mixed set: circle in 3-space, sphere cut by the plane z = 0.2
mixed = ConstraintSet(
    3,
    linear=(np.array([[0.0, 0.0, 1.0]]), np.array([0.2])),
    nonlinear=[sphere_constraint(1.0, 3)],
)
res = newton_project([1.5, 1.5, 1.5], mixed)
print("mixed:     ", np.round(res.v_proj, 6), f" residual={res.final_residual_norm:.2e}")
