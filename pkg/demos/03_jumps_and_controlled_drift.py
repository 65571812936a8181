# %% [markdown]
# # Jumps in the state and a controlled drift
#
# First a check that compensated jumps leave the mean of X unchanged, then two
# control problems where the finite-difference solver is the yardstick.

# %%
import numpy as np

from minbsde import (TimeGrid, fd_solve_hjb, fd_value_at, make_catalog_problem, make_fd_grid,
                     projection_backward_sweep, simulate_paths)
from minbsde.model import FiniteJumpMeasure, ModelSpec, RegimeSet

# no drift, no diffusion, jumps of +0.5 at rate 1
pure_jump = ModelSpec(1, 1.0, lambda x, a: np.zeros_like(x),
                      lambda x, a: np.zeros((x.shape[0], 1, 1)),
                      lambda x, a: x[:, 0].copy(),
                      big_jump_measure=FiniteJumpMeasure([[1.0]], [1.0]),
                      jump_coef=lambda x, a, mark: np.full_like(x, 0.5))
b = simulate_paths(pure_jump, RegimeSet([[0.0]], [1.0]), TimeGrid.uniform(1.0, 20), 1.0, 0,
                   50_000, seed=1)
xt = b.x[:, -1, 0]
print(f"mean X_T {xt.mean():.4f} +- {xt.std() / np.sqrt(xt.size):.4f} (start 1.0)")

# %% Controlled drift: the best constant control a = 1 gives x0 + T
model, regimes = make_catalog_problem("controlled_drift", {"M": 5})
sol = fd_solve_hjb(model, regimes, make_fd_grid(model, regimes, -6.0, 8.0, 200))
print(f"controlled drift, fd: {fd_value_at(sol, 0.0, 1.0):.4f}")

# %% Jump HJB with a driver coupled to the jump part of the solution
model, regimes = make_catalog_problem("jump_hjb", {"jump_coupling": 0.5})
sol = fd_solve_hjb(model, regimes, make_fd_grid(model, regimes, -3.0, 5.0, 200))
bundle = simulate_paths(model, regimes, TimeGrid.uniform(1.0, 50), 1.0, 1, 40_000, seed=2)
_, est = projection_backward_sweep(bundle, model, regimes)
print(f"jump HJB: fd {fd_value_at(sol, 0.0, 1.0):.4f}, projection {est.mean:.4f} +- "
      f"{est.stderr:.4f}")
