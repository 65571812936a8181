# %% [markdown]
# # Regression building blocks
#
# The backward sweeps reduce to repeated least-squares fits. Rank-deficient
# designs get the minimum-norm answer, which is what an SVD pseudo-inverse gives.

# %%
import numpy as np

from minbsde import BasisSpec, design_matrix, ls_fit, predict

rng = np.random.default_rng(0)
x = rng.uniform(-2, 2, 2000)
y = np.exp(x) + 0.1 * rng.normal(size=x.size)

for basis in (BasisSpec(degree=3), BasisSpec("piecewise_constant_bins", n_bins=12),
              BasisSpec("radial", n_centers=7)):
    basis = basis.with_box(x[:, None])
    fit = ls_fit(design_matrix(basis, x), y)
    err = np.abs(predict(fit, basis, x) - np.exp(x)).max()
    print(f"{basis.kind:24s} size {basis.size(1):2d}  max error {err:.3f}  "
          f"cond {fit.condition_estimate:.1e}")

# %% A duplicated column makes the design rank deficient
D = design_matrix(BasisSpec(degree=2), x)
D = np.column_stack([D, D[:, 1]])
c = ls_fit(D, y).coefficients
print("min-norm:", np.allclose(c, np.linalg.pinv(D) @ y, atol=1e-8), np.round(c, 4))
