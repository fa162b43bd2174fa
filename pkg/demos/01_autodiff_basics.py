"""
Tape-based reverse mode on numpy arrays
=======================================

Every op records a closure on the active tape. ``backward`` walks the tape
once in reverse, and a finite-difference helper checks the result.
"""

import numpy as np

from tlab import autodiff as ad

# %%
# A tiny two-layer computation. Gradients only flow into tensors created with
# ``requires_grad=True``.
rng = np.random.default_rng(0)
x = ad.Tensor(rng.standard_normal((4, 3)))
w = ad.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
gamma = ad.Tensor(np.ones(2), requires_grad=True)
nu = ad.Tensor(np.zeros(2), requires_grad=True)

with ad.Tape():
    h = ad.layer_norm(ad.relu(ad.matmul(x, w)), gamma, nu)
    loss = ad.cross_entropy(h, np.array([0, 1, 1, 0]))
    ad.backward(loss)

print("loss", loss.item())
print("dL/dw\n", w.grad)

# %%
# Central differences agree with the analytic gradient to about 1e-10.
num = ad.finite_diff_grad(
    lambda _: ad.cross_entropy(ad.layer_norm(ad.relu(ad.matmul(x, w)), gamma, nu), np.array([0, 1, 1, 0])), w)
print("relative error", ad.rel_error(w.grad, num))

# %%
# The packaged suite runs the same check for every op, plus a whole model.
from tlab.gradcheck import run_suite

results = run_suite(seeds=range(2), include_model=False)
print(f"{sum(r.ok for r in results)}/{len(results)} op checks pass; "
      f"worst {max(r.rel_error for r in results):.1e}")
