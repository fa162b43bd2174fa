"""
Initialization variances: closed form against sampling
======================================================

With unit-variance inputs, a residual feed-forward block has output variance
``1 + D * D_f * var_w1 * var_w2 / 2``. An attention block has
``1 + L * D^2 * P_h * var_v1 * var_v2``, where ``P_h`` is the mean squared
attention weight.
"""

from tlab import oracle

D, Df, H, L = 32, 128, 4, 16
xavier = 2.0 / (D + Df)

# %%
ffn = oracle.mc_ffn_variance(D, Df, xavier, xavier, samples=100_000)
print(f"FFN: closed form {ffn.closed_form:.4f}  sampled {ffn.monte_carlo:.4f}  rel {ffn.rel_error:.4f}")

# %%
# P_h has no closed form at a general initialization, so it is sampled too.
ph = oracle.estimate_Ph(D, H, L, 1 / D, 1 / D, samples=2000)
print(f"P_h = {ph:.5f}   (uniform attention would give {1 / L**2:.5f})")

att = oracle.mc_attention_variance(D, H, L, 1 / D, 1 / D, 1 / D, 1 / D, samples=100_000, ph_samples=2000)
print(f"attention: closed form {att.closed_form:.4f}  sampled {att.monte_carlo:.4f}  rel {att.rel_error:.4f}")

# %%
# Backpropagation through one Post-LN sub-layer: the ratio of input to output
# gradient variance stays near one, except through encoder attention, where the
# softmax blocks the direct path from the memory.
for kind in ("ffn", "self_att", "enc_att"):
    print(kind, round(oracle.backprop_ratio_check(kind, d=64, samples=16), 3))
