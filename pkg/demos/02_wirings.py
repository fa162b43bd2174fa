"""
Four ways to wire a residual block
==================================

Post-LN normalizes after the residual add and Pre-LN inside the branch.
Admin scales the shortcut by omega before the add. The hybrid uses a Post-LN
encoder under a Pre-LN decoder.
"""

import numpy as np

from tlab.blocks import ModelConfig, model_forward
from tlab.init import build_admin_model, build_model
from tlab.trainer import SyntheticTask

task = SyntheticTask(vocab=12, min_len=8, max_len=8, batch_size=8)
batch = task.batch(0)

# %%
# Same sizes and seed for every variant. The trace stores the output ``x_i``,
# the branch output ``a_i`` and, outside Pre-LN, the pre-norm sum ``b_i``.
for variant in ("postln", "preln", "admin", "hybrid"):
    cfg = ModelConfig(variant=variant, n_enc=3, n_dec=3, d_model=32, n_heads=4, d_ff=64,
                      src_vocab=12, tgt_vocab=12, dropout=0.0)
    model = build_admin_model(cfg, batch)[0] if variant == "admin" else build_model(cfg)
    loss, (enc, dec) = model_forward(model, *batch)
    var_x = np.array([e.var_x for e in enc.sublayers])
    print(f"{variant:7s} loss {loss.item():.3f}  encoder Var[x_i]: {np.round(var_x, 2)}")

# %%
# Post-LN outputs sit at unit variance. Pre-LN outputs grow with depth because
# every branch adds to an un-normalized stream.
