"""
Where Post-LN gradients vanish
==============================

At initialization the decoder of a Post-LN model loses gradient variance at
each encoder-attention sub-layer. The encoder does not, and a Pre-LN decoder
does not either.
"""

import numpy as np

from tlab import diagnostics as dg
from tlab.blocks import ModelConfig
from tlab.init import build_model
from tlab.trainer import SyntheticTask

batch = SyntheticTask(vocab=12, min_len=16, max_len=16, batch_size=16).batch(1)

# %%
reports = {}
for variant in ("postln", "hybrid"):
    cfg = ModelConfig(variant=variant, n_enc=6, n_dec=6, d_model=64, n_heads=4, d_ff=256,
                      src_vocab=12, tgt_vocab=12, dropout=0.0)
    model = build_model(cfg)
    report = reports[variant] = dg.grad_histogram(model, batch)
    rows = dg.vanishing_check(model, batch, "decoder", report=report)
    crossings = [round(r.ratio, 2) for r in rows if r.kind == "enc_att"]
    print(f"{variant}: ratio across encoder attention {crossings}")
    print(f"{variant}: decoder variance decay top/bottom {dg.cumulative_decay(report):.1f}x")

# %%
# Post-LN decoder norms relative to the largest in the model, bottom to top.
rel = np.array([r.rel for r in reports["postln"].side("decoder")])
print(np.round(rel, 3))
