"""
Adam evens out update sizes
===========================

Gradient norms of the attention matrices differ a lot. Query and key sit
behind the softmax and get small gradients. Adam rescales each coordinate,
so the per-epoch update norms come out much more uniform. Plain SGD keeps
the gradient spread as it is.
"""

import numpy as np

from tlab import diagnostics as dg
from tlab.blocks import ModelConfig
from tlab.init import build_model
from tlab.trainer import OptimConfig, OptimKind, SyntheticTask

task = SyntheticTask(vocab=12)
cfg = ModelConfig(variant="preln", n_enc=6, n_dec=1, d_model=32, n_heads=4, d_ff=64,
                  src_vocab=12, tgt_vocab=12, dropout=0.0)

# %%
for kind, lr, warmup in ((OptimKind.ADAM, 1e-3, 400), (OptimKind.SGD, 0.1, 0)):
    series = dg.balance_run(build_model(cfg), task, OptimConfig(kind=kind, lr_max=lr, warmup_steps=warmup), 3, 30)
    g, u = series.spreads()
    print(f"{kind.value}: gradient spread {np.round(g, 1)}, update spread {np.round(u, 1)}")
