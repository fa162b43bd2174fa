"""
Admin: profile, initialize, fold back
=====================================

One forward pass measures each branch's output variance. The shortcut scales
become ``omega_i = max(1, sqrt(sum_{j<i} Var[f_j]))``. After training, every
omega folds into the neighbouring layer norm, which leaves a plain Post-LN
network with identical outputs.
"""

import numpy as np

from tlab import autodiff as ad
from tlab.blocks import ModelConfig, model_forward
from tlab.init import build_admin_model, reparameterize
from tlab.trainer import OptimConfig, SyntheticTask, train

task = SyntheticTask(vocab=12, seed=4)
cfg = ModelConfig(variant="admin", n_enc=3, n_dec=3, d_model=32, n_heads=4, d_ff=64,
                  src_vocab=12, tgt_vocab=12, dropout=0.0)
model, profile = build_admin_model(cfg, task.batch(0))

# %%
print("encoder Var[f_i]:", np.round(profile.encoder_var_f, 3))
print("encoder omega_i :", np.round([s.omega.data[0] for s in model.encoder], 3))

# %%
# A few updates move gamma, nu and omega away from their initial values.
train(model, task, OptimConfig(lr_max=1e-3, warmup_steps=0), 30)
post = reparameterize(model)
b = task.batch(999)
with ad.no_tape():
    la, _ = model_forward(model, *b)
    lb, _ = model_forward(post, *b)
print(f"Admin loss {la.item():.12f}\nPost-LN   {lb.item():.12f}")
