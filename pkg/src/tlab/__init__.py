"""Desk-scale Transformer stability lab: Post-LN, Pre-LN, Admin and hybrid wirings."""
from .autodiff import Tape, Tensor, backward, finite_diff_grad
from .blocks import ArchVariant, Model, ModelConfig, SubLayerKind, Wiring, model_forward
from .init import InitScheme, admin_initialize, admin_profile, build_admin_model, build_model, reparameterize
from .trainer import OptimConfig, SyntheticTask, train

__version__ = "0.1.0"
