"""Gated LoRA modules whose gates are sparsified by proximal steps, so adapter rank shrinks during training."""
from .kernels import BACKEND
from .core import (
    AdapterGrads,
    SoraAdapter,
    prox_gate_update,
    prox_objective,
    regularized_loss,
    soft_threshold,
    sora_backward,
    sora_forward,
)
from .baseline import LoraAdapter, lora_backward, lora_forward, orthogonality_penalty

__version__ = "0.1.0"
