"""Plain fixed-rank LoRA and the Gram-orthogonality penalty used as the extra-cost baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError, ValidationError
from .numerics import as_matrix, make_rng


@dataclass
class LoraAdapter:
    w0: np.ndarray
    wd: np.ndarray
    wu: np.ndarray
    label: tuple = (0, "dense")

    def __post_init__(self):
        self.w0 = as_matrix(self.w0, "w0")
        self.wd = as_matrix(self.wd, "wd")
        self.wu = as_matrix(self.wu, "wu")
        self.label = (int(self.label[0]), str(self.label[1]))
        p, q = self.w0.shape
        r = self.wd.shape[0]
        if self.wd.shape != (r, q) or self.wu.shape != (p, r):
            raise ShapeError(
                f"inconsistent adapter shapes: w0 {self.w0.shape}, wd {self.wd.shape}, wu {self.wu.shape}",
                self.w0.shape, self.wd.shape, self.wu.shape,
            )
        if r > min(p, q):
            raise ValidationError(f"rank {r} exceeds min(p, q) = {min(p, q)}")

    @classmethod
    def init(cls, w0, rank: int, rng=None, label=(0, "dense")) -> "LoraAdapter":
        w0 = as_matrix(w0, "w0")
        p, q = w0.shape
        if not 1 <= rank <= min(p, q):
            raise ValidationError(f"rank must lie in [1, {min(p, q)}], got {rank}")
        rng = make_rng(0) if rng is None else rng
        wd = rng.standard_normal((rank, q)) / np.sqrt(rank)
        return cls(w0, wd, np.zeros((p, rank)), label)

    @property
    def rank(self) -> int:
        return self.wd.shape[0]

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.w0, self.wd.copy(), self.wu.copy(), self.label)


def _check_input(adapter, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != adapter.w0.shape[1]:
        raise ShapeError(f"input must have {adapter.w0.shape[1]} rows, got {x.shape}", x.shape, adapter.w0.shape)
    return x


def lora_increment(adapter: LoraAdapter, x):
    """``(h, wu h)`` with ``h = wd x``; same product order as the gated path."""
    x = _check_input(adapter, x)
    h = kernels.matmul(adapter.wd, x)
    return h, kernels.matmul(adapter.wu, h)


def lora_forward(adapter: LoraAdapter, x) -> np.ndarray:
    """Full layer output ``w0 x + wu wd x``."""
    x = _check_input(adapter, x)
    _, z = lora_increment(adapter, x)
    return kernels.matmul(adapter.w0, x) + z


def lora_backward(adapter: LoraAdapter, x, h, grad_z):
    """Gradients of the increment: ``(d_wd, d_wu, grad_x)``."""
    x = _check_input(adapter, x)
    grad_z = np.asarray(grad_z, dtype=np.float64)
    if grad_z.shape != (adapter.w0.shape[0], x.shape[1]):
        raise ShapeError(f"grad_z has shape {grad_z.shape}", grad_z.shape, (adapter.w0.shape[0], x.shape[1]))
    gu = kernels.matmul_tn(adapter.wu, grad_z)
    d_wu = kernels.matmul_nt(grad_z, h)
    d_wd = kernels.matmul_nt(gu, x)
    grad_x = kernels.matmul_tn(adapter.wd, gu)
    return d_wd, d_wu, grad_x


def orthogonality_penalty(u, v):
    """``|u'u - I|_F^2 + |v'v - I|_F^2`` and its gradients with respect to ``u`` and ``v``.

    Each identity has the dimension of its own Gram matrix (the column count).
    """
    u = as_matrix(u, "u")
    v = as_matrix(v, "v")
    eu = kernels.matmul_tn(u, u) - np.eye(u.shape[1])
    ev = kernels.matmul_tn(v, v) - np.eye(v.shape[1])
    value = float(np.sum(eu * eu) + np.sum(ev * ev))
    return value, 4.0 * kernels.matmul(u, eu), 4.0 * kernels.matmul(v, ev)
