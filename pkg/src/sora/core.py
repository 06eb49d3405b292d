"""Gated low-rank adapter: forward/backward, soft-thresholding and the gate prox step."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NonFiniteError, ShapeError, ValidationError
from .numerics import as_matrix, as_vector, make_rng

DEFAULT_LAMBDA = 0.1


@dataclass
class SoraAdapter:
    """One gated low-rank module attached to a frozen ``p x q`` weight.

    ``w0`` is never written by this package. ``wd`` is ``r_max x q``, ``wu`` is
    ``p x r_max`` and ``gate`` has length ``r_max``; gate entries may be negative.
    """

    w0: np.ndarray
    wd: np.ndarray
    wu: np.ndarray
    gate: np.ndarray
    label: tuple = (0, "dense")

    def __post_init__(self):
        self.w0 = as_matrix(self.w0, "w0")
        self.wd = as_matrix(self.wd, "wd")
        self.wu = as_matrix(self.wu, "wu")
        self.gate = as_vector(self.gate, "gate")
        self.label = (int(self.label[0]), str(self.label[1]))
        p, q = self.w0.shape
        r = self.gate.shape[0]
        if self.wd.shape != (r, q) or self.wu.shape != (p, r):
            raise ShapeError(
                f"inconsistent adapter shapes: w0 {self.w0.shape}, wd {self.wd.shape}, "
                f"wu {self.wu.shape}, gate ({r},)",
                self.w0.shape, self.wd.shape, self.wu.shape,
            )

    @classmethod
    def init(cls, w0, r_max: int, rng=None, label=(0, "dense")) -> "SoraAdapter":
        """Fresh adapter: ``wd ~ N(0, 1/r_max)``, ``wu = 0`` and a unit gate."""
        w0 = as_matrix(w0, "w0")
        p, q = w0.shape
        if not 1 <= r_max <= min(p, q):
            raise ValidationError(f"r_max must lie in [1, {min(p, q)}], got {r_max}")
        rng = make_rng(0) if rng is None else rng
        wd = rng.standard_normal((r_max, q)) / np.sqrt(r_max)
        return cls(w0, wd, np.zeros((p, r_max)), np.ones(r_max), label)

    @property
    def r_max(self) -> int:
        return self.gate.shape[0]

    @property
    def shape(self):
        return self.w0.shape

    def delta(self) -> np.ndarray:
        """The dense increment ``wu @ diag(gate) @ wd``."""
        return kernels.matmul(self.wu * self.gate[None, :], self.wd)

    def copy(self) -> "SoraAdapter":
        return SoraAdapter(self.w0, self.wd.copy(), self.wu.copy(), self.gate.copy(), self.label)


@dataclass
class AdapterGrads:
    d_wd: np.ndarray
    d_wu: np.ndarray
    d_gate: np.ndarray


@dataclass
class ForwardCache:
    x: np.ndarray
    h: np.ndarray
    hp: np.ndarray
    adapter_id: int = field(default=0, repr=False)


def _check_input(adapter, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != adapter.wd.shape[1]:
        raise ShapeError(
            f"input must have {adapter.wd.shape[1]} rows (columns are samples), got {x.shape}",
            x.shape, adapter.wd.shape,
        )
    return x


def sora_forward(adapter: SoraAdapter, x):
    """Increment ``z = wu (gate * (wd x))`` for a batch of column vectors.

    The full layer output is ``w0 x + z``; only the increment is returned,
    together with the cache needed by :func:`sora_backward`.
    """
    x = _check_input(adapter, x)
    h, hp, z = kernels.gated_forward(adapter.wd, adapter.wu, adapter.gate, x)
    return z, ForwardCache(x, h, hp, id(adapter))


def sora_backward(adapter: SoraAdapter, x, cache: ForwardCache, grad_z):
    """Chain rule through the gated increment; gradients sum over batch columns."""
    x = _check_input(adapter, x)
    grad_z = np.asarray(grad_z, dtype=np.float64)
    if cache.h.shape != (adapter.r_max, x.shape[1]) or (cache.x is not x and cache.x.shape != x.shape):
        raise ShapeError("cache does not belong to this adapter/input", cache.h.shape, x.shape)
    if grad_z.shape != (adapter.wu.shape[0], x.shape[1]):
        raise ShapeError(f"grad_z has shape {grad_z.shape}, expected {(adapter.wu.shape[0], x.shape[1])}",
                         grad_z.shape)
    d_wd, d_wu, d_gate, grad_x = kernels.gated_backward(
        adapter.wd, adapter.wu, adapter.gate, x, cache.h, cache.hp, grad_z
    )
    return AdapterGrads(d_wd, d_wu, d_gate), grad_x


def soft_threshold(x, xi: float) -> np.ndarray:
    """Elementwise shrinkage: ``x - xi`` above ``xi``, ``x + xi`` at or below ``-xi``, else exactly 0."""
    xi = float(xi)
    if not xi >= 0:
        raise ValidationError(f"threshold must be nonnegative, got {xi}")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("soft_threshold input contains non-finite entries")
    return kernels.soft_threshold(x, xi)


def prox_gate_update(gate, d_gate, eta: float, lam: float) -> np.ndarray:
    """One proximal-gradient step for the gate: ``T_{eta*lam}(gate - eta*d_gate)``."""
    if not eta > 0:
        raise ValidationError(f"prox step must be positive, got {eta}")
    if not lam >= 0:
        raise ValidationError(f"regularisation strength must be nonnegative, got {lam}")
    gate = np.asarray(gate, dtype=np.float64)
    d_gate = np.asarray(d_gate, dtype=np.float64)
    if gate.shape != d_gate.shape:
        raise ShapeError(f"gate {gate.shape} and gradient {d_gate.shape} differ", gate.shape, d_gate.shape)
    if not (np.all(np.isfinite(gate)) and np.all(np.isfinite(d_gate))):
        raise NonFiniteError("gate or gate gradient is not finite")
    return kernels.prox_step(gate, d_gate, float(eta), float(lam))


def prox_objective(candidate, gate_prev, d_gate, eta: float, lam: float) -> float:
    """``eta*lam*|c|_1 + 0.5*|c - (gate_prev - eta*d_gate)|^2``, minimised by the prox step."""
    c = np.asarray(candidate, dtype=np.float64)
    g = np.asarray(gate_prev, dtype=np.float64)
    d = np.asarray(d_gate, dtype=np.float64)
    if not c.shape == g.shape == d.shape:
        raise ShapeError("candidate, gate and gradient lengths differ", c.shape, g.shape, d.shape)
    target = g - eta * d
    return float(eta * lam * np.abs(c).sum() + 0.5 * np.sum((c - target) ** 2))


def regularized_loss(loss0: float, gates, lam: float = DEFAULT_LAMBDA) -> float:
    """``loss0 + lam * sum_k |g_k|_1``."""
    loss0 = float(loss0)
    if not np.isfinite(loss0):
        raise NonFiniteError("base loss is not finite")
    return loss0 + lam * sum(float(np.abs(np.asarray(g, dtype=np.float64)).sum()) for g in gates)
