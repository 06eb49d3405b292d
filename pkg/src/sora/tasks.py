"""Synthetic tasks: planted low-rank regression and a two-class Gaussian-blob problem."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .baseline import LoraAdapter
from .core import SoraAdapter
from .errors import ValidationError
from .numerics import make_rng
from .trainer import Dataset, TinyModel

DEFAULT_FACTOR_SCALE = 0.3


@dataclass
class PlantedTask:
    p: int
    q: int
    true_rank: int
    w0: np.ndarray
    delta_star: np.ndarray
    train: Dataset
    eval: Dataset
    noise_sigma: float
    seed: int

    @property
    def noise_floor(self) -> float:
        """Eval MSE of the true map ``w0 + delta_star``, i.e. the realised noise power."""
        resid = kernels.matmul(self.w0 + self.delta_star, self.eval.x) - self.eval.y
        return float(np.mean(resid * resid))


@dataclass
class BlobTask:
    weights: list
    train: Dataset
    eval: Dataset
    seed: int


def _positive(name, val):
    if int(val) != val or val < 1:
        raise ValidationError(f"{name} must be a positive integer, got {val}")
    return int(val)


def gen_planted_task(p: int, q: int, true_rank: int, n_train: int, n_eval: int, noise_sigma: float,
                     seed: int, factor_scale: float = DEFAULT_FACTOR_SCALE) -> PlantedTask:
    """Targets ``y = (w0 + A B) x + noise`` with Gaussian factors ``A`` (p x r) and ``B`` (r x q).

    ``w0`` entries have variance ``1/q``; factor entries have standard deviation
    ``factor_scale``; inputs are standard normal.
    """
    p, q = _positive("p", p), _positive("q", q)
    n_train, n_eval = _positive("n_train", n_train), _positive("n_eval", n_eval)
    if int(true_rank) != true_rank or not 0 <= true_rank <= min(p, q):
        raise ValidationError(f"true_rank must lie in [0, {min(p, q)}], got {true_rank}")
    if not noise_sigma >= 0:
        raise ValidationError(f"noise_sigma must be nonnegative, got {noise_sigma}")
    true_rank = int(true_rank)
    rng = make_rng(seed)
    w0 = rng.standard_normal((p, q)) / np.sqrt(q)
    a = rng.standard_normal((p, true_rank)) * factor_scale
    b = rng.standard_normal((true_rank, q)) * factor_scale
    delta = kernels.matmul(a, b) if true_rank else np.zeros((p, q))
    full = w0 + delta
    x_tr = rng.standard_normal((q, n_train))
    x_ev = rng.standard_normal((q, n_eval))
    y_tr = kernels.matmul(full, x_tr)
    y_ev = kernels.matmul(full, x_ev)
    if noise_sigma > 0:
        y_tr = y_tr + noise_sigma * rng.standard_normal(y_tr.shape)
        y_ev = y_ev + noise_sigma * rng.standard_normal(y_ev.shape)
    return PlantedTask(p, q, true_rank, w0, delta, Dataset(x_tr, y_tr), Dataset(x_ev, y_ev),
                       float(noise_sigma), int(seed))


def gen_blob_task(dim: int, hidden: int, n_train: int, n_eval: int, separation: float, seed: int) -> BlobTask:
    """Balanced two-class blobs at ``+-separation/2`` along a random unit direction.

    Also draws the two frozen layer weights (``hidden x dim`` and ``hidden x hidden``).
    """
    dim, hidden = _positive("dim", dim), _positive("hidden", hidden)
    n_train, n_eval = _positive("n_train", n_train), _positive("n_eval", n_eval)
    rng = make_rng(seed)
    weights = [rng.standard_normal((hidden, dim)) / np.sqrt(dim),
               rng.standard_normal((hidden, hidden)) / np.sqrt(hidden)]
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)

    def draw(n):
        labels = np.arange(n) % 2
        x = rng.standard_normal((dim, n)) + np.outer(direction, (labels - 0.5) * separation)
        return Dataset(x, labels)

    return BlobTask(weights, draw(n_train), draw(n_eval), int(seed))


def build_model(task, r_max: int, seed: int = 0, adapter: str = "sora") -> TinyModel:
    """Fresh model for ``task`` with one adapter per frozen weight."""
    rng = make_rng([int(seed), 1])
    cls = SoraAdapter if adapter == "sora" else LoraAdapter
    if adapter not in ("sora", "lora"):
        raise ValidationError(f"adapter must be 'sora' or 'lora', got {adapter!r}")
    if isinstance(task, PlantedTask):
        return TinyModel([cls.init(task.w0, r_max, rng, (0, "dense"))], "regression")
    if isinstance(task, BlobTask):
        layers = [cls.init(w, r_max, rng, (i, "dense")) for i, w in enumerate(task.weights)]
        hidden = task.weights[-1].shape[0]
        head = rng.standard_normal((2, hidden)) / np.sqrt(hidden)
        return TinyModel(layers, "classification", head)
    raise ValidationError(f"unknown task type {type(task).__name__}")


def lora_twin(model: TinyModel) -> TinyModel:
    """Plain-LoRA copy of a gated model with identical matrices (gates dropped)."""
    layers = [LoraAdapter(l.w0, l.wd.copy(), l.wu.copy(), l.label) for l in model.layers]
    head: Optional[np.ndarray] = None if model.head is None else model.head.copy()
    return TinyModel(layers, model.task, head)
