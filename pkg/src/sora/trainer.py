"""Training loop for small models built from frozen layers with gated (or plain) low-rank adapters.

Adapter matrices and the optional head are updated by SGD or Adam at
``learning_rate``. Every unfrozen gate gets a proximal step
``T_{eta_t*lam}(g - eta_t*grad_g)``, which is the only update gates see.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import kernels
from .baseline import LoraAdapter, lora_backward, lora_increment, orthogonality_penalty
from .core import DEFAULT_LAMBDA, SoraAdapter, prox_gate_update, regularized_loss, sora_backward, sora_forward
from .errors import ShapeError, TrainingError, ValidationError
from .numerics import make_rng

OPTIMIZERS = ("adaptive-moment", "plain-sgd")
TASKS = ("regression", "classification")
CONVERGENCE_RTOL = 1e-4
CONVERGENCE_PATIENCE = 3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_ETA = 0.1


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    The gate threshold ``xi`` equals ``eta_t * lam``. Give either the pair, or
    ``xi`` alone (then ``lam`` stays at 0.1 and ``eta_t = xi / lam``), or ``xi``
    with one of the two. Passing all three requires them to agree.
    """

    learning_rate: float = 8e-4
    lam: Optional[float] = None
    eta_t: Optional[float] = None
    xi: Optional[float] = None
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adaptive-moment"
    freeze_gates: bool = False
    r_max: int = 8
    weight_decay: float = 0.1
    orth_penalty: float = 0.0

    def __post_init__(self):
        lam, eta, xi = self.lam, self.eta_t, self.xi
        for name, val in (("lam", lam), ("eta_t", eta), ("xi", xi)):
            if val is not None and not (math.isfinite(val) and val >= 0):
                raise ValidationError(f"{name} must be a finite nonnegative number, got {val}")
        if xi is None:
            lam = DEFAULT_LAMBDA if lam is None else float(lam)
            eta = DEFAULT_ETA if eta is None else float(eta)
            xi = eta * lam
        elif xi == 0.0 and lam is None:
            lam, eta = 0.0, DEFAULT_ETA if eta is None else float(eta)
        elif lam is None and eta is None:
            lam = DEFAULT_LAMBDA
            eta = xi / lam
        elif eta is None:
            if lam == 0:
                raise ValidationError("cannot derive eta_t from xi when lam is 0")
            eta = xi / lam
        elif lam is None:
            lam = xi / eta if eta > 0 else 0.0
        elif not math.isclose(xi, eta * lam, rel_tol=1e-9, abs_tol=1e-300):
            raise ValidationError(f"xi={xi} disagrees with eta_t*lam={eta * lam}")
        self.lam, self.eta_t, self.xi = float(lam), float(eta), float(xi)

        if not self.eta_t > 0:
            raise ValidationError(f"eta_t must be positive, got {self.eta_t}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ValidationError(f"epochs must be a nonnegative integer, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValidationError(f"batch_size must be a positive integer, got {self.batch_size}")
        if int(self.r_max) != self.r_max or self.r_max < 1:
            raise ValidationError(f"r_max must be a positive integer, got {self.r_max}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        for name in ("weight_decay", "orth_penalty"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val >= 0):
                raise ValidationError(f"{name} must be nonnegative, got {val}")
        self.epochs, self.batch_size, self.r_max = int(self.epochs), int(self.batch_size), int(self.r_max)
        self.seed = int(self.seed)
        self.freeze_gates = bool(self.freeze_gates)

    def with_xi(self, xi: float) -> "TrainConfig":
        """Same config at threshold ``xi``; ``lam`` is kept and ``eta_t`` rescaled.

        ``xi = 0`` keeps ``eta_t`` and sets ``lam`` to 0 instead.
        """
        if xi == 0:
            return replace(self, xi=0.0, lam=0.0)
        if self.lam > 0:
            return replace(self, xi=float(xi), eta_t=None)
        return replace(self, xi=float(xi), lam=None, eta_t=None)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    """Columns of ``x`` are samples. ``y`` is a target matrix or a vector of integer labels."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y)
        if self.x.ndim != 2 or self.x.shape[1] < 1:
            raise ShapeError(f"x must be a nonempty 2-D array, got {self.x.shape}", self.x.shape)
        if self.y.shape[-1] != self.x.shape[1]:
            raise ShapeError("x and y disagree on sample count", self.x.shape, self.y.shape)

    @property
    def n(self) -> int:
        return self.x.shape[1]

    def take(self, idx) -> "Dataset":
        return Dataset(self.x[:, idx], self.y[..., idx])


@dataclass
class TinyModel:
    """Chain of frozen layers, each carrying one adapter.

    Without a head the last layer is linear and its output is the prediction.
    With a head every layer is followed by ``tanh`` and ``head`` maps the last
    activation to logits.
    """

    layers: list
    task: str = "regression"
    head: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValidationError(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.layers:
            raise ValidationError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.w0.shape[0] != nxt.w0.shape[1]:
                raise ShapeError("layer shapes do not chain", prev.w0.shape, nxt.w0.shape)
        if self.head is not None:
            self.head = np.asarray(self.head, dtype=np.float64)
            if self.head.ndim != 2 or self.head.shape[1] != self.layers[-1].w0.shape[0]:
                raise ShapeError("head does not match last layer", self.head.shape, self.layers[-1].w0.shape)
        if self.task == "classification" and self.head is None:
            raise ValidationError("classification models need a head")

    @property
    def gates(self) -> list:
        return [layer.gate for layer in self.layers if isinstance(layer, SoraAdapter)]

    def copy(self) -> "TinyModel":
        head = None if self.head is None else self.head.copy()
        return TinyModel([layer.copy() for layer in self.layers], self.task, head)


@dataclass
class StepReport:
    loss0: float
    reg_loss: float
    nonzero_gates: int
    step_time: float

    def key(self):
        """Everything except wall-clock time, for determinism comparisons."""
        return (self.loss0, self.reg_loss, self.nonzero_gates)


@dataclass
class TrainState:
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    converged: Optional[bool] = None

    @classmethod
    def fresh(cls, config: TrainConfig) -> "TrainState":
        return cls(make_rng(config.seed))


def _predict(model: TinyModel, x):
    caches = []
    a = x
    n_layers = len(model.layers)
    for i, layer in enumerate(model.layers):
        if isinstance(layer, SoraAdapter):
            z, cache = sora_forward(layer, a)
        else:
            h, z = lora_increment(layer, a)
            cache = h
        out = kernels.matmul(layer.w0, a) + z
        act = model.head is not None or i < n_layers - 1
        if act:
            out = np.tanh(out)
        caches.append((a, cache, out, act))
        a = out
    if model.head is not None:
        return kernels.matmul(model.head, a), caches
    return a, caches


def predict(model: TinyModel, x) -> np.ndarray:
    return _predict(model, np.asarray(x, dtype=np.float64))[0]


def _loss_and_output_grad(model: TinyModel, pred, y):
    n = pred.shape[1]
    if model.task == "regression":
        if y.shape != pred.shape:
            raise ShapeError("targets do not match predictions", y.shape, pred.shape)
        resid = pred - y
        return float(np.sum(resid * resid)) / n, (2.0 / n) * resid
    labels = y.astype(np.int64)
    shifted = pred - pred.max(axis=0, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=0))
    cols = np.arange(n)
    loss = float(np.sum(logz - shifted[labels, cols])) / n
    prob = np.exp(shifted - logz)
    prob[labels, cols] -= 1.0
    return loss, prob / n


def dataset_loss(model: TinyModel, data: Dataset) -> float:
    """Base loss over the whole dataset, without gradients."""
    pred, _ = _predict(model, data.x)
    return _loss_and_output_grad(model, pred, data.y)[0]


def loss_and_grads(model: TinyModel, x, y):
    """Base loss on a batch and gradients for every trainable block.

    The regression loss is the squared error summed over outputs and averaged
    over samples; classification uses mean softmax cross-entropy.
    Returns ``(loss0, grads)`` with ``grads`` keyed like ``"layer0.wd"``.
    """
    x = np.asarray(x, dtype=np.float64)
    pred, caches = _predict(model, x)
    loss0, grad = _loss_and_output_grad(model, pred, np.asarray(y))
    grads = {}
    if model.head is not None:
        grads["head"] = kernels.matmul_nt(grad, caches[-1][2])
        grad = kernels.matmul_tn(model.head, grad)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        a_in, cache, out, act = caches[i]
        if act:
            grad = grad * (1.0 - out * out)
        if isinstance(layer, SoraAdapter):
            g, grad_x = sora_backward(layer, a_in, cache, grad)
            grads[f"layer{i}.wd"], grads[f"layer{i}.wu"], grads[f"layer{i}.gate"] = g.d_wd, g.d_wu, g.d_gate
        else:
            grads[f"layer{i}.wd"], grads[f"layer{i}.wu"], grad_x = lora_backward(layer, a_in, cache, grad)
        if i > 0:
            grad = kernels.matmul_tn(layer.w0, grad) + grad_x
    return loss0, grads


def _matrix_blocks(model: TinyModel):
    for i, layer in enumerate(model.layers):
        yield f"layer{i}.wd", layer, "wd", True
        yield f"layer{i}.wu", layer, "wu", True
    if model.head is not None:
        yield "head", model, "head", False


def _check_finite(value, step, block):
    if not np.all(np.isfinite(value)):
        raise TrainingError(f"non-finite {block} at step {step}", step=step, block=block)


def train_step(model: TinyModel, batch: Dataset, config: TrainConfig, state: TrainState) -> StepReport:
    """One update on ``batch``; returns the losses measured before the update."""
    t0 = time.perf_counter()
    step = state.step + 1
    loss0, grads = loss_and_grads(model, batch.x, batch.y)
    _check_finite(loss0, step, "loss0")
    reg = regularized_loss(loss0, model.gates, config.lam)

    if config.orth_penalty > 0:
        for i, layer in enumerate(model.layers):
            _, d_u, d_v = orthogonality_penalty(layer.wu, layer.wd.T)
            grads[f"layer{i}.wu"] = grads[f"layer{i}.wu"] + config.orth_penalty * d_u
            grads[f"layer{i}.wd"] = grads[f"layer{i}.wd"] + config.orth_penalty * d_v.T

    adam = config.optimizer == "adaptive-moment"
    if adam:
        bc1 = 1.0 - ADAM_BETA1 ** step
        bc2 = 1.0 - ADAM_BETA2 ** step
    for name, owner, attr, decayed in _matrix_blocks(model):
        param = getattr(owner, attr)
        g = grads[name]
        _check_finite(g, step, name)
        if decayed and config.weight_decay > 0:
            g = g + config.weight_decay * param
        if adam:
            m = state.m.get(name)
            v = state.v.get(name)
            m = (1.0 - ADAM_BETA1) * g if m is None else ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
            v = (1.0 - ADAM_BETA2) * (g * g) if v is None else ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
            state.m[name], state.v[name] = m, v
            new = param - config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        else:
            new = param - config.learning_rate * g
        _check_finite(new, step, name)
        setattr(owner, attr, new)

    if not config.freeze_gates:
        for i, layer in enumerate(model.layers):
            if isinstance(layer, SoraAdapter):
                layer.gate = prox_gate_update(layer.gate, grads[f"layer{i}.gate"], config.eta_t, config.lam)

    state.step = step
    nnz = sum(int(np.count_nonzero(g)) for g in model.gates)
    return StepReport(loss0, reg, nnz, time.perf_counter() - t0)


def run_epoch(model: TinyModel, data: Dataset, config: TrainConfig, state: TrainState) -> float:
    """One shuffled pass; returns the sample-weighted mean of the batch losses."""
    order = state.rng.permutation(data.n)
    total = 0.0
    for start in range(0, data.n, config.batch_size):
        idx = order[start:start + config.batch_size]
        report = train_step(model, data.take(idx), config, state)
        total += report.loss0 * idx.size
    state.epoch += 1
    return total / data.n


def train_epochs(model, data: Dataset, config: TrainConfig, state: TrainState, n_epochs: int) -> list:
    return [run_epoch(model, data, config, state) for _ in range(n_epochs)]


def train_until_convergence(model, dataset: Dataset, config: TrainConfig, state: Optional[TrainState] = None,
                            max_epochs: Optional[int] = None) -> int:
    """Train until the epoch-mean loss stops improving; ``config.epochs`` caps the run.

    Converged means the relative improvement stayed below 1e-4 for three
    epochs in a row; the first epoch is compared with the full-data loss
    before training. Hitting the cap is not an error: a
    :class:`ConvergenceWarning` is issued and ``state.converged`` is False.
    """
    if dataset.n < 1:
        raise ValidationError("dataset is empty")
    state = TrainState.fresh(config) if state is None else state
    cap = config.epochs if max_epochs is None else int(max_epochs)
    prev = dataset_loss(model, dataset) if cap > 0 else None
    quiet = 0
    used = 0
    while used < cap:
        cur = run_epoch(model, dataset, config, state)
        used += 1
        rel = (prev - cur) / abs(prev) if prev != 0 else 0.0
        quiet = quiet + 1 if rel < CONVERGENCE_RTOL else 0
        if quiet >= CONVERGENCE_PATIENCE:
            state.converged = True
            return used
        prev = cur
    state.converged = False
    if cap > 0:
        warnings.warn(f"no convergence within {cap} epochs", ConvergenceWarning, stacklevel=2)
    return used


def count_nonzero_params(model) -> int:
    """Sum over gated modules of ``nnz(gate) * (p + q + 1)``."""
    layers = model.layers if isinstance(model, TinyModel) else [model]
    total = 0
    for layer in layers:
        p, q = layer.w0.shape
        if isinstance(layer, SoraAdapter):
            total += int(np.count_nonzero(layer.gate)) * (p + q + 1)
        elif isinstance(layer, LoraAdapter):
            total += layer.rank * (p + q)
    return total


def evaluate(model: TinyModel, data: Dataset) -> dict:
    """Task metrics. ``mse`` is the mean over all target entries."""
    pred = predict(model, data.x)
    if model.task == "regression":
        resid = pred - data.y
        return {"mse": float(np.mean(resid * resid))}
    loss, _ = _loss_and_output_grad(model, pred, data.y)
    acc = float(np.mean(np.argmax(pred, axis=0) == data.y.astype(np.int64)))
    return {"accuracy": acc, "cross_entropy": loss}
