"""Progressive threshold escalation.

Train to convergence at ``xi0``, record a snapshot, then keep raising the
threshold by ``delta_xi``. Each raise gets a fixed number of epochs and a
snapshot, and the loop stops once ``xi`` passes ``xi_max``. The snapshots
trace how the train metric (memorization) and the held-out metric
(generalization) move as the adapters get sparser.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .checkpoint import checkpoint_from_record, checkpoint_record, dumps, write_atomic
from .errors import TrainingError, ValidationError
from .prune import effective_rank
from .core import SoraAdapter
from .trainer import (Dataset, TinyModel, TrainConfig, TrainState, count_nonzero_params, evaluate,
                      train_epochs, train_until_convergence)

TRACE_HEADER = ("xi", "nonzero_params", "memorization", "generalization")


@dataclass
class ScheduleConfig:
    xi0: float = 1e-4
    xi_max: float = 1e-2
    delta_xi: float = 1e-3
    epochs_per_stage: int = 5

    def __post_init__(self):
        for name in ("xi0", "xi_max", "delta_xi"):
            val = float(getattr(self, name))
            if not math.isfinite(val) or val < 0:
                raise ValidationError(f"{name} must be finite and nonnegative, got {val}")
            setattr(self, name, val)
        if not self.delta_xi > 0:
            raise ValidationError(f"delta_xi must be positive, got {self.delta_xi}")
        if self.xi0 > self.xi_max:
            raise ValidationError(f"xi0={self.xi0} exceeds xi_max={self.xi_max}")
        if int(self.epochs_per_stage) != self.epochs_per_stage or self.epochs_per_stage < 1:
            raise ValidationError(f"epochs_per_stage must be a positive integer, got {self.epochs_per_stage}")
        self.epochs_per_stage = int(self.epochs_per_stage)


@dataclass
class Snapshot:
    xi: float
    nonzero_params: int
    memorization: float
    generalization: float
    ranks: list
    epochs: int
    checkpoint: object = field(default=None, repr=False)


@dataclass
class ScheduleTrace:
    metric: str
    snapshots: list = field(default_factory=list)
    error: Optional[str] = None

    @property
    def xis(self) -> list:
        return [s.xi for s in self.snapshots]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for s in self.snapshots:
            w.writerow([repr(s.xi), s.nonzero_params, repr(s.memorization), repr(s.generalization)])
        return buf.getvalue()

    def manifest(self) -> dict:
        return {
            "metric": self.metric,
            "error": self.error,
            "snapshots": [
                {"xi": s.xi, "nonzero_params": s.nonzero_params, "memorization": s.memorization,
                 "generalization": s.generalization, "ranks": s.ranks, "epochs": s.epochs,
                 # relative to the manifest so directories can be moved
                 "checkpoint": os.path.basename(s.checkpoint) if isinstance(s.checkpoint, str) else None}
                for s in self.snapshots
            ],
        }

    def write(self, outdir) -> None:
        os.makedirs(outdir, exist_ok=True)
        write_atomic(os.path.join(outdir, "trace.csv"), self.to_csv().encode())
        write_atomic(os.path.join(outdir, "trace_manifest.json"), dumps(self.manifest()))


def read_trace_csv(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader, ()))
    if header != TRACE_HEADER:
        raise ValidationError(f"unexpected trace header {header}")
    return [(float(a), int(b), float(c), float(d)) for a, b, c, d in reader]


def metric_name(task: str) -> str:
    return "neg_mse" if task == "regression" else "accuracy"


def memgen_metrics(model: TinyModel, train_set: Dataset, eval_set: Dataset, task: Optional[str] = None):
    """``(memorization, generalization)``: negative MSE for regression, accuracy for classification."""
    task = model.task if task is None else task
    if train_set.n < 1 or eval_set.n < 1:
        raise ValidationError("datasets must be nonempty")
    if task == "regression":
        return -evaluate(model, train_set)["mse"], -evaluate(model, eval_set)["mse"]
    return evaluate(model, train_set)["accuracy"], evaluate(model, eval_set)["accuracy"]


def _snapshot(model, state, config, train_set, eval_set, xi, epochs, outdir, index):
    mem, gen = memgen_metrics(model, train_set, eval_set)
    ranks = [effective_rank(l) for l in model.layers if isinstance(l, SoraAdapter)]
    record = checkpoint_record(model, config, state, extra={"xi": xi, "snapshot": index})
    ref = record
    if outdir is not None:
        ref = os.path.join(outdir, f"snapshot_{index:03d}.json")
        write_atomic(ref, dumps(record))
    return Snapshot(xi, count_nonzero_params(model), mem, gen, ranks, epochs, ref)


def _stages(model, state, train_set, eval_set, base, sched, trace, xi, outdir):
    while xi <= sched.xi_max:
        cfg = base.with_xi(xi)
        train_epochs(model, train_set, cfg, state, sched.epochs_per_stage)
        trace.snapshots.append(_snapshot(model, state, cfg, train_set, eval_set, xi, sched.epochs_per_stage,
                                         outdir, len(trace.snapshots)))
        xi = xi + sched.delta_xi


def run_schedule(model: TinyModel, train_set: Dataset, eval_set: Dataset, train_config: TrainConfig,
                 schedule_config: ScheduleConfig, state: Optional[TrainState] = None,
                 outdir: Optional[str] = None) -> ScheduleTrace:
    """Run the escalation loop in place on ``model`` and return its trace.

    With ``outdir`` each snapshot checkpoint is written there and the
    snapshot stores its path; otherwise it stores the checkpoint record.
    A non-finite loss stops the run. The partial trace is then attached to the
    raised :class:`TrainingError` as ``.trace`` (and written to ``outdir``).
    """
    if train_set.n < 1 or eval_set.n < 1:
        raise ValidationError("datasets must be nonempty")
    state = TrainState.fresh(train_config) if state is None else state
    trace = ScheduleTrace(metric_name(model.task))
    sched = schedule_config
    try:
        xi = sched.xi0
        cfg = train_config.with_xi(xi)
        used = train_until_convergence(model, train_set, cfg, state)
        trace.snapshots.append(_snapshot(model, state, cfg, train_set, eval_set, xi, used, outdir, 0))
        xi = xi + sched.delta_xi
        _stages(model, state, train_set, eval_set, train_config, sched, trace, xi, outdir)
    except TrainingError as exc:
        trace.error = str(exc)
        exc.trace = trace
        if outdir is not None:
            trace.write(outdir)
        raise
    if outdir is not None:
        trace.write(outdir)
    return trace


def resume_schedule(snapshot: Snapshot, train_set: Dataset, eval_set: Dataset, train_config: TrainConfig,
                    schedule_config: ScheduleConfig, first_index: int, outdir: Optional[str] = None) -> ScheduleTrace:
    """Continue a schedule from one of its snapshots; returns the snapshots that follow it."""
    rec = snapshot.checkpoint
    if isinstance(rec, str):
        with open(rec, "rb") as fh:
            rec = json.loads(fh.read())
    model, _, state = checkpoint_from_record(rec)
    if state is None:
        raise ValidationError("snapshot checkpoint carries no training state")
    trace = ScheduleTrace(metric_name(model.task))
    # placeholders keep snapshot numbering aligned with the original run
    trace.snapshots = [None] * first_index
    _stages(model, state, train_set, eval_set, train_config, schedule_config, trace,
            snapshot.xi + schedule_config.delta_xi, outdir)
    trace.snapshots = trace.snapshots[first_index:]
    return trace


def nonzero_trend(trace: ScheduleTrace) -> np.ndarray:
    return np.array([s.nonzero_params for s in trace.snapshots])
