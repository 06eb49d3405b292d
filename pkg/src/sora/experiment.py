"""Experiment specs (YAML), multi-seed orchestration and report files.

Layout written by :func:`run_experiment`::

    <outdir>/<name>/aggregate.csv      mean/std per metric over completed seeds
    <outdir>/<name>/manifest.json      resolved spec and file index
    <outdir>/<name>/heatmap.csv        mean retained rank per module
    <outdir>/<name>/failures.json      seeds that raised, with messages
    <outdir>/<name>/metadata.json      timestamps and timings (not deterministic)
    <outdir>/<name>/<seed>/metrics.json, checkpoint.json, pruned.json [, trace.csv ...]

Every file except ``metadata.json`` is a deterministic function of the spec.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import shutil
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional

import numpy as np
import yaml

from . import kernels
from .checkpoint import dumps, save_checkpoint, save_pruned, write_atomic
from .errors import SoraError, ValidationError
from .prune import prune_model, rank_heatmap
from .scheduler import ScheduleConfig, run_schedule
from .tasks import PlantedTask, build_model, gen_blob_task, gen_planted_task
from .trainer import (TrainConfig, TrainState, count_nonzero_params, evaluate, train_epochs,
                      train_until_convergence)

SPEC_VERSION = 1
AGGREGATE_HEADER = ("experiment", "seed_count", "metric", "mean", "std")

TASK_KEYS = {
    "planted": {"p": int, "q": int, "true_rank": int, "n_train": int, "n_eval": int,
                "noise_sigma": float, "factor_scale": float},
    "blobs": {"dim": int, "hidden": int, "n_train": int, "n_eval": int, "separation": float},
}
TASK_DEFAULTS = {
    "planted": {"p": 32, "q": 32, "true_rank": 3, "n_train": 2048, "n_eval": 1024,
                "noise_sigma": 0.01, "factor_scale": 0.3},
    "blobs": {"dim": 8, "hidden": 16, "n_train": 512, "n_eval": 512, "separation": 2.0},
}
TRAIN_KEYS = {"learning_rate": float, "lam": float, "eta_t": float, "xi": float, "epochs": int,
              "batch_size": int, "optimizer": str, "freeze_gates": bool, "r_max": int,
              "weight_decay": float, "orth_penalty": float, "until_convergence": bool}
SCHEDULE_KEYS = {"xi0": float, "xi_max": float, "delta_xi": float, "epochs_per_stage": int}
TOP_KEYS = {"version", "name", "output_dir", "task", "train", "schedule", "repeat", "seeds"}


def _coerce(section, key, value, kind):
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ValidationError(f"{section}.{key} must be true or false, got {value!r}")
    if kind is str:
        return str(value)
    if isinstance(value, bool):
        raise ValidationError(f"{section}.{key} must be numeric, got {value!r}")
    try:
        # YAML reads forms like 8e-4 as strings
        num = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{section}.{key} must be numeric, got {value!r}") from None
    if kind is int:
        if not num.is_integer():
            raise ValidationError(f"{section}.{key} must be an integer, got {value!r}")
        return int(num)
    if not math.isfinite(num):
        raise ValidationError(f"{section}.{key} must be finite, got {value!r}")
    return num


def _section(raw, name, schema):
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ValidationError(f"{name} must be a mapping")
    unknown = set(raw) - set(schema)
    if unknown:
        raise ValidationError(f"unknown {name} keys: {sorted(unknown)}")
    return {k: _coerce(name, k, v, schema[k]) for k, v in raw.items()}


@dataclass
class ExperimentSpec:
    name: str
    task: dict
    train: dict
    schedule: Optional[dict] = None
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "results"

    @property
    def repeat(self) -> int:
        return len(self.seeds)

    @classmethod
    def from_dict(cls, raw) -> "ExperimentSpec":
        if not isinstance(raw, dict):
            raise ValidationError("spec must be a mapping")
        unknown = set(raw) - TOP_KEYS
        if unknown:
            raise ValidationError(f"unknown top-level keys: {sorted(unknown)}")
        if raw.get("version", SPEC_VERSION) != SPEC_VERSION:
            raise ValidationError(f"unsupported spec version {raw.get('version')!r}")
        name = str(raw.get("name", "experiment"))
        if not name or "/" in name or name in (".", ".."):
            raise ValidationError(f"invalid experiment name {name!r}")
        task_raw = dict(raw.get("task") or {})
        kind = task_raw.pop("kind", "planted")
        if kind not in TASK_KEYS:
            raise ValidationError(f"task.kind must be one of {sorted(TASK_KEYS)}, got {kind!r}")
        task = dict(TASK_DEFAULTS[kind])
        task.update(_section(task_raw, "task", TASK_KEYS[kind]))
        task["kind"] = kind
        train = _section(raw.get("train"), "train", TRAIN_KEYS)
        schedule = None
        if raw.get("schedule") is not None:
            schedule = _section(raw["schedule"], "schedule", SCHEDULE_KEYS)
            ScheduleConfig(**schedule)
        seeds = raw.get("seeds")
        repeat = raw.get("repeat")
        if seeds is None:
            repeat = 1 if repeat is None else _coerce("spec", "repeat", repeat, int)
            if repeat < 1:
                raise ValidationError(f"repeat must be positive, got {repeat}")
            seeds = list(range(repeat))
        else:
            if not isinstance(seeds, list) or not seeds:
                raise ValidationError("seeds must be a nonempty list")
            seeds = [_coerce("spec", "seeds", s, int) for s in seeds]
            if repeat is not None and _coerce("spec", "repeat", repeat, int) != len(seeds):
                raise ValidationError(f"repeat={repeat} but {len(seeds)} seeds listed")
            if len(set(seeds)) != len(seeds):
                raise ValidationError("seeds must be distinct")
        spec = cls(name, task, train, schedule, seeds, str(raw.get("output_dir", "results")))
        spec.train_config(seeds[0])
        return spec

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise ValidationError(f"cannot read spec {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ValidationError(f"spec {path} is not valid YAML: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        task = dict(self.task)
        out = {"version": SPEC_VERSION, "name": self.name, "output_dir": self.output_dir, "task": task,
               "train": dict(self.train), "seeds": list(self.seeds), "repeat": self.repeat}
        if self.schedule is not None:
            out["schedule"] = dict(self.schedule)
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def train_config(self, seed: int) -> TrainConfig:
        params = {k: v for k, v in self.train.items() if k != "until_convergence"}
        return TrainConfig(seed=seed, **params)

    def schedule_config(self) -> Optional[ScheduleConfig]:
        return None if self.schedule is None else ScheduleConfig(**self.schedule)

    def make_task(self, seed: int):
        t = dict(self.task)
        kind = t.pop("kind")
        if kind == "planted":
            return gen_planted_task(seed=seed, **t)
        return gen_blob_task(seed=seed, **t)

    def with_overrides(self, section: Optional[str] = None, **values) -> "ExperimentSpec":
        """Copy with some keys replaced; ``section=None`` targets top-level keys. None values are skipped."""
        raw = self.to_dict()
        values = {k: v for k, v in values.items() if v is not None}
        if section is None:
            if "seeds" in values:
                raw.pop("repeat", None)
            if "repeat" in values:
                raw.pop("seeds", None)
            raw.update(values)
        else:
            raw[section] = {**(raw.get(section) or {}), **values}
        return ExperimentSpec.from_dict(raw)


def _model_metrics(model, task) -> dict:
    out = {}
    ev_train = evaluate(model, task.train)
    ev_eval = evaluate(model, task.eval)
    for k, v in ev_train.items():
        out[f"train_{k}"] = v
    for k, v in ev_eval.items():
        out[f"eval_{k}"] = v
    if isinstance(task, PlantedTask):
        floor = task.noise_floor
        out["noise_floor"] = floor
        if floor > 0:
            out["eval_mse_over_noise_floor"] = ev_eval["mse"] / floor
    out["nonzero_gates"] = sum(int(np.count_nonzero(g)) for g in model.gates)
    out["nonzero_params"] = count_nonzero_params(model)
    return out


def run_seed(spec: ExperimentSpec, seed: int, seed_dir: str):
    """Train one seed and write its files into ``seed_dir``; returns ``(metrics, model)``."""
    task = spec.make_task(seed)
    config = spec.train_config(seed)
    model = build_model(task, config.r_max, seed)
    state = TrainState.fresh(config)
    init = _model_metrics(model, task)
    sched = spec.schedule_config()
    converged = None
    if sched is not None:
        trace = run_schedule(model, task.train, task.eval, config, sched, state,
                             outdir=os.path.join(seed_dir, "schedule"))
        epochs = sum(s.epochs for s in trace.snapshots)
        config = config.with_xi(trace.snapshots[-1].xi)
        converged = state.converged
    elif spec.train.get("until_convergence", False):
        epochs = train_until_convergence(model, task.train, config, state)
        converged = state.converged
    else:
        train_epochs(model, task.train, config, state, config.epochs)
        epochs = config.epochs
    final = _model_metrics(model, task)
    pruned = prune_model(model)
    final["pruned_params"] = sum(p.param_count for p in pruned)
    final["epochs_used"] = epochs
    metrics = {"seed": seed, "converged": converged, "initial": init, "final": final,
               "ranks": [p.retained_rank for p in pruned], "steps": state.step}
    write_atomic(os.path.join(seed_dir, "metrics.json"), dumps(metrics))
    save_checkpoint(os.path.join(seed_dir, "checkpoint.json"), model, config, state)
    save_pruned(os.path.join(seed_dir, "pruned.json"), pruned)
    return metrics, model


def aggregate_rows(name: str, per_seed: list) -> list:
    """``(experiment, seed_count, metric, mean, std)`` per numeric final metric; std uses ``n - 1``."""
    if not per_seed:
        return []
    keys = sorted(set.intersection(*(set(m["final"]) for m in per_seed)))
    rows = []
    for key in keys:
        vals = [float(m["final"][key]) for m in per_seed]
        mean = statistics.fmean(vals)
        std = statistics.stdev(vals) if len(vals) > 1 else 0.0
        rows.append((name, len(vals), key, mean, std))
    return rows


def aggregate_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_HEADER)
    for name, count, key, mean, std in rows:
        w.writerow([name, count, key, repr(mean), repr(std)])
    return buf.getvalue()


def read_aggregate_csv(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader, ()))
    if header != AGGREGATE_HEADER:
        raise ValidationError(f"unexpected aggregate header {header}")
    return [(n, int(c), k, float(m), float(s)) for n, c, k, m, s in reader]


@dataclass
class ExperimentResult:
    root: str
    completed: list
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures


def run_experiment(spec: ExperimentSpec, outdir: Optional[str] = None) -> ExperimentResult:
    """Run every seed; failed seeds are listed in ``failures.json`` and do not abort the others."""
    root = os.path.join(spec.output_dir if outdir is None else outdir, spec.name)
    os.makedirs(root, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    per_seed, models, failures, timings = [], [], [], {}
    for seed in spec.seeds:
        final_dir = os.path.join(root, str(seed))
        tmp = tempfile.mkdtemp(dir=root, prefix=f".seed-{seed}-")
        t0 = time.perf_counter()
        try:
            metrics, model = run_seed(spec, seed, tmp)
        except (SoraError, FloatingPointError) as exc:
            shutil.rmtree(tmp, ignore_errors=True)
            failures.append({"seed": seed, "error": type(exc).__name__, "message": str(exc)})
            continue
        finally:
            timings[str(seed)] = time.perf_counter() - t0
        if os.path.exists(final_dir):
            shutil.rmtree(final_dir)
        os.replace(tmp, final_dir)
        per_seed.append(metrics)
        models.append(model)

    rows = aggregate_rows(spec.name, per_seed)
    write_atomic(os.path.join(root, "aggregate.csv"), aggregate_csv(rows).encode())
    if models:
        write_atomic(os.path.join(root, "heatmap.csv"), rank_heatmap(models).to_csv().encode())
    write_atomic(os.path.join(root, "failures.json"), dumps(failures))
    files = ["aggregate.csv", "failures.json"] + (["heatmap.csv"] if models else [])
    manifest = {"spec": spec.to_dict(), "completed_seeds": [m["seed"] for m in per_seed],
                "failed_seeds": [f["seed"] for f in failures], "files": files,
                "seed_files": ["metrics.json", "checkpoint.json", "pruned.json"]}
    write_atomic(os.path.join(root, "manifest.json"), dumps(manifest))
    meta = {"started": started, "finished": datetime.now(timezone.utc).isoformat(),
            "seconds_per_seed": timings, "kernel_backend": kernels.BACKEND}
    write_atomic(os.path.join(root, "metadata.json"), dumps(meta))
    return ExperimentResult(root, [m["seed"] for m in per_seed], failures)


def load_seed_metrics(root: str) -> list:
    with open(os.path.join(root, "manifest.json")) as fh:
        manifest = json.load(fh)
    out = []
    for seed in manifest["completed_seeds"]:
        with open(os.path.join(root, str(seed), "metrics.json")) as fh:
            out.append(json.load(fh))
    return out


def compare_step_time(shapes=(128, 128, 8), n_steps: int = 100, batch_size: int = 64, seed: int = 0,
                      orth_weight: float = 1.0) -> dict:
    """Median per-step time of a gated step and of the same step with orthogonality-penalty gradients.

    The two variants run interleaved on identical shapes, data and initial
    weights so drift in machine load hits both equally.
    """
    p, q, r_max = (int(s) for s in shapes)
    if n_steps < 100:
        raise ValidationError(f"n_steps must be at least 100, got {n_steps}")
    task = gen_planted_task(p, q, min(r_max, p, q), batch_size, 1, 0.0, seed)
    plain_cfg = TrainConfig(seed=seed, r_max=r_max, batch_size=batch_size)
    orth_cfg = TrainConfig(seed=seed, r_max=r_max, batch_size=batch_size, orth_penalty=orth_weight)
    from .trainer import train_step

    model_a = build_model(task, r_max, seed)
    model_b = copy.deepcopy(model_a)
    state_a, state_b = TrainState.fresh(plain_cfg), TrainState.fresh(orth_cfg)
    times_a, times_b = [], []
    for i in range(n_steps):
        # alternate which variant goes first
        order = ((model_a, plain_cfg, state_a, times_a), (model_b, orth_cfg, state_b, times_b))
        for model, cfg, st, sink in (order if i % 2 == 0 else order[::-1]):
            sink.append(train_step(model, task.train, cfg, st).step_time)
    med_a, med_b = statistics.median(times_a), statistics.median(times_b)
    return {"p": p, "q": q, "r_max": r_max, "batch_size": batch_size, "n_steps": n_steps,
            "median_sora": med_a, "median_with_orth": med_b, "ratio": med_a / med_b,
            "kernel_backend": kernels.BACKEND}
