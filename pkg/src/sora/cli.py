"""Command-line entry point. Exit status: 0 success, 1 invalid input, 2 runtime failure."""
from __future__ import annotations

import json
import sys

import click

from .checkpoint import dumps, load_checkpoint, save_pruned, write_atomic
from .errors import CheckpointError, ConvergenceError, SoraError, TrainingError, ValidationError
from .experiment import ExperimentSpec, compare_step_time, run_experiment
from .prune import prune_model, rank_heatmap

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _seeds(value):
    if value is None:
        return None
    try:
        return [int(s) for s in value.split(",") if s.strip()]
    except ValueError:
        raise ValidationError(f"--seeds must be comma-separated integers, got {value!r}") from None


def _report(result):
    click.echo(f"wrote {result.root}: {len(result.completed)} seed(s) completed, {len(result.failures)} failed")
    for f in result.failures:
        click.echo(f"  seed {f['seed']}: {f['error']}: {f['message']}", err=True)
    return EXIT_OK if result.ok else EXIT_RUNTIME


def _train_overrides(kw):
    keys = ("epochs", "learning_rate", "lam", "eta_t", "xi", "r_max", "weight_decay", "batch_size", "optimizer")
    return {k: kw.get(k) for k in keys}


def train_options(fn):
    opts = [
        click.option("--outdir", type=click.Path(file_okay=False), help="Output root (overrides output_dir)."),
        click.option("--seeds", help="Comma-separated seed list (overrides seeds/repeat)."),
        click.option("--epochs", type=int),
        click.option("--learning-rate", "learning_rate", type=float),
        click.option("--lam", type=float, help="Gate l1 strength."),
        click.option("--eta-t", "eta_t", type=float, help="Gate prox step."),
        click.option("--xi", type=float, help="Gate threshold (eta_t * lam)."),
        click.option("--r-max", "r_max", type=int),
        click.option("--weight-decay", "weight_decay", type=float),
        click.option("--batch-size", "batch_size", type=int),
        click.option("--optimizer", type=click.Choice(["adaptive-moment", "plain-sgd"])),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _load_spec(path, kw):
    spec = ExperimentSpec.load(path)
    if kw.get("xi") is not None and kw.get("eta_t") is None:
        # a new threshold rescales eta_t unless that is pinned too
        train = {k: v for k, v in spec.train.items() if k not in ("eta_t", "xi")}
        spec = spec.with_overrides(None, train=train)
    spec = spec.with_overrides("train", **_train_overrides(kw))
    return spec.with_overrides(None, seeds=_seeds(kw.get("seeds")))


@click.group()
def cli():
    """Gated low-rank adapters with proximal gate sparsification."""


@cli.command()
@click.argument("spec_file", type=click.Path(exists=True, dir_okay=False))
@train_options
def run(spec_file, outdir, **kw):
    """Train every seed of SPEC_FILE, prune, and write reports."""
    spec = _load_spec(spec_file, kw)
    return _report(run_experiment(spec, outdir))


@cli.command()
@click.argument("spec_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--xi0", type=float)
@click.option("--xi-max", "xi_max", type=float)
@click.option("--delta-xi", "delta_xi", type=float)
@click.option("--epochs-per-stage", "epochs_per_stage", type=int)
@train_options
def schedule(spec_file, outdir, xi0, xi_max, delta_xi, epochs_per_stage, **kw):
    """Run the threshold-escalation schedule for every seed of SPEC_FILE."""
    spec = _load_spec(spec_file, kw)
    base = spec.schedule or {}
    spec = spec.with_overrides(None, schedule={**base, **{k: v for k, v in (
        ("xi0", xi0), ("xi_max", xi_max), ("delta_xi", delta_xi), ("epochs_per_stage", epochs_per_stage))
        if v is not None}})
    return _report(run_experiment(spec, outdir))


@cli.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True, help="Pruned checkpoint path.")
def prune(checkpoint, output):
    """Drop zero-gated ranks from CHECKPOINT and save the compact modules."""
    model, _, _ = load_checkpoint(checkpoint)
    modules = prune_model(model)
    save_pruned(output, modules)
    for m in modules:
        click.echo(f"layer {m.label[0]} {m.label[1]}: rank {m.retained_rank}, {m.param_count} params")
    return EXIT_OK


@cli.command("bench-step-time")
@click.option("--p", "p", type=int, default=128, show_default=True)
@click.option("--q", "q", type=int, default=128, show_default=True)
@click.option("--r-max", "r_max", type=int, default=8, show_default=True)
@click.option("--steps", type=int, default=100, show_default=True)
@click.option("--batch-size", "batch_size", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--json", "json_path", type=click.Path(dir_okay=False), help="Also write the report here.")
def bench_step_time(p, q, r_max, steps, batch_size, seed, json_path):
    """Median step time with and without orthogonality-penalty gradients."""
    report = compare_step_time((p, q, r_max), steps, batch_size, seed)
    if json_path:
        write_atomic(json_path, dumps(report))
    click.echo(json.dumps(report, sort_keys=True, indent=2))
    return EXIT_OK


@cli.command("export-heatmap")
@click.argument("checkpoints", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
def export_heatmap(checkpoints, output):
    """Write the retained-rank grid (mean over CHECKPOINTS) as CSV."""
    models = [load_checkpoint(path)[0] for path in checkpoints]
    write_atomic(output, rank_heatmap(models).to_csv().encode())
    click.echo(f"wrote {output}")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        code = cli.main(args=argv, prog_name="sora", standalone_mode=False)
    except click.exceptions.Exit as exc:
        code = exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        code = EXIT_RUNTIME
    except click.ClickException as exc:
        exc.show()
        code = EXIT_INVALID
    except (ValidationError, CheckpointError) as exc:
        click.echo(f"error: {exc}", err=True)
        code = EXIT_INVALID
    except (TrainingError, ConvergenceError, SoraError, OSError) as exc:
        click.echo(f"runtime failure: {exc}", err=True)
        code = EXIT_RUNTIME
    code = EXIT_OK if code is None else int(code)
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
