import json
import os
import statistics

import numpy as np
import pytest
import yaml

import sora.experiment as experiment_mod
from sora.scheduler import read_trace_csv
from sora import kernels
from sora.checkpoint import load_checkpoint, load_pruned
from sora.errors import TrainingError, ValidationError
from sora.experiment import ExperimentSpec, compare_step_time, load_seed_metrics, read_aggregate_csv, run_experiment
from sora.numerics import numeric_rank
from sora.prune import RankReport
from sora.tasks import gen_planted_task


def spec_dict(**over):
    base = {"version": 1, "name": "t", "task": {"kind": "planted", "p": 6, "q": 6, "true_rank": 2,
                                                  "n_train": 64, "n_eval": 32, "noise_sigma": 0.01},
            "train": {"epochs": 2, "r_max": 3, "learning_rate": "8e-4"}, "repeat": 2}
    base.update(over)
    return base


class TestPlantedTask:
    def test_noiseless_rank_zero_is_base_map(self):
        t = gen_planted_task(5, 4, 0, 10, 6, 0.0, 3)
        assert np.array_equal(t.train.y, kernels.matmul(t.w0, t.train.x))
        assert not np.any(t.delta_star)

    def test_planted_rank(self):
        for seed in range(5):
            t = gen_planted_task(32, 32, 3, 8, 8, 0.01, seed)
            assert numeric_rank(t.delta_star) == 3

    def test_same_seed_same_bytes(self):
        a, b = gen_planted_task(6, 5, 2, 20, 10, 0.1, 11), gen_planted_task(6, 5, 2, 20, 10, 0.1, 11)
        for x, y in ((a.w0, b.w0), (a.train.x, b.train.x), (a.train.y, b.train.y), (a.eval.y, b.eval.y)):
            assert x.tobytes() == y.tobytes()

    def test_train_and_eval_are_distinct_draws(self):
        t = gen_planted_task(6, 5, 2, 20, 10, 0.1, 1)
        assert not np.any(np.isin(t.train.x, t.eval.x))

    @pytest.mark.parametrize("args", [(0, 4, 1, 5, 5, 0.0), (4, 4, 5, 5, 5, 0.0), (4, 4, 1, 0, 5, 0.0),
                                      (4, 4, 1, 5, 5, -1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValidationError):
            gen_planted_task(*args, seed=0)


class TestSpec:
    def test_numeric_strings_coerced(self):
        spec = ExperimentSpec.from_dict(spec_dict())
        assert spec.train["learning_rate"] == 8e-4 and spec.seeds == [0, 1]

    def test_round_trip_through_yaml(self, tmp_path):
        spec = ExperimentSpec.from_dict(spec_dict(schedule={"xi0": "1e-4", "xi_max": 0.01, "delta_xi": 0.005}))
        (tmp_path / "s.yaml").write_text(spec.dump())
        assert ExperimentSpec.load(tmp_path / "s.yaml") == spec

    @pytest.mark.parametrize("over", [dict(version=2), dict(colour="red"), dict(seeds=[1, 2], repeat=3),
                                      dict(seeds=[1, 1]), dict(train={"epochs": "many"}),
                                      dict(train={"lam": 0.1, "eta_t": 0.1, "xi": 0.5}),
                                      dict(task={"kind": "images"}), dict(task={"kind": "planted", "dim": 3}),
                                      dict(schedule={"xi0": 1.0, "xi_max": 0.1, "delta_xi": 0.1}),
                                      dict(name="../up")])
    def test_invalid_specs(self, over):
        with pytest.raises(ValidationError):
            ExperimentSpec.from_dict(spec_dict(**over))

    def test_bad_yaml(self, tmp_path):
        (tmp_path / "s.yaml").write_text("a: [1,\n")
        with pytest.raises(ValidationError):
            ExperimentSpec.load(tmp_path / "s.yaml")

    def test_overrides(self):
        spec = ExperimentSpec.from_dict(spec_dict()).with_overrides("train", epochs=7, lam=None)
        assert spec.train["epochs"] == 7 and "lam" not in spec.train
        assert ExperimentSpec.from_dict(spec_dict()).with_overrides(None, seeds=[4]).seeds == [4]


def test_zero_epochs_reports_initial_metrics(tmp_path):
    spec = ExperimentSpec.from_dict(spec_dict(repeat=1, train={"epochs": 0, "r_max": 3}))
    res = run_experiment(spec, str(tmp_path))
    (m,) = load_seed_metrics(res.root)
    final = {k: v for k, v in m["final"].items() if k not in ("pruned_params", "epochs_used")}
    assert final == m["initial"] and m["steps"] == 0


def test_five_seed_aggregate_matches_per_seed_files(tmp_path):
    spec = ExperimentSpec.from_dict(spec_dict(repeat=5))
    res = run_experiment(spec, str(tmp_path))
    assert res.ok and res.completed == [0, 1, 2, 3, 4]
    rows = read_aggregate_csv(open(os.path.join(res.root, "aggregate.csv")).read())
    per_seed = load_seed_metrics(res.root)
    assert len(per_seed) == 5
    for name, count, metric, mean, std in rows:
        vals = [m["final"][metric] for m in per_seed]
        assert name == "t" and count == 5
        assert abs(mean - statistics.fmean(vals)) <= 1e-12 * max(1.0, abs(mean))
        assert abs(std - float(np.std(vals, ddof=1))) <= 1e-12 * max(1.0, abs(std))


@pytest.mark.filterwarnings("ignore::sora.trainer.ConvergenceWarning")
def test_every_written_file_reads_back(tmp_path):
    spec = ExperimentSpec.from_dict(spec_dict(schedule={"xi0": 1e-3, "xi_max": 3e-3, "delta_xi": 1e-3,
                                                          "epochs_per_stage": 1}))
    res = run_experiment(spec, str(tmp_path))
    root = res.root
    for name in ("manifest.json", "failures.json", "metadata.json"):
        json.load(open(os.path.join(root, name)))
    read_aggregate_csv(open(os.path.join(root, "aggregate.csv")).read())
    rep = RankReport.from_csv(open(os.path.join(root, "heatmap.csv")).read())
    assert rep.grid.shape == (1, 1)
    seed_dir = os.path.join(root, "0")
    model, cfg, state = load_checkpoint(os.path.join(seed_dir, "checkpoint.json"))
    assert [p.retained_rank for p in load_pruned(os.path.join(seed_dir, "pruned.json"))] == \
        json.load(open(os.path.join(seed_dir, "metrics.json")))["ranks"]
    rows = read_trace_csv(open(os.path.join(seed_dir, "schedule", "trace.csv")).read())
    assert len(rows) == 3
    manifest = json.load(open(os.path.join(seed_dir, "schedule", "trace_manifest.json")))
    for snap in manifest["snapshots"]:
        load_checkpoint(os.path.join(seed_dir, "schedule", snap["checkpoint"]))


def test_partial_failure_keeps_completed_seeds(tmp_path, monkeypatch):
    real = experiment_mod.run_seed

    def flaky(spec, seed, seed_dir):
        if seed == 1:
            raise TrainingError("non-finite loss0 at step 3", step=3, block="loss0")
        return real(spec, seed, seed_dir)

    monkeypatch.setattr(experiment_mod, "run_seed", flaky)
    res = run_experiment(ExperimentSpec.from_dict(spec_dict(repeat=3)), str(tmp_path))
    assert not res.ok and res.completed == [0, 2]
    failures = json.load(open(os.path.join(res.root, "failures.json")))
    assert failures[0]["seed"] == 1 and failures[0]["error"] == "TrainingError"
    assert sorted(d for d in os.listdir(res.root) if not d.endswith((".csv", ".json"))) == ["0", "2"]
    assert read_aggregate_csv(open(os.path.join(res.root, "aggregate.csv")).read())[0][1] == 2


def test_compare_step_time_report():
    rep = compare_step_time((8, 8, 2), 100, 16)
    assert rep["median_sora"] > 0 and rep["median_with_orth"] > 0
    assert (rep["p"], rep["q"], rep["r_max"], rep["n_steps"]) == (8, 8, 2, 100)
    with pytest.raises(ValidationError):
        compare_step_time((8, 8, 2), 99)


def test_shipped_configs_validate():
    here = os.path.join(os.path.dirname(__file__), "..", "configs")
    names = sorted(f for f in os.listdir(here) if f.endswith(".yaml"))
    assert "rank_recovery.yaml" in names
    for name in names:
        with open(os.path.join(here, name)) as fh:
            ExperimentSpec.from_dict(yaml.safe_load(fh))
