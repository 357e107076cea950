import dataclasses
import json

import numpy as np
import pytest

from csrn import cli, harness, maze
from csrn.alr import AlrState
from csrn.ekf import EkfState, ekf_update
from csrn.errors import ConfigError, DivergenceError, RejectedInput
from csrn.grid import grid_forward, grid_jacobian
from csrn.harness import ExperimentConfig, MetricsRecord

SMALL_MAZE = dict(benchmark="maze", maze_size=3, n_train_mazes=3, n_test_mazes=2,
                  n_recurrent=2, n_hidden=1, internal_steps=3, max_cycles=3,
                  plateau_cycles=0)
SMALL_CONNECT = dict(benchmark="connect", pattern_size=3, n_train_connected=3,
                     n_train_disconnected=3, n_test_connected=2, n_test_disconnected=2,
                     n_recurrent=2, n_hidden=1, internal_steps=3, max_cycles=3,
                     transform_hidden=3, plateau_cycles=0)


def small(**kw):
    return ExperimentConfig(**{**SMALL_MAZE, **kw})


# -- config -----------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = small(wall_value=7.5, trainer="alr", init_scale=2.0)
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert ExperimentConfig.load(path) == cfg
    assert ExperimentConfig.from_dict(json.loads(cfg.to_json())) == cfg


@pytest.mark.parametrize("bad", [{"benchmark": "chess"}, {"trainer": "sgd"},
                                 {"maze_size": 0}, {"k0": 0.0}, {"max_cycles": -1},
                                 {"not_a_field": 1}])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_config_load_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")


def test_with_seed():
    cfg = ExperimentConfig().with_seed(10)
    assert (cfg.data_seed, cfg.weight_seed, cfg.transform_seed) == (10, 11, 12)


# -- training cycle ------------------------------------------------------------------

def test_zero_residual_keeps_weights():
    # one maze keeps C K C' non-singular even though r is exactly zero here
    cfg = small(n_train_mazes=1)
    task = harness.make_task(cfg)
    train_items, _ = task.generate(0)
    data = task.make_dataset(train_items)
    w = harness.init_weights(cfg, task)
    Y, _ = task.outputs(w, data)
    data = harness.Dataset(data.items, data.inputs, Y)
    state = harness.init_trainer(cfg, w.size)
    w2, state2, rec = harness.train_cycle(task, w, state, data, data, 1)
    assert np.array_equal(w2, w)
    assert rec.train_sse == 0.0 and rec.r_diag == 0.0


def test_cycle_equals_manual_composition():
    cfg = small(n_train_mazes=1)
    task = harness.make_task(cfg)
    train_items, _ = task.generate(0)
    data = task.make_dataset(train_items)
    w = harness.init_weights(cfg, task)
    state = harness.init_trainer(cfg, w.size)
    w_cycle, _, _ = harness.train_cycle(task, w, state, data, data, 1)

    grid = cfg.grid_spec()
    mz = train_items[0]
    res = grid_forward(grid, w, maze.encode_maze(mz))
    C = grid_jacobian(grid, w, res.trace, np.eye(grid.n_cells))
    e = (maze.dp_solve(mz) - res.outputs).ravel()
    dw, _ = ekf_update(EkfState.initial(w.size, cfg.k0, cfg.q_scale, cfg.a, cfg.b), C, e)
    assert np.allclose(w_cycle, w + dw, rtol=0, atol=1e-12)


def test_alr_and_ekf_share_jacobian():
    cfg = small()
    task = harness.make_task(cfg)
    train_items, _ = task.generate(0)
    data = task.make_dataset(train_items)
    w = harness.init_weights(cfg, task)
    C1, e1, _ = harness.batch_jacobian(task, w, data)
    C2, e2, _ = harness.batch_jacobian(task, w, data)
    assert np.array_equal(C1, C2) and np.array_equal(e1, e2)
    state = AlrState(lr=0.5)
    w2, _, _ = harness.train_cycle(task, w, state, data, data, 1)
    assert np.array_equal(w2, w - 0.5 * 1.05 * -(C1.T @ e1))


def test_connect_cycle_runs():
    cfg = ExperimentConfig(**SMALL_CONNECT)
    result = harness.train(cfg)
    assert len(result.records) == 4
    assert all(0 <= r.test_score <= 100 for r in result.records)


def test_record_count_and_cycle_cap_zero():
    res = harness.train(small(max_cycles=3))
    assert [r.cycle for r in res.records] == [0, 1, 2, 3]
    assert res.stop_reason == "max_cycles"
    res0 = harness.train(small(max_cycles=0))
    assert len(res0.records) == 1 and res0.records[0].r_diag is None


def test_overlapping_sets_rejected():
    cfg = small()
    items, _ = harness.make_task(cfg).generate(0)
    with pytest.raises(RejectedInput):
        harness.train(cfg, items, items[:1])


def test_generated_sets_disjoint():
    for cfg in (small(n_train_mazes=20, n_test_mazes=10), ExperimentConfig(**SMALL_CONNECT)):
        tr, te = harness.make_task(cfg).generate(3)
        assert not set(tr) & set(te)


def test_stopper_rules():
    rec = lambda c, v: MetricsRecord(c, v, v, None, None, None, None)
    stop = harness.Stopper(1.0, 2, 10)
    assert stop(rec(1, 5.0)) is None
    assert stop(rec(2, 6.0)) is None
    assert stop(rec(3, 6.0)) == "plateau"
    assert harness.Stopper(1.0, 0, 10)(rec(1, 0.5)) == "threshold"
    assert harness.Stopper(None, 0, 2)(rec(2, 3.0)) == "max_cycles"


def test_partial_metrics_on_divergence(tmp_path, monkeypatch):
    calls = {"n": 0}
    real = harness.train_cycle

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise DivergenceError("boom", step=1)
        return real(*args, **kw)

    monkeypatch.setattr(harness, "train_cycle", flaky)
    with pytest.raises(DivergenceError):
        harness.run_experiment(small(), tmp_path)
    doc = json.loads((tmp_path / "metrics.json").read_text())
    assert len(doc["records"]) == 2 and doc["stop_reason"].startswith("error")


# -- persistence ------------------------------------------------------------------------

def test_run_experiment_deterministic(tmp_path):
    for cfg in (small(), ExperimentConfig(**SMALL_CONNECT)):
        a = harness.run_experiment(cfg, tmp_path / f"{cfg.benchmark}a")
        b = harness.run_experiment(cfg, tmp_path / f"{cfg.benchmark}b")
        ma = (tmp_path / f"{cfg.benchmark}a" / "metrics.json").read_bytes()
        mb = (tmp_path / f"{cfg.benchmark}b" / "metrics.json").read_bytes()
        assert ma == mb
        assert np.array_equal(a.weights, b.weights)


def test_run_experiment_outputs(tmp_path):
    cfg = small()
    res = harness.run_experiment(cfg, tmp_path)
    for name in ("config.json", "metrics.json", "weights.json", "timing.csv"):
        assert (tmp_path / name).exists()
    assert ExperimentConfig.load(tmp_path / "config.json") == cfg
    assert len(maze.load_mazes(tmp_path / "data" / "train", "train")) == 3
    assert harness.load_metrics(tmp_path / "metrics.json") == res.records


def test_weights_byte_round_trip(tmp_path):
    cfg = small()
    grid = cfg.grid_spec()
    w = np.random.default_rng(0).normal(size=grid.n_weights) / 3
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    harness.save_weights(p1, w, grid)
    w_back = harness.load_weights(p1, grid)
    harness.save_weights(p2, w_back, grid)
    assert np.array_equal(w, w_back)
    assert p1.read_bytes() == p2.read_bytes()
    with pytest.raises(RejectedInput):
        harness.load_weights(p1, small(n_hidden=3).grid_spec())


def test_plot_data_empty_and_rows():
    text = harness.emit_plot_data([])
    assert text == "\t".join(harness.METRIC_COLUMNS) + "\n"
    res = harness.train(small())
    text = harness.emit_plot_data(res.records)
    assert len(text.strip().split("\n")) == len(res.records) + 1


def test_plot_data_round_trip_full_precision():
    recs = [MetricsRecord(1, 1 / 3, 2 / 7, 55.5, None, 1.0, 1e-17),
            MetricsRecord(2, np.nextafter(1.0, 2.0), 0.1, 0.0, 12.5, 0.5, None)]
    cols = harness.parse_plot_data(harness.emit_plot_data(recs))
    assert cols["train_sse"] == [1 / 3, np.nextafter(1.0, 2.0)]
    assert cols["r_diag"][0] == 1e-17 and np.isnan(cols["r_diag"][1])
    assert np.isnan(cols["test_score"][0])


# -- CLI --------------------------------------------------------------------------------

def write_config(tmp_path, **kw):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**SMALL_MAZE, **kw}))
    return p


def test_cli_full_flow(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["gen-mazes", "--config", str(cfg), "--seed", "4",
                     "--out", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d" / "test").glob("*.txt"))) == 2
    assert cli.main(["train", "--config", str(cfg), "--cycles", "2", "--trainer", "alr",
                     "--out", str(tmp_path / "run")]) == 0
    saved = ExperimentConfig.load(tmp_path / "run" / "config.json")
    assert saved.max_cycles == 2 and saved.trainer == "alr"
    assert cli.main(["eval", "--config", str(cfg), "--weights",
                     str(tmp_path / "run" / "weights.json"),
                     "--data", str(tmp_path / "d" / "test")]) == 0
    assert "goodness" in capsys.readouterr().out
    out = tmp_path / "plot.tsv"
    assert cli.main(["plot-data", "--metrics", str(tmp_path / "run" / "metrics.json"),
                     "--out", str(out)]) == 0
    assert len(out.read_text().strip().split("\n")) == 4


def test_cli_gen_patterns(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL_CONNECT))
    assert cli.main(["gen-patterns", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert len(list((tmp_path / "train").glob("*.txt"))) == 6


def test_cli_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"maze_size": -2}))
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--bogus"])
    assert info.value.code == 1
    assert cli.main(["eval", "--weights", str(tmp_path / "none.json"),
                     "--data", str(tmp_path / "nowhere")]) == 1


def test_cli_divergence_exit_code(tmp_path, monkeypatch):
    def explode(*args, **kw):
        raise DivergenceError("non-finite network state at internal step 3", step=3)

    monkeypatch.setattr(cli, "run_experiment", explode)
    cfg = write_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2


def test_metrics_file_records_seeds(tmp_path):
    cfg = dataclasses.replace(small(max_cycles=1), data_seed=5, weight_seed=6)
    harness.run_experiment(cfg, tmp_path)
    doc = json.loads((tmp_path / "metrics.json").read_text())
    assert doc["seeds"] == {"data_seed": 5, "weight_seed": 6, "transform_seed": 2}
