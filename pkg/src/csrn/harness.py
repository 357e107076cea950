"""Experiment orchestration: configuration, the training cycle, persistence.

One training cycle runs every training pattern forward, pushes the output
errors back through the output transformation and the grid, stacks the
per-pattern Jacobians and residuals, applies a single EKF (or adaptive-rate)
update and finally evaluates train and test sets at the new weights.
"""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import connect, maze
from .alr import AlrState, alr_step
from .ekf import EkfState, ekf_update, multi_stream_stack
from .errors import CSRNError, ConfigError, RejectedInput
from .grid import GridSpec, grid_forward, grid_jacobian

log = logging.getLogger(__name__)

BENCHMARKS = ("maze", "connect")
TRAINERS = ("ekf", "alr")


@dataclass
class ExperimentConfig:
    benchmark: str = "maze"
    # maze benchmark
    maze_size: int = 5
    obstacle_density: float = 0.25
    n_train_mazes: int = 30
    n_test_mazes: int = 10
    wall_value: float | None = None
    # connectedness benchmark
    pattern_size: int = 5
    n_train_connected: int = 30
    n_train_disconnected: int = 30
    n_test_connected: int = 10
    n_test_disconnected: int = 10
    transform_hidden: int = 8
    # network
    n_external: int = 2
    n_recurrent: int = 15
    n_hidden: int = 5
    internal_steps: int = 20
    settle_tolerance: float = 1e-4
    has_bias: bool = True
    activation: str = "tanh"
    init_range: float = 0.3
    init_scale: float | None = None
    # training
    trainer: str = "ekf"
    k0: float = 1e-6
    q_scale: float = 1e-8
    a: float = 1e-3
    b: float = 1e-3
    alr_lr: float = 1e-5
    alr_up: float = 1.05
    alr_down: float = 0.5
    max_cycles: int = 300
    sse_threshold: float | None = None
    plateau_cycles: int = 25
    # seeds
    data_seed: int = 0
    weight_seed: int = 1
    transform_seed: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"benchmark must be one of {BENCHMARKS}")
        if self.trainer not in TRAINERS:
            raise ConfigError(f"trainer must be one of {TRAINERS}")
        positive = ["maze_size", "pattern_size", "n_external", "internal_steps",
                    "transform_hidden"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        counts = ["n_train_mazes", "n_test_mazes", "n_train_connected",
                  "n_train_disconnected", "n_test_connected", "n_test_disconnected",
                  "n_recurrent", "n_hidden", "max_cycles", "plateau_cycles"]
        for name in counts:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.k0 <= 0 or self.q_scale < 0 or self.a < 0 or self.b < 0:
            raise ConfigError("EKF parameters must be non-negative (k0 positive)")
        if self.benchmark == "connect" and self.n_external < 1:
            raise ConfigError("connectedness needs at least one external input")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, data_seed=seed, weight_seed=seed + 1,
                                   transform_seed=seed + 2)

    def grid_spec(self) -> GridSpec:
        side = self.maze_size + 2 if self.benchmark == "maze" else self.pattern_size
        return GridSpec.build(side, side, self.n_external, self.n_recurrent,
                              self.n_hidden, self.internal_steps, self.settle_tolerance,
                              self.has_bias, self.activation)

    def stop_threshold(self) -> float | None:
        if self.sse_threshold is not None:
            return self.sse_threshold
        if self.benchmark == "maze":
            return maze.sse_threshold(self.maze_size)
        return None


@dataclass
class Dataset:
    items: list
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.items)


class MazeTask:
    """Every cell output is a measurement: s = (m+2)**2 per maze."""
    score_name = "goodness"

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.grid = config.grid_spec()
        self.wall_value = config.wall_value

    def default_scale(self) -> float:
        # start the output weight just above the wall target so that walls
        # are reachable without saturating the output node
        m = self.config.maze_size
        wall = self.wall_value if self.wall_value is not None else float(m * m)
        return 1.2 * wall

    def make_dataset(self, mazes) -> Dataset:
        if not mazes:
            return Dataset([], np.zeros((0,) + self._in_shape()), np.zeros((0, self.grid.n_cells)))
        inputs = np.stack([maze.encode_maze(mz) for mz in mazes])
        if self.grid.n_external > 2:
            pad = self.grid.n_external - 2
            inputs = np.concatenate([inputs, np.zeros(inputs.shape[:3] + (pad,))], axis=-1)
        targets = np.stack([maze.dp_solve(mz, self.wall_value).ravel() for mz in mazes])
        return Dataset(list(mazes), inputs, targets)

    def _in_shape(self):
        return (self.grid.rows, self.grid.cols, self.grid.n_external)

    def generate(self, seed):
        cfg = self.config
        rng = np.random.default_rng(seed)
        train = [maze.generate_maze(cfg.maze_size, cfg.obstacle_density, rng)
                 for _ in range(cfg.n_train_mazes)]
        seen = set(train)
        test = []
        while len(test) < cfg.n_test_mazes:
            mz = maze.generate_maze(cfg.maze_size, cfg.obstacle_density, rng)
            if mz not in seen:
                test.append(mz)
        return train, test

    def outputs(self, w, data: Dataset):
        res = grid_forward(self.grid, w, data.inputs)
        return res.outputs.reshape(len(data), -1), res.settled

    def outputs_and_jacobian(self, w, data: Dataset):
        res = grid_forward(self.grid, w, data.inputs)
        jac = grid_jacobian(self.grid, w, res.trace, np.eye(self.grid.n_cells))
        return res.outputs.reshape(len(data), -1), jac, res.settled

    def score(self, Y, data: Dataset) -> float:
        side = self.grid.rows
        return float(np.mean([maze.goodness(y.reshape(side, side), t.reshape(side, side), mz)
                              for y, t, mz in zip(Y, data.targets, data.items)]))

    def save(self, items, directory, prefix):
        maze.save_mazes(items, directory, prefix)


class ConnectTask:
    """One score per pattern, read through a frozen random GMLP."""
    score_name = "accuracy"

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.grid = config.grid_spec()
        self.transform = connect.OutputTransform.random(
            self.grid.n_cells, config.transform_hidden, seed=config.transform_seed)

    def default_scale(self) -> float | None:
        return None

    def make_dataset(self, patterns) -> Dataset:
        g = self.grid
        if not patterns:
            return Dataset([], np.zeros((0, g.rows, g.cols, g.n_external)), np.zeros((0, 1)))
        inputs = np.stack([connect.encode_pattern(p, g.n_external) for p in patterns])
        targets = np.array([[p.target] for p in patterns])
        return Dataset(list(patterns), inputs, targets)

    def generate(self, seed):
        cfg = self.config
        rng = np.random.default_rng(seed)
        train = connect.generate_patterns(cfg.pattern_size, cfg.n_train_connected,
                                          cfg.n_train_disconnected, rng)
        test = connect.generate_patterns(cfg.pattern_size, cfg.n_test_connected,
                                         cfg.n_test_disconnected, rng, exclude=train)
        return train, test

    def outputs(self, w, data: Dataset):
        scores, settled = connect.csrn_scores(self.grid, w, self.transform, data.inputs)
        return scores[:, None], settled

    def outputs_and_jacobian(self, w, data: Dataset):
        scores, jac, settled = connect.csrn_scores(self.grid, w, self.transform,
                                                   data.inputs, jacobian=True)
        return scores[:, None], jac[:, None, :], settled

    def score(self, Y, data: Dataset) -> float:
        return connect.accuracy(Y[:, 0], data.items)

    def save(self, items, directory, prefix):
        connect.save_patterns(items, directory, prefix)


def make_task(config: ExperimentConfig):
    return MazeTask(config) if config.benchmark == "maze" else ConnectTask(config)


@dataclass
class MetricsRecord:
    """Per-cycle metrics; sse values are averaged per pattern.

    ``train_score``/``test_score`` are the goodness G (maze) or the
    classification accuracy (connectedness), both in percent.
    """
    cycle: int
    train_sse: float | None
    test_sse: float | None
    train_score: float | None
    test_score: float | None
    settled_fraction: float | None
    r_diag: float | None

    def to_dict(self):
        return dataclasses.asdict(self)


METRIC_COLUMNS = [f.name for f in dataclasses.fields(MetricsRecord)]


def evaluate(task, w, data: Dataset):
    """(mean per-pattern sse, score, settled fraction) or Nones for an empty set."""
    if len(data) == 0:
        return None, None, None
    Y, settled = task.outputs(w, data)
    sse = float(np.sum((data.targets - Y) ** 2)) / len(data)
    return sse, task.score(Y, data), float(np.mean(settled))


def init_trainer(config: ExperimentConfig, n_weights: int):
    if config.trainer == "ekf":
        return EkfState.initial(n_weights, config.k0, config.q_scale, config.a, config.b)
    return AlrState(config.alr_lr, config.alr_up, config.alr_down)


def init_weights(config: ExperimentConfig, task) -> np.ndarray:
    """Uniform weights in +-init_range; the output weight may be preset."""
    rng = np.random.default_rng(config.weight_seed)
    w = task.grid.cell.init_weights(rng, config.init_range)
    scale = config.init_scale if config.init_scale is not None else task.default_scale()
    if scale is not None:
        w[-1] = scale
    return w


def batch_jacobian(task, w, data: Dataset):
    """Stacked Jacobian, stacked residual and settled flags for one batch."""
    Y, jac, settled = task.outputs_and_jacobian(w, data)
    C, e = multi_stream_stack(zip(jac, data.targets - Y))
    return C, e, settled


def train_cycle(task, w, state, train: Dataset, test: Dataset, cycle: int):
    """One update of the weights.  Returns ``(new_w, new_state, MetricsRecord)``."""
    if len(train) == 0:
        raise RejectedInput("training set is empty")
    C, e, _ = batch_jacobian(task, w, train)
    if isinstance(state, EkfState):
        dw, state = ekf_update(state, C, e)
        w = w + dw
        r_diag = state.last_r
    else:
        # gradient of half the batch squared error
        w, state = alr_step(state, w, -(C.T @ e), float(e @ e))
        r_diag = None
    tr_sse, tr_score, tr_settled = evaluate(task, w, train)
    te_sse, te_score, _ = evaluate(task, w, test)
    return w, state, MetricsRecord(cycle, tr_sse, te_sse, tr_score, te_score,
                                   tr_settled, r_diag)


class Stopper:
    """Threshold on the monitored sse, plateau of its best value, or the cycle cap."""

    def __init__(self, threshold, plateau, max_cycles):
        self.threshold = threshold
        self.plateau = plateau
        self.max_cycles = max_cycles
        self.best = math.inf
        self.since_best = 0

    def __call__(self, rec: MetricsRecord) -> str | None:
        value = rec.test_sse if rec.test_sse is not None else rec.train_sse
        if self.threshold is not None and value < self.threshold:
            return "threshold"
        if value < self.best:
            self.best, self.since_best = value, 0
        else:
            self.since_best += 1
        if self.plateau and self.since_best >= self.plateau:
            return "plateau"
        if rec.cycle >= self.max_cycles:
            return "max_cycles"
        return None


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list[MetricsRecord]
    weights: np.ndarray
    stop_reason: str
    wall_times: list[float] = field(default_factory=list)

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]

    def cycles_to_threshold(self, threshold: float, key: str = "train_sse") -> int | None:
        for rec in self.records:
            v = getattr(rec, key)
            if v is not None and v < threshold:
                return rec.cycle
        return None


def train(config: ExperimentConfig, train_items=None, test_items=None,
          task=None) -> RunResult:
    """Generate (or take) datasets and run cycles until the stopping rule fires."""
    task = task or make_task(config)
    if train_items is None:
        train_items, test_items = task.generate(config.data_seed)
    test_items = test_items or []
    overlap = set(train_items) & set(test_items)
    if overlap:
        raise RejectedInput(f"{len(overlap)} test items also occur in the training set")
    train_set, test_set = task.make_dataset(train_items), task.make_dataset(test_items)
    w = init_weights(config, task)
    state = init_trainer(config, w.size)
    tr_sse, tr_score, tr_settled = evaluate(task, w, train_set)
    te_sse, te_score, _ = evaluate(task, w, test_set)
    records = [MetricsRecord(0, tr_sse, te_sse, tr_score, te_score, tr_settled, None)]
    walls = [0.0]
    stopper = Stopper(config.stop_threshold(), config.plateau_cycles, config.max_cycles)
    reason = "max_cycles"
    t0 = time.perf_counter()
    for cycle in range(1, config.max_cycles + 1):
        try:
            w, state, rec = train_cycle(task, w, state, train_set, test_set, cycle)
        except CSRNError as exc:
            result = RunResult(config, records, w, f"error: {exc}", walls)
            exc.partial_result = result
            raise
        records.append(rec)
        walls.append(time.perf_counter() - t0)
        log.debug("cycle %d train_sse %.4g test_sse %s", cycle, rec.train_sse, rec.test_sse)
        stop = stopper(rec)
        if stop:
            reason = stop
            break
    return RunResult(config, records, w, reason, walls)


# -- persistence ---------------------------------------------------------------

def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def metrics_json(result: RunResult) -> str:
    cfg = result.config
    doc = {
        "benchmark": cfg.benchmark,
        "trainer": cfg.trainer,
        "seeds": {"data_seed": cfg.data_seed, "weight_seed": cfg.weight_seed,
                  "transform_seed": cfg.transform_seed},
        "stop_reason": result.stop_reason,
        "records": [{k: _clean(v) for k, v in r.to_dict().items()} for r in result.records],
    }
    return json.dumps(doc, indent=1) + "\n"


def load_metrics(path) -> list[MetricsRecord]:
    doc = json.loads(Path(path).read_text())
    return [MetricsRecord(**r) for r in doc["records"]]


def weights_json(w, grid: GridSpec) -> str:
    cell = grid.cell
    doc = {"cell": {"n_inputs": cell.n_inputs, "n_hidden": cell.n_hidden,
                    "n_outputs": cell.n_outputs, "has_bias": cell.has_bias,
                    "activation": cell.activation},
           "weights": [float(v) for v in w]}
    return json.dumps(doc) + "\n"


def save_weights(path, w, grid: GridSpec):
    Path(path).write_text(weights_json(w, grid))


def load_weights(path, grid: GridSpec | None = None) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    w = np.array(doc["weights"], dtype=np.float64)
    if grid is not None and w.size != grid.n_weights:
        raise RejectedInput(f"weights file holds {w.size} weights, grid needs {grid.n_weights}")
    return w


def run_experiment(config: ExperimentConfig, out_dir) -> RunResult:
    """Train and persist config, datasets, metrics, weights and timings."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    task = make_task(config)
    train_items, test_items = task.generate(config.data_seed)
    task.save(train_items, out / "data" / "train", "train")
    task.save(test_items, out / "data" / "test", "test")
    try:
        result = train(config, train_items, test_items, task)
    except CSRNError as exc:
        partial = getattr(exc, "partial_result", None)
        if partial is not None:
            (out / "metrics.json").write_text(metrics_json(partial))
        raise
    (out / "metrics.json").write_text(metrics_json(result))
    save_weights(out / "weights.json", result.weights, task.grid)
    # wall-clock times vary run to run, so they live outside metrics.json
    (out / "timing.csv").write_text(
        "cycle,wall_time\n" + "".join(f"{r.cycle},{t!r}\n"
                                      for r, t in zip(result.records, result.wall_times)))
    return result


def emit_plot_data(records) -> str:
    """Tab-separated columns, one per metric, header row first."""
    if isinstance(records, (str, Path)):
        records = load_metrics(records)
    buf = io.StringIO()
    buf.write("\t".join(METRIC_COLUMNS) + "\n")
    for rec in records:
        vals = []
        for name in METRIC_COLUMNS:
            v = getattr(rec, name)
            if v is None:
                vals.append("nan")
            elif isinstance(v, (int, np.integer)):
                vals.append(str(int(v)))
            else:
                vals.append(repr(float(v)))
        buf.write("\t".join(vals) + "\n")
    return buf.getvalue()


def parse_plot_data(text: str) -> dict[str, list[float]]:
    lines = text.rstrip("\n").split("\n")
    header = lines[0].split("\t")
    cols = {h: [] for h in header}
    for line in lines[1:]:
        for h, v in zip(header, line.split("\t")):
            cols[h].append(float(v))
    return cols
