"""Generalized 2D maze benchmark.

A maze is an ``m x m`` grid of clear cells and obstacles with one goal.  The
network sees it framed by a one-cell wall, so value grids and encodings are
``(m+2) x (m+2)``.  Targets are shortest-path lengths to the goal (unit move
cost, deterministic moves, no discounting); wall and obstacle cells carry a
cap value that defaults to ``m**2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import GenerationFailure, RejectedInput, UndefinedMetric

# N, E, S, W
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
MAX_RETRIES = 1000


@dataclass(frozen=True)
class MazeInstance:
    obstacles: np.ndarray
    goal: tuple[int, int]

    def __post_init__(self):
        obs = np.asarray(self.obstacles, dtype=bool)
        object.__setattr__(self, "obstacles", obs)
        object.__setattr__(self, "goal", (int(self.goal[0]), int(self.goal[1])))
        if obs.ndim != 2:
            raise RejectedInput("obstacle grid must be 2-D")
        i, j = self.goal
        if not (0 <= i < obs.shape[0] and 0 <= j < obs.shape[1]) or obs[i, j]:
            raise RejectedInput(f"goal {self.goal} must be a clear cell inside the maze")

    @property
    def shape(self) -> tuple[int, int]:
        return self.obstacles.shape

    @property
    def m(self) -> int:
        return self.obstacles.shape[0]

    @property
    def default_wall_value(self) -> float:
        return float(self.obstacles.size)

    def padded_clear(self) -> np.ndarray:
        return np.pad(~self.obstacles, 1, constant_values=False)

    def padded_goal(self) -> tuple[int, int]:
        return self.goal[0] + 1, self.goal[1] + 1

    def __eq__(self, other):
        return (isinstance(other, MazeInstance) and self.goal == other.goal
                and np.array_equal(self.obstacles, other.obstacles))

    def __hash__(self):
        return hash((self.goal, self.obstacles.tobytes(), self.obstacles.shape))


def all_reach_goal(obstacles: np.ndarray, goal) -> bool:
    labels, _ = ndimage.label(~obstacles)
    clear = labels > 0
    return bool(np.all(labels[clear] == labels[goal]))


def generate_maze(m: int, density: float, seed) -> MazeInstance:
    """Random maze whose clear cells all reach the goal.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if m < 3:
        raise RejectedInput("maze side must be at least 3")
    if not 0 <= density <= 0.4:
        raise RejectedInput("obstacle density must lie in [0, 0.4]")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RETRIES):
        obstacles = rng.random((m, m)) < density
        clear = np.flatnonzero(~obstacles)
        if clear.size == 0:
            continue
        goal = divmod(int(rng.choice(clear)), m)
        if all_reach_goal(obstacles, goal):
            return MazeInstance(obstacles, goal)
    raise GenerationFailure(f"no connected {m}x{m} maze after {MAX_RETRIES} draws")


def dp_solve(maze: MazeInstance, wall_value: float | None = None) -> np.ndarray:
    """Cost-to-go grid by value iteration on the padded maze.

    Clear cells end with their shortest-path length to the goal; border and
    obstacle cells hold ``wall_value``.
    """
    if wall_value is None:
        wall_value = maze.default_wall_value
    clear = maze.padded_clear()
    goal = maze.padded_goal()
    J = np.full(clear.shape, np.inf)
    J[goal] = 0.0
    update = clear.copy()
    update[goal] = False
    while True:
        # Bellman backup: one unit move plus the best neighbour value
        best = np.full_like(J, np.inf)
        for di, dj in MOVES:
            best = np.minimum(best, np.roll(J, (-di, -dj), axis=(0, 1)))
        new = np.where(update, 1.0 + best, J)
        if np.array_equal(new, J):
            break
        J = new
    return np.where(clear, J, float(wall_value))


def encode_maze(maze: MazeInstance) -> np.ndarray:
    """Two-channel ``(m+2, m+2, 2)`` input: blocked indicator, goal indicator."""
    clear = maze.padded_clear()
    enc = np.zeros(clear.shape + (2,))
    enc[..., 0] = ~clear
    enc[maze.padded_goal() + (1,)] = 1.0
    return enc


def decode_maze(encoding) -> MazeInstance:
    enc = np.asarray(encoding)
    inner = enc[1:-1, 1:-1]
    goals = np.argwhere(inner[..., 1] == 1)
    if len(goals) != 1:
        raise RejectedInput("encoding must mark exactly one goal")
    return MazeInstance(inner[..., 0] == 1, tuple(goals[0]))


def sse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise RejectedInput(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.sum((pred - target) ** 2))


def sse_threshold(m: int, per_cell: float = 0.5) -> float:
    """Squared-error level at which every cell is within ``per_cell``."""
    return (m + 2) ** 2 * per_cell ** 2


def goodness(pred, target, maze: MazeInstance) -> float:
    """Percentage of clear non-goal cells whose steepest-descent move is optimal.

    The predicted move goes to the neighbour with the smallest predicted value
    (ties broken N, E, S, W); it is correct when that neighbour attains the
    smallest target value among the cell's neighbours.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    clear = maze.padded_clear()
    if pred.shape != clear.shape or target.shape != clear.shape:
        raise RejectedInput(f"grids must be {clear.shape}")
    cells = clear.copy()
    cells[maze.padded_goal()] = False
    if not cells.any():
        raise UndefinedMetric("maze has no clear non-goal cells")
    pn = np.stack([np.roll(pred, (-di, -dj), axis=(0, 1)) for di, dj in MOVES])
    tn = np.stack([np.roll(target, (-di, -dj), axis=(0, 1)) for di, dj in MOVES])
    choice = np.argmin(pn, axis=0)
    chosen = np.take_along_axis(tn, choice[None], axis=0)[0]
    correct = chosen == tn.min(axis=0)
    return 100.0 * np.count_nonzero(correct & cells) / np.count_nonzero(cells)


def format_maze(maze: MazeInstance) -> str:
    """Text form: ``maze <m>`` (or ``maze <rows> <cols>``) then one row per line."""
    rows, cols = maze.shape
    head = f"maze {rows}" if rows == cols else f"maze {rows} {cols}"
    lines = [head]
    for i in range(rows):
        lines.append("".join("G" if (i, j) == maze.goal else "#" if maze.obstacles[i, j]
                             else "." for j in range(cols)))
    return "\n".join(lines) + "\n"


def parse_maze(text: str) -> MazeInstance:
    lines = text.strip("\n").split("\n")
    head = lines[0].split()
    if not head or head[0] != "maze" or len(head) not in (2, 3):
        raise RejectedInput(f"bad maze header {lines[0]!r}")
    rows = int(head[1])
    cols = int(head[2]) if len(head) == 3 else rows
    body = lines[1:]
    if len(body) != rows or any(len(b) != cols for b in body):
        raise RejectedInput(f"maze body is not {rows}x{cols}")
    if any(ch not in ".#G" for b in body for ch in b):
        raise RejectedInput("maze rows may only contain '.', '#', 'G'")
    goals = [(i, j) for i, b in enumerate(body) for j, ch in enumerate(b) if ch == "G"]
    if len(goals) != 1:
        raise RejectedInput("maze must contain exactly one goal")
    obstacles = np.array([[ch == "#" for ch in b] for b in body], dtype=bool)
    return MazeInstance(obstacles, goals[0])


def save_mazes(mazes, directory, prefix="maze") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, mz in enumerate(mazes):
        p = directory / f"{prefix}_{k:03d}.txt"
        p.write_text(format_maze(mz))
        paths.append(p)
    return paths


def load_mazes(directory, prefix="maze") -> list[MazeInstance]:
    return [parse_maze(p.read_text())
            for p in sorted(Path(directory).glob(f"{prefix}_*.txt"))]
