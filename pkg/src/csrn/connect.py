"""Corner-to-corner connectedness benchmark.

A square binary image is "connected" when its top-left and bottom-right pixels
are both on and joined by a path of on pixels that moves only up, down, left
or right.  The CSRN reads the image one pixel per cell; a fixed random GMLP
maps the grid of cell outputs to a single score with targets +0.5 (connected)
and -0.5 (disconnected).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationFailure, RejectedInput
from .gmlp import CellSpec, cell_backward, cell_forward
from .grid import GridSpec, grid_forward, grid_jacobian

TARGET = 0.5
MAX_DRAWS = 10 ** 6


def is_connected_oracle(pixels) -> bool:
    """BFS over on pixels from the top-left corner (4-neighbourhood)."""
    px = np.asarray(pixels, dtype=bool)
    rows, cols = px.shape
    goal = (rows - 1, cols - 1)
    if not (px[0, 0] and px[goal]):
        return False
    seen = np.zeros_like(px)
    seen[0, 0] = True
    queue = deque([(0, 0)])
    while queue:
        i, j = queue.popleft()
        if (i, j) == goal:
            return True
        for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if 0 <= a < rows and 0 <= b < cols and px[a, b] and not seen[a, b]:
                seen[a, b] = True
                queue.append((a, b))
    return False


@dataclass(frozen=True)
class PixelPattern:
    pixels: np.ndarray
    label: bool = field(default=None)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=bool)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise RejectedInput(f"pattern must be square, got shape {px.shape}")
        object.__setattr__(self, "pixels", px)
        truth = is_connected_oracle(px)
        if self.label is None:
            object.__setattr__(self, "label", truth)
        elif bool(self.label) != truth:
            raise RejectedInput("stored label disagrees with the connectivity oracle")
        else:
            object.__setattr__(self, "label", bool(self.label))

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    @property
    def target(self) -> float:
        return TARGET if self.label else -TARGET

    def key(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other):
        return isinstance(other, PixelPattern) and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash(self.key())


def generate_patterns(size: int, n_connected: int, n_disconnected: int, seed,
                      exclude=()) -> list[PixelPattern]:
    """Rejection-sample patterns (pixels on with probability 0.5) until both
    class quotas are filled.  Patterns whose pixels match anything in
    ``exclude`` are skipped, which keeps a later test set disjoint from a
    training set drawn from the same generator.
    """
    if size < 1 or n_connected < 0 or n_disconnected < 0:
        raise RejectedInput("invalid pattern quotas")
    rng = np.random.default_rng(seed)
    banned = {p.key() for p in exclude}
    need = {True: n_connected, False: n_disconnected}
    out: list[PixelPattern] = []
    for _ in range(MAX_DRAWS):
        if need[True] == 0 and need[False] == 0:
            return out
        px = rng.random((size, size)) < 0.5
        if px.tobytes() in banned:
            continue
        label = is_connected_oracle(px)
        if need[label] > 0:
            need[label] -= 1
            out.append(PixelPattern(px, label))
    if need[True] == 0 and need[False] == 0:
        return out
    raise GenerationFailure(f"pattern quotas unfilled after {MAX_DRAWS} draws")


def encode_pattern(pattern: PixelPattern, n_external: int = 2) -> np.ndarray:
    """``(size, size, n_external)``: channel 0 is the pixel, the rest are zero."""
    enc = np.zeros((pattern.size, pattern.size, n_external))
    enc[..., 0] = pattern.pixels
    return enc


@dataclass
class OutputTransform:
    """A GMLP with one output whose weights are drawn once and never trained."""
    spec: CellSpec
    weights: np.ndarray

    def __post_init__(self):
        if self.spec.n_outputs != 1:
            raise RejectedInput("output transform must have exactly one output")
        w = np.array(self.weights, dtype=np.float64)
        if w.shape != (self.spec.n_weights,):
            raise RejectedInput("transform weights do not match its spec")
        w.setflags(write=False)
        self.weights = w

    @classmethod
    def random(cls, n_inputs: int, n_hidden: int = 8, seed=0, limit: float = 0.5):
        spec = CellSpec(n_inputs, n_hidden, 1)
        rng = np.random.default_rng(seed)
        return cls(spec, rng.uniform(-limit, limit, spec.n_weights))

    def scores(self, cell_outputs):
        """``cell_outputs`` ``(P, n_inputs)`` -> scores ``(P,)`` and d score / d input."""
        y, trace = cell_forward(self.spec, self.weights, cell_outputs)
        dx, _ = cell_backward(self.spec, self.weights, trace, np.ones_like(y))
        return y[..., 0], dx


def _check_width(grid: GridSpec, transform: OutputTransform):
    if transform.spec.n_inputs != grid.n_cells:
        raise RejectedInput(f"transform takes {transform.spec.n_inputs} inputs but the "
                            f"grid has {grid.n_cells} cells")


def csrn_scores(grid: GridSpec, w, transform: OutputTransform, inputs, jacobian=False):
    """Scores for a batch of encoded patterns ``(P, rows, cols, n_external)``.

    With ``jacobian=True`` also returns the ``(P, p)`` derivatives of each score
    w.r.t. the CSRN weights (transform deltas pushed back through the grid)
    and the per-pattern settled flags.
    """
    _check_width(grid, transform)
    res = grid_forward(grid, w, inputs)
    flat = res.outputs.reshape(res.outputs.shape[0], -1)
    scores, d_out = transform.scores(flat)
    if not jacobian:
        return scores, res.settled
    deltas = d_out.reshape(-1, 1, grid.rows, grid.cols)
    jac = grid_jacobian(grid, w, res.trace, deltas)[:, 0, :]
    return scores, jac, res.settled


def csrn_classify(grid: GridSpec, w, transform: OutputTransform, pattern: PixelPattern) -> float:
    """Score of one pattern; its sign is the predicted class."""
    enc = encode_pattern(pattern, grid.n_external)[None]
    scores, _ = csrn_scores(grid, w, transform, enc)
    return float(scores[0])


def accuracy(scores, patterns) -> float:
    labels = np.array([p.label for p in patterns])
    return 100.0 * float(np.mean((np.asarray(scores) > 0) == labels))


# -- feed-forward baseline -------------------------------------------------

def _mlp_forward(params, X):
    W1, b1, w2, b2 = params
    h = np.tanh(X @ W1 + b1)
    return h, h @ w2 + b2


def mlp_train(X, t, hidden: int, seed, lr: float = 0.05, epochs: int = 2000):
    """Full-batch gradient descent on half mean squared error."""
    rng = np.random.default_rng(seed)
    n_in = X.shape[1]
    params = [rng.uniform(-1, 1, (n_in, hidden)) / np.sqrt(n_in), np.zeros(hidden),
              rng.uniform(-1, 1, hidden) / np.sqrt(hidden), 0.0]
    n = X.shape[0]
    for _ in range(epochs):
        W1, b1, w2, b2 = params
        h, y = _mlp_forward(params, X)
        e = (y - t) / n
        gh = np.outer(e, w2) * (1 - h * h)
        params = [W1 - lr * X.T @ gh, b1 - lr * gh.sum(0), w2 - lr * h.T @ e,
                  b2 - lr * e.sum()]
    return params


def _as_matrix(patterns, size):
    if not patterns:
        raise RejectedInput("pattern set is empty")
    if any(p.size != size for p in patterns):
        raise RejectedInput(f"all patterns must be {size}x{size}")
    X = np.array([p.pixels.ravel() for p in patterns], dtype=np.float64)
    t = np.array([p.target for p in patterns])
    return X, t


def mlp_baseline(size: int, hidden: int, train_set, test_set, seed,
                 lr: float = 0.05, epochs: int = 2000) -> float:
    """Test accuracy (percent) of a one-hidden-layer tanh MLP."""
    X, t = _as_matrix(train_set, size)
    Xt, _ = _as_matrix(test_set, size)
    params = mlp_train(X, t, hidden, seed, lr, epochs)
    return accuracy(_mlp_forward(params, Xt)[1], test_set)


def mlp_sweep(size: int, hidden_sizes, train_set, test_set, seed, **kw) -> dict[int, float]:
    return {h: mlp_baseline(size, h, train_set, test_set, seed, **kw) for h in hidden_sizes}


# -- text format -------------------------------------------------------------

def format_pattern(p: PixelPattern) -> str:
    rows = ["".join("1" if v else "0" for v in row) for row in p.pixels]
    return "\n".join([f"pattern {p.size} {int(p.label)}"] + rows) + "\n"


def parse_pattern(text: str) -> PixelPattern:
    lines = text.strip("\n").split("\n")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "pattern" or head[2] not in ("0", "1"):
        raise RejectedInput(f"bad pattern header {lines[0]!r}")
    size = int(head[1])
    body = lines[1:]
    if len(body) != size or any(len(b) != size or set(b) - {"0", "1"} for b in body):
        raise RejectedInput(f"pattern body is not a {size}x{size} 0/1 grid")
    px = np.array([[c == "1" for c in b] for b in body])
    return PixelPattern(px, head[2] == "1")


def save_patterns(patterns, directory, prefix="pattern") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, p in enumerate(patterns):
        path = directory / f"{prefix}_{k:03d}.txt"
        path.write_text(format_pattern(p))
        paths.append(path)
    return paths


def load_patterns(directory, prefix="pattern") -> list[PixelPattern]:
    return [parse_pattern(p.read_text())
            for p in sorted(Path(directory).glob(f"{prefix}_*.txt"))]
