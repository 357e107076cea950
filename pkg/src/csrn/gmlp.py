"""Generalized MLP cell: forward pass and exact reverse-mode derivatives.

Every node after the input block receives a weighted connection from every
node before it.  Nodes are ordered::

    [inputs | bias | hidden | outputs]

and the trainable weights are laid out flat, destination node major, source
node minor, with the output scaling weight appended last::

    w = [W[f, 0..f-1], W[f+1, 0..f], ..., W[n-1, 0..n-2], scale]

where ``f`` is the first non-input node.  Only the final output node is
multiplied by ``scale``; the other outputs (the recurrent ones in a grid cell)
are emitted as is.

Internally all arrays are node-major, ``(n_nodes, *batch)``, so that a slice
over nodes is contiguous and the backward recursion becomes a sequence of
matrix-vector products.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import OracleFailure, RejectedInput

ACTIVATIONS = ("tanh", "logistic")


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    return 1.0 / (1.0 + np.exp(-a))


def _dact(name: str, z: np.ndarray) -> np.ndarray:
    # derivative expressed through the activation value itself
    if name == "tanh":
        return 1.0 - z * z
    return z * (1.0 - z)


@dataclass(frozen=True)
class CellSpec:
    n_inputs: int
    n_hidden: int
    n_outputs: int
    has_bias: bool = True
    activation: str = "tanh"

    def __post_init__(self):
        if self.n_inputs < 1 or self.n_outputs < 1 or self.n_hidden < 0:
            raise RejectedInput(f"invalid cell sizes: {self}")
        if self.activation not in ACTIVATIONS:
            raise RejectedInput(f"unknown activation {self.activation!r}")

    @property
    def n_nodes(self) -> int:
        return self.n_inputs + int(self.has_bias) + self.n_hidden + self.n_outputs

    @property
    def first_active(self) -> int:
        """Index of the first node that computes something."""
        return self.n_inputs + int(self.has_bias)

    @property
    def first_output(self) -> int:
        return self.n_nodes - self.n_outputs

    @cached_property
    def connections(self) -> tuple[np.ndarray, np.ndarray]:
        """(destination, source) node index of every flat weight but the last."""
        dest, src = [], []
        for j in range(self.first_active, self.n_nodes):
            dest.extend([j] * j)
            src.extend(range(j))
        return np.array(dest, dtype=np.intp), np.array(src, dtype=np.intp)

    @property
    def n_weights(self) -> int:
        return len(self.connections[0]) + 1

    def unpack(self, w) -> tuple[np.ndarray, float]:
        """Flat weight vector -> (lower-triangular connection matrix, scale)."""
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.n_weights,):
            raise RejectedInput(
                f"weight vector has shape {w.shape}, expected ({self.n_weights},)")
        if not np.all(np.isfinite(w)):
            raise RejectedInput("weights must be finite")
        mat = np.zeros((self.n_nodes, self.n_nodes))
        dest, src = self.connections
        mat[dest, src] = w[:-1]
        return mat, float(w[-1])

    def pack(self, mat: np.ndarray, scale: float) -> np.ndarray:
        dest, src = self.connections
        return np.concatenate([mat[dest, src], [scale]])

    def init_weights(self, rng: np.random.Generator, limit: float = 0.3) -> np.ndarray:
        return rng.uniform(-limit, limit, self.n_weights)


@dataclass
class ForwardTrace:
    """Pre-activations and activations of every node, node-major.

    ``pre`` and ``act`` have shape ``(n_nodes, *batch)``.  Input and bias
    rows hold the raw input values (pre == act there).
    """
    spec: CellSpec
    pre: np.ndarray
    act: np.ndarray
    scale: float

    def outputs(self) -> np.ndarray:
        """Cell outputs rebuilt from the trace, batch-last -> batch-first."""
        y = self.act[self.spec.first_output:].copy()
        y[-1] *= self.scale
        return np.moveaxis(y, 0, -1)


def forward_nodes(spec: CellSpec, mat: np.ndarray, x_nodes: np.ndarray):
    """Run the cell on node-major inputs ``(n_inputs, *batch)``.

    Returns node-major ``(pre, act)`` of shape ``(n_nodes, *batch)``.
    """
    batch = x_nodes.shape[1:]
    act = np.empty((spec.n_nodes,) + batch)
    act[:spec.n_inputs] = x_nodes
    if spec.has_bias:
        act[spec.n_inputs] = 1.0
    pre = act.copy()
    flat = act.reshape(spec.n_nodes, -1)
    pflat = pre.reshape(spec.n_nodes, -1)
    for j in range(spec.first_active, spec.n_nodes):
        pflat[j] = _weighted_sum(mat[j, :j], flat[:j])
        flat[j] = _act(spec.activation, pflat[j])
    return pre, act


def _weighted_sum(coef: np.ndarray, rows: np.ndarray, start=None) -> np.ndarray:
    """``sum_i coef[i] * rows[i]`` accumulated in index order, elementwise.

    BLAS reductions reorder additions depending on array length and alignment;
    a fixed order keeps results independent of where an element sits in the
    batch (exact torus shift equivariance, row-by-row Jacobians equal to the
    batched ones).
    """
    acc = np.zeros(rows.shape[1:]) if start is None else start
    for c, row in zip(coef, rows):
        if c != 0.0:
            acc += c * row
    return acc


def node_deltas(spec: CellSpec, mat: np.ndarray, scale: float,
                act: np.ndarray, out_deltas: np.ndarray) -> np.ndarray:
    """Ordered derivatives w.r.t. every node's pre-activation.

    ``out_deltas`` is node-major ``(n_outputs, *batch)`` where ``batch`` must
    broadcast against ``act.shape[1:]`` (extra seed axes are allowed on the
    deltas).  Returns ``(n_nodes, *batch)``; rows of input and bias nodes are
    zero.  Nodes are visited in reverse evaluation order so that each node's
    delta collects the contributions of all later nodes before it is used.
    """
    batch = np.broadcast_shapes(act.shape[1:], out_deltas.shape[1:])
    n = spec.n_nodes
    g_a = np.zeros((n,) + batch)
    gflat = g_a.reshape(n, -1)
    ext = np.broadcast_to(out_deltas, (spec.n_outputs,) + batch).reshape(spec.n_outputs, -1)
    dphi = _dact(spec.activation, np.broadcast_to(act, (n,) + batch)).reshape(n, -1)
    fo = spec.first_output
    for j in range(n - 1, spec.first_active - 1, -1):
        g = np.zeros(gflat.shape[1]) if j < fo else ext[j - fo].copy()
        if j == n - 1:
            g *= scale
        g = _weighted_sum(mat[j + 1:, j], gflat[j + 1:], start=g)
        gflat[j] = g * dphi[j]
    return g_a


def input_deltas_from(spec: CellSpec, mat: np.ndarray, g_a: np.ndarray,
                      first_input: int = 0) -> np.ndarray:
    """Deltas of inputs ``first_input..n_inputs-1`` given node deltas."""
    fa = spec.first_active
    gflat = g_a[fa:].reshape(spec.n_nodes - fa, -1)
    out = np.stack([_weighted_sum(mat[fa:, i], gflat)
                    for i in range(first_input, spec.n_inputs)])
    return out.reshape((spec.n_inputs - first_input,) + g_a.shape[1:])


def cell_forward(spec: CellSpec, w, x):
    """Evaluate the cell.

    ``x`` has shape ``(..., n_inputs)``; any leading axes are a batch of
    independent cells sharing ``w``.  Returns ``(y, trace)`` with ``y`` of
    shape ``(..., n_outputs)``.
    """
    mat, scale = spec.unpack(w)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != spec.n_inputs:
        raise RejectedInput(f"input has shape {x.shape}, expected (..., {spec.n_inputs})")
    pre, act = forward_nodes(spec, mat, np.moveaxis(x, -1, 0))
    trace = ForwardTrace(spec, pre, act, scale)
    return trace.outputs(), trace


def cell_backward(spec: CellSpec, w, trace: ForwardTrace, output_deltas):
    """Backpropagate output deltas through one forward pass.

    Returns ``(input_deltas, weight_grad)``.  ``input_deltas`` keeps the batch
    shape of the trace; ``weight_grad`` is summed over the batch, which is the
    shared-weight accumulation a grid of identical cells needs.
    """
    if trace.spec != spec:
        raise RejectedInput("trace was produced by a different cell spec")
    mat, scale = spec.unpack(w)
    if scale != trace.scale:
        raise RejectedInput("trace was produced with different weights")
    d = np.asarray(output_deltas, dtype=np.float64)
    batch = trace.act.shape[1:]
    if d.shape != batch + (spec.n_outputs,):
        raise RejectedInput(
            f"output deltas have shape {d.shape}, expected {batch + (spec.n_outputs,)}")
    d_nodes = np.moveaxis(d, -1, 0)
    g_a = node_deltas(spec, mat, scale, trace.act, d_nodes)
    n = spec.n_nodes
    gmat = g_a.reshape(n, -1) @ trace.act.reshape(n, -1).T
    scale_grad = float(np.sum(d_nodes[-1] * trace.act[-1]))
    grad = spec.pack(gmat, scale_grad)
    return np.moveaxis(input_deltas_from(spec, mat, g_a), 0, -1), grad


def fd_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x``; column i is d f / d x_i."""
    if not h > 0:
        raise RejectedInput("step must be positive")
    x = np.asarray(x, dtype=np.float64).ravel()
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        hi = np.asarray(f(x + e), dtype=np.float64).ravel()
        lo = np.asarray(f(x - e), dtype=np.float64).ravel()
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            raise OracleFailure(f"non-finite function value at coordinate {i}")
        cols.append((hi - lo) / (2 * h))
    return np.stack(cols, axis=1)
