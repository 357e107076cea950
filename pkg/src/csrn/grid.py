"""Cellular simultaneous recurrent network on a torus.

Every cell of an ``rows x cols`` grid runs the same GMLP.  At each internal
step a cell reads

    [external inputs | its own r recurrent outputs | N, E, S, W neighbour outputs]

from the previous step and writes r recurrent outputs plus one scaled cell
output.  Neighbours see the unscaled activation of the final output node; the
scale weight only maps the last step onto the target range.  All cells update
synchronously.  The recurrent state starts at zero
for every presentation.

Derivatives of the final cell outputs w.r.t. the shared weights are computed
by unrolling the internal steps backwards: the input deltas of the cells at
step t become the output deltas at step t-1 (self feedback to the recurrent
outputs, neighbour feedback to the final output node of the neighbour), and the
per-step weight derivatives are summed into the shared columns.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, RejectedInput
from .gmlp import CellSpec, forward_nodes, input_deltas_from, node_deltas

N_NEIGHBOURS = 4


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    cell: CellSpec
    n_recurrent: int
    n_external: int
    internal_steps: int = 20
    settle_tolerance: float = 1e-4

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.internal_steps < 1:
            raise RejectedInput(f"invalid grid sizes: {self.rows}x{self.cols}, "
                                f"N={self.internal_steps}")
        want_in = self.n_external + self.n_recurrent + N_NEIGHBOURS
        if self.cell.n_inputs != want_in or self.cell.n_outputs != self.n_recurrent + 1:
            raise RejectedInput(
                f"cell must have {want_in} inputs and {self.n_recurrent + 1} outputs, "
                f"got {self.cell.n_inputs} and {self.cell.n_outputs}")

    @classmethod
    def build(cls, rows, cols, n_external=2, n_recurrent=15, n_hidden=5,
              internal_steps=20, settle_tolerance=1e-4, has_bias=True,
              activation="tanh") -> "GridSpec":
        cell = CellSpec(n_external + n_recurrent + N_NEIGHBOURS, n_hidden,
                        n_recurrent + 1, has_bias, activation)
        return cls(rows, cols, cell, n_recurrent, n_external, internal_steps,
                   settle_tolerance)

    @property
    def n_weights(self) -> int:
        return self.cell.n_weights

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols


@dataclass
class GridTrace:
    """Node-major activations of every cell at every step.

    ``pre`` and ``act`` have shape ``(N, n_nodes, P, rows, cols)``.
    """
    grid: GridSpec
    scale: float
    pre: np.ndarray
    act: np.ndarray
    batched: bool


@dataclass
class GridResult:
    outputs: np.ndarray
    trace: GridTrace
    settled: np.ndarray | bool


def _neighbours(o: np.ndarray) -> np.ndarray:
    # o: (P, R, C) -> (4, P, R, C) in N, E, S, W order
    return np.stack([np.roll(o, 1, axis=-2), np.roll(o, -1, axis=-1),
                     np.roll(o, -1, axis=-2), np.roll(o, 1, axis=-1)])


def _gather_neighbour_deltas(g: np.ndarray) -> np.ndarray:
    # adjoint of _neighbours: (4, ..., R, C) -> (..., R, C)
    return (np.roll(g[0], -1, axis=-2) + np.roll(g[1], 1, axis=-1)
            + np.roll(g[2], 1, axis=-2) + np.roll(g[3], -1, axis=-1))


def grid_forward(grid: GridSpec, w, input_grid) -> GridResult:
    """Run ``internal_steps`` synchronous updates of the whole grid.

    ``input_grid`` is ``(rows, cols, n_external)`` or a batch
    ``(P, rows, cols, n_external)``.  ``outputs`` is the scaled cell output
    after the last step, ``(rows, cols)`` or ``(P, rows, cols)``.
    """
    cell = grid.cell
    mat, scale = cell.unpack(w)
    x = np.asarray(input_grid, dtype=np.float64)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (grid.rows, grid.cols, grid.n_external):
        raise RejectedInput(f"input grid has shape {np.shape(input_grid)}, expected "
                            f"(..., {grid.rows}, {grid.cols}, {grid.n_external})")
    if not np.all(np.isfinite(x)):
        raise RejectedInput("input grid must be finite")
    n_pat = x.shape[0]
    r = grid.n_recurrent
    shape = (n_pat, grid.rows, grid.cols)
    ext = np.moveaxis(x, -1, 0)
    rec = np.zeros((r,) + shape)
    nb = np.zeros(shape)
    out = np.zeros(shape)
    n = cell.n_nodes
    pres = np.empty((grid.internal_steps, n) + shape)
    acts = np.empty_like(pres)
    change = np.zeros(n_pat)
    fo = cell.first_output
    for t in range(grid.internal_steps):
        x_nodes = np.concatenate([ext, rec, _neighbours(nb)])
        pre, act = forward_nodes(cell, mat, x_nodes)
        new_rec = act[fo:fo + r]
        new_out = scale * act[-1]
        if not (np.all(np.isfinite(new_rec)) and np.all(np.isfinite(new_out))):
            raise DivergenceError(f"non-finite network state at internal step {t + 1}",
                                  step=t + 1)
        change = np.maximum(np.abs(new_out - out).reshape(n_pat, -1).max(axis=1),
                            np.abs(new_rec - rec).reshape(r, n_pat, -1).max(axis=(0, 2))
                            if r else 0.0)
        rec, nb, out = new_rec, act[-1], new_out
        pres[t], acts[t] = pre, act
    settled = change < grid.settle_tolerance
    trace = GridTrace(grid, scale, pres, acts, batched)
    if not batched:
        return GridResult(out[0], trace, bool(settled[0]))
    return GridResult(out, trace, settled)


def grid_jacobian(grid: GridSpec, w, trace: GridTrace, output_deltas) -> np.ndarray:
    """Ordered derivatives of weighted final outputs w.r.t. the shared weights.

    ``output_deltas`` selects the exposed outputs: row k weights the final
    cell outputs, so Jacobian row k is ``sum_c D[k, c] d out_c / d w``.
    Accepted shapes are ``(s, rows*cols)``, ``(s, rows, cols)`` (same for every
    pattern) or ``(P, s, rows, cols)`` (per pattern).  Returns ``(s, p)`` for an
    unbatched trace and ``(P, s, p)`` otherwise.
    """
    cell = grid.cell
    if trace.grid != grid:
        raise RejectedInput("trace was produced by a different grid spec")
    mat, scale = cell.unpack(w)
    if scale != trace.scale:
        raise RejectedInput("trace was produced with different weights")
    n_steps, n, n_pat = trace.act.shape[:3]
    R, C = grid.rows, grid.cols
    d = np.asarray(output_deltas, dtype=np.float64)
    if d.ndim == 2 and d.shape[1] == R * C:
        d = d.reshape(d.shape[0], R, C)
    if d.ndim == 3 and d.shape[1:] == (R, C):
        d = np.broadcast_to(d, (n_pat,) + d.shape)
    if d.ndim != 4 or d.shape[0] != n_pat or d.shape[2:] != (R, C):
        raise RejectedInput(f"output deltas of shape {np.shape(output_deltas)} do not "
                            f"match a {n_pat}-pattern {R}x{C} trace")
    s = d.shape[1]
    r = grid.n_recurrent
    fa, ne = cell.first_active, grid.n_external
    d_nb = np.zeros((n_pat, s, R, C))
    d_rec = np.zeros((r, n_pat, s, R, C))
    gacc = np.zeros((n_pat, s, n - fa, n))
    scale_grad = np.zeros((n_pat, s))
    for t in range(n_steps - 1, -1, -1):
        act = trace.act[t]
        last = d_nb + scale * d if t == n_steps - 1 else d_nb
        out_d = np.concatenate([d_rec, last[None]])
        # scale is already folded into the final-step deltas
        g_a = node_deltas(cell, mat, 1.0, act[:, :, None], out_d)
        # (P, s, J, RC) @ (P, 1, RC, n)
        lhs = np.moveaxis(g_a[fa:], 0, 2).reshape(n_pat, s, n - fa, R * C)
        rhs = np.moveaxis(act, 0, -1).reshape(n_pat, 1, R * C, n)
        gacc += lhs @ rhs
        if t == n_steps - 1:
            scale_grad = np.sum(d * act[-1][:, None], axis=(2, 3))
        if t == 0:
            break
        # external inputs need no deltas
        inp = input_deltas_from(cell, mat, g_a, first_input=ne)
        d_rec = inp[:r]
        d_nb = _gather_neighbour_deltas(inp[r:])
    dest, src = cell.connections
    jac = np.concatenate([gacc[:, :, dest - fa, src], scale_grad[..., None]], axis=-1)
    return jac if trace.batched else jac[0]
