"""Extended Kalman filter weight estimation with multi-streaming.

The weights are the hidden state, the network outputs the measurements.  One
update consumes a stacked Jacobian ``C`` (M*s x p) and residual ``t - y``::

    S  = C K C' + r I
    G  = K C' S^-1
    dw = G (t - y)
    K <- K - G C K + q I

with the measurement noise ``r = a * ln(b * sse + 1)`` annealed from the
current batch squared error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla

from .errors import ConditioningError, FilterDivergence, RejectedInput

PSD_TOLERANCE = 1e-8


@dataclass
class EkfState:
    K: np.ndarray
    q_scale: float = 1e-8
    a: float = 1e-3
    b: float = 1e-3
    step: int = 0
    last_r: float = 0.0

    @classmethod
    def initial(cls, n_weights: int, k0: float = 100.0, q_scale: float = 1e-8,
                a: float = 1e-3, b: float = 1e-3) -> "EkfState":
        return cls(k0 * np.eye(n_weights), q_scale, a, b)


def anneal_r(a: float, b: float, sse: float) -> float:
    """Measurement noise level for the current squared error (natural log)."""
    if not sse >= 0:
        raise RejectedInput(f"squared error must be non-negative, got {sse}")
    return a * math.log1p(b * sse)


def kalman_gain(C, K, r_diag: float) -> np.ndarray:
    """``K C' (C K C' + r I)^-1`` through a Cholesky solve of the innovation."""
    C = np.asarray(C, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if C.ndim != 2 or K.shape != (C.shape[1], C.shape[1]):
        raise RejectedInput(f"incompatible shapes C{C.shape} and K{K.shape}")
    CK = C @ K
    S = CK @ C.T
    S = 0.5 * (S + S.T)
    S[np.diag_indices_from(S)] += r_diag
    if not np.any(CK):
        return np.zeros((C.shape[1], C.shape[0]))
    try:
        fac = sla.cho_factor(S, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        cond = np.linalg.cond(S) if np.all(np.isfinite(S)) else math.inf
        raise ConditioningError(
            f"innovation matrix is not positive definite (cond ~ {cond:.3g})",
            condition=cond) from exc
    return sla.cho_solve(fac, CK).T


def ekf_update(state: EkfState, C, residual):
    """One filter step.  Returns ``(delta_w, new_state)``; ``state`` is untouched."""
    C = np.asarray(C, dtype=np.float64)
    e = np.asarray(residual, dtype=np.float64).ravel()
    if C.ndim != 2 or e.shape[0] != C.shape[0]:
        raise RejectedInput(f"residual length {e.shape[0]} does not match C{C.shape}")
    if not np.all(np.isfinite(e)):
        raise RejectedInput("residual must be finite")
    sse = float(e @ e)
    r_diag = anneal_r(state.a, state.b, sse)
    G = kalman_gain(C, state.K, r_diag)
    delta_w = G @ e
    K = state.K - G @ (C @ state.K)
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] += state.q_scale
    lo = float(np.linalg.eigvalsh(K)[0])
    if lo < -PSD_TOLERANCE:
        raise FilterDivergence(
            f"weight covariance lost positive semi-definiteness (min eig {lo:.3g})",
            step=state.step + 1)
    return delta_w, replace(state, K=K, step=state.step + 1, last_r=r_diag)


def multi_stream_stack(per_pattern):
    """Concatenate per-pattern ``(jacobian s x p, residual s)`` pairs row-wise."""
    per_pattern = list(per_pattern)
    if not per_pattern:
        raise RejectedInput("nothing to stack")
    jacs = [np.atleast_2d(np.asarray(j, dtype=np.float64)) for j, _ in per_pattern]
    res = [np.asarray(e, dtype=np.float64).ravel() for _, e in per_pattern]
    shape = jacs[0].shape
    for j, e in zip(jacs, res):
        if j.shape != shape or e.shape[0] != shape[0]:
            raise RejectedInput(
                f"inconsistent stream shapes: expected {shape}, got {j.shape} / {e.shape}")
    return np.concatenate(jacs), np.concatenate(res)
