"""Pairwise contrastive terms and exact loss evaluators.

Conventions: ``E1`` holds image embeddings and ``E2`` text embeddings, one
unit-norm row per pair.  ``S = E1 @ E2.T`` so ``S[i, j]`` is the similarity
of image ``i`` with text ``j``.  Everything here is float64; the exact
evaluators are O(n^2) and serve as ground truth for the stochastic
estimators in :mod:`fastclip.engine`.
"""
from __future__ import annotations

import threading

import numpy as np

from .errors import DegenerateBatchError, DomainError

EXP_CLAMP = 60.0


class _ClampCounter:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.count = 0

    def add(self, k: int) -> None:
        if k:
            with self._lock:
                self.count += k

    def reset(self) -> None:
        with self._lock:
            self.count = 0


#: number of exponent arguments clamped at ``EXP_CLAMP`` since the last reset
clamp_warnings = _ClampCounter()


def _exp(x):
    x = np.asarray(x, dtype=np.float64)
    over = x > EXP_CLAMP
    if over.any():
        clamp_warnings.add(int(over.sum()))
        x = np.minimum(x, EXP_CLAMP)
    return np.exp(x)


def _check_tau(tau) -> None:
    if np.any(np.asarray(tau) <= 0):
        raise DomainError(f"temperature must be positive, got {tau!r}")


def pairwise_similarity(E1: np.ndarray, E2: np.ndarray) -> np.ndarray:
    E1 = np.asarray(E1, dtype=np.float64)
    E2 = np.asarray(E2, dtype=np.float64)
    if E1.ndim != 2 or E2.ndim != 2 or E1.shape[1] != E2.shape[1]:
        raise ValueError(f"shape mismatch: {E1.shape} vs {E2.shape}")
    return E1 @ E2.T


# -- scalar pairwise terms ---------------------------------------------------

def ell1(S, i, j, tau):
    """exp((s_ij - s_ii) / tau): image ``i`` against text ``j``."""
    _check_tau(tau)
    return float(_exp((S[i, j] - S[i, i]) / tau))


def ell2(S, i, j, tau):
    """exp((s_ji - s_ii) / tau): text ``i`` against image ``j``."""
    _check_tau(tau)
    return float(_exp((S[j, i] - S[i, i]) / tau))


def _dtau(delta, tau):
    return float(-(delta / tau**2) * _exp(delta / tau))


def dell1_dtau(S, i, j, tau):
    _check_tau(tau)
    return _dtau(S[i, j] - S[i, i], tau)


def dell2_dtau(S, i, j, tau):
    _check_tau(tau)
    return _dtau(S[j, i] - S[i, i], tau)


def dell1_de(E1, E2, i, j, tau):
    """Gradients of ell1 w.r.t. (e1_i, e2_i, e2_j), on normalized embeddings."""
    _check_tau(tau)
    v = float(_exp((E1[i] @ E2[j] - E1[i] @ E2[i]) / tau))
    return v * (E2[j] - E2[i]) / tau, -v * E1[i] / tau, v * E1[i] / tau


def dell2_de(E1, E2, i, j, tau):
    """Gradients of ell2 w.r.t. (e2_i, e1_i, e1_j)."""
    _check_tau(tau)
    v = float(_exp((E1[j] @ E2[i] - E1[i] @ E2[i]) / tau))
    return v * (E1[j] - E1[i]) / tau, -v * E2[i] / tau, v * E2[i] / tau


def _require_indices(i, batch_indices):
    idx = np.asarray(batch_indices, dtype=np.int64)
    if idx.size == 0:
        raise DegenerateBatchError("contrast set is empty")
    if np.any(idx == i):
        raise DegenerateBatchError(f"contrast set for pair {i} contains {i}")
    return idx


def g1_batch(S, i, batch_indices, tau):
    """Mean of ell1(i, j) over ``batch_indices`` (which must exclude ``i``)."""
    _check_tau(tau)
    idx = _require_indices(i, batch_indices)
    return float(np.mean(_exp((S[i, idx] - S[i, i]) / tau)))


def g2_batch(S, i, batch_indices, tau):
    _check_tau(tau)
    idx = _require_indices(i, batch_indices)
    return float(np.mean(_exp((S[idx, i] - S[i, i]) / tau)))


# -- vectorised forms --------------------------------------------------------

def ell_matrices(S, tau1, tau2=None, rows=None):
    """Matrices ``L1[r, j] = ell1(rows[r], j)`` and ``L2[r, j] = ell2(rows[r], j)``.

    ``tau1``/``tau2`` are scalars or per-row vectors (aligned with ``rows``).
    The diagonal entries (j == rows[r]) are set to zero so that row sums are
    sums over the contrast set.
    """
    if tau2 is None:
        tau2 = tau1
    _check_tau(tau1)
    _check_tau(tau2)
    B = S.shape[0]
    rows = np.arange(B) if rows is None else np.asarray(rows)
    t1 = np.broadcast_to(np.asarray(tau1, dtype=np.float64), rows.shape)[:, None]
    t2 = np.broadcast_to(np.asarray(tau2, dtype=np.float64), rows.shape)[:, None]
    diag = S[rows, rows][:, None]
    L1 = _exp((S[rows, :] - diag) / t1)
    L2 = _exp((S[:, rows].T - diag) / t2)
    L1[np.arange(rows.size), rows] = 0.0
    L2[np.arange(rows.size), rows] = 0.0
    return L1, L2


def inner_means(S, tau1, tau2=None, rows=None):
    """g1, g2 for each row against every other pair in ``S`` (B_{i-})."""
    B = S.shape[0]
    if B < 2:
        raise DegenerateBatchError("need at least two pairs to contrast")
    L1, L2 = ell_matrices(S, tau1, tau2, rows)
    return L1.sum(axis=1) / (B - 1), L2.sum(axis=1) / (B - 1)


def _dataset_sims(E1, E2):
    S = pairwise_similarity(E1, E2)
    if S.shape[0] < 2:
        raise DegenerateBatchError("need at least two pairs")
    return S


def eval_gcl(E1, E2, tau, epsilon):
    S = _dataset_sims(E1, E2)
    g1, g2 = inner_means(S, tau)
    return float(tau * np.mean(np.log(epsilon + g1) + np.log(epsilon + g2)))


def eval_rgcl(E1, E2, tau1, tau2, epsilon, rho):
    S = _dataset_sims(E1, E2)
    tau1 = np.asarray(tau1, dtype=np.float64)
    tau2 = np.asarray(tau2, dtype=np.float64)
    g1, g2 = inner_means(S, tau1, tau2)
    per = tau1 * (np.log(epsilon + g1) + rho) + tau2 * (np.log(epsilon + g2) + rho)
    return float(np.mean(per))


def eval_rgclg(E1, E2, tau, epsilon, rho):
    return eval_gcl(E1, E2, tau, epsilon) + 2.0 * rho * tau


def mbcl_constant(batch_size: int) -> float:
    """Additive constant inside MBCL's log: one over the contrast-set size."""
    if batch_size < 2:
        raise DegenerateBatchError("MBCL needs a batch of at least two pairs")
    return 1.0 / (batch_size - 1)


def eval_mbcl(E1, E2, tau):
    """Mini-batch loss for one sampled batch (the rows of E1/E2)."""
    S = _dataset_sims(E1, E2)
    c = mbcl_constant(S.shape[0])
    g1, g2 = inner_means(S, tau)
    return float(np.mean(np.log(c + g1) + np.log(c + g2)))
