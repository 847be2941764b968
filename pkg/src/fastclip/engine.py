"""Per-worker gradient estimators for the model and the temperature.

A worker holds its local slice ``rows`` of the gathered global batch
(features ``E1``, ``E2`` of size B x d) plus the forward tapes of its own
pairs.  Estimators produce cotangents on the *normalized* local embeddings
and push them once through each tower's VJP.

Both halves of the model gradient share one per-pair weight

    coef_i = c_i / ((eps + u_i) * (B - 1) * b * tau_i)

where ``b`` is the local batch size and ``c_i`` is tau (scaled), 1
(unscaled) or the pair's own tau (individual temperatures).  The
"a" half (anchor side) needs only local u; the "b" half (contrast side)
needs u for every pair of the global batch, obtained either by gathering
u (``fastclip`` strategy) or by reduce-scattering per-feature cotangents
(``openclip_rs`` strategy).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateBatchError, DomainError, OracleError, StalenessError
from .losses import ell_matrices, mbcl_constant


@dataclass
class GradPacket:
    grad: np.ndarray
    phase: str = "grad-reduce"


@dataclass
class LocalView:
    """A worker's slice of the global batch and the tapes for its pairs."""
    rows: slice
    tapes: tuple


class BatchTerms:
    """Similarities and pairwise exponentials of one gathered global batch.

    ``tau1``/``tau2`` are per-row temperatures of length B (a scalar is
    broadcast).  Row ``i`` of ``L1``/``L2`` holds ell1(i, .)/ell2(i, .) at
    that row's temperature, with the diagonal zeroed.
    """

    def __init__(self, E1: np.ndarray, E2: np.ndarray, tau1, tau2=None):
        B = E1.shape[0]
        if B < 2:
            raise DegenerateBatchError("global batch must hold at least two pairs")
        if tau2 is None:
            tau2 = tau1
        self.E1, self.E2 = E1, E2
        self.B = B
        self.m = B - 1
        self.tau1 = np.broadcast_to(np.asarray(tau1, dtype=np.float64), (B,)).copy()
        self.tau2 = np.broadcast_to(np.asarray(tau2, dtype=np.float64), (B,)).copy()
        self.S = E1 @ E2.T
        self.L1, self.L2 = ell_matrices(self.S, self.tau1, self.tau2)
        diag = np.diag(self.S)[:, None]
        self.D1 = self.S - diag      # s_ij - s_ii
        self.D2 = self.S.T - diag    # s_ji - s_ii

    def inner_means(self, rows=slice(None)):
        return self.L1[rows].sum(axis=1) / self.m, self.L2[rows].sum(axis=1) / self.m

    def dtau_means(self, rows=slice(None)):
        """Mean over the contrast set of d ell / d tau for each row."""
        t1 = self.tau1[rows][:, None]
        t2 = self.tau2[rows][:, None]
        d1 = -(self.D1[rows] / t1**2) * self.L1[rows]
        d2 = -(self.D2[rows] / t2**2) * self.L2[rows]
        return d1.sum(axis=1) / self.m, d2.sum(axis=1) / self.m


def _check_u(u1, u2, B):
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    if u1.shape != (B,) or u2.shape != (B,) or not (np.all(np.isfinite(u1)) and np.all(np.isfinite(u2))):
        raise StalenessError("u snapshot does not cover the global batch")
    return u1, u2


def _local_size(rows: slice, B: int) -> int:
    return len(range(*rows.indices(B)))


def pair_coefficients(terms: BatchTerms, u1, u2, epsilon, scale1, scale2, local_size):
    """coef_i for both modalities; ``scale`` is the c_i numerator (scalar or vector)."""
    denom = terms.m * local_size
    c1 = scale1 / ((epsilon + u1) * denom * terms.tau1)
    c2 = scale2 / ((epsilon + u2) * denom * terms.tau2)
    return c1, c2


def anchor_cotangents(terms: BatchTerms, rows: slice, c1, c2):
    """Cotangents from the anchor half: derivatives through e_i for local i."""
    E1, E2 = terms.E1, terms.E2
    L1, L2 = terms.L1[rows], terms.L2[rows]
    s1, s2 = L1.sum(axis=1), L2.sum(axis=1)
    a1, a2 = c1[rows][:, None], c2[rows][:, None]
    e1, e2 = E1[rows], E2[rows]
    dE1 = a1 * (L1 @ E2 - s1[:, None] * e2) - a2 * s2[:, None] * e2
    dE2 = a2 * (L2 @ E1 - s2[:, None] * e1) - a1 * s1[:, None] * e1
    return dE1, dE2


def contrast_cotangents(terms: BatchTerms, rows: slice, c1, c2):
    """Cotangents from the contrast half on local j, summing over every global i."""
    dE2 = (terms.L1[:, rows] * c1[:, None]).T @ terms.E1
    dE1 = (terms.L2[:, rows] * c2[:, None]).T @ terms.E2
    return dE1, dE2


def contrast_rs_payload(terms: BatchTerms, rows: slice, c1, c2, K: int):
    """Per-feature contrast cotangents for *all* j from this worker's anchors.

    Scaled by K so that a mean-reduce-scatter yields the sum over workers.
    Returns (P1, P2), each B x d, targeting image and text features.
    """
    P2 = K * ((terms.L1[rows] * c1[rows][:, None]).T @ terms.E1[rows])
    P1 = K * ((terms.L2[rows] * c2[rows][:, None]).T @ terms.E2[rows])
    return P1, P2


def _packet(model, w, view: LocalView, dE1, dE2) -> GradPacket:
    return GradPacket(model.vjp(w, view.tapes, dE1, dE2))


def grad_w_global_tau(model, w, view: LocalView, E1, E2, u1, u2, tau, epsilon,
                      scaled: bool = True, terms: BatchTerms | None = None) -> GradPacket:
    """Model gradient estimator with one shared temperature.

    ``u1``/``u2`` are the gathered post-update estimators for the whole
    global batch.  ``scaled=False`` drops the leading tau (unscaled loss).
    """
    terms = terms or BatchTerms(E1, E2, tau)
    u1, u2 = _check_u(u1, u2, terms.B)
    scale = tau if scaled else 1.0
    c1, c2 = pair_coefficients(terms, u1, u2, epsilon, scale, scale, _local_size(view.rows, terms.B))
    a1, a2 = anchor_cotangents(terms, view.rows, c1, c2)
    b1, b2 = contrast_cotangents(terms, view.rows, c1, c2)
    return _packet(model, w, view, a1 + b1, a2 + b2)


def grad_w_individual_tau(model, w, view: LocalView, E1, E2, u1, u2, tau1, tau2, epsilon,
                          tau0: float | None = None, terms: BatchTerms | None = None) -> GradPacket:
    """Model gradient estimator with per-pair temperatures (gathered for the batch)."""
    tau1 = np.asarray(tau1, dtype=np.float64)
    tau2 = np.asarray(tau2, dtype=np.float64)
    if tau0 is not None and (np.any(tau1 < tau0) or np.any(tau2 < tau0)):
        raise DomainError(f"individual temperature below floor {tau0}")
    terms = terms or BatchTerms(E1, E2, tau1, tau2)
    u1, u2 = _check_u(u1, u2, terms.B)
    c1, c2 = pair_coefficients(terms, u1, u2, epsilon, tau1, tau2, _local_size(view.rows, terms.B))
    a1, a2 = anchor_cotangents(terms, view.rows, c1, c2)
    b1, b2 = contrast_cotangents(terms, view.rows, c1, c2)
    return _packet(model, w, view, a1 + b1, a2 + b2)


def _tau_sensitivity(terms, rows, u1_local, u2_local, epsilon):
    d1, d2 = terms.dtau_means(rows)
    return d1 / (epsilon + u1_local), d2 / (epsilon + u2_local)


def grad_tau_v0(rows: slice, E1, E2, u1_local, u2_local, tau, epsilon, terms=None) -> float:
    """Temperature gradient of the unscaled global loss (local contribution)."""
    terms = terms or BatchTerms(E1, E2, tau)
    r1, r2 = _tau_sensitivity(terms, rows, u1_local, u2_local, epsilon)
    return float(np.mean(r1) + np.mean(r2))


def grad_tau_v3(rows: slice, E1, E2, u1_local, u2_local, tau, epsilon, rho, terms=None) -> float:
    """Temperature gradient of the robust loss with one global temperature."""
    terms = terms or BatchTerms(E1, E2, tau)
    r1, r2 = _tau_sensitivity(terms, rows, u1_local, u2_local, epsilon)
    logs = np.mean(np.log(epsilon + u1_local) + np.log(epsilon + u2_local))
    return float(logs + 2.0 * rho + tau * (np.mean(r1) + np.mean(r2)))


def grad_tau_v2(u1, u2, tau1, tau2, dtau1_mean, dtau2_mean, epsilon, rho, n):
    """Per-pair temperature gradients (vectorised over the local pairs).

    ``dtau*_mean`` are the contrast-set means of d ell / d tau at each pair's
    own temperature (see :meth:`BatchTerms.dtau_means`).
    """
    u1, u2 = np.asarray(u1, dtype=np.float64), np.asarray(u2, dtype=np.float64)
    g1 = (np.log(epsilon + u1) + rho + tau1 * dtau1_mean / (epsilon + u1)) / n
    g2 = (np.log(epsilon + u2) + rho + tau2 * dtau2_mean / (epsilon + u2)) / n
    return g1, g2


def grad_tau_v2_local(rows: slice, terms: BatchTerms, u1_local, u2_local, epsilon, rho, n):
    d1, d2 = terms.dtau_means(rows)
    return grad_tau_v2(u1_local, u2_local, terms.tau1[rows], terms.tau2[rows], d1, d2, epsilon, rho, n)


def grad_mbcl(model, w, view: LocalView, E1, E2, tau, terms=None):
    """Mini-batch loss gradients: u replaced by the current batch means.

    Returns ``(packet, tau_grad)``; neither is multiplied by tau.
    """
    terms = terms or BatchTerms(E1, E2, tau)
    g1, g2 = terms.inner_means()
    eps = mbcl_constant(terms.B)
    packet = grad_w_global_tau(model, w, view, E1, E2, g1, g2, tau, eps, scaled=False, terms=terms)
    tau_grad = grad_tau_v0(view.rows, E1, E2, g1[view.rows], g2[view.rows], tau, eps, terms=terms)
    return packet, tau_grad


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], point, h: float = 1e-6) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function."""
    x = np.array(point, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = loss_fn(x)
        flat[k] = orig - h
        fm = loss_fn(x)
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite loss while probing coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
