"""Finite-difference checks of every analytic gradient on a tiny instance.

With the full dataset as the batch and u equal to the exact inner means,
each estimator is the exact gradient of its loss, so central differences of
the exact evaluators in :mod:`fastclip.losses` must agree.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .encoder import Tower, TwoTower
from .losses import eval_gcl, eval_mbcl, eval_rgcl, eval_rgclg

TOLERANCE = 1e-4
STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float = TOLERANCE

    @property
    def ok(self) -> bool:
        return bool(self.error <= self.tol)


def relative_error(analytic, reference) -> float:
    """Max coordinate error relative to max(|ref_k|, 1e-3 * max|ref|)."""
    a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    r = np.atleast_1d(np.asarray(reference, dtype=np.float64))
    floor = max(1e-3 * np.max(np.abs(r)), 1e-12)
    return float(np.max(np.abs(a - r) / np.maximum(np.abs(r), floor)))


def _instance(seed):
    rng = np.random.default_rng(seed)
    model = TwoTower(Tower("linear", 4, 3), Tower("linear", 4, 3))
    w = model.init(rng)
    X = rng.normal(size=(4, 4))
    T = rng.normal(size=(4, 4))
    return rng, model, w, X, T


def run_suite(seed: int = 0, tau: float = 0.3, epsilon: float = 1e-8, rho: float = 6.5,
              h: float = STEP) -> list[CheckResult]:
    rng, model, w, X, T = _instance(seed)
    E1, E2, tapes = model.forward(w, X, T)
    view = engine.LocalView(slice(None), tapes)
    fd = engine.finite_diff_grad

    def embed(wv):
        e1, e2, _ = model.forward(wv, X, T)
        return e1, e2

    results = []
    terms = engine.BatchTerms(E1, E2, tau)
    g1, g2 = terms.inner_means()

    # v1: global contrastive loss, fixed tau
    p = engine.grad_w_global_tau(model, w, view, E1, E2, g1, g2, tau, epsilon, scaled=True)
    ref = fd(lambda wv: eval_gcl(*embed(wv), tau, epsilon), w, h)
    results.append(CheckResult("v1 gcl d/dw", relative_error(p.grad, ref)))

    # v0: unscaled loss, model and temperature
    p = engine.grad_w_global_tau(model, w, view, E1, E2, g1, g2, tau, epsilon, scaled=False)
    ref = fd(lambda wv: eval_gcl(*embed(wv), tau, epsilon) / tau, w, h)
    results.append(CheckResult("v0 unscaled gcl d/dw", relative_error(p.grad, ref)))
    gt = engine.grad_tau_v0(slice(None), E1, E2, g1, g2, tau, epsilon)
    ref = fd(lambda t: eval_gcl(E1, E2, float(t[0]), epsilon) / float(t[0]), np.array([tau]), h)
    results.append(CheckResult("v0 unscaled gcl d/dtau", relative_error(gt, ref)))

    # v3: robust loss with one global temperature
    p = engine.grad_w_global_tau(model, w, view, E1, E2, g1, g2, tau, epsilon, scaled=True)
    ref = fd(lambda wv: eval_rgclg(*embed(wv), tau, epsilon, rho), w, h)
    results.append(CheckResult("v3 rgcl-g d/dw", relative_error(p.grad, ref)))
    gt = engine.grad_tau_v3(slice(None), E1, E2, g1, g2, tau, epsilon, rho)
    ref = fd(lambda t: eval_rgclg(E1, E2, float(t[0]), epsilon, rho), np.array([tau]), h)
    results.append(CheckResult("v3 rgcl-g d/dtau", relative_error(gt, ref)))

    # v2: individual temperatures
    tau1 = rng.uniform(0.2, 0.5, size=4)
    tau2 = rng.uniform(0.2, 0.5, size=4)
    iterms = engine.BatchTerms(E1, E2, tau1, tau2)
    h1, h2 = iterms.inner_means()
    p = engine.grad_w_individual_tau(model, w, view, E1, E2, h1, h2, tau1, tau2, epsilon)
    ref = fd(lambda wv: eval_rgcl(*embed(wv), tau1, tau2, epsilon, rho), w, h)
    results.append(CheckResult("v2 rgcl d/dw", relative_error(p.grad, ref)))
    gt1, gt2 = engine.grad_tau_v2_local(slice(None), iterms, h1, h2, epsilon, rho, 4)
    ref1 = fd(lambda t: eval_rgcl(E1, E2, t, tau2, epsilon, rho), tau1, h)
    ref2 = fd(lambda t: eval_rgcl(E1, E2, tau1, t, epsilon, rho), tau2, h)
    results.append(CheckResult("v2 rgcl d/dtau1", relative_error(gt1, ref1)))
    results.append(CheckResult("v2 rgcl d/dtau2", relative_error(gt2, ref2)))

    # baseline: mini-batch loss over the 4-pair batch
    p, gt = engine.grad_mbcl(model, w, view, E1, E2, tau)
    ref = fd(lambda wv: eval_mbcl(*embed(wv), tau), w, h)
    results.append(CheckResult("mbcl d/dw", relative_error(p.grad, ref)))
    ref = fd(lambda t: eval_mbcl(E1, E2, float(t[0])), np.array([tau]), h)
    results.append(CheckResult("mbcl d/dtau", relative_error(gt, ref)))
    return results
