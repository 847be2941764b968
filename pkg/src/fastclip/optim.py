"""AdamW and LAMB on flat parameter vectors, plus the temperature update."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OptimizerError
from .state import TempState


@dataclass
class OptimState:
    size: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    groups: list[slice] | None = None
    m: np.ndarray = field(init=False, repr=False)
    v: np.ndarray = field(init=False, repr=False)
    t: int = field(default=0, init=False)

    def __post_init__(self):
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)


def adam_direction(m, v, grad, t, beta1, beta2, eps):
    """Update moments in place and return the bias-corrected Adam direction.

    ``t`` is the number of steps already taken (scalar or per-element array);
    bias correction uses exponent ``t + 1``.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** (t + 1))
    v_hat = v / (1.0 - beta2 ** (t + 1))
    return m_hat / (np.sqrt(v_hat) + eps)


def _check(grad, params, state):
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or params.shape != (state.size,):
        raise OptimizerError(f"shape mismatch: params {params.shape}, grad {grad.shape}, state {state.size}")
    if not np.all(np.isfinite(grad)):
        raise OptimizerError("non-finite gradient")
    return grad


def adamw_step(state: OptimState, params: np.ndarray, grad, lr: float) -> np.ndarray:
    grad = _check(grad, params, state)
    r = adam_direction(state.m, state.v, grad, state.t, state.beta1, state.beta2, state.eps)
    state.t += 1
    return params - lr * (r + state.weight_decay * params)


def lamb_step(state: OptimState, params: np.ndarray, grad, lr: float,
              force_unit_trust: bool = False) -> np.ndarray:
    """Layer-wise trust ratio ||theta|| / ||r + wd*theta|| on the AdamW direction.

    A zero denominator gives a ratio of 1.  ``force_unit_trust`` pins every
    ratio to 1 (used for the temperature).
    """
    grad = _check(grad, params, state)
    r = adam_direction(state.m, state.v, grad, state.t, state.beta1, state.beta2, state.eps)
    state.t += 1
    upd = r + state.weight_decay * params
    out = params.copy()
    for g in state.groups or [slice(0, state.size)]:
        if force_unit_trust:
            alpha = 1.0
        else:
            denom = np.linalg.norm(upd[g])
            alpha = np.linalg.norm(params[g]) / denom if denom > 0 else 1.0
        out[g] = params[g] - lr * alpha * upd[g]
    return out


def optimizer_step(kind: str, state: OptimState, params, grad, lr, **kw) -> np.ndarray:
    if kind == "adamw":
        return adamw_step(state, params, grad, lr)
    if kind == "lamb":
        return lamb_step(state, params, grad, lr, **kw)
    raise ValueError(f"unknown optimizer {kind!r}")


def temperature_step(tau_state: TempState, opt: OptimState | None, tau_grad, lr: float,
                     idx=None) -> TempState:
    """Update tau with zero weight decay, then project onto tau >= tau0.

    Global schemes take a scalar gradient and the scalar ``opt`` state.  The
    individual scheme takes ``tau_grad = (g1, g2)`` for pairs ``idx`` and uses
    the per-index moments stored on ``tau_state``.  LAMB with a unit trust
    ratio and AdamW coincide here, so one rule serves both optimizers.
    """
    if tau_state.scheme == "constant":
        return tau_state
    if tau_state.is_individual:
        idx = np.asarray(idx, dtype=np.int64)
        g1, g2 = (np.asarray(g, dtype=np.float64) for g in tau_grad)
        if not (np.all(np.isfinite(g1)) and np.all(np.isfinite(g2))):
            raise OptimizerError("non-finite temperature gradient")
        b1, b2, eps = (opt.beta1, opt.beta2, opt.eps) if opt else (0.9, 0.999, 1e-8)
        t = tau_state.steps[idx]
        for tau_vec, m, v, g in ((tau_state.tau1, tau_state.m1, tau_state.v1, g1),
                                 (tau_state.tau2, tau_state.m2, tau_state.v2, g2)):
            mi, vi = m[idx], v[idx]
            r = adam_direction(mi, vi, g, t, b1, b2, eps)
            m[idx], v[idx] = mi, vi
            tau_vec[idx] = tau_vec[idx] - lr * r
        tau_state.steps[idx] += 1
    else:
        if opt.weight_decay != 0.0:
            raise OptimizerError("temperature optimizer must use zero weight decay")
        theta = np.array([tau_state.tau])
        tau_state.tau = float(adamw_step(opt, theta, np.array([float(tau_grad)]), lr)[0])
    tau_state.project()
    return tau_state
