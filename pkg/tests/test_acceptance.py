"""Acceptance criteria 1-8.  Each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or as a script with
``python3 tests/test_acceptance.py``.  The lines are repeated in the pytest
terminal summary.
"""
import math
import statistics
import sys
import time

import numpy as np
import pytest

from fastclip import gradcheck, losses
from fastclip.cli import compare_strategies
from fastclip.config import RunConfig
from fastclip.optim import OptimState, adamw_step, lamb_step, temperature_step
from fastclip.schedules import GammaSchedule, OuterLRSchedule, gamma_at, lr_at
from fastclip.state import TempState
from fastclip.trainer import Trainer, train

RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_criterion_1_gradient_oracles():
    start = time.perf_counter()
    results = gradcheck.run_suite(seed=0)
    elapsed = time.perf_counter() - start
    worst = max(r.error for r in results)
    names = {r.name for r in results}
    covered = all(any(v in n for n in names) for v in ("v1", "v3", "v2", "mbcl"))
    ok = all(r.ok for r in results) and covered and elapsed < 10
    report(1, ok, f"{len(results)} checks, max rel err {worst:.2e} (tol 1e-4), {elapsed:.2f}s")


def _trajectory(variant, K):
    cfg = RunConfig().with_overrides({
        "algo.variant": variant, "fabric.workers": K, "fabric.virtual_shards": 8, "run.batch_size": 32 // K,
        "data.n": 256, "data.n_probe": 0, "run.epochs": 5, "model.dim": 8,
    })
    grads, params = [], []

    def keep(info):
        grads.append(info["grad"].copy())
        params.append(info["params"].copy())

    tr = Trainer(cfg, on_step=keep)
    for _ in range(5):
        tr.run_epoch()
    return np.array(grads), np.array(params)


def test_criterion_2_worker_count_equivalence():
    start = time.perf_counter()
    worst = 0.0
    steps = 0
    for variant in ("fastclip_v3", "fastclip_v2", "openclip_mbcl"):
        g1, p1 = _trajectory(variant, 1)
        steps = len(g1)
        for K in (2, 4, 8):
            gk, pk = _trajectory(variant, K)
            worst = max(worst, float(np.max(np.abs(gk - g1))), float(np.max(np.abs(pk - p1))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 60
    report(2, ok, f"K in 1,2,4,8 over {steps} steps x 3 variants, max diff {worst:.2e} (tol 1e-10), {elapsed:.1f}s")


def test_criterion_3_strategy_equivalence_and_ratio():
    parts, ok = [], True
    for d in (8, 16, 64):
        res = compare_strategies(workers=4, batch=8, dim=d, iters=1)
        exact = res["rs_grad"] == d * res["u_gather"] and res["u_gather"] > 0
        ok &= exact and res["max_grad_diff"] <= 1e-12
        parts.append(f"d={d} u={res['u_gather']} rs={res['rs_grad']} diff={res['max_grad_diff']:.1e}")
    report(3, ok, "; ".join(parts))


def test_criterion_4_schedule_anchors():
    ipe = 3
    s = GammaSchedule("cosine", gamma_min=0.2, decay_epochs=18, iters_per_epoch=ipe)
    g_ok = (abs(gamma_at(s, 0) - 1.0) <= 1e-12
            and all(abs(gamma_at(s, e * ipe) - 0.2) <= 1e-12 for e in (18, 19, 50))
            and abs(gamma_at(s, 9 * ipe) - 0.6) <= 1e-12)
    warm = OuterLRSchedule(peak_lr=1e-3, warmup_iters=10, total_iters=100)
    decay = OuterLRSchedule(peak_lr=2e-4, min_lr=4e-5, warmup_iters=0, total_iters=100)
    mid = lr_at(decay, 50)
    l_ok = lr_at(warm, 0) == 0.0 and lr_at(warm, 10) == 1e-3 and mid == 1.2e-4
    report(4, g_ok and l_ok, f"gamma anchors ok={g_ok}; lr anchors ok={l_ok} (midpoint {mid!r})")


def _contraction(tau, gamma=0.6, n=64, K=4):
    """Worst absolute and g-relative deviation from exact (1-gamma) contraction."""
    cfg = RunConfig().with_overrides({
        "algo.variant": "fastclip_v1", "algo.gamma_kind": "constant", "algo.gamma": gamma, "algo.tau_init": tau,
        "optim.lr": 0.0, "optim.weight_decay": 0.0, "fabric.workers": K, "run.batch_size": n // K,
        "data.n": n, "data.n_probe": 0, "model.dim": 8,
    })
    tr = Trainer(cfg)
    w0 = tr.params[0].copy()
    E1, E2, _ = tr.model.forward(w0, tr.train.X, tr.train.T)
    g = np.concatenate(losses.inner_means(E1 @ E2.T, tau))
    batch = [np.arange(k * n // K, (k + 1) * n // K) for k in range(K)]
    prev = np.concatenate([tr.u.u1, tr.u.u2]) - g
    dev = np.zeros_like(g)
    for t in range(1, 21):
        tr.step(batch)
        err = np.concatenate([tr.u.u1, tr.u.u2]) - g
        dev = np.maximum(dev, np.abs(err - (1 - gamma) * prev))
        dev = np.maximum(dev, np.abs(np.abs(err) - (1 - gamma) ** t * g))
        prev = err
    assert np.array_equal(tr.params[0], w0)
    return float(dev.max()), float(np.max(dev / g)), float(g.max())


def test_criterion_5_u_contraction():
    # at tau=1 the inner means are O(1) and the bound is absolute; at tau=0.1
    # they reach ~6e4 where one ulp exceeds 1e-12, so the bound is relative to g
    abs_dev, _, g_small = _contraction(1.0)
    _, rel_dev, g_large = _contraction(0.1)
    ok = abs_dev <= 1e-12 and rel_dev <= 1e-12
    report(5, ok, f"20 steps: tau=1 (max g {g_small:.1f}) abs dev {abs_dev:.1e}; "
                  f"tau=0.1 (max g {g_large:.1e}) rel dev {rel_dev:.1e} (tol 1e-12)")


def test_criterion_6_optimizer_units():
    a = adamw_step(OptimState(1, weight_decay=0.1), np.array([1.0]), np.array([0.0]), 0.1)
    l = lamb_step(OptimState(2, beta1=0.0, beta2=0.0, weight_decay=0.0), np.array([3.0, 4.0]), np.array([1.0, 0.0]), 0.1)
    examples = a[0] == 0.99 and l.tolist() == [2.5, 4.0]

    rng = np.random.default_rng(0)
    groups = [slice(0, 4), slice(4, 6), slice(6, 10)]
    sa, sb = OptimState(10, weight_decay=0.1, groups=groups), OptimState(10, weight_decay=0.1, groups=groups)
    pa = pb = rng.normal(size=10)
    gap = 0.0
    for _ in range(100):
        g = rng.normal(size=10)
        pa = adamw_step(sa, pa, g, 1e-2)
        pb = lamb_step(sb, pb, g, 1e-2, force_unit_trust=True)
        gap = max(gap, float(np.max(np.abs(pa - pb))))

    ind = TempState.individual(32, 0.02, 0.01, 6.5)
    glob = TempState("global_learnable_v3", tau=0.02, tau0=0.01, rho=6.5)
    opt = OptimState(1, weight_decay=0.0)
    floor_ok = True
    for _ in range(2000):
        idx = rng.choice(32, size=8, replace=False)
        temperature_step(ind, opt, (rng.normal(size=8) * 50, rng.normal(size=8) * 50), 0.05, idx=idx)
        temperature_step(glob, opt, float(rng.normal() * 50), 0.05)
        floor_ok &= bool(ind.tau1.min() >= 0.01 and ind.tau2.min() >= 0.01 and glob.tau >= 0.01)
    ok = examples and gap <= 1e-15 and floor_ok
    report(6, ok, f"examples exact={examples}; LAMB(alpha=1) vs AdamW max gap {gap:.1e}; tau >= tau0 held={floor_ok}")


def _final(variant, seed, **extra):
    cfg = RunConfig().with_overrides({
        "algo.variant": variant, "data.n": 1024, "data.latent_dim": 8, "model.dim": 16, "run.batch_size": 8,
        "fabric.workers": 4, "run.epochs": 50, "run.seed": seed, "data.seed": seed, **extra,
    })
    return Trainer(cfg).train_epochs(50)[-1]


@pytest.mark.slow
def test_criterion_7_directional():
    start = time.perf_counter()
    seeds = (0, 1, 2)
    v1 = [_final("fastclip_v1", s) for s in seeds]
    mb = [_final("openclip_mbcl", s) for s in seeds]
    const = [_final("fastclip_v1", s, **{"algo.gamma_kind": "constant", "algo.gamma": 0.6}) for s in seeds]
    r_v1 = statistics.median(r["r1_i2t"] for r in v1)
    r_mb = statistics.median(r["r1_i2t"] for r in mb)
    l_cos = statistics.median(r["probe_gcl"] for r in v1)
    l_const = statistics.median(r["probe_gcl"] for r in const)
    elapsed = time.perf_counter() - start
    ok = r_v1 >= r_mb and l_cos <= l_const and elapsed < 600
    report(7, ok, f"(a) R@1 v1 {r_v1:.3f} >= mbcl {r_mb:.3f}; (b) GCL cosine {l_cos:.4f} <= constant {l_const:.4f}; "
                  f"{elapsed:.0f}s")


def test_criterion_8_determinism_and_resume(tmp_path):
    cfg = RunConfig().with_overrides({"algo.variant": "fastclip_v3", "data.n": 256, "data.n_probe": 64,
                                      "run.epochs": 2, "fabric.workers": 4, "run.batch_size": 8})
    train(cfg, out_dir=tmp_path / "a")
    train(cfg, out_dir=tmp_path / "b")
    same_metrics = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    train(cfg, out_dir=tmp_path / "c", epochs=1)
    train(cfg, out_dir=tmp_path / "c", resume=tmp_path / "c" / "checkpoint.npz")
    same_ckpt = (tmp_path / "a" / "checkpoint.npz").read_bytes() == (tmp_path / "c" / "checkpoint.npz").read_bytes()
    report(8, same_metrics and same_ckpt, f"metrics byte-identical={same_metrics}; resumed checkpoint identical={same_ckpt}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
