"""Data-parallel training loop over the simulated fabric.

One iteration, per worker k (all workers are stepped in id order and meet
at every collective):

    forward local pairs -> all_gather features -> inner means g for local
    pairs -> moving-average update of u -> (fastclip) all_gather u ->
    model/temperature gradient estimators -> all_reduce -> optimizer step
    -> temperature step.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import engine
from .config import RunConfig
from .data import PairDataset, SyntheticSpec, generate, load
from .dist import CommLedger, CommRecord, Fabric
from .encoder import Tower, TwoTower
from .errors import ConfigError, OwnershipError
from .losses import eval_gcl, mbcl_constant
from .optim import OptimState, optimizer_step, temperature_step
from .schedules import (EpsilonSchedule, GammaSchedule, OuterLRSchedule, TauLRLatch, gamma_at,
                        lr_at)
from .state import TempState, UTable


@dataclass(frozen=True)
class Variant:
    loss: str          # "gcl" | "rgcl" | "rgclg" | "mbcl"
    scheme: str        # TempState scheme
    scaled: bool       # model gradient carries the leading tau
    default_gamma: str  # "constant" | "cosine" | "none"
    default_tau: float


VARIANTS = {
    "openclip_mbcl": Variant("mbcl", "global_learnable_v0", False, "none", 0.03),
    "sogclr": Variant("gcl", "constant", True, "constant", 0.03),
    "isogclr": Variant("rgcl", "individual_v2", True, "constant", 0.03),
    "fastclip_v0": Variant("gcl", "global_learnable_v0", False, "cosine", 0.03),
    "fastclip_v1": Variant("gcl", "constant", True, "cosine", 0.03),
    "fastclip_v2": Variant("rgcl", "individual_v2", True, "cosine", 0.03),
    "fastclip_v3": Variant("rgclg", "global_learnable_v3", True, "cosine", 0.07),
}

METRIC_COLUMNS = ["epoch", "iteration", "gamma", "lr", "eps", "tau", "tau_q10", "tau_q90",
                  "probe_gcl", "probe_rgclg", "r1_i2t", "r1_t2i",
                  "comm_feature", "comm_u", "comm_tau", "comm_grad", "comm_rs", "comm_total"]

PHASES = {"comm_feature": "feature-gather", "comm_u": "u-gather", "comm_tau": ("tau-gather", "tau-reduce"),
          "comm_grad": "grad-reduce", "comm_rs": "rs-grad"}


def evaluate_retrieval(E1: np.ndarray, E2: np.ndarray) -> dict:
    """Recall@1 both ways; ties resolve to the lowest index."""
    m = E1.shape[0]
    if m < 2:
        raise ValueError("need at least two probe pairs")
    S = E1 @ E2.T
    truth = np.arange(m)
    return {"r1_i2t": float(np.mean(np.argmax(S, axis=1) == truth)),
            "r1_t2i": float(np.mean(np.argmax(S, axis=0) == truth))}


def epoch_order(shard: np.ndarray, seed: int, shard_id: int, epoch: int) -> np.ndarray:
    """Per-epoch shuffle of one shard; the stream is keyed by (seed, shard, epoch)."""
    rng = np.random.default_rng([seed, shard_id, epoch])
    return shard[rng.permutation(shard.size)]


def sample_local_batch(shard: np.ndarray, batch_size: int, seed: int, shard_id: int, epoch: int):
    """Yield the without-replacement batches of one shard for one epoch."""
    if batch_size > shard.size:
        raise ConfigError("run.batch_size", f"batch {batch_size} larger than shard {shard.size}")
    order = epoch_order(shard, seed, shard_id, epoch)
    for t in range(shard.size // batch_size):
        yield order[t * batch_size:(t + 1) * batch_size]


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"


class Trainer:
    """Holds all replicated and sharded state for one run."""

    def __init__(self, cfg: RunConfig, train: PairDataset | None = None, probe: PairDataset | None = None,
                 on_step: Callable[[dict], None] | None = None):
        self.cfg = cfg
        a, o, f, r, d = cfg.algo, cfg.optim, cfg.fabric, cfg.run, cfg.data
        self.variant = VARIANTS[a.variant]
        if train is None:
            train, gen_probe = generate(self._data_spec(), d.n_probe)
            if d.path:
                train = load(d.path)
            probe = probe if probe is not None else gen_probe
        self.train, self.probe = train, probe
        self.n = train.n
        self.K = f.workers
        self.V = f.virtual_shards or f.workers
        if self.n % self.V:
            raise ConfigError("data.n", f"{self.n} pairs cannot be split over {self.V} shards")
        self.b = r.batch_size
        self.B = self.b * self.K
        self.b_shard = self.B // self.V
        self.shard_size = self.n // self.V
        self.shards = [np.arange(v * self.shard_size, (v + 1) * self.shard_size) for v in range(self.V)]
        per_worker = self.V // self.K
        self.worker_shards = [list(range(k * per_worker, (k + 1) * per_worker)) for k in range(self.K)]
        self.iters_per_epoch = self.shard_size // self.b_shard
        if self.iters_per_epoch < 1:
            raise ConfigError("run.batch_size", "global batch larger than the dataset")

        self.fabric = Fabric(self.K)
        owner = np.repeat(np.arange(self.K), self.n // self.K)
        self.u = UTable(self.n, owner)

        dim = cfg.model.dim
        hidden = cfg.model.hidden if cfg.model.arch == "mlp" else 0
        self.model = TwoTower(Tower(cfg.model.arch, train.X.shape[1], dim, hidden),
                              Tower(cfg.model.arch, train.T.shape[1], dim, hidden))
        w0 = self.model.init(np.random.default_rng([r.seed, 7919]))
        self.params = [w0.copy() for _ in range(self.K)]
        self.opts = [OptimState(self.model.size, o.beta1, o.beta2, o.eps, o.weight_decay, self.model.groups())
                     for _ in range(self.K)]

        tau_init = a.tau_init or self.variant.default_tau
        if self.variant.scheme == "individual_v2":
            self.temp = TempState.individual(self.n, tau_init, a.tau0, a.rho)
        else:
            self.temp = TempState(self.variant.scheme, tau=tau_init, tau0=a.tau0, rho=a.rho)
        self.tau_opt = OptimState(1, o.beta1, o.beta2, o.eps, 0.0)
        decay = a.tau_lr_decay
        self.latch_enabled = decay == "on" or (decay == "auto" and a.variant == "fastclip_v3")
        self.latch = TauLRLatch(a.tau_lr_threshold, a.tau_lr_factor)

        kind = self.variant.default_gamma if a.gamma_kind == "auto" else a.gamma_kind
        self.gamma_kind = kind
        if kind != "none":
            self.gamma_sched = GammaSchedule(kind, a.gamma, a.gamma_min, a.gamma_decay_epochs, self.iters_per_epoch)
        total = max(1, r.epochs * self.iters_per_epoch)
        self.lr_sched = OuterLRSchedule(o.lr, o.min_lr, o.warmup_iters, total)
        switch = math.inf if a.eps_switch_epoch < 0 else a.eps_switch_epoch
        self.eps_sched = EpsilonSchedule(a.eps, a.eps_late, switch)

        self.epoch = 0
        self.iteration = 0
        self.on_step = on_step
        self.check_replicas = True
        self._last = {"gamma": float("nan"), "lr": float("nan"), "eps": a.eps}

    def _data_spec(self) -> SyntheticSpec:
        d = self.cfg.data
        return SyntheticSpec(d.n, d.latent_dim, d.d_img, d.d_txt, d.noise, d.seed)

    # -- one iteration -------------------------------------------------------

    def _gamma(self, t: int) -> float:
        return 1.0 if self.gamma_kind == "none" else gamma_at(self.gamma_sched, t)

    def step(self, local_idx: list[np.ndarray]) -> dict:
        K, fab, var, temp = self.K, self.fabric, self.variant, self.temp
        t = self.iteration
        gamma = self._gamma(t)
        lr = lr_at(self.lr_sched, t)
        eps = self.eps_sched.at(self.epoch)
        self.u.begin_iteration(t)
        rows = [slice(k * self.b, (k + 1) * self.b) for k in range(K)]
        idx = np.concatenate(local_idx)

        fwd = [self.model.forward(self.params[k], self.train.X[local_idx[k]], self.train.T[local_idx[k]])
               for k in range(K)]
        E1 = fab.all_gather([f[0] for f in fwd], phase="feature-gather")
        E2 = fab.all_gather([f[1] for f in fwd], phase="feature-gather")
        views = [engine.LocalView(rows[k], fwd[k][2]) for k in range(K)]

        if temp.is_individual:
            local_taus = [np.concatenate(temp.taus_for(local_idx[k])) for k in range(K)]
            gathered = fab.all_gather(local_taus, phase="tau-gather").reshape(K, 2, self.b)
            tau1 = gathered[:, 0, :].reshape(-1)
            tau2 = gathered[:, 1, :].reshape(-1)
        else:
            tau1 = tau2 = np.full(self.B, temp.tau)
        # identical on every worker: a pure function of gathered data
        terms = engine.BatchTerms(E1, E2, tau1, tau2)

        if var.loss == "mbcl":
            eps_eff = mbcl_constant(self.B)
            g1, g2 = terms.inner_means()
            u1, u2 = g1, g2
            u_local = [(g1[rows[k]], g2[rows[k]]) for k in range(K)]
        else:
            eps_eff = eps
            for k in range(K):
                g1, g2 = terms.inner_means(rows[k])
                self.u.update_u(k, local_idx[k], g1, g2, gamma)
            u_local = [self.u.snapshot_u_for_batch(local_idx[k]) for k in range(K)]
            if self.cfg.algo.strategy == "fastclip":
                gathered = fab.all_gather([np.concatenate(u) for u in u_local], phase="u-gather")
                gathered = gathered.reshape(K, 2, self.b)
                u1 = gathered[:, 0, :].reshape(-1)
                u2 = gathered[:, 1, :].reshape(-1)
            else:
                u1 = u2 = None

        if temp.is_individual:
            scale1, scale2 = tau1, tau2
        else:
            scale1 = scale2 = temp.tau if var.scaled else 1.0

        # model gradient: anchor half locally, contrast half per strategy
        cots = []
        if self.cfg.algo.strategy == "fastclip":
            c1, c2 = engine.pair_coefficients(terms, u1, u2, eps_eff, scale1, scale2, self.b)
            for k in range(K):
                a1, a2 = engine.anchor_cotangents(terms, rows[k], c1, c2)
                b1, b2 = engine.contrast_cotangents(terms, rows[k], c1, c2)
                cots.append((a1 + b1, a2 + b2))
        else:
            p1s, p2s, anchors = [], [], []
            for k in range(K):
                uk1 = np.full(self.B, np.nan)
                uk2 = np.full(self.B, np.nan)
                uk1[rows[k]], uk2[rows[k]] = u_local[k]
                c1, c2 = engine.pair_coefficients(terms, uk1, uk2, eps_eff, scale1, scale2, self.b)
                anchors.append(engine.anchor_cotangents(terms, rows[k], c1, c2))
                p1, p2 = engine.contrast_rs_payload(terms, rows[k], c1, c2, K)
                p1s.append(p1)
                p2s.append(p2)
            r1 = fab.reduce_scatter_mean(p1s, phase="rs-grad")
            r2 = fab.reduce_scatter_mean(p2s, phase="rs-grad")
            cots = [(anchors[k][0] + r1[k], anchors[k][1] + r2[k]) for k in range(K)]

        packets = [self.model.vjp(self.params[k], views[k].tapes, *cots[k]) for k in range(K)]
        G = fab.all_reduce_mean(packets, phase="grad-reduce")

        # temperature gradient from the same gather
        tau_grad = None
        if temp.scheme == "global_learnable_v0":
            per = [engine.grad_tau_v0(rows[k], E1, E2, *u_local[k], temp.tau, eps_eff, terms=terms) for k in range(K)]
            tau_grad = float(fab.all_reduce_mean([np.array([g]) for g in per], phase="tau-reduce")[0])
        elif temp.scheme == "global_learnable_v3":
            per = [engine.grad_tau_v3(rows[k], E1, E2, *u_local[k], temp.tau, eps_eff, temp.rho, terms=terms)
                   for k in range(K)]
            tau_grad = float(fab.all_reduce_mean([np.array([g]) for g in per], phase="tau-reduce")[0])
        elif temp.is_individual:
            tau_grad = [engine.grad_tau_v2_local(rows[k], terms, *u_local[k], eps_eff, temp.rho, self.n)
                        for k in range(K)]

        kind = self.cfg.optim.optimizer
        for k in range(K):
            self.params[k] = optimizer_step(kind, self.opts[k], self.params[k], G, lr)
        if self.check_replicas:
            for k in range(1, K):
                if not np.array_equal(self.params[k], self.params[0]):
                    raise RuntimeError(f"replica {k} diverged from replica 0")

        tau_lr = self.cfg.algo.tau_lr
        if temp.is_individual:
            for k in range(K):
                if np.any(self.u.owner[local_idx[k]] != k):
                    raise OwnershipError(f"worker {k} updating temperatures it does not own")
                temperature_step(temp, self.tau_opt, tau_grad[k], tau_lr, idx=local_idx[k])
        elif temp.learnable:
            mult = self.latch(temp.tau) if self.latch_enabled else 1.0
            temperature_step(temp, self.tau_opt, tau_grad, tau_lr * mult)

        info = {"t": t, "epoch": self.epoch, "idx": idx, "grad": G, "params": self.params[0],
                "tau_grad": tau_grad, "tau": temp.summary()["tau"], "gamma": gamma, "lr": lr}
        self._last = {"gamma": gamma, "lr": lr, "eps": eps}
        self.iteration += 1
        if self.on_step:
            self.on_step(info)
        return info

    # -- epochs --------------------------------------------------------------

    def epoch_batches(self, epoch: int):
        seed = self.cfg.run.seed
        streams = [sample_local_batch(self.shards[v], self.b_shard, seed, v, epoch) for v in range(self.V)]
        for _ in range(self.iters_per_epoch):
            per_shard = [next(s) for s in streams]
            yield [np.concatenate([per_shard[v] for v in self.worker_shards[k]]) for k in range(self.K)]

    def run_epoch(self) -> dict:
        for local_idx in self.epoch_batches(self.epoch):
            self.step(local_idx)
        self.epoch += 1
        return self.metrics_row()

    def metrics_row(self) -> dict:
        row = {"epoch": self.epoch, "iteration": self.iteration, **self._last, **self.temp.summary()}
        if self.probe is not None:
            E1, E2, _ = self.model.forward(self.params[0], self.probe.X, self.probe.T)
            tau = row["tau"]
            gcl = eval_gcl(E1, E2, tau, self._last["eps"])
            row["probe_gcl"] = gcl
            row["probe_rgclg"] = gcl + 2.0 * self.temp.rho * tau
            row.update(evaluate_retrieval(E1, E2))
        else:
            row.update(probe_gcl=float("nan"), probe_rgclg=float("nan"), r1_i2t=float("nan"), r1_t2i=float("nan"))
        phases = self.fabric.ledger.totals("phase")
        for col, ph in PHASES.items():
            names = ph if isinstance(ph, tuple) else (ph,)
            row[col] = sum(phases.get(p, 0) for p in names)
        row["comm_total"] = self.fabric.ledger.total_elements
        return row

    def train_epochs(self, epochs: int, out_dir: str | Path | None = None, checkpoint_every: int = 1) -> list[dict]:
        rows = []
        metrics_path = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = out_dir / "metrics.csv"
            if not metrics_path.exists():
                metrics_path.write_text(",".join(METRIC_COLUMNS) + "\n")
        for _ in range(epochs):
            row = self.run_epoch()
            rows.append(row)
            if metrics_path is not None:
                with open(metrics_path, "a") as fh:
                    fh.write(",".join(_fmt(row[c]) for c in METRIC_COLUMNS) + "\n")
                if checkpoint_every and self.epoch % checkpoint_every == 0:
                    self.save_checkpoint(out_dir / "checkpoint.npz")
        if out_dir is not None:
            self.save_checkpoint(out_dir / "checkpoint.npz")
            (out_dir / "ledger.csv").write_text(self.fabric.ledger.export())
        return rows

    # -- checkpoints ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        t = self.temp
        header = {
            "architecture": self.model.header(), "epoch": self.epoch, "iteration": self.iteration,
            "seed": self.cfg.run.seed, "opt_step": self.opts[0].t, "tau_opt_step": self.tau_opt.t,
            "tau": t.tau, "latch": self.latch.tripped, "scheme": t.scheme,
            "ledger": [[r.phase, r.primitive, r.K, r.elements] for r in self.fabric.ledger.records],
        }
        out = {
            "header": np.array(json.dumps(header, sort_keys=True)),
            "params": self.params[0], "opt_m": self.opts[0].m, "opt_v": self.opts[0].v,
            "tau_opt_m": self.tau_opt.m, "tau_opt_v": self.tau_opt.v,
            "u1": self.u.u1, "u2": self.u.u2, "u_stamp": self.u.stamp,
        }
        if t.is_individual:
            out.update(tau1=t.tau1, tau2=t.tau2, tau_m1=t.m1, tau_v1=t.v1, tau_m2=t.m2, tau_v2=t.v2,
                       tau_steps=t.steps)
        return out

    def save_checkpoint(self, path: str | Path) -> None:
        np.savez(path, **self.state_arrays())

    def load_checkpoint(self, path: str | Path) -> None:
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
        header = json.loads(str(arrays["header"]))
        if TwoTower.from_header(header["architecture"]) != self.model:
            raise ConfigError("model.arch", "checkpoint architecture does not match the configuration")
        self.epoch, self.iteration = header["epoch"], header["iteration"]
        for k in range(self.K):
            self.params[k] = arrays["params"].copy()
            self.opts[k].m = arrays["opt_m"].copy()
            self.opts[k].v = arrays["opt_v"].copy()
            self.opts[k].t = header["opt_step"]
        self.tau_opt.m = arrays["tau_opt_m"].copy()
        self.tau_opt.v = arrays["tau_opt_v"].copy()
        self.tau_opt.t = header["tau_opt_step"]
        self.u.u1[:] = arrays["u1"]
        self.u.u2[:] = arrays["u2"]
        self.u.stamp[:] = arrays["u_stamp"]
        self.temp.tau = header["tau"]
        self.latch.tripped = header["latch"]
        if self.temp.is_individual:
            t = self.temp
            t.tau1[:], t.tau2[:] = arrays["tau1"], arrays["tau2"]
            t.m1[:], t.v1[:], t.m2[:], t.v2[:] = arrays["tau_m1"], arrays["tau_v1"], arrays["tau_m2"], arrays["tau_v2"]
            t.steps[:] = arrays["tau_steps"]
        self.fabric.ledger.records = [CommRecord(*r) for r in header["ledger"]]


def train(cfg: RunConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
          epochs: int | None = None) -> Trainer:
    trainer = Trainer(cfg)
    if resume:
        trainer.load_checkpoint(resume)
    total = cfg.run.epochs if epochs is None else epochs
    trainer.train_epochs(max(0, total - trainer.epoch), out_dir, cfg.run.checkpoint_every)
    return trainer
