"""Per-pair inner estimators and temperature state, sharded by worker."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, OwnershipError, StalenessError


class UTable:
    """Moving-average trackers u1[i], u2[i] of the inner means g1, g2.

    ``owner[i]`` is the worker allowed to mutate index ``i``.  Each update
    stamps ``stamp[i]`` with the current iteration so snapshots can reject
    stale entries.
    """

    def __init__(self, n: int, owner: np.ndarray | None = None):
        self.n = n
        self.u1 = np.zeros(n)
        self.u2 = np.zeros(n)
        self.owner = np.zeros(n, dtype=np.int64) if owner is None else np.asarray(owner, dtype=np.int64)
        if self.owner.shape != (n,):
            raise ValueError("owner map must cover every pair")
        self.stamp = np.full(n, -1, dtype=np.int64)
        self.iteration = 0

    def begin_iteration(self, t: int) -> None:
        self.iteration = t

    def update_u(self, worker: int, idx, g1, g2, gamma: float) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        if np.any(self.owner[idx] != worker):
            bad = idx[self.owner[idx] != worker]
            raise OwnershipError(f"worker {worker} does not own pairs {bad.tolist()}")
        if not 0 < gamma <= 1:
            raise DomainError(f"gamma must lie in (0, 1], got {gamma}")
        g1 = np.asarray(g1, dtype=np.float64)
        g2 = np.asarray(g2, dtype=np.float64)
        if np.any(g1 < 0) or np.any(g2 < 0):
            raise DomainError("inner means must be nonnegative")
        self.u1[idx] = (1.0 - gamma) * self.u1[idx] + gamma * g1
        self.u2[idx] = (1.0 - gamma) * self.u2[idx] + gamma * g2
        self.stamp[idx] = self.iteration

    def snapshot_u_for_batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        stale = self.stamp[idx] != self.iteration
        if stale.any():
            raise StalenessError(f"pairs {idx[stale].tolist()} not updated at iteration {self.iteration}")
        return self.u1[idx].copy(), self.u2[idx].copy()

    # text dump: first line n, then one "u1 u2" line per pair
    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write(f"{self.n}\n")
        for a, b in zip(self.u1, self.u2):
            buf.write(f"{float(a)!r} {float(b)!r}\n")
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str, owner=None) -> "UTable":
        lines = text.strip().splitlines()
        n = int(lines[0])
        table = cls(n, owner)
        vals = np.array([[float(x) for x in ln.split()] for ln in lines[1:n + 1]]).reshape(n, 2)
        table.u1[:] = vals[:, 0]
        table.u2[:] = vals[:, 1]
        return table


def ownership_map(n: int, shards: int) -> np.ndarray:
    """Contiguous even partition of [0, n) into ``shards`` blocks."""
    if n % shards:
        raise ValueError(f"n={n} not divisible by {shards} shards")
    return np.repeat(np.arange(shards), n // shards)


SCHEMES = ("constant", "global_learnable_v0", "global_learnable_v3", "individual_v2")


@dataclass
class TempState:
    scheme: str
    tau: float = 0.03
    tau0: float = 0.01
    rho: float = 0.0
    tau1: np.ndarray | None = None
    tau2: np.ndarray | None = None
    # per-index Adam moments and step counts (individual scheme only)
    m1: np.ndarray | None = field(default=None, repr=False)
    v1: np.ndarray | None = field(default=None, repr=False)
    m2: np.ndarray | None = field(default=None, repr=False)
    v2: np.ndarray | None = field(default=None, repr=False)
    steps: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown temperature scheme {self.scheme!r}")
        if self.tau0 <= 0:
            raise DomainError("tau0 must be positive")

    @classmethod
    def individual(cls, n: int, tau_init: float, tau0: float, rho: float) -> "TempState":
        z = np.zeros(n)
        return cls("individual_v2", tau=tau_init, tau0=tau0, rho=rho,
                   tau1=np.full(n, tau_init), tau2=np.full(n, tau_init),
                   m1=z.copy(), v1=z.copy(), m2=z.copy(), v2=z.copy(),
                   steps=np.zeros(n, dtype=np.int64))

    @property
    def is_individual(self) -> bool:
        return self.scheme == "individual_v2"

    @property
    def learnable(self) -> bool:
        return self.scheme != "constant"

    def taus_for(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """Per-pair temperatures for ``idx`` (broadcast scalar tau if global)."""
        idx = np.asarray(idx, dtype=np.int64)
        if self.is_individual:
            return self.tau1[idx].copy(), self.tau2[idx].copy()
        return np.full(idx.shape, self.tau), np.full(idx.shape, self.tau)

    def project(self) -> None:
        if self.is_individual:
            np.maximum(self.tau1, self.tau0, out=self.tau1)
            np.maximum(self.tau2, self.tau0, out=self.tau2)
        else:
            self.tau = max(self.tau, self.tau0)

    def summary(self) -> dict:
        if self.is_individual:
            both = np.concatenate([self.tau1, self.tau2])
            q = np.quantile(both, [0.1, 0.5, 0.9])
            return {"tau": float(q[1]), "tau_q10": float(q[0]), "tau_q90": float(q[2])}
        return {"tau": float(self.tau), "tau_q10": float(self.tau), "tau_q90": float(self.tau)}
