"""Simulated K-worker collectives with an exact element-count ledger.

Collectives are rendezvous points: every worker contributes one payload and
all of them observe the same result.  Reductions always sum in ascending
worker order, so results do not depend on the order in which workers
arrive.  Wire costs follow the ring model:

    all_gather       K (K - 1) p
    all_reduce       2 (K - 1) p
    reduce_scatter   K (K - 1) s

where ``p`` is the per-worker payload and ``s`` the shard size.  One element
is one float64, i.e. 8 bytes.
"""
from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CollectiveShapeError

ELEMENT_BYTES = 8


@dataclass(frozen=True)
class CommRecord:
    phase: str
    primitive: str
    K: int
    elements: int

    @property
    def bytes(self) -> int:
        return self.elements * ELEMENT_BYTES


@dataclass
class CommLedger:
    records: list[CommRecord] = field(default_factory=list)

    def add(self, phase: str, primitive: str, K: int, elements: int) -> None:
        self.records.append(CommRecord(phase, primitive, K, int(elements)))

    def totals(self, by: str = "primitive") -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for r in self.records:
            out[getattr(r, by)] += r.elements
        return dict(out)

    @property
    def total_elements(self) -> int:
        return sum(r.elements for r in self.records)

    def report(self) -> dict:
        return {
            "total_elements": self.total_elements,
            "total_bytes": self.total_elements * ELEMENT_BYTES,
            "per_primitive": self.totals("primitive"),
            "per_phase": self.totals("phase"),
        }

    def export(self) -> str:
        lines = ["phase,primitive,K,elements,bytes"]
        lines += [f"{r.phase},{r.primitive},{r.K},{r.elements},{r.bytes}" for r in self.records]
        return "\n".join(lines) + "\n"

    def mark(self) -> int:
        return len(self.records)

    def since(self, mark: int) -> "CommLedger":
        return CommLedger(self.records[mark:])


def _stack(payloads: Sequence[np.ndarray], K: int, what: str) -> list[np.ndarray]:
    if len(payloads) != K:
        raise CollectiveShapeError(f"{what}: expected {K} payloads, got {len(payloads)}")
    arrs = [np.asarray(p, dtype=np.float64) for p in payloads]
    shape = arrs[0].shape
    for k, a in enumerate(arrs):
        if a.shape != shape:
            raise CollectiveShapeError(f"{what}: worker {k} sent {a.shape}, worker 0 sent {shape}")
    return arrs


def _ordered_sum(arrs: Sequence[np.ndarray]) -> np.ndarray:
    acc = arrs[0].copy()
    for a in arrs[1:]:
        acc += a
    return acc


class Fabric:
    """Round-robin fabric: each collective takes the list of per-worker payloads."""

    def __init__(self, K: int, ledger: CommLedger | None = None):
        if K < 1:
            raise ValueError("need at least one worker")
        self.K = K
        self.ledger = ledger if ledger is not None else CommLedger()

    def all_gather(self, payloads, phase: str = "") -> np.ndarray:
        """Concatenate payloads along axis 0 in worker order."""
        arrs = _stack(payloads, self.K, "all_gather")
        self.ledger.add(phase, "all_gather", self.K, self.K * (self.K - 1) * arrs[0].size)
        return np.concatenate(arrs, axis=0) if arrs[0].ndim else np.array(arrs)

    def all_reduce_mean(self, payloads, phase: str = "") -> np.ndarray:
        arrs = _stack(payloads, self.K, "all_reduce")
        self.ledger.add(phase, "all_reduce", self.K, 2 * (self.K - 1) * arrs[0].size)
        return _ordered_sum(arrs) / self.K

    def reduce_scatter_mean(self, payloads, phase: str = "") -> list[np.ndarray]:
        """Each payload is split into K equal shards along axis 0; worker k gets the mean of shard k."""
        arrs = _stack(payloads, self.K, "reduce_scatter")
        if arrs[0].ndim == 0 or arrs[0].shape[0] % self.K:
            raise CollectiveShapeError(f"reduce_scatter: leading dim {arrs[0].shape} not divisible into {self.K} shards")
        s = arrs[0].size // self.K
        self.ledger.add(phase, "reduce_scatter", self.K, self.K * (self.K - 1) * s)
        mean = _ordered_sum(arrs) / self.K
        return np.split(mean, self.K, axis=0)

    def ledger_report(self) -> dict:
        return self.ledger.report()


class WorkerGroup:
    """Threaded front-end: K threads call collectives with their own payload.

    Each call blocks until all K workers have arrived; the last arrival runs
    the underlying :class:`Fabric` collective on the payloads ordered by
    worker id, so results match the round-robin fabric exactly.
    """

    def __init__(self, fabric: Fabric):
        self.fabric = fabric
        self.K = fabric.K
        self._slots: list = [None] * self.K
        self._result = None
        self._barrier = threading.Barrier(self.K, action=self._resolve)
        # second barrier keeps a fast worker from overwriting slots before all have read
        self._exit = threading.Barrier(self.K)
        self._pending = None

    def _resolve(self):
        name, phase = self._pending
        self._result = getattr(self.fabric, name)(list(self._slots), phase=phase)

    def _collective(self, name: str, worker: int, payload, phase: str):
        self._slots[worker] = payload
        self._pending = (name, phase)
        self._barrier.wait()
        result = self._result
        self._exit.wait()
        return result

    def all_gather(self, worker, payload, phase=""):
        return self._collective("all_gather", worker, payload, phase)

    def all_reduce_mean(self, worker, payload, phase=""):
        return self._collective("all_reduce_mean", worker, payload, phase)

    def reduce_scatter_mean(self, worker, payload, phase=""):
        return self._collective("reduce_scatter_mean", worker, payload, phase)[worker]

    def run(self, fn, *args) -> list:
        """Run ``fn(worker_id, group, *args)`` on K threads; return results by worker."""
        out: list = [None] * self.K
        errors: list = []

        def target(k):
            try:
                out[k] = fn(k, self, *args)
            except BaseException as exc:  # surfaced to the caller below
                errors.append(exc)
                self._barrier.abort()
                self._exit.abort()

        threads = [threading.Thread(target=target, args=(k,)) for k in range(self.K)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        return out
