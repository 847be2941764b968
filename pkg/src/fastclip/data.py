"""Synthetic paired data and its on-disk format.

Each pair shares a latent code ``z``; the image input is ``A z + noise`` and
the text input ``B z + noise`` for fixed random maps ``A`` and ``B``.

File layout (little endian): 8-byte magic ``b"FCPAIRS1"``, then int64
``n, d_img, d_txt``, then the n x d_img image block and the n x d_txt text
block, both row-major float64.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FCPAIRS1"


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 1024
    latent_dim: int = 8
    d_img: int = 16
    d_txt: int = 16
    noise: float = 0.3
    seed: int = 0
    identity_maps: bool = False


@dataclass
class PairDataset:
    X: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        if self.X.shape[0] != self.T.shape[0]:
            raise ValueError("image and text blocks must have the same number of rows")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def match(self) -> np.ndarray:
        """Ground-truth text index for every image (pairs are stored aligned)."""
        return np.arange(self.n)

    def subset(self, idx) -> "PairDataset":
        return PairDataset(self.X[idx], self.T[idx])


def _maps(spec: SyntheticSpec, rng: np.random.Generator):
    if spec.identity_maps:
        if not spec.d_img == spec.d_txt == spec.latent_dim:
            raise ValueError("identity maps need d_img == d_txt == latent_dim")
        eye = np.eye(spec.latent_dim)
        return eye, eye
    A = rng.normal(size=(spec.d_img, spec.latent_dim)) / np.sqrt(spec.latent_dim)
    B = rng.normal(size=(spec.d_txt, spec.latent_dim)) / np.sqrt(spec.latent_dim)
    return A, B


def _draw(spec, rng, A, B, count):
    z = rng.normal(size=(count, spec.latent_dim))
    X = z @ A.T + spec.noise * rng.normal(size=(count, spec.d_img))
    T = z @ B.T + spec.noise * rng.normal(size=(count, spec.d_txt))
    return PairDataset(X, T)


def generate(spec: SyntheticSpec, n_probe: int = 0) -> tuple[PairDataset, PairDataset | None]:
    """Training pairs and (optionally) held-out probe pairs from the same maps."""
    rng = np.random.default_rng(spec.seed)
    A, B = _maps(spec, rng)
    train = _draw(spec, rng, A, B, spec.n)
    probe = _draw(spec, rng, A, B, n_probe) if n_probe else None
    return train, probe


def save(ds: PairDataset, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<3q", ds.n, ds.X.shape[1], ds.T.shape[1]))
        fh.write(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.T, dtype="<f8").tobytes())


def load(path: str | Path) -> PairDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a pair dataset file")
    n, di, dt = struct.unpack("<3q", raw[8:32])
    body = np.frombuffer(raw, dtype="<f8", offset=32)
    if body.size != n * (di + dt):
        raise ValueError(f"{path}: truncated ({body.size} values, expected {n * (di + dt)})")
    X = body[:n * di].reshape(n, di).astype(np.float64)
    T = body[n * di:].reshape(n, dt).astype(np.float64)
    return PairDataset(X, T)


def generate_dataset(spec: SyntheticSpec, path: str | Path) -> PairDataset:
    ds, _ = generate(spec)
    save(ds, path)
    return ds
