"""Toy two-tower encoders with hand-written forward and vector-Jacobian products.

Parameters live in one flat float64 vector (image tower first, then text
tower; inside a tower each layer contributes its weight matrix then its
bias).  Towers map inputs onto the unit sphere, and :meth:`Tower.vjp`
includes the Jacobian of that normalization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NearZeroEmbeddingError

MIN_NORM = 1e-12


@dataclass(frozen=True)
class Tower:
    arch: str  # "linear" | "mlp"
    d_in: int
    d_out: int
    hidden: int = 0

    def __post_init__(self):
        if self.arch not in ("linear", "mlp"):
            raise ValueError(f"unknown tower architecture {self.arch!r}")
        if self.arch == "mlp" and self.hidden < 1:
            raise ValueError("mlp tower needs a positive hidden width")

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        if self.arch == "linear":
            return [(self.d_out, self.d_in), (self.d_out,)]
        return [(self.hidden, self.d_in), (self.hidden,), (self.d_out, self.hidden), (self.d_out,)]

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)

    def unpack(self, flat: np.ndarray) -> list[np.ndarray]:
        if flat.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {flat.shape}")
        out, pos = [], 0
        for s in self.shapes:
            k = int(np.prod(s))
            out.append(flat[pos:pos + k].reshape(s))
            pos += k
        return out

    def init(self, rng: np.random.Generator) -> np.ndarray:
        parts = []
        fan_in = self.d_in
        for s in self.shapes:
            bound = 1.0 / np.sqrt(fan_in)
            parts.append(rng.uniform(-bound, bound, size=s).ravel())
            if len(s) == 1:  # next layer reads this layer's output
                fan_in = s[0]
        return np.concatenate(parts)

    def forward(self, flat: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, "ForwardTape"]:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.d_in:
            raise ValueError(f"input width {X.shape} does not match d_in={self.d_in}")
        p = self.unpack(flat)
        hidden = None
        if self.arch == "linear":
            z = X @ p[0].T + p[1]
        else:
            hidden = np.tanh(X @ p[0].T + p[1])
            z = hidden @ p[2].T + p[3]
        norm = np.linalg.norm(z, axis=1)
        if np.any(norm < MIN_NORM):
            raise NearZeroEmbeddingError(f"{int((norm < MIN_NORM).sum())} embeddings have norm < {MIN_NORM}")
        E = z / norm[:, None]
        return E, ForwardTape(self, X, E, norm, hidden)

    def vjp(self, flat: np.ndarray, tape: "ForwardTape", cot: np.ndarray) -> np.ndarray:
        """Pull cotangents on the normalized embeddings back to a flat gradient."""
        if tape.tower != self:
            raise ValueError("tape was recorded by a different tower")
        cot = np.asarray(cot, dtype=np.float64)
        if cot.shape != tape.E.shape:
            raise ValueError(f"cotangent shape {cot.shape} != embedding shape {tape.E.shape}")
        E = tape.E
        # d(z/|z|) = (I - e e^T) dz / |z|
        dz = (cot - E * np.sum(E * cot, axis=1, keepdims=True)) / tape.norm[:, None]
        if self.arch == "linear":
            grads = [dz.T @ tape.X, dz.sum(axis=0)]
        else:
            p = self.unpack(flat)
            a = tape.hidden
            dh = (dz @ p[2]) * (1.0 - a * a)
            grads = [dh.T @ tape.X, dh.sum(axis=0), dz.T @ a, dz.sum(axis=0)]
        return np.concatenate([g.ravel() for g in grads])

    def header(self) -> dict:
        return {"arch": self.arch, "d_in": self.d_in, "d_out": self.d_out, "hidden": self.hidden}


@dataclass
class ForwardTape:
    tower: Tower
    X: np.ndarray
    E: np.ndarray
    norm: np.ndarray
    hidden: np.ndarray | None


@dataclass(frozen=True)
class TwoTower:
    image: Tower
    text: Tower

    def __post_init__(self):
        if self.image.d_out != self.text.d_out:
            raise ValueError("towers must share the embedding width")

    @property
    def dim(self) -> int:
        return self.image.d_out

    @property
    def size(self) -> int:
        return self.image.size + self.text.size

    def split(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return w[:self.image.size], w[self.image.size:]

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([self.image.init(rng), self.text.init(rng)])

    def forward(self, w, X_img, X_txt):
        wi, wt = self.split(w)
        E1, tape1 = self.image.forward(wi, X_img)
        E2, tape2 = self.text.forward(wt, X_txt)
        return E1, E2, (tape1, tape2)

    def vjp(self, w, tapes, cot1, cot2) -> np.ndarray:
        wi, wt = self.split(w)
        return np.concatenate([self.image.vjp(wi, tapes[0], cot1), self.text.vjp(wt, tapes[1], cot2)])

    def groups(self) -> list[slice]:
        """One slice per weight matrix and per bias vector (LAMB layers)."""
        out, pos = [], 0
        for tower in (self.image, self.text):
            for s in tower.shapes:
                k = int(np.prod(s))
                out.append(slice(pos, pos + k))
                pos += k
        return out

    def header(self) -> dict:
        return {"image": self.image.header(), "text": self.text.header()}

    @classmethod
    def from_header(cls, h: dict) -> "TwoTower":
        return cls(Tower(**h["image"]), Tower(**h["text"]))
