"""Segmented vector quantization with k-means initialised codebooks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grad_core as gc
from .grad_core import Value

DEFAULT_BETA_COMMIT = 0.25


@dataclass
class Codebook:
    """L codes of width ``seg_dim``; a representation of width m is cut into G segments."""

    L: int
    G: int
    seg_dim: int
    embeddings: Value
    beta_commit: float = DEFAULT_BETA_COMMIT

    def __post_init__(self):
        if self.L < 1 or self.G < 1 or self.seg_dim < 1:
            raise ValueError(f"codebook sizes must be positive (L={self.L}, G={self.G}, seg_dim={self.seg_dim})")
        if self.beta_commit < 0:
            raise ValueError("beta_commit must be non-negative")
        shape = self.embeddings.data.shape
        if shape != (self.L, self.seg_dim):
            raise ValueError(f"embeddings have shape {shape}, expected ({self.L}, {self.seg_dim})")
        if not np.all(np.isfinite(self.embeddings.data)):
            raise ValueError("embeddings contain non-finite entries")

    @property
    def width(self) -> int:
        return self.G * self.seg_dim

    @classmethod
    def create(cls, L: int, G: int, m: int, rng: np.random.Generator | None = None,
               beta_commit: float = DEFAULT_BETA_COMMIT, init: np.ndarray | None = None) -> "Codebook":
        if G < 1 or m % G:
            raise ValueError(f"G={G} must divide representation width m={m}")
        d = m // G
        if init is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            init = rng.normal(0.0, 1.0, size=(L, d))
        return cls(L, G, d, Value(init, requires_grad=True, name=f"codebook[G={G},L={L}]"), beta_commit)


@dataclass
class QuantizeResult:
    z: Value
    indices: np.ndarray
    codebook_loss: Value
    commitment_loss: Value

    @property
    def loss(self) -> Value:
        return self.codebook_loss + self.commitment_loss


def nearest_code(segment, embeddings) -> tuple[int, float]:
    """Index and squared distance of the closest row; ties go to the lowest index."""
    s = np.asarray(segment, dtype=np.float64)
    e = np.asarray(embeddings, dtype=np.float64)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(e))):
        raise gc.NonFiniteError("nearest_code: non-finite input")
    if e.ndim != 2 or e.shape[0] == 0 or e.shape[1] != s.shape[-1]:
        raise ValueError(f"nearest_code: segment {s.shape} vs embeddings {e.shape}")
    d = ((e - s) ** 2).sum(axis=1)
    j = int(np.argmin(d))
    return j, float(d[j])


def nearest_codes(segments: np.ndarray, embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`nearest_code` over the leading axes of ``segments``."""
    # explicit differences keep distances exact at zero (no expansion cancellation)
    d = ((segments[..., None, :] - embeddings) ** 2).sum(axis=-1)
    idx = np.argmin(d, axis=-1)
    return idx, np.take_along_axis(d, idx[..., None], axis=-1)[..., 0]


def quantize(h: Value, codebook: Codebook) -> QuantizeResult:
    """Snap each of the G segments of ``h`` to its nearest code.

    The returned ``z`` carries the codes forward and the identity backward;
    losses are averaged over the G factors.
    """
    m = h.data.shape[-1]
    if m % codebook.G or m // codebook.G != codebook.seg_dim:
        raise gc.ShapeError(f"quantize: width {m} does not split into G={codebook.G} segments of {codebook.seg_dim}")
    if codebook.L == 0:
        raise ValueError("quantize: empty codebook")
    if not np.all(np.isfinite(h.data)):
        raise gc.NonFiniteError("quantize: non-finite representation")
    lead = h.data.shape[:-1]
    segs = gc.reshape(h, lead + (codebook.G, codebook.seg_dim))
    idx, _ = nearest_codes(segs.data, codebook.embeddings.data)
    codes = gc.take_rows(codebook.embeddings, idx)
    inv_g = 1.0 / codebook.G
    cb_loss = gc.scale(gc.sum_last(gc.sq_l2(gc.stop_gradient(segs), codes)), inv_g)
    commit = gc.scale(gc.sum_last(gc.sq_l2(segs, gc.stop_gradient(codes))), codebook.beta_commit * inv_g)
    z = gc.reshape(gc.straight_through(codes, segs), h.data.shape)
    return QuantizeResult(z, idx, cb_loss, commit)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        closest = np.minimum(closest, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def kmeans(samples, L: int, max_iter: int = 50, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding.

    ``inertia_history[i]`` is the inertia of the assignment made at iteration
    i. An empty cluster takes over the sample farthest from its centroid.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if L < 1:
        raise ValueError("L must be >= 1")
    if len(x) < L:
        raise ValueError(f"k-means needs at least L={L} samples, got {len(x)}")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    rng = np.random.default_rng(seed)
    c = _plusplus(x, L, rng)
    labels = None
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, c)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            converged = True
            break
        labels = new
        counts = np.bincount(labels, minlength=L)
        own = d[np.arange(len(x)), labels]
        while not counts.all():
            j = int(np.flatnonzero(counts == 0)[0])
            # donors must keep at least one member; one always exists since n >= L
            cand = np.where(counts[labels] > 1, own, -1.0)
            far = int(np.argmax(cand))
            counts[labels[far]] -= 1
            labels[far] = j
            counts[j] = 1
            own[far] = 0.0
            c[j] = x[far]
        for j in range(L):
            members = labels == j
            if members.any():
                c[j] = x[members].mean(axis=0)
    return KMeansResult(c, labels, history, it, converged)


def kmeans_init(samples, L: int, max_iter: int = 50, seed: int = 0) -> np.ndarray:
    return kmeans(samples, L, max_iter, seed).centroids
