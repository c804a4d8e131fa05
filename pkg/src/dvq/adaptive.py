"""Dynamic bottlenecks: attention-selected quantizers with a capacity penalty.

A :class:`BottleneckPool` holds N discretization functions, each with its own
codebook and a signature key. A query ``f(h)`` scores every key, the scores
are normalised into a selection distribution and a straight-through
Gumbel-softmax sample picks exactly one branch per input.

Flat pools apply every branch to ``h`` directly. Hierarchical pools order the
discrete branches by descending G and feed each stage the previous stage's
output, so later stages are progressively coarser.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import grad_core as gc
from .grad_core import Value
from .quantizer import DEFAULT_BETA_COMMIT, Codebook, quantize

CONTINUOUS_L = 10 ** 9
QUERY_ACTS = ("linear", "relu")


@dataclass(frozen=True)
class BottleneckSpec:
    G: int
    L: int
    is_continuous: bool = False

    def __post_init__(self):
        if self.G < 1 or self.L < 1:
            raise ValueError(f"G and L must be positive, got G={self.G}, L={self.L}")

    @classmethod
    def continuous(cls, G: int = 1) -> "BottleneckSpec":
        return cls(G, CONTINUOUS_L, True)

    def label(self) -> str:
        return f"cont(G={self.G})" if self.is_continuous else f"G={self.G},L={self.L}"


def capacity_penalty(spec: BottleneckSpec) -> float:
    """``G ln L``; continuous branches are priced at ``L = 10**9``."""
    L = CONTINUOUS_L if spec.is_continuous else spec.L
    return spec.G * math.log(L)


@dataclass
class AdaptiveResult:
    z: Value
    selected_t: np.ndarray
    pi: Value
    onehot: Value
    disc_loss: Value
    capacity: Value
    per_branch_capacity: np.ndarray
    branch_indices: dict = field(default_factory=dict)
    # codebook loss of the branches that were not selected (training only)
    idle_codebook_loss: Value | None = None


class BottleneckPool:
    """N bottleneck branches plus the key-query selector that chooses among them."""

    def __init__(self, specs, m: int, query_dim: int = 8, tau: float = 1.0,
                 alpha: float = 1.0, beta_cap: float = 0.0,
                 beta_commit: float = DEFAULT_BETA_COMMIT, hierarchical: bool = False,
                 rng: np.random.Generator | None = None, detach_query: bool = False,
                 refresh_idle: bool = False, query_act: str = "linear"):
        specs = [s if isinstance(s, BottleneckSpec) else BottleneckSpec(*s) for s in specs]
        if not specs:
            raise ValueError("a pool needs at least one branch")
        for s in specs:
            if m % s.G:
                raise ValueError(f"branch {s.label()}: G={s.G} does not divide m={m}")
        if tau <= 0:
            raise ValueError("tau must be positive")
        if alpha < 0 or beta_cap < 0:
            raise ValueError("alpha and beta_cap must be non-negative")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.specs = specs
        self.m = m
        self.query_dim = query_dim
        self.tau = tau
        self.alpha = alpha
        self.beta_cap = beta_cap
        self.hierarchical = hierarchical
        # when set, selection gradients train the selector only, not the encoder
        self.detach_query = detach_query
        # when set, unselected codebooks keep tracking the encoder through their codebook loss
        self.refresh_idle = refresh_idle
        if query_act not in QUERY_ACTS:
            raise ValueError(f"query_act must be one of {QUERY_ACTS}, got {query_act!r}")
        self.query_act = query_act
        self.codebooks: list[Codebook | None] = [
            None if s.is_continuous else Codebook.create(s.L, s.G, m, rng, beta_commit)
            for s in specs
        ]
        bound = 1.0 / math.sqrt(m)
        self.proj_w = Value(rng.uniform(-bound, bound, (query_dim, m)), requires_grad=True, name="proj_w")
        self.proj_b = Value(rng.uniform(-bound, bound, query_dim), requires_grad=True, name="proj_b")
        self.keys = Value(rng.normal(0.0, 1.0 / math.sqrt(query_dim), (len(specs), query_dim)),
                          requires_grad=True, name="keys")
        self.per_branch_capacity = np.array([capacity_penalty(s) for s in specs])

    @property
    def N(self) -> int:
        return len(self.specs)

    def cascade_order(self) -> list[int]:
        """Discrete branches by descending G, then descending L, then pool order."""
        disc = [t for t, s in enumerate(self.specs) if not s.is_continuous]
        return sorted(disc, key=lambda t: (-self.specs[t].G, -self.specs[t].L, t))

    def parameters(self) -> list[Value]:
        ps = [self.proj_w, self.proj_b, self.keys]
        ps += [cb.embeddings for cb in self.codebooks if cb is not None]
        return ps

    def named_parameters(self) -> dict[str, Value]:
        named = {"pool.proj_w": self.proj_w, "pool.proj_b": self.proj_b, "pool.keys": self.keys}
        for t, cb in enumerate(self.codebooks):
            if cb is not None:
                named[f"pool.codebook.{t}"] = cb.embeddings
        return named

    def forward(self, h: Value, rng: np.random.Generator | None = None, training: bool = True) -> AdaptiveResult:
        fwd = hierarchical_forward if self.hierarchical else flat_forward
        return fwd(h, self, rng, training)


def selection_scores(h: Value, pool: BottleneckPool) -> Value:
    if pool.detach_query:
        h = gc.stop_gradient(h)
    query = gc.affine(h, pool.proj_w, pool.proj_b)
    if pool.query_act == "relu":
        query = gc.relu(query)
    return gc.affine(query, pool.keys)


def selection_distribution(h: Value, pool: BottleneckPool) -> Value:
    if not np.all(np.isfinite(h.data)):
        raise gc.NonFiniteError("selection_distribution: non-finite representation")
    scores = selection_scores(h, pool)
    if not np.all(np.isfinite(scores.data)):
        raise gc.NonFiniteError("selection_distribution: non-finite attention scores")
    return gc.softmax(scores)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0)
    return -np.log(-np.log(u))


def gumbel_softmax_onehot(pi: Value, tau: float, rng: np.random.Generator | None = None,
                          noise: np.ndarray | None = None) -> Value:
    """Hard one-hot sample from ``pi`` whose gradient is that of the soft relaxation."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax_onehot needs an rng or explicit noise")
        noise = sample_gumbel(pi.data.shape, rng)
    logits = gc.add(gc.log(pi), Value(noise))
    soft = gc.softmax(gc.scale(logits, 1.0 / tau))
    hard = np.zeros_like(soft.data)
    np.put_along_axis(hard, np.argmax(logits.data, axis=-1)[..., None], 1.0, axis=-1)
    return gc.straight_through(Value(hard), soft)


def _onehot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(idx.shape + (n,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def _branch(h: Value, pool: BottleneckPool, t: int):
    cb = pool.codebooks[t]
    if cb is None:
        zero = Value(np.zeros(h.data.shape[:-1]))
        return h, zero, None, zero
    q = quantize(h, cb)
    return q.z, q.loss, q.indices, q.codebook_loss


def _select(h: Value, pool: BottleneckPool, rng, training: bool):
    pi = selection_distribution(h, pool)
    if training:
        if rng is None:
            raise ValueError("training forward needs an rng for Gumbel noise")
        onehot = gumbel_softmax_onehot(pi, pool.tau, rng)
    else:
        onehot = Value(_onehot(np.argmax(pi.data, axis=-1), pool.N))
    return pi, onehot, np.argmax(onehot.data, axis=-1)


def _assemble(h, pool, pi, onehot, sel, zs, losses, indices, cb_losses=None) -> AdaptiveResult:
    caps = [np.broadcast_to(c, h.data.shape[:-1]).copy() for c in pool.per_branch_capacity]
    idle = None
    if cb_losses is not None:
        # the mask is a constant; stop_gradient keeps it fixed under replayed gradient checks
        idle = gc.mix(Value(1.0 - gc.stop_gradient(onehot).data), cb_losses)
    return AdaptiveResult(
        z=gc.mix(onehot, zs),
        selected_t=sel,
        pi=pi,
        onehot=onehot,
        disc_loss=gc.mix(onehot, losses),
        capacity=gc.mix(onehot, caps),
        per_branch_capacity=pool.per_branch_capacity.copy(),
        branch_indices=indices,
        idle_codebook_loss=idle,
    )


def _eval_rows(h: Value, pool: BottleneckPool, sel: np.ndarray, run_rows):
    """Compute only the selected branch per row; returns z, disc_loss, indices."""
    lead = h.data.shape[:-1]
    flat_h = h.data.reshape(-1, pool.m)
    flat_sel = sel.reshape(-1)
    z = np.empty_like(flat_h)
    loss = np.zeros(len(flat_h))
    indices = {}
    for t in range(pool.N):
        rows = np.flatnonzero(flat_sel == t)
        if rows.size == 0:
            continue
        zt, lt, it = run_rows(Value(flat_h[rows]), t)
        z[rows] = zt
        loss[rows] = lt
        if it is not None:
            indices[t] = (rows, it)
    return Value(z.reshape(lead + (pool.m,))), Value(loss.reshape(lead)), indices


def flat_forward(h: Value, pool: BottleneckPool, rng=None, training: bool = True) -> AdaptiveResult:
    if training:
        pi, onehot, sel = _select(h, pool, rng, True)
        outs = [_branch(h, pool, t) for t in range(pool.N)]
        indices = {t: o[2] for t, o in enumerate(outs) if o[2] is not None}
        return _assemble(h, pool, pi, onehot, sel, [o[0] for o in outs], [o[1] for o in outs], indices,
                         [o[3] for o in outs])
    with gc.no_grad():
        pi, onehot, sel = _select(h, pool, None, False)

        def run(rows_h, t):
            z, loss, idx, _ = _branch(rows_h, pool, t)
            return z.data, loss.data, idx

        z, loss, indices = _eval_rows(h, pool, sel, run)
        caps = pool.per_branch_capacity[sel]
        return AdaptiveResult(z, sel, pi, onehot, loss, Value(caps), pool.per_branch_capacity.copy(), indices)


def cascade(h: Value, pool: BottleneckPool, upto: int | None = None):
    """Run the hierarchical cascade; returns ``{t: (z_t, loss_t, indices_t, codebook_loss_t)}``.

    Each stage only depends on ``h`` and earlier stages, so truncating with
    ``upto`` (a count of stages) yields a prefix of the full result.
    """
    order = pool.cascade_order()
    if upto is not None:
        order = order[:upto]
    out = {}
    x = h
    for t in order:
        q = quantize(x, pool.codebooks[t])
        out[t] = (q.z, q.loss, q.indices, q.codebook_loss)
        x = q.z
    return out


def hierarchical_forward(h: Value, pool: BottleneckPool, rng=None, training: bool = True) -> AdaptiveResult:
    if training:
        pi, onehot, sel = _select(h, pool, rng, True)
        stages = cascade(h, pool)
        zs, losses, cb_losses, indices = [], [], [], {}
        for t in range(pool.N):
            if t in stages:
                z, loss, idx, cb_loss = stages[t]
                indices[t] = idx
            else:
                z, loss, _, cb_loss = _branch(h, pool, t)
            zs.append(z)
            losses.append(loss)
            cb_losses.append(cb_loss)
        return _assemble(h, pool, pi, onehot, sel, zs, losses, indices, cb_losses)
    with gc.no_grad():
        pi, onehot, sel = _select(h, pool, None, False)
        order = pool.cascade_order()
        rank = {t: i for i, t in enumerate(order)}

        def run(rows_h, t):
            if t not in rank:
                z, loss, idx, _ = _branch(rows_h, pool, t)
                return z.data, loss.data, idx
            z, loss, idx, _ = cascade(rows_h, pool, rank[t] + 1)[t]
            return z.data, loss.data, idx

        z, loss, indices = _eval_rows(h, pool, sel, run)
        caps = pool.per_branch_capacity[sel]
        return AdaptiveResult(z, sel, pi, onehot, loss, Value(caps), pool.per_branch_capacity.copy(), indices)


def total_loss(task_loss: Value, result: AdaptiveResult, pool: BottleneckPool) -> Value:
    """Task loss plus weighted discretization loss and capacity penalty, batch-averaged."""
    total = gc.mean(task_loss) + gc.scale(gc.mean(result.disc_loss), pool.alpha)
    if pool.refresh_idle and result.idle_codebook_loss is not None:
        total = total + gc.scale(gc.mean(result.idle_codebook_loss), pool.alpha)
    return total + gc.scale(gc.mean(result.capacity), pool.beta_cap)


def expected_capacity(pi: np.ndarray, pool: BottleneckPool) -> np.ndarray:
    return np.asarray(pi) @ pool.per_branch_capacity
