"""Encoder -> bottleneck -> decoder models for the synthetic tasks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import grad_core as gc
from ..adaptive import AdaptiveResult, BottleneckPool, total_loss
from ..config import ModelConfig
from ..grad_core import Value
from ..quantizer import kmeans_init, quantize


class MLP:
    """affine -> relu -> affine"""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, prefix: str):
        b1, b2 = 1.0 / math.sqrt(d_in), 1.0 / math.sqrt(d_hidden)
        self.prefix = prefix
        self.w1 = Value(rng.uniform(-b1, b1, (d_hidden, d_in)), requires_grad=True)
        self.b1 = Value(rng.uniform(-b1, b1, d_hidden), requires_grad=True)
        self.w2 = Value(rng.uniform(-b2, b2, (d_out, d_hidden)), requires_grad=True)
        self.b2 = Value(rng.uniform(-b2, b2, d_out), requires_grad=True)

    def __call__(self, x: Value) -> Value:
        return gc.affine(gc.relu(gc.affine(x, self.w1, self.b1)), self.w2, self.b2)

    def named_parameters(self) -> dict[str, Value]:
        p = self.prefix
        return {f"{p}.w1": self.w1, f"{p}.b1": self.b1, f"{p}.w2": self.w2, f"{p}.b2": self.b2}


@dataclass
class StepOutput:
    total: Value
    task_loss: Value
    result: AdaptiveResult | None
    correct: np.ndarray


class Model:
    """One encoder, an optional bottleneck pool and a task head.

    The attribute head decodes per-slot logits; the referential head decodes a
    message and scores it against listener encodings of each candidate.
    """

    def __init__(self, kind: str, A: int, V: int, cfg: ModelConfig,
                 init_rng: np.random.Generator, pool_rng: np.random.Generator):
        self.kind, self.A, self.V, self.cfg = kind, A, V, cfg
        d_in = A * V
        self.encoder = MLP(d_in, cfg.hidden, cfg.m, init_rng, "encoder")
        if kind == "attribute":
            self.decoder = MLP(cfg.m, cfg.hidden, A * V, init_rng, "decoder")
            self.listener = None
        else:
            self.decoder = MLP(cfg.m, cfg.hidden, cfg.message_dim, init_rng, "decoder")
            self.listener = MLP(d_in, cfg.hidden, cfg.message_dim, init_rng, "listener")
        self.pool = None
        if cfg.mode != "none":
            self.pool = BottleneckPool(
                cfg.specs(), cfg.m, query_dim=cfg.query_dim, tau=cfg.tau, alpha=cfg.alpha,
                beta_cap=cfg.beta_cap, beta_commit=cfg.beta_commit,
                hierarchical=cfg.mode == "hierarchical", rng=pool_rng,
                detach_query=cfg.detach_query, refresh_idle=cfg.refresh_idle,
                query_act=cfg.query_act)

    @property
    def n_branches(self) -> int:
        return self.pool.N if self.pool is not None else 1

    def branch_labels(self) -> list[str]:
        if self.pool is None:
            return ["none"]
        return [s.label() for s in self.pool.specs]

    def named_parameters(self) -> dict[str, Value]:
        named = dict(self.encoder.named_parameters())
        named.update(self.decoder.named_parameters())
        if self.listener is not None:
            named.update(self.listener.named_parameters())
        if self.pool is not None:
            named.update(self.pool.named_parameters())
        return named

    def parameters(self) -> list[Value]:
        return list(self.named_parameters().values())

    def init_codebooks(self, inputs: np.ndarray, iters: int, seeds: np.random.SeedSequence):
        """k-means each codebook on segments produced by the untrained encoder."""
        if self.pool is None:
            return
        with gc.no_grad():
            h = self.encoder(Value(inputs))
        pool = self.pool
        if pool.hierarchical:
            x = h
            for t in pool.cascade_order():
                cb = pool.codebooks[t]
                cb.embeddings.data[...] = self._fit(x.data, cb, iters, seeds, t)
                with gc.no_grad():
                    x = quantize(x, cb).z
        else:
            for t, cb in enumerate(pool.codebooks):
                if cb is not None:
                    cb.embeddings.data[...] = self._fit(h.data, cb, iters, seeds, t)

    @staticmethod
    def _fit(x: np.ndarray, cb, iters, seeds, t) -> np.ndarray:
        segs = x.reshape(-1, cb.seg_dim)
        seed = int(np.random.SeedSequence(seeds.entropy, spawn_key=tuple(seeds.spawn_key) + (t,)).generate_state(1)[0])
        return kmeans_init(segs, cb.L, iters, seed)

    def bottleneck(self, h: Value, rng, training: bool):
        if self.pool is None:
            return h, None
        res = self.pool.forward(h, rng, training)
        return res.z, res

    def step(self, batch, rng=None, training: bool = True) -> StepOutput:
        if self.kind == "attribute":
            x, labels = batch
            z, res = self.bottleneck(self.encoder(Value(x)), rng, training)
            logits = gc.reshape(self.decoder(z), (len(x), self.A, self.V))
            task = gc.sum_last(gc.cross_entropy(logits, labels))
            pred = np.argmax(logits.data, axis=-1)
            correct = np.all((pred == labels) | (labels < 0), axis=-1)
        else:
            speaker, listener, answer = batch
            z, res = self.bottleneck(self.encoder(Value(speaker)), rng, training)
            msg = self.decoder(z)
            views = self.listener(Value(listener))
            scores = gc.matvec(views, msg)
            task = gc.cross_entropy(scores, answer)
            correct = np.argmax(scores.data, axis=-1) == answer
        if res is None:
            total = gc.mean(task)
        else:
            total = total_loss(task, res, self.pool)
        return StepOutput(total, task, res, correct)


def batch_of(ds, idx):
    if ds.kind == "attribute":
        return ds.inputs[idx], ds.labels[idx]
    return ds.speaker[idx], ds.listener[idx], ds.answer[idx]
