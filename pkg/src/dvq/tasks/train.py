"""Training and evaluation drivers that produce run records and checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import grad_core as gc
from ..checkpoint import Checkpoint
from ..config import ModelConfig, OptimConfig, RunConfig, TaskConfig
from .data import generate
from .model import Model, batch_of

log = logging.getLogger(__name__)

ROW_FIELDS = ("index", "complexity", "selected_t", "factor_count", "codebook_size",
              "log_codebook_size", "capacity", "disc_loss", "correct")


class NonFiniteLossError(ArithmeticError):
    """A loss term became NaN or infinite during training."""


@dataclass
class EpochRecord:
    epoch: int
    task_loss: float
    disc_loss: float
    capacity_mean: float
    selection_counts: list[int]


@dataclass
class RunRecord:
    branch_labels: list[str]
    epochs: list[EpochRecord] = field(default_factory=list)
    eval_rows: list[dict] = field(default_factory=list)
    val_accuracy: float = float("nan")
    val_capacity: float = float("nan")

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "task_loss", "disc_loss", "capacity_mean"]
                   + [f"select[{lab}]" for lab in self.branch_labels])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.task_loss), repr(e.disc_loss), repr(e.capacity_mean)]
                       + e.selection_counts)
        return buf.getvalue()


def rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in ROW_FIELDS])
    return buf.getvalue()


class SGD:
    """Fixed-step SGD with optional heavy-ball momentum."""

    def __init__(self, params, lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._vel = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        gc.zero_grad(self.params)

    def step(self):
        for p, v in zip(self.params, self._vel):
            if p._grad is None:
                continue
            if self.momentum:
                v *= self.momentum
                v += p.grad
                p.data -= self.lr * v
            else:
                p.data -= self.lr * p.grad


def _streams(seed: int):
    init, pool, shuffle, gumbel, kmeans = np.random.SeedSequence(seed).spawn(5)
    return init, pool, shuffle, gumbel, kmeans


def build_model(task: TaskConfig, model_cfg: ModelConfig, seed: int) -> Model:
    init, pool, *_ = _streams(seed)
    return Model(task.kind, task.A, task.V, model_cfg, np.random.default_rng(init), np.random.default_rng(pool))


def selector_params(model: Model) -> list:
    pool = model.pool
    return [] if pool is None else [pool.proj_w, pool.proj_b, pool.keys]


def _check_finite(out, epoch: int):
    terms = [("task_loss", gc.mean(out.task_loss).data)]
    if out.result is not None:
        terms += [("disc_loss", out.result.disc_loss.data), ("capacity", out.result.capacity.data)]
    for name, v in terms:
        if not np.all(np.isfinite(v)):
            raise NonFiniteLossError(f"non-finite {name} in epoch {epoch}")
    if not np.isfinite(out.total.data):
        raise NonFiniteLossError(f"non-finite total loss in epoch {epoch}")


def _check_grads(named: dict, epoch: int):
    for name, p in named.items():
        if p._grad is not None and not np.all(np.isfinite(p._grad)):
            raise NonFiniteLossError(f"non-finite gradient for {name} in epoch {epoch}")


def train_model(task: TaskConfig, model_cfg: ModelConfig, optim: OptimConfig, seed: int,
                datasets: dict | None = None, config: RunConfig | None = None, on_epoch=None):
    """Train one model; returns ``(RunRecord, Checkpoint)``.

    ``seed`` controls parameter init, minibatch order, Gumbel noise and
    k-means seeding through independent streams, so the same seed gives the
    same encoder/decoder initialisation whatever the bottleneck mode.
    ``on_epoch(model, record)`` is called after every epoch when given.
    """
    datasets = datasets if datasets is not None else generate(task)
    train, val = datasets["train"], datasets["val"]
    model = build_model(task, model_cfg, seed)
    _, _, shuffle_ss, gumbel_ss, kmeans_ss = _streams(seed)
    model.init_codebooks(train.inputs, optim.kmeans_iter, kmeans_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    gumbel_rng = np.random.default_rng(gumbel_ss)
    named = model.named_parameters()
    opt = SGD(named.values(), optim.lr, optim.momentum)
    record = RunRecord(model.branch_labels())
    n = len(train)
    tau0 = model_cfg.tau
    tau1 = model_cfg.tau_final if model_cfg.tau_final is not None else tau0
    for epoch in range(1, optim.epochs + 1):
        warm = epoch <= model_cfg.select_warmup
        frozen = selector_params(model) if warm else []
        if model.pool is not None:
            frac = (epoch - 1) / max(1, optim.epochs - 1)
            model.pool.tau = tau0 + (tau1 - tau0) * frac
            # during the selector warm-up, branches are sampled from the initial
            # near-uniform pi so every codebook and the decoder see traffic
            model.pool.beta_cap = 0.0 if warm else model_cfg.beta_cap
            model.pool.detach_query = model_cfg.detach_query or warm
        perm = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        counts = np.zeros(model.n_branches, dtype=np.int64)
        for lo in range(0, n, optim.batch_size):
            idx = perm[lo:lo + optim.batch_size]
            opt.zero_grad()
            with gc.Tape() as tape:
                try:
                    out = model.step(batch_of(train, idx), gumbel_rng, training=True)
                except gc.NonFiniteError as err:
                    raise NonFiniteLossError(f"{err} in epoch {epoch}") from err
                _check_finite(out, epoch)
                tape.backward(out.total)
            for p in frozen:
                p.zero_grad()
            _check_grads(named, epoch)
            opt.step()
            k = len(idx)
            sums[0] += float(out.task_loss.data.sum())
            if out.result is not None:
                sums[1] += float(out.result.disc_loss.data.sum())
                sums[2] += float(out.result.capacity.data.sum())
                counts += np.bincount(out.result.selected_t, minlength=model.n_branches)
            else:
                counts[0] += k
        rec = EpochRecord(epoch, float(sums[0] / n), float(sums[1] / n), float(sums[2] / n), counts.tolist())
        record.epochs.append(rec)
        log.debug("epoch %d task=%.4f disc=%.4f cap=%.3f sel=%s", epoch, rec.task_loss,
                  rec.disc_loss, rec.capacity_mean, rec.selection_counts)
        if on_epoch is not None:
            on_epoch(model, rec)
    rows, acc = evaluate_model(model, val)
    record.eval_rows = rows
    record.val_accuracy = acc
    record.val_capacity = float(np.mean([r["capacity"] for r in rows]))
    config = config if config is not None else RunConfig(task, model_cfg, optim)
    ckpt = Checkpoint.from_model(model, config, seed)
    return record, ckpt


def evaluate_model(model: Model, ds, batch_size: int = 256):
    """Deterministic evaluation (argmax selection, no noise); returns ``(rows, accuracy)``."""
    if ds.inputs.shape[-1] != model.A * model.V or ds.A != model.A or ds.V != model.V:
        raise ValueError(f"dataset shape A={ds.A}, V={ds.V} does not match model A={model.A}, V={model.V}")
    if ds.kind != model.kind:
        raise ValueError(f"dataset kind {ds.kind!r} does not match model kind {model.kind!r}")
    rows = []
    for lo in range(0, len(ds), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(ds)))
        with gc.no_grad():
            out = model.step(batch_of(ds, idx), None, training=False)
        res = out.result
        for j, i in enumerate(idx):
            if res is None:
                t, G, L, cap, disc = 0, 0, 0, 0.0, 0.0
            else:
                t = int(res.selected_t[j])
                spec = model.pool.specs[t]
                G, L = spec.G, spec.L
                cap = float(res.capacity.data[j])
                disc = float(res.disc_loss.data[j])
            rows.append({
                "index": int(i), "complexity": int(ds.complexity[i]), "selected_t": t,
                "factor_count": G, "codebook_size": L,
                "log_codebook_size": math.log(L) if L else 0.0,
                "capacity": cap, "disc_loss": disc, "correct": int(out.correct[j]),
            })
    acc = float(np.mean([r["correct"] for r in rows])) if rows else float("nan")
    return rows, acc


def evaluate(checkpoint: Checkpoint, ds):
    return evaluate_model(checkpoint.to_model(), ds)
