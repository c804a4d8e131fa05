"""Synthetic datasets with a per-sample complexity label.

Attribute samples switch on K of A slots, each holding one of V values, and
encode them as a noisy concatenation of per-slot one-hots. Referential
episodes pair such a target with D distractors that share its active slots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class AttributeSample:
    input: np.ndarray
    labels: np.ndarray
    complexity: int


@dataclass
class AttributeDataset:
    A: int
    V: int
    inputs: np.ndarray
    labels: np.ndarray
    complexity: np.ndarray

    kind = "attribute"

    def __len__(self):
        return len(self.inputs)

    def __getitem__(self, i) -> AttributeSample:
        return AttributeSample(self.inputs[i], self.labels[i], int(self.complexity[i]))

    def subset(self, idx) -> "AttributeDataset":
        return AttributeDataset(self.A, self.V, self.inputs[idx], self.labels[idx], self.complexity[idx])


@dataclass
class ReferentialEpisode:
    target: np.ndarray
    distractors: np.ndarray
    speaker_view: np.ndarray
    listener_views: np.ndarray
    answer: int
    complexity: int


@dataclass
class ReferentialDataset:
    A: int
    V: int
    targets: np.ndarray
    distractors: np.ndarray
    speaker: np.ndarray
    listener: np.ndarray
    answer: np.ndarray
    complexity: np.ndarray

    kind = "referential"

    def __len__(self):
        return len(self.speaker)

    def __getitem__(self, i) -> ReferentialEpisode:
        return ReferentialEpisode(self.targets[i], self.distractors[i], self.speaker[i],
                                  self.listener[i], int(self.answer[i]), int(self.complexity[i]))

    @property
    def inputs(self) -> np.ndarray:
        return self.speaker

    def subset(self, idx) -> "ReferentialDataset":
        return ReferentialDataset(self.A, self.V, self.targets[idx], self.distractors[idx],
                                  self.speaker[idx], self.listener[idx], self.answer[idx],
                                  self.complexity[idx])


def _check_shape(A, V, complexity_set, sizes, noise_sigma):
    if A < 1 or V < 1 or A * V > 256:
        raise ValueError(f"A*V must lie in [1, 256], got A={A}, V={V}")
    if not complexity_set or any(k < 1 or k > A for k in complexity_set):
        raise ValueError(f"complexities must lie in [1, {A}]")
    if len(sizes) != 3 or any(s < 1 for s in sizes):
        raise ValueError("sizes must be three positive integers")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")


def _draw_labels(n, A, V, complexity_set, rng):
    ks = rng.choice(np.asarray(sorted(complexity_set)), size=n)
    labels = np.full((n, A), -1, dtype=np.int64)
    for i, k in enumerate(ks):
        slots = rng.choice(A, size=k, replace=False)
        labels[i, slots] = rng.integers(V, size=k)
    return labels, ks.astype(np.int64)


def encode(labels: np.ndarray, V: int) -> np.ndarray:
    """Concatenated one-hots; inactive slots (label -1) are all zeros."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (V,))
    active = labels >= 0
    np.put_along_axis(out, np.where(active, labels, 0)[..., None], active[..., None].astype(float), axis=-1)
    return out.reshape(labels.shape[:-1] + (labels.shape[-1] * V,))


def gen_attribute_dataset(A=8, V=8, complexity_set=(1, 2, 4), sizes=(2048, 512, 512),
                          noise_sigma=0.1, seed=0) -> dict[str, AttributeDataset]:
    _check_shape(A, V, complexity_set, sizes, noise_sigma)
    streams = np.random.SeedSequence(seed).spawn(len(SPLITS))
    out = {}
    for name, n, ss in zip(SPLITS, sizes, streams):
        rng = np.random.default_rng(ss)
        labels, ks = _draw_labels(n, A, V, complexity_set, rng)
        x = encode(labels, V)
        if noise_sigma > 0:
            x = x + rng.normal(0.0, noise_sigma, x.shape)
        out[name] = AttributeDataset(A, V, x, labels, ks)
    return out


def gen_referential_dataset(A=8, V=8, complexity_set=(1, 2, 4), sizes=(2048, 512, 512),
                            noise_sigma=0.1, distractors=3, seed=0) -> dict[str, ReferentialDataset]:
    _check_shape(A, V, complexity_set, sizes, noise_sigma)
    if distractors < 0:
        raise ValueError("distractors must be >= 0")
    if distractors and V < 2:
        raise ValueError("distractors need V >= 2")
    D = distractors
    streams = np.random.SeedSequence(seed).spawn(len(SPLITS))
    out = {}
    for name, n, ss in zip(SPLITS, sizes, streams):
        rng = np.random.default_rng(ss)
        targets, ks = _draw_labels(n, A, V, complexity_set, rng)
        dis = np.repeat(targets[:, None, :], D, axis=1)
        for i in range(n):
            active = np.flatnonzero(targets[i] >= 0)
            for j in range(D):
                while True:
                    cand = rng.integers(V, size=len(active))
                    if not np.array_equal(cand, targets[i, active]):
                        break
                dis[i, j, active] = cand
        cands = np.concatenate([targets[:, None, :], dis], axis=1)
        perm = np.argsort(rng.random((n, D + 1)), axis=1)
        cands = np.take_along_axis(cands, perm[..., None], axis=1)
        answer = np.argmin(perm, axis=1).astype(np.int64)
        speaker = encode(targets, V)
        listener = encode(cands, V)
        if noise_sigma > 0:
            speaker = speaker + rng.normal(0.0, noise_sigma, speaker.shape)
            listener = listener + rng.normal(0.0, noise_sigma, listener.shape)
        out[name] = ReferentialDataset(A, V, targets, dis, speaker, listener, answer, ks)
    return out


def generate(task) -> dict:
    """Datasets for a :class:`~dvq.config.TaskConfig`."""
    if task.kind == "attribute":
        return gen_attribute_dataset(task.A, task.V, task.complexity_set, task.sizes,
                                     task.noise_sigma, task.seed)
    return gen_referential_dataset(task.A, task.V, task.complexity_set, task.sizes,
                                   task.noise_sigma, task.distractors, task.seed)


# ------------------------------------------------------------------ JSON lines


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_jsonl(ds, path) -> int:
    path = Path(path)
    header = {"format_version": FORMAT_VERSION, "kind": ds.kind, "A": ds.A, "V": ds.V, "n": len(ds)}
    lines = [_dump(header)]
    for i in range(len(ds)):
        if ds.kind == "attribute":
            rec = {"input": ds.inputs[i].tolist(), "labels": ds.labels[i].tolist(),
                   "complexity": int(ds.complexity[i])}
        else:
            rec = {"target": ds.targets[i].tolist(), "distractors": ds.distractors[i].tolist(),
                   "speaker_view": ds.speaker[i].tolist(), "listener_views": ds.listener[i].tolist(),
                   "answer": int(ds.answer[i]), "complexity": int(ds.complexity[i])}
        lines.append(_dump(rec))
    path.write_text("\n".join(lines) + "\n")
    return len(ds)


def read_jsonl(path):
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: format_version {version} not supported (expected {FORMAT_VERSION})")
    recs = [json.loads(ln) for ln in lines[1:]]
    if len(recs) != header["n"]:
        raise ValueError(f"{path}: header says n={header['n']} but found {len(recs)} samples")
    A, V = header["A"], header["V"]
    if header["kind"] == "attribute":
        return AttributeDataset(
            A, V,
            np.array([r["input"] for r in recs], dtype=np.float64).reshape(len(recs), A * V),
            np.array([r["labels"] for r in recs], dtype=np.int64).reshape(len(recs), A),
            np.array([r["complexity"] for r in recs], dtype=np.int64),
        )
    if header["kind"] == "referential":
        n = len(recs)
        return ReferentialDataset(
            A, V,
            np.array([r["target"] for r in recs], dtype=np.int64).reshape(n, A),
            np.array([r["distractors"] for r in recs], dtype=np.int64).reshape(n, -1, A),
            np.array([r["speaker_view"] for r in recs], dtype=np.float64).reshape(n, A * V),
            np.array([r["listener_views"] for r in recs], dtype=np.float64).reshape(n, -1, A * V),
            np.array([r["answer"] for r in recs], dtype=np.int64),
            np.array([r["complexity"] for r in recs], dtype=np.int64),
        )
    raise ValueError(f"{path}: unknown dataset kind {header['kind']!r}")
