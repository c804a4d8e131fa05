"""Correlations between input complexity, discretization loss and chosen capacity."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

PAIRS = {
    "spearman_complexity_capacity": ("spearman", "complexity", "capacity"),
    "pearson_disc_loss_capacity": ("pearson", "disc_loss", "capacity"),
    "pearson_disc_loss_factor_count": ("pearson", "disc_loss", "factor_count"),
    "pearson_disc_loss_log_codebook_size": ("pearson", "disc_loss", "log_codebook_size"),
}


def _standardize(x: np.ndarray) -> np.ndarray | None:
    x = x - x.mean()
    norm = np.sqrt((x * x).sum())
    if norm == 0 or not np.isfinite(norm):
        return None
    return x / norm


def permutation_test(x, y, n_perm: int = 10_000, seed: int = 0, chunk: int = 1000):
    """Pearson r of ``x, y`` with a two-sided permutation p-value.

    Returns ``(None, None)`` when either column has zero variance.
    """
    xs = _standardize(np.asarray(x, dtype=np.float64))
    ys = _standardize(np.asarray(y, dtype=np.float64))
    if xs is None or ys is None:
        return None, None
    r = float(xs @ ys)
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n_perm:
        k = min(chunk, n_perm - done)
        perms = rng.permuted(np.broadcast_to(ys, (k, len(ys))), axis=1)
        hits += int(np.count_nonzero(np.abs(perms @ xs) >= abs(r) - 1e-12))
        done += k
    return r, (hits + 1) / (n_perm + 1)


def correlation_analysis(rows, n_perm: int = 10_000, seed: int = 0) -> dict:
    if len(rows) < 10:
        raise ValueError(f"correlation analysis needs at least 10 rows, got {len(rows)}")
    cols = {k: np.array([float(r[k]) for r in rows]) for k in
            ("complexity", "capacity", "disc_loss", "factor_count", "log_codebook_size")}
    out = {}
    for name, (kind, a, b) in PAIRS.items():
        x, y = cols[a], cols[b]
        if kind == "spearman":
            x, y = rankdata(x), rankdata(y)
        r, p = permutation_test(x, y, n_perm, seed)
        out[name] = {"coefficient": r, "p_value": p, "defined": r is not None, "n": len(rows)}
    return out
