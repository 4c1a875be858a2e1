"""Exact linear assignment (Hungarian algorithm) and the hard decode.

The solver is the O(n^3) potentials-plus-augmenting-path form of the
Hungarian algorithm.  Rows are inserted in increasing index order and
column scans break ties toward the lowest column index (argmin takes the
first minimum), so tied optima resolve the same way on every run; costs
are processed in 64-bit floats with no perturbation.
"""

from __future__ import annotations

import numpy as np

from .permutation import Permutation
from .sinkhorn import SinkhornConfig, gumbel_noise


def solve_assignment(c) -> Permutation:
    """Permutation minimizing sum_i c[i, map[i]]; exact for finite costs."""
    cost = c.c if hasattr(c, "c") else np.asarray(c, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if cost.shape[0] < 1:
        raise ValueError("cost matrix must be at least 1x1")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix entries must be finite")
    return Permutation(map=_hungarian(cost))


def _hungarian(cost: np.ndarray) -> np.ndarray:
    # 1-based working arrays; column 0 is the virtual root of the
    # alternating tree.  match[j] = row matched to column j (0 = free).
    n = cost.shape[0]
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = cost
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)

    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            cur = a[i0, 1:] - u[i0] - v[1:]
            open_cols = ~used[1:]
            better = open_cols & (cur < minv[1:])
            if np.any(better):
                cols = np.nonzero(better)[0] + 1
                minv[cols] = cur[cols - 1]
                way[cols] = j0
            reach = np.where(open_cols, minv[1:], np.inf)
            j1 = int(np.argmin(reach)) + 1
            delta = reach[j1 - 1]
            used_cols = np.nonzero(used)[0]
            u[match[used_cols]] += delta
            v[used_cols] -= delta
            minv[1:][open_cols] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    result = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        result[match[j] - 1] = j - 1
    return result


def decode(logits: np.ndarray, cfg: SinkhornConfig) -> Permutation:
    """Hard permutation from logits: Hungarian on -(logits + gamma*eps)/tau.

    With gamma = 0 this is deterministic; the positive 1/tau scaling can
    never change the argmin.
    """
    logits = np.asarray(logits, dtype=np.float64)
    scored = logits
    if cfg.gamma > 0.0:
        scored = logits + cfg.gamma * gumbel_noise(logits.shape[0], cfg.noise_seed)
    return solve_assignment(-scored / cfg.tau)
