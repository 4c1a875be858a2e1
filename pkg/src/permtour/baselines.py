"""Classical comparators and the exact small-instance oracle.

greedy_nn and two_opt are the reference heuristics benchmarks compare
against; held_karp is the exact dynamic program used as the optimality
oracle for n up to 18.  All tie rules are fixed (lowest index wins), so
identical inputs always produce identical tours.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .permutation import Tour, canonical_order
from .seeds import stream


class CapabilityError(ValueError):
    """Requested exact solve exceeds the oracle's size bound."""


HELD_KARP_MAX_N = 18


@dataclass(frozen=True)
class TwoOptConfig:
    init: str = "nn"             # nn | random
    strategy: str = "first"      # first-improvement | best-improvement
    max_sweeps: int = 10_000     # effectively: sweep until locally optimal

    def __post_init__(self) -> None:
        if self.init not in ("nn", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.strategy not in ("first", "best"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")


@dataclass(frozen=True)
class BaselineConfig:
    nn_start: str = "fixed"      # fixed (node 0) | best (best over all starts)
    two_opt: TwoOptConfig = TwoOptConfig()

    def __post_init__(self) -> None:
        if self.nn_start not in ("fixed", "best"):
            raise ValueError(f"unknown nn_start {self.nn_start!r}")


def _as_matrix(d) -> np.ndarray:
    return d.d if hasattr(d, "d") else np.asarray(d, dtype=np.float64)


def _nn_order(dm: np.ndarray, start: int) -> np.ndarray:
    n = dm.shape[0]
    order = np.empty(n, dtype=np.int64)
    remaining = dm.copy()
    remaining[:, start] = np.inf
    node = start
    order[0] = start
    for k in range(1, n):
        node = int(np.argmin(remaining[node]))  # first minimum = lowest index
        remaining[:, node] = np.inf
        order[k] = node
    return order


def _order_length(dm: np.ndarray, order: np.ndarray) -> float:
    return float(np.sum(dm[order, np.roll(order, -1)]))


def greedy_nn(d, cfg: BaselineConfig = BaselineConfig()) -> Tour:
    """Append the nearest unvisited node until the cycle closes; ties go to
    the lowest index.  Start node 0, or the best over all starts."""
    dm = _as_matrix(d)
    n = dm.shape[0]
    if n < 3:
        raise ValueError(f"need n >= 3, got {n}")
    starts = range(n) if cfg.nn_start == "best" else (0,)
    best_order: np.ndarray | None = None
    best_len = np.inf
    for s in starts:
        order = _nn_order(dm, s)
        length = _order_length(dm, order)
        if length < best_len:
            best_len = length
            best_order = order
    return Tour(order=canonical_order(best_order), length=best_len)


def two_opt(d, init: Tour, cfg: TwoOptConfig = TwoOptConfig()) -> Tour:
    """2-opt local search: replace edges (i,i+1),(j,j+1) by (i,j),(i+1,j+1)
    (a segment reversal) whenever that strictly shortens the tour.  Sweeps
    scan pairs lexicographically until a full sweep finds no improving
    move or max_sweeps is hit; output length never exceeds the input's."""
    dm = _as_matrix(d)
    n = dm.shape[0]
    if init.n != n:
        raise ValueError(f"size mismatch: distances n={n}, init tour n={init.n}")
    if cfg.strategy == "best":
        order = _two_opt_best(dm, np.array(init.order), cfg.max_sweeps)
    else:
        order = _two_opt_first(dm, init.order.tolist(), cfg.max_sweeps)
    order = canonical_order(order)
    return Tour(order=order, length=_order_length(dm, order))


def _two_opt_first(dm: np.ndarray, order: list, max_sweeps: int) -> np.ndarray:
    # Python-level scan; list-of-lists indexing is ~3x faster than ndarray
    # element access here.
    d = dm.tolist()
    n = len(order)
    eps = 1e-12
    for _ in range(max_sweeps):
        improved = False
        for i in range(n - 1):
            a = order[i]
            b = order[i + 1]
            da = d[a]
            db = d[b]
            dab = da[b]
            jmax = n - 1 if i > 0 else n - 2  # (0, n-1) shares an edge endpoint
            for j in range(i + 2, jmax + 1):
                c = order[j]
                e = order[(j + 1) % n]
                delta = da[c] + db[e] - dab - d[c][e]
                if delta < -eps:
                    order[i + 1:j + 1] = reversed(order[i + 1:j + 1])
                    improved = True
                    b = order[i + 1]
                    db = d[b]
                    dab = da[b]
        if not improved:
            break
    return np.asarray(order, dtype=np.int64)


def _two_opt_best(dm: np.ndarray, order: np.ndarray, max_sweeps: int) -> np.ndarray:
    # Steepest variant: each round applies the single best reconnection, so
    # max_sweeps caps accepted moves rather than scan sweeps.
    n = order.shape[0]
    eps = 1e-12
    iu = np.triu_indices(n, k=2)
    valid = ~((iu[0] == 0) & (iu[1] == n - 1))  # that pair shares node order[0]
    for _ in range(max_sweeps):
        pos = order
        nxt = np.roll(order, -1)
        # gain[i, j] of reconnecting (i,i+1),(j,j+1) as (i,j),(i+1,j+1)
        cur = dm[pos, nxt]
        gain = cur[:, None] + cur[None, :] - dm[np.ix_(pos, pos)] - dm[np.ix_(nxt, nxt)]
        flat = np.where(valid, gain[iu], -np.inf)
        k = int(np.argmax(flat))
        if flat[k] <= eps:
            break
        i, j = int(iu[0][k]), int(iu[1][k])
        order = np.concatenate([order[:i + 1], order[i + 1:j + 1][::-1], order[j + 1:]])
    return order


def run_two_opt(d, cfg: BaselineConfig = BaselineConfig(), seed: int = 0) -> Tour:
    """two_opt from its configured initial tour (NN or a seeded shuffle)."""
    dm = _as_matrix(d)
    if cfg.two_opt.init == "nn":
        init = greedy_nn(d, cfg)
    else:
        order = canonical_order(stream(seed, "two-opt-init").permutation(dm.shape[0]))
        init = Tour(order=order, length=_order_length(dm, order))
    return two_opt(d, init, cfg.two_opt)


def held_karp(d) -> Tour:
    """Provably optimal tour by subset dynamic programming (O(2^n n^2));
    bounded at n = 18 by the 2^n * n state table."""
    dm = _as_matrix(d)
    n = dm.shape[0]
    if n < 3:
        raise ValueError(f"need n >= 3, got {n}")
    if n > HELD_KARP_MAX_N:
        raise CapabilityError(
            f"held_karp supports n <= {HELD_KARP_MAX_N}, got {n}; "
            f"the 2^n * n DP table would need {(1 << n) * n} states")

    full = 1 << n
    dp = np.full((full, n), np.inf)
    parent = np.full((full, n), -1, dtype=np.int8)
    dp[1, 0] = 0.0
    bits = 1 << np.arange(n)
    nodes = np.arange(n)
    for mask in range(1, full, 2):  # start node 0 always visited
        row = dp[mask]
        for j in np.nonzero(np.isfinite(row))[0]:
            avail = nodes[(mask & bits) == 0]
            if avail.size == 0:
                continue
            cand = row[j] + dm[j, avail]
            targets = mask | bits[avail]
            better = cand < dp[targets, avail]
            if np.any(better):
                dp[targets[better], avail[better]] = cand[better]
                parent[targets[better], avail[better]] = j
    closing = dp[full - 1] + dm[:, 0]
    last = int(np.argmin(closing))
    order = np.empty(n, dtype=np.int64)
    mask = full - 1
    node = last
    for k in range(n - 1, 0, -1):
        order[k] = node
        prev = int(parent[mask, node])
        mask ^= 1 << node
        node = prev
    order[0] = 0
    return Tour(order=order, length=float(closing[last]))
