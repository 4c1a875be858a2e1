"""Gumbel noise and log-domain Sinkhorn normalization.

The relaxation runs entirely in log space: one round is a row pass then a
column pass of log-sum-exp subtraction, so the column sums of the returned
matrix are exact and the row sums converge with the iteration count.  A
naive exponentiate-and-divide loop overflows as soon as the temperature
gets small; the log-domain form handles the decode-limit regime
(tau = 0.01) without special cases.

All functions are pure given their config; the noise stream is keyed by
seed, so training can resample per forward pass while staying resumable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .seeds import stream

_UNIFORM_GUARD = 2.0 ** -53


@dataclass(frozen=True)
class SinkhornConfig:
    """Relaxation knobs: temperature tau, noise magnitude gamma, iteration
    count, and the seed behind the Gumbel draws."""

    tau: float = 3.0
    gamma: float = 0.0
    iters: int = 60
    noise_seed: int = 0

    def __post_init__(self) -> None:
        if not self.tau > 0.0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")


@dataclass(frozen=True)
class SoftPermutation:
    """Strictly positive near-doubly-stochastic matrix plus convergence
    diagnostics (worst row/column marginal deviation after `iters` rounds)."""

    t: np.ndarray
    max_row_dev: float
    max_col_dev: float
    iters: int


def gumbel_noise(n: int, seed: int) -> np.ndarray:
    """n x n i.i.d. standard Gumbel draws, -log(-log(u)), deterministic per
    seed; u clamped away from {0, 1} so the transform stays finite."""
    if n < 1:
        raise ValueError(f"noise matrix needs n >= 1, got {n}")
    u = stream(seed, "gumbel").random((n, n))
    u = np.clip(u, _UNIFORM_GUARD, 1.0 - _UNIFORM_GUARD)
    return -np.log(-np.log(u))


def sinkhorn_log_ad(x: ad.Tensor, iters: int) -> ad.Tensor:
    """Unrolled log-domain Sinkhorn: `iters` rounds of row pass then column
    pass (column last).  Returns log T; gradients flow through every
    iteration."""
    for _ in range(iters):
        x = ad.lse_normalize(x, axis=-1)
        x = ad.lse_normalize(x, axis=-2)
    return x


def gumbel_sinkhorn_ad(logits: ad.Tensor, cfg: SinkhornConfig,
                       noise: np.ndarray | None = None) -> ad.Tensor:
    """Soft permutation T = exp(Sinkhorn((logits + gamma*eps) / tau)) as a
    differentiable graph node.  `noise` overrides the config-seeded draw
    (the trainer feeds batch-shaped noise keyed per step)."""
    x = logits
    if cfg.gamma > 0.0:
        if noise is None:
            noise = gumbel_noise(logits.shape[-1], cfg.noise_seed)
        x = ad.add(x, ad.Tensor(cfg.gamma * noise))
    x = ad.scalar_mul(x, 1.0 / cfg.tau)
    return ad.exp(sinkhorn_log_ad(x, cfg.iters))


def _diagnostics(t: np.ndarray, iters: int) -> SoftPermutation:
    row_dev = float(np.max(np.abs(t.sum(axis=-1) - 1.0)))
    col_dev = float(np.max(np.abs(t.sum(axis=-2) - 1.0)))
    return SoftPermutation(t=t, max_row_dev=row_dev, max_col_dev=col_dev, iters=iters)


def sinkhorn_normalize(logits: np.ndarray, iters: int) -> SoftPermutation:
    """Normalize exp(logits) toward doubly stochastic; log-domain."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("sinkhorn_normalize: logits must be finite")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    out = ad.exp(sinkhorn_log_ad(ad.Tensor(logits), iters))
    return _diagnostics(out.data, iters)


def gumbel_sinkhorn(logits: np.ndarray, cfg: SinkhornConfig) -> SoftPermutation:
    """Noise-perturbed, temperature-scaled Sinkhorn; gamma=0 is exactly
    sinkhorn_normalize(logits / tau, iters)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("gumbel_sinkhorn: logits must be finite")
    out = gumbel_sinkhorn_ad(ad.Tensor(logits), cfg)
    return _diagnostics(out.data, cfg.iters)


def soft_objective_ad(d: ad.Tensor, t: ad.Tensor, v: ad.Tensor) -> ad.Tensor:
    """<D, T V T^T> as a graph node; batched inputs sum per-item values."""
    tv = ad.matmul(t, v)
    h = ad.matmul(tv, ad.transpose(t))
    return ad.trace_inner(d, h)


def soft_objective(d, t, v) -> float:
    """Relaxed tour cost <D, T V T^T>; equals the hard objective when T is
    an exact permutation matrix."""
    dm = d.d if hasattr(d, "d") else np.asarray(d, dtype=np.float64)
    tm = t.t if isinstance(t, SoftPermutation) else np.asarray(t, dtype=np.float64)
    vm = v.dense() if hasattr(v, "dense") else np.asarray(v, dtype=np.float64)
    if not (dm.shape == tm.shape == vm.shape):
        raise ValueError(f"size mismatch: D {dm.shape}, T {tm.shape}, V {vm.shape}")
    return float(np.sum(dm * (tm @ vm @ tm.T)))
