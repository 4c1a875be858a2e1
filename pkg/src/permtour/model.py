"""Scattering-attention GNN producing pairwise assignment logits.

Per layer, node states are diffused through a bank of fixed graph
operators (identity, symmetric graph convolution, and band-pass wavelets
built from dyadic powers of a lazy random walk), the channels are mixed by
a learned per-node softmax attention, and a feed-forward block with a
residual connection updates the state.  A bilinear head turns the final
node embeddings into an n x n score matrix, squashed to (-alpha, alpha).

Everything is built from shared weights and row-wise operations, so the
logits are permutation-equivariant in deterministic mode: relabeling the
nodes conjugates the output.  Dropout sits inside the attention weights
and the feed-forward activations; it is live in "train" and "mc_dropout"
modes and an identity in "deterministic" mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .features import FeatureConfig
from .instances import AdjacencyMatrix
from .seeds import derive, stream
from .sinkhorn import SinkhornConfig


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    hidden: int = 64
    scattering_scales: int = 3  # J; total channels C = J + 2
    alpha: float = 10.0
    dropout_p: float = 0.1
    feature_cfg: FeatureConfig = field(default_factory=FeatureConfig)
    sinkhorn_cfg: SinkhornConfig = field(default_factory=SinkhornConfig)

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")
        if self.scattering_scales < 1:
            raise ValueError(f"scattering_scales must be >= 1, got {self.scattering_scales}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not self.alpha > 0.0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")

    @property
    def channels(self) -> int:
        return self.scattering_scales + 2


@dataclass
class LayerParams:
    w_in: np.ndarray   # (h, h) input projection
    att: np.ndarray    # (2h, 1) channel-attention vector
    w_ff: np.ndarray   # (h, h) feed-forward weight
    w_out: np.ndarray  # (h, h) residual-branch projection


@dataclass
class ModelParams:
    embed: np.ndarray  # (feature_width, h) initial feature embedding
    layers: list[LayerParams]
    head: np.ndarray   # (h, h) bilinear output head

    def named(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed, "head": self.head}
        for i, lp in enumerate(self.layers):
            out[f"layer{i}.w_in"] = lp.w_in
            out[f"layer{i}.att"] = lp.att
            out[f"layer{i}.w_ff"] = lp.w_ff
            out[f"layer{i}.w_out"] = lp.w_out
        return out

    @staticmethod
    def from_named(named: dict[str, np.ndarray], n_layers: int) -> "ModelParams":
        layers = [
            LayerParams(
                w_in=named[f"layer{i}.w_in"],
                att=named[f"layer{i}.att"],
                w_ff=named[f"layer{i}.w_ff"],
                w_out=named[f"layer{i}.w_out"],
            )
            for i in range(n_layers)
        ]
        return ModelParams(embed=named["embed"], layers=layers, head=named["head"])


@dataclass(frozen=True)
class DiffusionOperators:
    """Ordered channel bank [I, sym-normalized conv, wavelets Psi_1..Psi_J]."""

    ops: list[np.ndarray]

    @property
    def channels(self) -> int:
        return len(self.ops)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Scaled-Gaussian init, one keyed stream per tensor name."""
    h = cfg.hidden
    width = cfg.feature_cfg.width

    def gauss(name: str, shape: tuple, fan_in: int) -> np.ndarray:
        return stream(seed, "init", name).normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    layers = [
        LayerParams(
            w_in=gauss(f"layer{i}.w_in", (h, h), h),
            att=gauss(f"layer{i}.att", (2 * h, 1), 2 * h),
            w_ff=gauss(f"layer{i}.w_ff", (h, h), h),
            w_out=gauss(f"layer{i}.w_out", (h, h), h),
        )
        for i in range(cfg.layers)
    ]
    return ModelParams(
        embed=gauss("embed", (width, h), width),
        layers=layers,
        head=gauss("head", (h, h), h),
    )


def batch_build_operators(a: np.ndarray, scales: int) -> list[np.ndarray]:
    """Channel bank for a (B, n, n) adjacency stack.

    Channel 0: identity.  Channel 1: Dw^{-1/2} W Dw^{-1/2}.  Channels
    2..J+1: wavelets Psi_j = P^{2^(j-1)} - P^(2^j) with the row-stochastic
    lazy walk P = (I + Dw^{-1} W) / 2, so each wavelet's rows sum to zero.
    """
    if scales < 1:
        raise ValueError(f"scales must be >= 1, got {scales}")
    b, n, _ = a.shape
    deg = a.sum(axis=-1)
    if np.any(deg <= 0.0):
        raise ValueError("adjacency has a non-positive row sum")
    eye = np.broadcast_to(np.eye(n), (b, n, n))

    inv_sqrt = 1.0 / np.sqrt(deg)
    conv = a * inv_sqrt[:, :, None] * inv_sqrt[:, None, :]

    walk = 0.5 * (eye + a / deg[:, :, None])
    ops = [np.ascontiguousarray(eye), conv]
    power = walk  # P^(2^0)
    for _ in range(scales):
        squared = power @ power
        ops.append(power - squared)
        power = squared
    return ops


def build_operators(a: AdjacencyMatrix, scales: int) -> DiffusionOperators:
    mats = batch_build_operators(a.a[None, :, :], scales)
    return DiffusionOperators(ops=[m[0] for m in mats])


class NonFiniteActivationError(FloatingPointError):
    def __init__(self, layer: int) -> None:
        super().__init__(f"non-finite activation at layer {layer}")
        self.layer = layer


def forward_ad(features: ad.Tensor, ops: Sequence[ad.Tensor], params: Sequence[ad.Tensor],
               cfg: ModelConfig, mode: str, seed: int) -> ad.Tensor:
    """Differentiable forward pass.

    `features` is (n, width) or (B, n, width); `ops` is the channel bank as
    constants; `params` are the tensors of ModelParams.named() in that
    order.  Returns logits of shape (n, n) or (B, n, n), every entry
    strictly inside (-alpha, alpha).
    """
    if mode not in ("train", "deterministic", "mc_dropout"):
        raise ValueError(f"unknown forward mode {mode!r}")
    if len(ops) != cfg.channels:
        raise ValueError(f"expected {cfg.channels} operator channels, got {len(ops)}")
    named = dict(zip(_param_order(cfg), params))
    h = cfg.hidden
    ones_row = ad.Tensor(np.ones((1, h)))

    state = ad.matmul(features, named["embed"])
    for layer in range(cfg.layers):
        proj = ad.matmul(state, named[f"layer{layer}.w_in"])
        channels = [proj] + [ad.matmul(op, proj) for op in ops[1:]]  # ops[0] is I
        scores = ad.concat(
            [ad.matmul(ad.concat([proj, ck], axis=-1), named[f"layer{layer}.att"]) for ck in channels],
            axis=-1,
        )
        att = ad.softmax(scores, axis=-1)
        att = ad.dropout(att, cfg.dropout_p, derive(seed, "dropout", layer, "att"), mode)
        mixed = None
        for k, ck in enumerate(channels):
            weight = ad.matmul(ad.narrow(att, -1, k, 1), ones_row)
            term = ad.hadamard(weight, ck)
            mixed = term if mixed is None else ad.add(mixed, term)
        ff = ad.tanh(ad.matmul(mixed, named[f"layer{layer}.w_ff"]))
        ff = ad.dropout(ff, cfg.dropout_p, derive(seed, "dropout", layer, "ff"), mode)
        state = ad.add(mixed, ad.matmul(ff, named[f"layer{layer}.w_out"]))
        if not np.all(np.isfinite(state.data)):
            raise NonFiniteActivationError(layer)

    raw = ad.matmul(ad.matmul(state, named["head"]), ad.transpose(state))
    return ad.scalar_mul(ad.tanh(raw), cfg.alpha)


def _param_order(cfg: ModelConfig) -> list[str]:
    names = ["embed", "head"]
    for i in range(cfg.layers):
        names += [f"layer{i}.w_in", f"layer{i}.att", f"layer{i}.w_ff", f"layer{i}.w_out"]
    return names


def param_tensors(params: ModelParams, cfg: ModelConfig,
                  requires_grad: bool = False) -> list[ad.Tensor]:
    """Wrap parameter arrays as tensors, in _param_order, sharing buffers."""
    named = params.named()
    return [ad.Tensor(named[name], requires_grad=requires_grad) for name in _param_order(cfg)]


def forward(features, ops: DiffusionOperators, params: ModelParams, cfg: ModelConfig,
            mode: str, seed: int) -> np.ndarray:
    """Inference-facing forward: NodeFeatures/array in, logits array out."""
    values = features.values if hasattr(features, "values") else np.asarray(features)
    feat_t = ad.Tensor(values)
    op_tensors = [ad.Tensor(op) for op in ops.ops]
    out = forward_ad(feat_t, op_tensors, param_tensors(params, cfg), cfg, mode, seed)
    return out.data
