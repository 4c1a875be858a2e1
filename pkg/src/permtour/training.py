"""Unsupervised training loop and checkpoint persistence.

Minimizes the relaxed tour cost <D, T V T^T> with decoupled-weight-decay
Adam, linear warmup followed by cosine decay, and adaptive gradient
clipping (global norm clipped to a multiple of its own EMA).  Validation
runs in deterministic mode with a Hungarian decode, so validation numbers
are decode-exact.

Every random quantity (dataset, shuffles, Gumbel noise, dropout masks) is
a pure function of (seed, epoch, step), never of RNG call order.  Resuming
from a snapshot therefore replays the exact computation an uninterrupted
run would have done, provided the snapshot restores parameters, Adam
moments, the step counter and the clip EMA -- which the snapshot format
stores bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from . import autodiff as ad
from .assignment import decode
from .features import batch_node_features
from .instances import (DEFAULT_SCALE, EuclideanInstance, batch_adjacency,
                        batch_distance_matrix)
from .model import (ModelConfig, ModelParams, batch_build_operators, forward_ad,
                    init_params, param_tensors)
from .permutation import cyclic_shift, tour_from_permutation
from .seeds import derive, stream
from .sinkhorn import SinkhornConfig, sinkhorn_log_ad, soft_objective_ad

_CKPT_MAGIC = b"PTCKPT\x00\x01"
_CKPT_VERSION = 1


class TrainingDivergenceError(RuntimeError):
    pass


class SnapshotChecksumError(ValueError):
    pass


class SnapshotVersionError(ValueError):
    pass


class FingerprintMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n: int = 20
    dataset_size: int = 100_000
    batch_size: int = 128
    epochs_max: int = 60
    lr: float = 2e-3
    weight_decay: float = 2.5e-5
    warmup_epochs: int = 15
    patience: int = 100
    checkpoint_every: int = 5
    seed: int = 0
    gamma: float = 1.0          # training-time Gumbel noise magnitude
    val_size: int = 1000
    clip_multiple: float = 2.0  # clip threshold = multiple * EMA(grad norm)
    clip_ema_beta: float = 0.95
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    scale: float = DEFAULT_SCALE

    def __post_init__(self) -> None:
        for name in ("n", "dataset_size", "batch_size", "epochs_max",
                     "warmup_epochs", "patience", "checkpoint_every", "val_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.lr > 0.0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.n < 3:
            raise ValueError(f"n must be >= 3, got {self.n}")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    clip_ema: float  # nan until the first step sets it


@dataclass
class Snapshot:
    epoch: int
    params: ModelParams
    optimizer_state: OptimizerState
    validation_mean_length: float
    config_fingerprint: str


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    train_loss: float
    val_mean_length: float
    lr: float


@dataclass
class TrainingHistory:
    rows: list[HistoryRow] = field(default_factory=list)

    def write_csv(self, fh: TextIO) -> None:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_mean_length", "lr"])
        for r in self.rows:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_mean_length), repr(r.lr)])

    @staticmethod
    def read_csv(fh: TextIO) -> "TrainingHistory":
        rows = []
        for rec in csv.DictReader(fh):
            rows.append(HistoryRow(int(rec["epoch"]), float(rec["train_loss"]),
                                   float(rec["val_mean_length"]), float(rec["lr"])))
        return TrainingHistory(rows=rows)


@dataclass
class TrainResult:
    snapshots: list[Snapshot]
    history: TrainingHistory
    best_epoch: int


def config_fingerprint(cfg: ModelConfig) -> str:
    """Hash of everything that shapes parameters or inference semantics."""
    payload = {
        "layers": cfg.layers,
        "hidden": cfg.hidden,
        "scattering_scales": cfg.scattering_scales,
        "alpha": cfg.alpha,
        "dropout_p": cfg.dropout_p,
        "feature": [cfg.feature_cfg.harmonics, cfg.feature_cfg.eps_radius,
                    cfg.feature_cfg.degeneracy_tol],
        "sinkhorn": [cfg.sinkhorn_cfg.tau, cfg.sinkhorn_cfg.gamma, cfg.sinkhorn_cfg.iters],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Linear warmup to cfg.lr over warmup_epochs, then cosine decay."""
    if epoch <= cfg.warmup_epochs:
        return cfg.lr * epoch / cfg.warmup_epochs
    span = max(1, cfg.epochs_max - cfg.warmup_epochs)
    progress = (epoch - cfg.warmup_epochs) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def training_coords(cfg: TrainConfig) -> np.ndarray:
    """Default training set: dataset_size instances keyed (seed, index)."""
    coords = np.empty((cfg.dataset_size, cfg.n, 2))
    for k in range(cfg.dataset_size):
        coords[k] = stream(derive(cfg.seed, "train", k)).uniform(0.0, 1.0, size=(cfg.n, 2))
    return coords


def validation_coords(cfg: TrainConfig) -> np.ndarray:
    coords = np.empty((cfg.val_size, cfg.n, 2))
    for k in range(cfg.val_size):
        coords[k] = stream(derive(cfg.seed, "val", k)).uniform(0.0, 1.0, size=(cfg.n, 2))
    return coords


def _batch_gumbel(shape: tuple, seed: int) -> np.ndarray:
    guard = 2.0 ** -53
    u = np.clip(stream(seed, "gumbel").random(shape), guard, 1.0 - guard)
    return -np.log(-np.log(u))


def batch_loss(coords: np.ndarray, params: Sequence[ad.Tensor], model_cfg: ModelConfig,
               mode: str, dropout_seed: int, gamma: float, noise_seed: int,
               scale: float = DEFAULT_SCALE) -> ad.Tensor:
    """Mean relaxed tour cost of a coordinate batch, as a graph node."""
    b, n, _ = coords.shape
    d = batch_distance_matrix(coords)
    a = batch_adjacency(d, scale)
    feats = batch_node_features(coords, model_cfg.feature_cfg)
    op_tensors = [ad.Tensor(op) for op in batch_build_operators(a, model_cfg.scattering_scales)]

    logits = forward_ad(ad.Tensor(feats), op_tensors, params, model_cfg, mode, dropout_seed)
    x = logits
    if gamma > 0.0:
        x = ad.add(x, ad.Tensor(gamma * _batch_gumbel((b, n, n), noise_seed)))
    x = ad.scalar_mul(x, 1.0 / model_cfg.sinkhorn_cfg.tau)
    t = ad.exp(sinkhorn_log_ad(x, model_cfg.sinkhorn_cfg.iters))
    v = ad.Tensor(cyclic_shift(n).dense())
    return ad.scalar_mul(soft_objective_ad(ad.Tensor(d), t, v), 1.0 / b)


def batch_logits(coords: np.ndarray, params: ModelParams, model_cfg: ModelConfig,
                 mode: str, seed: int, scale: float = DEFAULT_SCALE) -> np.ndarray:
    """Plain logits (B, n, n) for an inference batch."""
    d = batch_distance_matrix(coords)
    a = batch_adjacency(d, scale)
    feats = batch_node_features(coords, model_cfg.feature_cfg)
    ops = [ad.Tensor(op) for op in batch_build_operators(a, model_cfg.scattering_scales)]
    out = forward_ad(ad.Tensor(feats), ops, param_tensors(params, model_cfg), model_cfg, mode, seed)
    return out.data


def validate(coords: np.ndarray, params: ModelParams, model_cfg: ModelConfig,
             batch_size: int = 256, scale: float = DEFAULT_SCALE) -> float:
    """Mean decoded tour length, deterministic mode, Hungarian decode."""
    decode_cfg = _decode_cfg(model_cfg)
    total = 0.0
    for lo in range(0, coords.shape[0], batch_size):
        chunk = coords[lo:lo + batch_size]
        logits = batch_logits(chunk, params, model_cfg, "deterministic", 0, scale)
        d = batch_distance_matrix(chunk)
        for i in range(chunk.shape[0]):
            perm = decode(logits[i], decode_cfg)
            total += tour_from_permutation(perm, d[i]).length
    return total / coords.shape[0]


def _decode_cfg(model_cfg: ModelConfig) -> SinkhornConfig:
    sk = model_cfg.sinkhorn_cfg
    return SinkhornConfig(tau=sk.tau, gamma=0.0, iters=sk.iters, noise_seed=0)


def _zeros_like_params(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.named().items()}


def _clone_params(params: ModelParams, n_layers: int) -> ModelParams:
    return ModelParams.from_named({k: v.copy() for k, v in params.named().items()}, n_layers)


def _clone_opt(state: OptimizerState) -> OptimizerState:
    return OptimizerState(
        m={k: v.copy() for k, v in state.m.items()},
        v={k: v.copy() for k, v in state.v.items()},
        step=state.step,
        clip_ema=state.clip_ema,
    )


def train(model_cfg: ModelConfig, train_cfg: TrainConfig,
          data: Sequence[EuclideanInstance] | np.ndarray | None = None,
          out_dir: str | None = None,
          resume_from: Snapshot | None = None,
          log: bool = False) -> TrainResult:
    """Run the training loop; returns snapshots (periodic + best) & history.

    `data` may be a coordinate array (m, n, 2), a list of instances, or
    None to generate the default keyed dataset.  With `out_dir`, snapshots
    and the history CSV are written as training progresses.
    """
    fingerprint = config_fingerprint(model_cfg)
    if data is None:
        coords = training_coords(train_cfg)
    elif isinstance(data, np.ndarray):
        coords = data
    else:
        coords = np.stack([inst.coords for inst in data])
    if coords.shape[1] != train_cfg.n:
        raise ValueError(f"data has n={coords.shape[1]}, config expects n={train_cfg.n}")
    dataset_size = coords.shape[0]
    batch = min(train_cfg.batch_size, dataset_size)
    steps_per_epoch = max(1, dataset_size // batch)

    if resume_from is not None:
        if resume_from.config_fingerprint != fingerprint:
            raise FingerprintMismatchError(
                f"snapshot fingerprint {resume_from.config_fingerprint} != "
                f"current config {fingerprint}")
        params = _clone_params(resume_from.params, model_cfg.layers)
        opt = _clone_opt(resume_from.optimizer_state)
        start_epoch = resume_from.epoch + 1
        best_val = resume_from.validation_mean_length
    else:
        params = init_params(model_cfg, derive(train_cfg.seed, "init"))
        opt = OptimizerState(m=_zeros_like_params(params), v=_zeros_like_params(params),
                             step=0, clip_ema=float("nan"))
        start_epoch = 1
        best_val = float("inf")

    ptensors = param_tensors(params, model_cfg, requires_grad=True)
    tensor_by_name = dict(zip(_ordered_names(model_cfg), ptensors))

    val_coords = validation_coords(train_cfg)
    history = TrainingHistory()
    snapshots: list[Snapshot] = []
    best_epoch = resume_from.epoch if resume_from is not None else 0
    epochs_since_improve = 0

    for epoch in range(start_epoch, train_cfg.epochs_max + 1):
        lr = learning_rate(train_cfg, epoch)
        order = stream(derive(train_cfg.seed, "shuffle", epoch)).permutation(dataset_size)
        epoch_loss = 0.0
        t0 = time.perf_counter()
        for step in range(steps_per_epoch):
            idx = order[step * batch:(step + 1) * batch]
            noise_seed = derive(train_cfg.seed, "noise", epoch, step)
            loss = batch_loss(coords[idx], ptensors, model_cfg, "train",
                              dropout_seed=derive(train_cfg.seed, "mask", epoch, step),
                              gamma=train_cfg.gamma, noise_seed=noise_seed,
                              scale=train_cfg.scale)
            if not np.isfinite(loss.data):
                raise TrainingDivergenceError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(batch noise seed {noise_seed})")
            epoch_loss += float(loss.data)
            for t in ptensors:
                t.zero_grad()
            loss.backward()
            _adamw_step(tensor_by_name, opt, train_cfg, lr)
        epoch_loss /= steps_per_epoch

        val_mean = validate(val_coords, params, model_cfg, scale=train_cfg.scale)
        history.rows.append(HistoryRow(epoch, epoch_loss, val_mean, lr))
        if log:
            dt = time.perf_counter() - t0
            print(f"epoch {epoch:4d}  loss {epoch_loss:.4f}  val {val_mean:.4f}  "
                  f"lr {lr:.2e}  ({dt:.1f}s)", flush=True)
        if out_dir:
            with open(os.path.join(out_dir, "history.csv"), "w", newline="") as fh:
                history.write_csv(fh)

        improved = val_mean < best_val
        if improved:
            best_val = val_mean
            best_epoch = epoch
            epochs_since_improve = 0
        else:
            epochs_since_improve += 1

        if epoch % train_cfg.checkpoint_every == 0 or improved or epoch == train_cfg.epochs_max:
            snap = Snapshot(epoch=epoch, params=_clone_params(params, model_cfg.layers),
                            optimizer_state=_clone_opt(opt),
                            validation_mean_length=val_mean,
                            config_fingerprint=fingerprint)
            snapshots.append(snap)
            if out_dir:
                save_snapshot(snap, os.path.join(out_dir, f"snapshot_epoch{epoch:04d}.ckpt"))
                if improved:
                    save_snapshot(snap, os.path.join(out_dir, "snapshot_best.ckpt"))

        if epochs_since_improve >= train_cfg.patience:
            break

    return TrainResult(snapshots=snapshots, history=history, best_epoch=best_epoch)


def _ordered_names(cfg: ModelConfig) -> list[str]:
    from .model import _param_order
    return _param_order(cfg)


def _adamw_step(tensors: dict[str, ad.Tensor], opt: OptimizerState,
                cfg: TrainConfig, lr: float) -> None:
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for name, t in tensors.items()}
    gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if math.isnan(opt.clip_ema):
        opt.clip_ema = gnorm
    threshold = cfg.clip_multiple * opt.clip_ema
    coef = 1.0 if gnorm <= threshold or gnorm == 0.0 else threshold / gnorm
    opt.clip_ema = cfg.clip_ema_beta * opt.clip_ema + (1.0 - cfg.clip_ema_beta) * gnorm * coef

    opt.step += 1
    bc1 = 1.0 - cfg.adam_beta1 ** opt.step
    bc2 = 1.0 - cfg.adam_beta2 ** opt.step
    for name, t in tensors.items():
        g = grads[name] * coef
        m = opt.m[name]
        v = opt.v[name]
        m *= cfg.adam_beta1
        m += (1.0 - cfg.adam_beta1) * g
        v *= cfg.adam_beta2
        v += (1.0 - cfg.adam_beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        t.data -= lr * update + lr * cfg.weight_decay * t.data


# ---------------------------------------------------------------------------
# Snapshot persistence: self-describing binary with trailing checksum.
# ---------------------------------------------------------------------------

def save_snapshot(snap: Snapshot, path: str) -> None:
    """Layout: magic, u64 header length, JSON header (epoch, fingerprint,
    scalars, tensor table), float64 payloads in table order, sha256."""
    named = snap.params.named()
    tensors: list[tuple[str, np.ndarray]] = []
    for name, arr in named.items():
        tensors.append((f"param.{name}", arr))
    for name, arr in snap.optimizer_state.m.items():
        tensors.append((f"adam_m.{name}", arr))
    for name, arr in snap.optimizer_state.v.items():
        tensors.append((f"adam_v.{name}", arr))

    header = {
        "version": _CKPT_VERSION,
        "epoch": snap.epoch,
        "validation_mean_length": snap.validation_mean_length,
        "fingerprint": snap.config_fingerprint,
        "layers": len(snap.params.layers),
        "scalars": {"step": snap.optimizer_state.step,
                    "clip_ema": snap.optimizer_state.clip_ema},
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    body = _CKPT_MAGIC + struct.pack("<Q", len(blob)) + blob
    body += b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in tensors)
    digest = hashlib.sha256(body).digest()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(digest)
    os.replace(tmp, path)


def load_snapshot(path: str, model_cfg: ModelConfig | None = None) -> Snapshot:
    """Verify checksum/version (and fingerprint when a config is given),
    then rebuild the snapshot bit-exactly."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_CKPT_MAGIC) + 8 + 32:
        raise SnapshotChecksumError(f"{path}: truncated snapshot file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise SnapshotChecksumError(f"{path}: checksum mismatch")
    if body[:len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise SnapshotVersionError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<Q", body[len(_CKPT_MAGIC):len(_CKPT_MAGIC) + 8])
    header_start = len(_CKPT_MAGIC) + 8
    header = json.loads(body[header_start:header_start + hlen])
    if header["version"] != _CKPT_VERSION:
        raise SnapshotVersionError(f"{path}: unsupported version {header['version']}")
    if model_cfg is not None:
        expect = config_fingerprint(model_cfg)
        if header["fingerprint"] != expect:
            raise FingerprintMismatchError(
                f"{path}: snapshot fingerprint {header['fingerprint']} != "
                f"current config {expect}")

    offset = header_start + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        arrays[entry["name"]] = arr
        offset += 8 * count
    if offset != len(body):
        raise SnapshotChecksumError(f"{path}: payload size mismatch")

    n_layers = header["layers"]
    params = ModelParams.from_named(
        {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}, n_layers)
    opt = OptimizerState(
        m={k[len("adam_m."):]: v for k, v in arrays.items() if k.startswith("adam_m.")},
        v={k[len("adam_v."):]: v for k, v in arrays.items() if k.startswith("adam_v.")},
        step=int(header["scalars"]["step"]),
        clip_ema=float(header["scalars"]["clip_ema"]),
    )
    return Snapshot(epoch=int(header["epoch"]), params=params, optimizer_state=opt,
                    validation_mean_length=float(header["validation_mean_length"]),
                    config_fingerprint=header["fingerprint"])
