"""Inference-time solution generation and best-of selection.

A run produces, per instance, one tour per ensemble member and selects the
shortest.  Members come in a documented order -- the deterministic pass
first, then Monte Carlo dropout passes by index, then snapshots by epoch
-- and ties resolve toward the earliest member, so win-rate tables are
reproducible.  Mirroring the reference reporting convention, a size-k
dropout ensemble is the deterministic pass plus k-1 stochastic passes, so
the ensemble mean can never exceed the deterministic mean.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from .assignment import decode
from .features import instance_features
from .instances import DEFAULT_SCALE, EuclideanInstance, adjacency, distance_matrix
from .model import ModelConfig, ModelParams, build_operators, forward
from .permutation import Tour, tour_from_permutation
from .seeds import derive
from .sinkhorn import SinkhornConfig
from .training import Snapshot

WIN_TOLERANCE = 1e-12


@dataclass(frozen=True)
class EnsembleConfig:
    mode: str = "deterministic"  # deterministic | mc_dropout | snapshot | combined
    mc_passes: int = 10          # ensemble size in mc_dropout mode (incl. deterministic)
    snapshot_paths: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("deterministic", "mc_dropout", "snapshot", "combined"):
            raise ValueError(f"unknown ensemble mode {self.mode!r}")
        if self.mode in ("mc_dropout", "combined") and self.mc_passes < 1:
            raise ValueError("mc_passes must be >= 1")
        if self.mode in ("snapshot", "combined") and not self.snapshot_paths:
            raise ValueError(f"mode {self.mode!r} needs a nonempty snapshot list")


@dataclass(frozen=True)
class MemberRun:
    """One member's tour on one instance."""

    tag: str
    tour: Tour
    wall_time: float


@dataclass(frozen=True)
class InstanceRecord:
    instance_index: int
    members: tuple[MemberRun, ...]
    best: int  # index into members

    @property
    def best_tour(self) -> Tour:
        return self.members[self.best].tour


@dataclass(frozen=True)
class EnsembleSummary:
    member_tags: tuple[str, ...]
    member_mean_length: dict[str, float]
    member_wins_pct: dict[str, float]
    ensemble_mean_length: float


def _instance_logits(inst: EuclideanInstance, params: ModelParams, cfg: ModelConfig,
                     mode: str, seed: int, scale: float) -> np.ndarray:
    feats = instance_features(inst, cfg.feature_cfg)
    ops = build_operators(adjacency(distance_matrix(inst), scale), cfg.scattering_scales)
    return forward(feats, ops, params, cfg, mode, seed)


def _decode_cfg(cfg: ModelConfig) -> SinkhornConfig:
    sk = cfg.sinkhorn_cfg
    return SinkhornConfig(tau=sk.tau, gamma=0.0, iters=sk.iters, noise_seed=0)


def _decode_tour(logits: np.ndarray, cfg: ModelConfig, d: np.ndarray) -> Tour:
    return tour_from_permutation(decode(logits, _decode_cfg(cfg)), d)


def infer_deterministic(params: ModelParams, inst: EuclideanInstance, cfg: ModelConfig,
                        scale: float = DEFAULT_SCALE) -> Tour:
    """Single noise-free pass: features -> logits -> Hungarian -> tour."""
    d = distance_matrix(inst).d
    logits = _instance_logits(inst, params, cfg, "deterministic", 0, scale)
    return _decode_tour(logits, cfg, d)


def infer_mc(params: ModelParams, inst: EuclideanInstance, k: int, seed: int,
             cfg: ModelConfig, scale: float = DEFAULT_SCALE) -> list[Tour]:
    """k stochastic passes with live dropout; pass i is keyed (seed, i)."""
    if k < 1:
        raise ValueError(f"need k >= 1 passes, got {k}")
    d = distance_matrix(inst).d
    out = []
    for i in range(1, k + 1):
        logits = _instance_logits(inst, params, cfg, "mc_dropout", derive(seed, "mc", i), scale)
        out.append(_decode_tour(logits, cfg, d))
    return out


def infer_snapshot(snaps: Sequence[Snapshot], inst: EuclideanInstance, cfg: ModelConfig,
                   scale: float = DEFAULT_SCALE) -> list[Tour]:
    """One deterministic tour per snapshot; snapshots must share a config."""
    if not snaps:
        raise ValueError("need at least one snapshot")
    prints = {s.config_fingerprint for s in snaps}
    if len(prints) > 1:
        raise ValueError(f"snapshots from different configs: {sorted(prints)}")
    d = distance_matrix(inst).d
    return [
        _decode_tour(_instance_logits(inst, s.params, cfg, "deterministic", 0, scale), cfg, d)
        for s in snaps
    ]


def _member_plan(cfg: EnsembleConfig, params: ModelParams | None,
                 snapshots: Sequence[Snapshot]) -> list[tuple[str, ModelParams, str, int]]:
    """(tag, params, mode, forward_seed) per member, in tie-break order."""
    snaps = sorted(snapshots, key=lambda s: s.epoch)
    plan: list[tuple[str, ModelParams, str, int]] = []
    if cfg.mode in ("deterministic", "mc_dropout", "combined"):
        if params is None:
            raise ValueError(f"mode {cfg.mode!r} needs model parameters")
        plan.append(("deterministic", params, "deterministic", 0))
    if cfg.mode in ("mc_dropout", "combined"):
        for i in range(1, cfg.mc_passes):
            plan.append((f"mc-{i}", params, "mc_dropout", derive(cfg.seed, "mc", i)))
    if cfg.mode in ("snapshot", "combined"):
        for s in snaps:
            plan.append((f"snapshot-{s.epoch}", s.params, "deterministic", 0))
    return plan


def run_ensemble(instances: Sequence[EuclideanInstance], model_cfg: ModelConfig,
                 cfg: EnsembleConfig, params: ModelParams | None = None,
                 snapshots: Sequence[Snapshot] = (),
                 scale: float = DEFAULT_SCALE) -> tuple[list[InstanceRecord], EnsembleSummary]:
    """Evaluate all members on all instances (instance-major) and select."""
    plan = _member_plan(cfg, params, snapshots)
    per_instance: list[list[MemberRun]] = []
    for inst in instances:
        d = distance_matrix(inst).d
        runs = []
        for tag, member_params, mode, seed in plan:
            t0 = time.perf_counter()
            logits = _instance_logits(inst, member_params, model_cfg, mode, seed, scale)
            tour = _decode_tour(logits, model_cfg, d)
            runs.append(MemberRun(tag=tag, tour=tour, wall_time=time.perf_counter() - t0))
        per_instance.append(runs)
    return select_best(per_instance)


def select_best(per_instance_members: Sequence[Sequence[MemberRun]]
                ) -> tuple[list[InstanceRecord], EnsembleSummary]:
    """Per-instance argmin by tour length; ties go to the earliest member.

    Win tallies credit every member within WIN_TOLERANCE of the minimum,
    so the win columns can add up to more than 100% under exact ties.
    """
    if not per_instance_members or any(len(m) == 0 for m in per_instance_members):
        raise ValueError("every instance needs at least one member run")
    tags = [m.tag for m in per_instance_members[0]]
    records: list[InstanceRecord] = []
    wins = {tag: 0 for tag in tags}
    totals = {tag: 0.0 for tag in tags}
    best_total = 0.0
    for idx, runs in enumerate(per_instance_members):
        lengths = [r.tour.length for r in runs]
        best = int(np.argmin(lengths))  # first minimum = earliest member
        best_total += lengths[best]
        for r in runs:
            totals[r.tag] += r.tour.length
            if r.tour.length <= lengths[best] + WIN_TOLERANCE:
                wins[r.tag] += 1
        records.append(InstanceRecord(instance_index=idx, members=tuple(runs), best=best))
    m = len(per_instance_members)
    summary = EnsembleSummary(
        member_tags=tuple(tags),
        member_mean_length={tag: totals[tag] / m for tag in tags},
        member_wins_pct={tag: 100.0 * wins[tag] / m for tag in tags},
        ensemble_mean_length=best_total / m,
    )
    return records, summary


# ---------------------------------------------------------------------------
# Result export: JSON-lines per instance and a Tables-2/3-shaped CSV.
# ---------------------------------------------------------------------------

def write_records_jsonl(records: Sequence[InstanceRecord], fh: TextIO) -> None:
    for rec in records:
        fh.write(json.dumps({
            "instance": rec.instance_index,
            "members": [
                {"tag": r.tag, "order": r.tour.order.tolist(),
                 "length": r.tour.length, "wall_time": r.wall_time}
                for r in rec.members
            ],
            "best": rec.members[rec.best].tag,
        }) + "\n")


def write_summary_csv(summary: EnsembleSummary, fh: TextIO) -> None:
    fh.write("metric," + ",".join(summary.member_tags) + ",ensemble\n")
    fh.write("mean_length," + ",".join(
        f"{summary.member_mean_length[t]:.6f}" for t in summary.member_tags)
        + f",{summary.ensemble_mean_length:.6f}\n")
    fh.write("wins_pct," + ",".join(
        f"{summary.member_wins_pct[t]:.2f}" for t in summary.member_tags) + ",\n")
