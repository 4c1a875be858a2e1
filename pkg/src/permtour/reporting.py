"""Benchmark reports: per-method statistics plus the per-instance records
they were computed from.

Reports are self-contained: mean, standard deviation and gap are all
recomputable from the embedded per-instance lengths, and the test suite
checks that the recomputation is bit-identical.  Gap is measured against
the oracle method when present, else against an explicitly named
reference method.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

ORACLE_METHOD = "oracle"


@dataclass
class MethodStats:
    mean_length: float
    std_length: float
    gap_pct: float | None
    total_time_s: float
    per_instance_ms: float


@dataclass
class BenchmarkReport:
    metadata: dict
    reference: str | None                  # method gaps are measured against
    methods: dict[str, MethodStats]
    lengths: dict[str, list[float]]        # per-instance lengths, per method
    times: dict[str, float] = field(default_factory=dict)  # total seconds

    def to_json(self) -> str:
        return json.dumps({
            "metadata": self.metadata,
            "reference": self.reference,
            "methods": {
                name: {
                    "mean_length": s.mean_length,
                    "std_length": s.std_length,
                    "gap_pct": s.gap_pct,
                    "total_time_s": s.total_time_s,
                    "per_instance_ms": s.per_instance_ms,
                } for name, s in self.methods.items()
            },
            "per_instance": {
                "lengths": self.lengths,
            },
        }, indent=2)

    @staticmethod
    def from_json(text: str) -> "BenchmarkReport":
        raw = json.loads(text)
        methods = {
            name: MethodStats(
                mean_length=m["mean_length"], std_length=m["std_length"],
                gap_pct=m["gap_pct"], total_time_s=m["total_time_s"],
                per_instance_ms=m["per_instance_ms"],
            ) for name, m in raw["methods"].items()
        }
        lengths = {k: list(map(float, v)) for k, v in raw["per_instance"]["lengths"].items()}
        times = {name: m.total_time_s for name, m in methods.items()}
        return BenchmarkReport(metadata=raw["metadata"], reference=raw["reference"],
                               methods=methods, lengths=lengths, times=times)


def compute_stats(lengths: dict[str, list[float]], times: dict[str, float],
                  reference: str | None) -> dict[str, MethodStats]:
    """Summary statistics from per-instance records (the one true formula:
    gap% = 100 * (mean_method - mean_reference) / mean_reference)."""
    ref_mean = None
    if reference is not None and reference in lengths:
        ref_mean = float(np.mean(lengths[reference]))
    out: dict[str, MethodStats] = {}
    for name, vals in lengths.items():
        arr = np.asarray(vals)
        mean = float(np.mean(arr))
        gap = None
        if ref_mean is not None:
            gap = 100.0 * (mean - ref_mean) / ref_mean
        total = float(times.get(name, 0.0))
        out[name] = MethodStats(
            mean_length=mean,
            std_length=float(np.std(arr)),
            gap_pct=gap,
            total_time_s=total,
            per_instance_ms=1000.0 * total / max(1, arr.size),
        )
    return out


def build_report(lengths: dict[str, list[float]], times: dict[str, float],
                 metadata: dict, reference: str | None = None) -> BenchmarkReport:
    if reference is None and ORACLE_METHOD in lengths:
        reference = ORACLE_METHOD
    sizes = {len(v) for v in lengths.values()}
    if len(sizes) > 1:
        raise ValueError(f"methods cover different instance counts: {sorted(sizes)}")
    return BenchmarkReport(
        metadata=metadata,
        reference=reference,
        methods=compute_stats(lengths, times, reference),
        lengths={k: list(map(float, v)) for k, v in lengths.items()},
        times=dict(times),
    )


def recompute_summary(report: BenchmarkReport) -> dict[str, MethodStats]:
    """Regenerate the summary from embedded records (self-consistency)."""
    return compute_stats(report.lengths, report.times, report.reference)


def write_summary_csv(report: BenchmarkReport, fh: TextIO) -> None:
    fh.write("method,mean_length,std_length,gap_pct,total_time_s,per_instance_ms\n")
    for name, s in report.methods.items():
        gap = "" if s.gap_pct is None else f"{s.gap_pct:.4f}"
        fh.write(f"{name},{s.mean_length:.6f},{s.std_length:.6f},{gap},"
                 f"{s.total_time_s:.4f},{s.per_instance_ms:.4f}\n")


def write_summary_markdown(report: BenchmarkReport, fh: TextIO) -> None:
    fh.write("| Method | Length | Gap | Time/instance |\n")
    fh.write("|---|---|---|---|\n")
    for name, s in report.methods.items():
        gap = "-" if s.gap_pct is None else f"{s.gap_pct:.2f}%"
        fh.write(f"| {name} | {s.mean_length:.4f} | {gap} | {s.per_instance_ms:.3f}ms |\n")


def histogram_bins(values: Sequence[float], bins: int = 50) -> list[tuple[float, int]]:
    """Fixed-width bins over [min, max]; returns (bin_left, count) rows."""
    arr = np.asarray(values, dtype=np.float64)
    counts, edges = np.histogram(arr, bins=bins, range=(float(arr.min()), float(arr.max())))
    return [(float(edges[i]), int(counts[i])) for i in range(len(counts))]


def write_histogram_csv(values: Sequence[float], fh: TextIO, bins: int = 50) -> None:
    fh.write("bin_left,count\n")
    for left, count in histogram_bins(values, bins):
        fh.write(f"{left:.6f},{count}\n")
