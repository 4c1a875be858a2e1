"""Euclidean TSP instances and the derived distance/adjacency matrices.

Instances are n i.i.d. uniform points in the unit square.  Each instance
carries a 64-bit ``seed_tag`` that fully determines its coordinates, so
(n, seed_tag) regenerates the instance bit-identically and datasets are
prefix-stable: instance k of a generation run depends only on the root
seed and k, never on m or on generation order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence, TextIO

import numpy as np

from .seeds import derive, stream

DEFAULT_SCALE = 5.0

_FILE_MAGIC = b"PERMTOUR"
_FILE_VERSION = 1
_RECORD_HEADER = struct.Struct("<IQ")  # n: u32, seed_tag: u64


@dataclass(frozen=True)
class EuclideanInstance:
    """n city coordinates in [0, 1]^2 plus the tag that regenerates them."""

    coords: np.ndarray  # (n, 2) float64
    n: int
    seed_tag: int

    def __post_init__(self) -> None:
        if self.n < 3:
            raise ValueError(f"instance needs n >= 3 cities, got n={self.n}")
        if self.coords.shape != (self.n, 2):
            raise ValueError(f"coords shape {self.coords.shape} != ({self.n}, 2)")


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric Euclidean distance matrix with zero diagonal."""

    d: np.ndarray  # (n, n) float64

    @property
    def n(self) -> int:
        return self.d.shape[0]


@dataclass(frozen=True)
class AdjacencyMatrix:
    """Entrywise exp(-d / scale); unit diagonal, entries in (0, 1]."""

    a: np.ndarray  # (n, n) float64
    scale: float

    @property
    def n(self) -> int:
        return self.a.shape[0]


def _coords_from_tag(n: int, seed_tag: int) -> np.ndarray:
    return stream(seed_tag).uniform(0.0, 1.0, size=(n, 2))


def instance_from_tag(n: int, seed_tag: int) -> EuclideanInstance:
    """Regenerate the instance determined by (n, seed_tag)."""
    if n < 3:
        raise ValueError(f"instance needs n >= 3 cities, got n={n}")
    return EuclideanInstance(coords=_coords_from_tag(n, seed_tag), n=n, seed_tag=seed_tag)


def generate_uniform(n: int, m: int, seed: int) -> list[EuclideanInstance]:
    """Generate m uniform instances of size n, keyed by (seed, index)."""
    if n < 3:
        raise ValueError(f"instance needs n >= 3 cities, got n={n}")
    if m < 1:
        raise ValueError(f"need m >= 1 instances, got m={m}")
    return [instance_from_tag(n, derive(seed, "instance", k)) for k in range(m)]


def distance_matrix(inst: EuclideanInstance) -> DistanceMatrix:
    """All-pairs Euclidean distances of the instance coordinates."""
    d = batch_distance_matrix(inst.coords[None, :, :])[0]
    return DistanceMatrix(d=d)


def adjacency(d: DistanceMatrix, scale: float = DEFAULT_SCALE) -> AdjacencyMatrix:
    """Exponential affinity exp(-d / scale); scale must be positive."""
    if not scale > 0.0:
        raise ValueError(f"scale must be > 0, got {scale}")
    return AdjacencyMatrix(a=np.exp(-d.d / scale), scale=float(scale))


def batch_distance_matrix(coords: np.ndarray) -> np.ndarray:
    """Distance matrices for a (B, n, 2) stack of coordinate arrays."""
    diff = coords[:, :, None, :] - coords[:, None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    for k in range(d.shape[0]):
        np.fill_diagonal(d[k], 0.0)
    return d


def batch_adjacency(d: np.ndarray, scale: float = DEFAULT_SCALE) -> np.ndarray:
    """Adjacency stack for a (B, n, n) stack of distance matrices."""
    if not scale > 0.0:
        raise ValueError(f"scale must be > 0, got {scale}")
    return np.exp(-d / scale)


# ---------------------------------------------------------------------------
# Persistence: binary record file and JSON-lines interop export.
# ---------------------------------------------------------------------------

def write_instances(instances: Sequence[EuclideanInstance], fh: BinaryIO) -> None:
    """Binary format: magic, version, count, then per-record
    (u32 n, u64 seed_tag, n little-endian float64 pairs)."""
    fh.write(_FILE_MAGIC)
    fh.write(struct.pack("<IQ", _FILE_VERSION, len(instances)))
    for inst in instances:
        fh.write(_RECORD_HEADER.pack(inst.n, inst.seed_tag))
        fh.write(inst.coords.astype("<f8").tobytes())


def read_instances(fh: BinaryIO) -> list[EuclideanInstance]:
    magic = fh.read(len(_FILE_MAGIC))
    if magic != _FILE_MAGIC:
        raise ValueError(f"not a permtour instance file (magic {magic!r})")
    version, count = struct.unpack("<IQ", fh.read(12))
    if version != _FILE_VERSION:
        raise ValueError(f"unsupported instance file version {version}")
    out = []
    for _ in range(count):
        n, seed_tag = _RECORD_HEADER.unpack(fh.read(_RECORD_HEADER.size))
        coords = np.frombuffer(fh.read(16 * n), dtype="<f8").reshape(n, 2).copy()
        out.append(EuclideanInstance(coords=coords, n=n, seed_tag=seed_tag))
    return out


def write_instances_jsonl(instances: Iterable[EuclideanInstance], fh: TextIO) -> None:
    for inst in instances:
        fh.write(json.dumps({"n": inst.n, "coords": inst.coords.tolist()}) + "\n")


def read_instances_jsonl(fh: TextIO) -> list[EuclideanInstance]:
    out = []
    for line in fh:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        coords = np.asarray(rec["coords"], dtype=np.float64)
        out.append(EuclideanInstance(coords=coords, n=int(rec["n"]), seed_tag=int(rec.get("seed_tag", 0))))
    return out
