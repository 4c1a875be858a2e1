"""Permutation and Hamiltonian-cycle algebra.

A tour on n cities is encoded as the conjugation P V P^T of the cyclic
shift matrix V (the canonical cycle 0 -> 1 -> ... -> n-1 -> 0, zero-based)
by a permutation matrix P.  Conjugation by any permutation yields a single
n-cycle, which is what makes the soft relaxation downstream legitimate:
every hard permutation decodes to a feasible tour.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np


class CycleStructureError(ValueError):
    """A 0/1 matrix passed as a Hamiltonian cycle is a union of sub-cycles."""


@dataclass(frozen=True)
class Permutation:
    """Bijection on {0..n-1}; map[i] is the image of i."""

    map: np.ndarray  # (n,) int64

    def __post_init__(self) -> None:
        m = np.asarray(self.map)
        n = m.shape[0]
        if sorted(m.tolist()) != list(range(n)):
            raise ValueError("permutation map is not a bijection on {0..n-1}")

    @property
    def n(self) -> int:
        return self.map.shape[0]

    def matrix(self) -> np.ndarray:
        """Dense 0/1 matrix view: P[i, map[i]] = 1."""
        p = np.zeros((self.n, self.n))
        p[np.arange(self.n), self.map] = 1.0
        return p

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.map)
        inv[self.map] = np.arange(self.n)
        return Permutation(map=inv)


@dataclass(frozen=True)
class CyclicShiftMatrix:
    """The canonical-cycle prior: row i has its single 1 at column (i+1) mod n."""

    n: int

    def __post_init__(self) -> None:
        if self.n < 3:
            raise ValueError(f"cyclic shift needs n >= 3, got {self.n}")

    def dense(self) -> np.ndarray:
        v = np.zeros((self.n, self.n))
        v[np.arange(self.n), (np.arange(self.n) + 1) % self.n] = 1.0
        return v


@dataclass(frozen=True)
class HamiltonianCycleMatrix:
    """0/1 successor relation forming one directed n-cycle."""

    h: np.ndarray  # (n, n)

    @property
    def n(self) -> int:
        return self.h.shape[0]


@dataclass(frozen=True)
class Tour:
    """Cyclic visiting order, anchored at node 0; length is cached (nan if
    no distance matrix was supplied when the tour was built)."""

    order: np.ndarray  # (n,) int64
    length: float = field(default=float("nan"))

    def __post_init__(self) -> None:
        o = np.asarray(self.order)
        if sorted(o.tolist()) != list(range(o.shape[0])):
            raise ValueError("tour order is not a bijection on {0..n-1}")

    @property
    def n(self) -> int:
        return self.order.shape[0]


def canonical_order(order: Sequence[int] | np.ndarray) -> np.ndarray:
    """Rotate a visiting order so it starts at node 0; direction is kept."""
    order = np.asarray(order, dtype=np.int64)
    start = int(np.argmin(order))
    return np.roll(order, -start)


def cyclic_shift(n: int) -> CyclicShiftMatrix:
    return CyclicShiftMatrix(n=n)


def conjugate(p: Permutation, v: CyclicShiftMatrix) -> HamiltonianCycleMatrix:
    """H = P V P^T.  Equivalent index form: H[a, b] = 1 iff
    map[b] == (map[a] + 1) mod n, i.e. b succeeds a on the tour."""
    if p.n != v.n:
        raise ValueError(f"size mismatch: permutation n={p.n}, shift n={v.n}")
    n = p.n
    inv = p.inverse().map
    succ = inv[(p.map + 1) % n]
    h = np.zeros((n, n))
    h[np.arange(n), succ] = 1.0
    return HamiltonianCycleMatrix(h=h)


def tour_from_permutation(p: Permutation, d: np.ndarray | None = None) -> Tour:
    """Tour visiting inv_map[0], inv_map[1], ...; same cycle as
    tour_from_cycle_matrix(conjugate(p, V)) without materializing H."""
    order = canonical_order(p.inverse().map)
    length = float("nan") if d is None else _order_length(d, order)
    return Tour(order=order, length=length)


def tour_from_cycle_matrix(h: HamiltonianCycleMatrix, d: np.ndarray | None = None) -> Tour:
    """Follow successors from node 0; rejects matrices whose successor
    relation closes early (union of sub-cycles)."""
    mat = h.h
    n = h.n
    succ = np.argmax(mat, axis=1)
    if not np.array_equal(np.sort(succ), np.arange(n)):
        raise CycleStructureError("matrix rows/columns do not define a bijective successor map")
    order = np.empty(n, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    node = 0
    for k in range(n):
        if seen[node]:
            raise CycleStructureError(
                f"successor walk revisits node {node} after {k} steps: not a single n-cycle"
            )
        order[k] = node
        seen[node] = True
        node = int(succ[node])
    if node != 0:
        raise CycleStructureError(f"successor walk ends at node {node}, not back at 0")
    length = float("nan") if d is None else _order_length(d, order)
    return Tour(order=canonical_order(order), length=length)


def _order_length(d: np.ndarray, order: np.ndarray) -> float:
    return float(np.sum(d[order, np.roll(order, -1)]))


def tour_length(d: "np.ndarray | object", t: Tour) -> float:
    """Sum of cyclic consecutive distances along the tour."""
    dm = d.d if hasattr(d, "d") else np.asarray(d)
    if dm.shape[0] != t.n:
        raise ValueError(f"size mismatch: distance n={dm.shape[0]}, tour n={t.n}")
    return _order_length(dm, t.order)


def tsp_objective(d: "np.ndarray | object", p: Permutation) -> float:
    """<D, P V P^T> = trace(D^T P V P^T), evaluated literally via the
    matrix product so the trace identity is testable against edge sums."""
    dm = d.d if hasattr(d, "d") else np.asarray(d)
    if dm.shape[0] != p.n:
        raise ValueError(f"size mismatch: distance n={dm.shape[0]}, permutation n={p.n}")
    pm = p.matrix()
    h = pm @ cyclic_shift(p.n).dense() @ pm.T
    return float(np.sum(dm * h))


# ---------------------------------------------------------------------------
# Tour export formats.
# ---------------------------------------------------------------------------

def write_tours_jsonl(tours: Sequence[Tour], fh: TextIO) -> None:
    for t in tours:
        fh.write(json.dumps({"order": t.order.tolist(), "length": t.length}) + "\n")


def read_tours_jsonl(fh: TextIO) -> list[Tour]:
    out = []
    for line in fh:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        out.append(Tour(order=np.asarray(rec["order"], dtype=np.int64), length=float(rec["length"])))
    return out


def write_tours_text(tours: Sequence[Tour], fh: TextIO) -> None:
    """Plain-text cycle format: one tour per line, space-separated indices."""
    for t in tours:
        fh.write(" ".join(str(int(i)) for i in t.order) + "\n")
