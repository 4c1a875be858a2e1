"""Equivariant coordinate features: canonical frame + polar harmonics.

Coordinates are centered (translation removed), projected onto the
eigenbasis of their empirical covariance (rotation removed, up to the
documented sign rule), and encoded as radius, projections and M Fourier
harmonics of the intrinsic angle.  When the covariance is isotropic the
principal axes are undefined; the frame falls back to the standard basis
and the `degenerate` flag tells downstream consumers that rotation
invariance is not guaranteed for this instance.

The single-instance frame API runs the batched implementation on a
singleton batch; the two paths share the same formulas and are checked
against each other in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .instances import EuclideanInstance


@dataclass(frozen=True)
class FeatureConfig:
    harmonics: int = 8
    eps_radius: float = 1e-8
    degeneracy_tol: float = 1e-6

    def __post_init__(self) -> None:
        if self.harmonics < 1:
            raise ValueError(f"harmonics must be >= 1, got {self.harmonics}")
        if not self.eps_radius > 0.0:
            raise ValueError(f"eps_radius must be > 0, got {self.eps_radius}")

    @property
    def width(self) -> int:
        return 3 + 2 * self.harmonics


@dataclass(frozen=True)
class CanonicalFrame:
    """Deterministic orthonormal frame from the covariance eigenvectors.

    basis columns are [u_perp, u] with u the principal axis; the sign rule
    (u1 >= 0, and u2 >= 0 when u1 == 0) plus applying the same flip to
    u_perp makes the frame a function of the point set alone.
    """

    centroid: np.ndarray  # (2,)
    basis: np.ndarray     # (2, 2), columns [u_perp, u]
    eigvals: tuple[float, float]  # (lambda1, lambda2), lambda1 <= lambda2
    degenerate: bool

    @property
    def u(self) -> np.ndarray:
        return self.basis[:, 1]

    @property
    def u_perp(self) -> np.ndarray:
        return self.basis[:, 0]


@dataclass(frozen=True)
class NodeFeatures:
    """Per-node [r, a_x, a_y, sin(1..M * theta), cos(1..M * theta)]."""

    values: np.ndarray  # (n, 3 + 2M)
    harmonics: int

    @property
    def r(self) -> np.ndarray:
        return self.values[:, 0]

    @property
    def a_x(self) -> np.ndarray:
        return self.values[:, 1]

    @property
    def a_y(self) -> np.ndarray:
        return self.values[:, 2]

    @property
    def sin(self) -> np.ndarray:
        return self.values[:, 3:3 + self.harmonics]

    @property
    def cos(self) -> np.ndarray:
        return self.values[:, 3 + self.harmonics:]


def batch_frames(coords: np.ndarray, cfg: FeatureConfig):
    """Frames for a (B, n, 2) stack: returns (centroids (B,2), bases
    (B,2,2), eigvals (B,2), degenerate (B,))."""
    centroids = coords.mean(axis=1)
    centered = coords - centroids[:, None, :]
    n = coords.shape[1]
    sxx = np.einsum("bi,bi->b", centered[:, :, 0], centered[:, :, 0]) / n
    syy = np.einsum("bi,bi->b", centered[:, :, 1], centered[:, :, 1]) / n
    sxy = np.einsum("bi,bi->b", centered[:, :, 0], centered[:, :, 1]) / n

    half_tr = 0.5 * (sxx + syy)
    half_gap = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))
    lam2 = half_tr + half_gap
    lam1 = half_tr - half_gap

    # Principal eigenvector of [[sxx, sxy], [sxy, syy]]: two algebraically
    # equivalent forms; pick the better-conditioned one per instance.
    v1 = np.stack([lam2 - syy, sxy], axis=1)
    v2 = np.stack([sxy, lam2 - sxx], axis=1)
    n1 = np.linalg.norm(v1, axis=1)
    n2 = np.linalg.norm(v2, axis=1)
    u = np.where((n1 >= n2)[:, None], v1, v2)
    norm = np.linalg.norm(u, axis=1)

    degenerate = (lam2 - lam1) / np.maximum(lam2, cfg.eps_radius) < cfg.degeneracy_tol
    degenerate |= norm == 0.0

    safe = np.where(degenerate[:, None], 1.0, np.where(norm[:, None] == 0.0, 1.0, norm[:, None]))
    u = u / safe
    u[degenerate] = (1.0, 0.0)
    # sign rule: u1 >= 0; on the u1 == 0 boundary require u2 >= 0
    flip = (u[:, 0] < 0.0) | ((u[:, 0] == 0.0) & (u[:, 1] < 0.0))
    u[flip] *= -1.0
    u_perp = np.stack([-u[:, 1], u[:, 0]], axis=1)

    bases = np.stack([u_perp, u], axis=2)
    eigvals = np.stack([lam1, lam2], axis=1)
    return centroids, bases, eigvals, degenerate


def batch_node_features(coords: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Feature stack (B, n, 3 + 2M) for (B, n, 2) coordinates."""
    centroids, bases, _, _ = batch_frames(coords, cfg)
    centered = coords - centroids[:, None, :]
    u = bases[:, :, 1]
    u_perp = bases[:, :, 0]
    a_x = np.einsum("bnd,bd->bn", centered, u)
    a_y = np.einsum("bnd,bd->bn", centered, u_perp)
    r = np.sqrt(a_x * a_x + a_y * a_y + cfg.eps_radius)
    theta = np.arctan2(a_y, a_x)
    m = np.arange(1, cfg.harmonics + 1)
    angles = theta[:, :, None] * m[None, None, :]
    return np.concatenate(
        [r[:, :, None], a_x[:, :, None], a_y[:, :, None], np.sin(angles), np.cos(angles)],
        axis=2,
    )


def canonical_frame(inst: EuclideanInstance, cfg: FeatureConfig) -> CanonicalFrame:
    """Canonical frame of one instance (degeneracy is a flag, not an error)."""
    centroids, bases, eigvals, degenerate = batch_frames(inst.coords[None, :, :], cfg)
    return CanonicalFrame(
        centroid=centroids[0],
        basis=bases[0],
        eigvals=(float(eigvals[0, 0]), float(eigvals[0, 1])),
        degenerate=bool(degenerate[0]),
    )


def node_features(inst: EuclideanInstance, frame: CanonicalFrame, cfg: FeatureConfig) -> NodeFeatures:
    """Eq.-style per-node features in the given frame."""
    centered = inst.coords - frame.centroid[None, :]
    a_x = centered @ frame.u
    a_y = centered @ frame.u_perp
    r = np.sqrt(a_x * a_x + a_y * a_y + cfg.eps_radius)
    theta = np.arctan2(a_y, a_x)
    m = np.arange(1, cfg.harmonics + 1)
    angles = theta[:, None] * m[None, :]
    values = np.concatenate(
        [r[:, None], a_x[:, None], a_y[:, None], np.sin(angles), np.cos(angles)], axis=1
    )
    return NodeFeatures(values=values, harmonics=cfg.harmonics)


def instance_features(inst: EuclideanInstance, cfg: FeatureConfig) -> NodeFeatures:
    """Convenience: frame + features in one call."""
    return node_features(inst, canonical_frame(inst, cfg), cfg)
