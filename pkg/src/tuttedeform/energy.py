"""Losses: strain energy, handle terms, layer regularization, fitting.

All integral-type losses are estimated as (weighted) means over their sample
sets rather than sums, so magnitudes do not scale with sample counts.  The
per-layer regularization is the one exception that needs no sampling at all:
a layer's Jacobian is constant per triangle, so its strain integral over the
square is the exact area-weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .deform import DeformationNet, PointSet, forward, jacobians
from .mesh2d import _readonly
from .prism import PrismLayer

# Distortion-adaptive reweighting: samples whose strain energy exceeds the
# first threshold count double, beyond the second they count five-fold.
DISTORTION_THRESHOLDS = (0.02, 0.05)
DISTORTION_MULTIPLIERS = (2.0, 5.0)


def strain_energy_density(J):
    """Deviation of the metric from identity: ``||J^T J - I||_F^2``.

    Accepts a single (d, d) matrix or a batch (..., d, d); zero exactly on
    rotations, symmetric in orientation, dimension-agnostic (2D and 3D).
    """
    J = np.asarray(J, dtype=np.float64)
    d = J.shape[-1]
    G = np.swapaxes(J, -1, -2) @ J - np.eye(d)
    return np.sum(G * G, axis=(-2, -1))


def distortion_multipliers(energies,
                           thresholds=DISTORTION_THRESHOLDS,
                           multipliers=DISTORTION_MULTIPLIERS):
    """Per-sample weight multiplier from measured strain energy."""
    e = np.asarray(energies)
    m = np.ones_like(e)
    m[e > thresholds[0]] = multipliers[0]
    m[e > thresholds[1]] = multipliers[1]
    return m


def elastic_loss(net: DeformationNet, samples: PointSet,
                 thresholds=DISTORTION_THRESHOLDS,
                 multipliers=DISTORTION_MULTIPLIERS) -> float:
    """Weighted mean strain energy of the composite map over samples.

    Samples must carry density weights.  The distortion-adaptive multiplier
    is recomputed from the current energies, upweighting samples that have
    already drifted from rigidity.
    """
    if samples.weights is None:
        raise ValueError("elastic loss needs density weights on its samples")
    e = strain_energy_density(jacobians(net, samples.points))
    m = distortion_multipliers(e, thresholds, multipliers)
    return float(np.mean(m * samples.weights * e))


@dataclass(frozen=True)
class HandleConstraint:
    """A region of points tied to a rigid motion ``p -> R p + t``."""

    points: PointSet
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or np.abs(R @ R.T - np.eye(3)).max() > 1e-8:
            raise ValueError("handle rotation must be a 3x3 rotation matrix")
        if t.shape != (3,):
            raise ValueError("handle translation must be a 3-vector")
        object.__setattr__(self, "rotation", _readonly(R))
        object.__setattr__(self, "translation", _readonly(t))

    @property
    def is_static(self) -> bool:
        return (np.array_equal(self.rotation, np.eye(3))
                and np.array_equal(self.translation, np.zeros(3)))

    def targets(self):
        return self.points.points @ self.rotation.T + self.translation


def handle_loss(net: DeformationNet, constraints: Sequence[HandleConstraint]) -> float:
    """Sum over constraints of the mean squared distance to each target."""
    total = 0.0
    for c in constraints:
        if len(c.points) == 0:
            continue
        d = forward(net, c.points.points) - c.targets()
        total += float(np.mean(np.sum(d * d, axis=1)))
    return total


def layer_regularization(layer: PrismLayer) -> float:
    """Exact strain integral of one layer's 2D map over the square.

    The map is affine per triangle, so the integral is the sum of rest
    triangle areas times per-triangle strain energy; no sampling error.
    """
    return float(np.sum(layer.plmap.mesh.areas
                        * strain_energy_density(layer.plmap.A)))


def net_regularization(net: DeformationNet) -> float:
    """Mean of the per-layer regularization, so depth does not rescale it."""
    return float(np.mean([layer_regularization(l) for l in net.layers]))


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objective, with the elastic schedule.

    The elastic weight starts at ``elastic`` and drops by
    ``elastic_decrement`` every ``elastic_interval`` steps until it reaches
    ``elastic_floor``.
    """

    handle: float = 1.0
    reg: float = 0.005
    elastic: float = 0.004
    elastic_decrement: float = 0.001
    elastic_interval: int = 600
    elastic_floor: float = 0.001
    thresholds: tuple = DISTORTION_THRESHOLDS
    multipliers: tuple = DISTORTION_MULTIPLIERS

    def elastic_at(self, step: int) -> float:
        if self.elastic_interval <= 0:
            return self.elastic
        value = self.elastic - self.elastic_decrement * (step // self.elastic_interval)
        return max(value, self.elastic_floor)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    elastic: float = 0.0
    handle: float = 0.0
    reg: float = 0.0
    elastic_weight: float = 0.0


def total_loss(net: DeformationNet,
               constraints: Sequence[HandleConstraint],
               samples: Optional[PointSet],
               weights: LossWeights,
               step: int = 0) -> LossBreakdown:
    """Scheduled combination of elastic, handle, and regularization terms."""
    w_el = weights.elastic_at(step)
    el = (elastic_loss(net, samples, weights.thresholds, weights.multipliers)
          if samples is not None and len(samples) else 0.0)
    ha = handle_loss(net, constraints) if constraints else 0.0
    rg = net_regularization(net)
    return LossBreakdown(
        total=w_el * el + weights.handle * ha + weights.reg * rg,
        elastic=el, handle=ha, reg=rg, elastic_weight=w_el)


def triangle_gradient_frames(vertices, triangles):
    """Per-triangle edge matrices and their pseudo-inverses for a 3D mesh.

    Returns ``(E, P)`` with ``E`` of shape (T, 3, 2) holding the two edge
    vectors and ``P = (E^T E)^-1 E^T`` of shape (T, 2, 3); degenerate rest
    triangles are rejected.
    """
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64)
    tv = v[t]
    E = np.stack([tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0]], axis=-1)
    G = np.swapaxes(E, -1, -2) @ E  # (T, 2, 2) Gram matrices
    det = G[:, 0, 0] * G[:, 1, 1] - G[:, 0, 1] * G[:, 1, 0]
    if np.any(det <= 0) or not np.all(np.isfinite(det)):
        raise ValueError("source mesh contains degenerate triangles")
    Ginv = np.empty_like(G)
    Ginv[:, 0, 0] = G[:, 1, 1] / det
    Ginv[:, 1, 1] = G[:, 0, 0] / det
    Ginv[:, 0, 1] = -G[:, 0, 1] / det
    Ginv[:, 1, 0] = -G[:, 1, 0] / det
    P = Ginv @ np.swapaxes(E, -1, -2)
    return E, P


def deformation_gradients(rest_vertices, triangles, deformed_vertices):
    """Per-triangle 3x3 deformation gradients, least squares in the
    triangle plane: ``F = E_deformed @ pinv(E_rest)``."""
    _, P = triangle_gradient_frames(rest_vertices, triangles)
    v = np.asarray(deformed_vertices, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64)
    tv = v[t]
    Ed = np.stack([tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0]], axis=-1)
    return Ed @ P


@dataclass(frozen=True)
class FittingLoss:
    vertex: float
    gradient: float
    total: float


def fitting_loss(net: DeformationNet, source: PointSet, triangles,
                 target_vertices, gradient_weight: float = 0.1) -> FittingLoss:
    """Vertex plus deformation-gradient matching against a target mesh.

    ``vertex`` is the mean squared distance between mapped and target
    vertices; ``gradient`` compares per-triangle deformation gradients of
    the mapped source against those of the target, both taken with the
    source mesh's own gradient operator.  ``triangles`` may be None for
    point clouds, dropping the gradient term.
    """
    target = np.asarray(target_vertices, dtype=np.float64)
    if target.shape != source.points.shape:
        raise ValueError(
            f"target vertices must match source shape {source.points.shape}, "
            f"got {target.shape}")
    mapped = forward(net, source.points)
    d = mapped - target
    vertex = float(np.mean(np.sum(d * d, axis=1)))
    gradient = 0.0
    if triangles is not None and len(triangles):
        F = deformation_gradients(source.points, triangles, mapped)
        F_target = deformation_gradients(source.points, triangles, target)
        gradient = float(np.mean(np.sum((F - F_target) ** 2, axis=(1, 2))))
    return FittingLoss(vertex=vertex, gradient=gradient,
                       total=vertex + gradient_weight * gradient)
