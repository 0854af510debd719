"""Prismatic 3D layers: a 2D mesh deformation extruded along a rotated axis.

A layer deforms 3D space by rotating into a local frame, applying the 2D
piecewise-linear map to the local xy coordinates while the local z passes
through unchanged, and rotating back:

    layer(p) = R @ lift(R^T @ p),   lift(x, y, z) = (plmap(x, y), z)

Because the 2D map is injective on the square and z is preserved, each layer
is injective on its slab domain.  Its Jacobian at p is the constant matrix
``R @ lifted(A_t) @ R^T`` of the prism cell containing p, with singular
value exactly 1 along the frame's extrusion axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mesh2d
from .errors import NotInImageError, OutOfDomainError
from .mesh2d import PLMap2D, _readonly


@dataclass(frozen=True)
class Frame:
    """A proper rotation fixing a layer's extrusion axis (local z)."""

    rotation: np.ndarray  # (3, 3)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError(f"frame rotation must be 3x3, got {R.shape}")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-10 or np.linalg.det(R) < 0.0:
            raise ValueError("frame rotation must be a proper rotation (R R^T = I, det +1)")
        object.__setattr__(self, "rotation", _readonly(R))

    @property
    def axis(self):
        """The extrusion axis in world coordinates (local z)."""
        return self.rotation[:, 2]


def frame_from_axis_angle(axis, angle_rad: float) -> Frame:
    """Rotation about ``axis`` by ``angle_rad`` (Rodrigues), as a Frame."""
    a = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(a)
    if not np.isfinite(norm) or norm == 0.0:
        raise ValueError("rotation axis must be a nonzero finite vector")
    a = a / norm
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    R = np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)
    return Frame(rotation=R)


# Proper rotations whose local z-axis is the world x, y, z axis respectively.
_TRIPLANE = (
    np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
    np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]),
    np.eye(3),
)


def triplane_frames(count: int):
    """``count`` frames cycling the world x, y, z axes as extrusion axis."""
    if count < 1:
        raise ValueError(f"frame count must be >= 1, got {count}")
    return [Frame(rotation=_TRIPLANE[i % 3].copy()) for i in range(count)]


@dataclass(frozen=True)
class PrismLayer:
    """One injective 3D layer: a frame plus a realized 2D map."""

    frame: Frame
    plmap: PLMap2D
    layer_index: int = 0


def map_points(layer: PrismLayer, points):
    """Apply the layer to an (N, 3) batch of world-space points."""
    P = np.asarray(points, dtype=np.float64)
    local = P @ layer.frame.rotation  # row-wise R^T p
    try:
        xy = mesh2d.map_points(layer.plmap, local[:, :2], layer_index=layer.layer_index)
    except OutOfDomainError as exc:
        exc.layer_index = layer.layer_index
        raise
    out = np.column_stack([xy, local[:, 2]])
    return out @ layer.frame.rotation.T


def apply_prism(layer: PrismLayer, p):
    """Image of a single 3D point under the layer."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {p.shape}")
    return map_points(layer, p.reshape(1, 3))[0]


def _lift(mats):
    """Embed (N, 2, 2) blocks into (N, 3, 3) with a unit z entry."""
    n = mats.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, :2, :2] = mats
    out[:, 2, 2] = 1.0
    return out


def jacobians(layer: PrismLayer, points):
    """Per-point 3x3 Jacobians ``R lifted(A_t) R^T`` for an (N, 3) batch."""
    P = np.asarray(points, dtype=np.float64)
    local = P @ layer.frame.rotation
    tri, _ = mesh2d.locate_points(layer.plmap.mesh, local[:, :2],
                                  layer_index=layer.layer_index)
    tri = np.atleast_1d(tri)
    R = layer.frame.rotation
    return np.einsum("ij,njk,lk->nil", R, _lift(layer.plmap.A[tri]), R)


def prism_jacobian(layer: PrismLayer, p):
    """Jacobian of the layer at a single point (constant on its prism cell)."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {p.shape}")
    return jacobians(layer, p.reshape(1, 3))[0]


def invert_points(layer: PrismLayer, points):
    """Preimages of an (N, 3) batch; points must lie in the layer's image."""
    P = np.asarray(points, dtype=np.float64)
    local = P @ layer.frame.rotation
    try:
        xy = mesh2d.invert_points(layer.plmap, local[:, :2],
                                  layer_index=layer.layer_index)
    except NotInImageError as exc:
        exc.layer_index = layer.layer_index
        raise
    out = np.column_stack([xy, local[:, 2]])
    return out @ layer.frame.rotation.T


def invert_prism(layer: PrismLayer, r):
    """Preimage of a single 3D point under the layer."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {r.shape}")
    return invert_points(layer, r.reshape(1, 3))[0]
