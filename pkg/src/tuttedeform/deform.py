"""Deep composition of prismatic layers into one injective 3D deformation.

A deformation net is an ordered list of prismatic layers; the net applies
layer 0 first.  Injectivity of the composite follows from injectivity of
every layer, and the chain rule gives its Jacobian as the product of the
per-layer Jacobians evaluated along the orbit of the point.  The inverse
composes the per-layer inverses in reverse order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import mesh2d, prism
from .mesh2d import Mesh2D, _readonly
from .prism import Frame, PrismLayer
from .tutte import TutteLayerParams, solve_tutte_with_system


@dataclass(frozen=True)
class PointSet:
    """A batch of 3D points with optional nonnegative per-point weights."""

    points: np.ndarray             # (N, 3)
    weights: Optional[np.ndarray] = None  # (N,)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite values")
        object.__setattr__(self, "points", _readonly(pts))
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (pts.shape[0],):
                raise ValueError(
                    f"weights must have shape ({pts.shape[0]},), got {w.shape}")
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise ValueError("weights must be finite and nonnegative")
            object.__setattr__(self, "weights", _readonly(w))

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class DeformationNet:
    """Composition of prismatic layers; layer 0 is applied first.

    ``layers`` is a pure cache of ``params``: re-realizing the stored
    parameters reproduces it exactly.  ``systems`` keeps each layer's
    factorized interior matrix so gradient code can run adjoint solves
    against the same factorization.
    """

    mesh: Mesh2D
    params: tuple                  # tuple[TutteLayerParams]
    frames: tuple                  # tuple[Frame]
    layers: tuple                  # tuple[PrismLayer]
    systems: tuple                 # tuple[TutteSystem]

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def realize(mesh: Mesh2D, params: Sequence[TutteLayerParams],
            frames: Sequence[Frame]) -> DeformationNet:
    """Solve every layer and assemble the composite net.

    Validates shapes, runs each layer's boundary construction and interior
    solve, and certifies injectivity per layer (strictly positive
    determinants).  Raises ValueError on empty or mismatched inputs.
    """
    params = tuple(params)
    frames = tuple(frames)
    if len(params) == 0:
        raise ValueError("a deformation net needs at least one layer")
    if len(params) != len(frames):
        raise ValueError(
            f"got {len(params)} parameter sets but {len(frames)} frames")
    layers = []
    systems = []
    for idx, (p, f) in enumerate(zip(params, frames)):
        plmap, system = solve_tutte_with_system(mesh, p)
        layers.append(PrismLayer(frame=f, plmap=plmap, layer_index=idx))
        systems.append(system)
    return DeformationNet(mesh=mesh, params=params, frames=frames,
                          layers=tuple(layers), systems=tuple(systems))


def _as_array(points):
    if isinstance(points, PointSet):
        return points.points, points.weights
    return np.asarray(points, dtype=np.float64), None


def forward(net: DeformationNet, points):
    """Apply the full composition to a PointSet (or (N, 3) array).

    Returns the same container kind as the input; weights pass through
    untouched.
    """
    pts, weights = _as_array(points)
    out = pts
    for layer in net.layers:
        out = prism.map_points(layer, out)
    if isinstance(points, PointSet):
        return PointSet(points=out, weights=weights)
    return out


def inverse(net: DeformationNet, points):
    """Apply the inverse composition (layers inverted in reverse order)."""
    pts, weights = _as_array(points)
    out = pts
    for layer in reversed(net.layers):
        out = prism.invert_points(layer, out)
    if isinstance(points, PointSet):
        return PointSet(points=out, weights=weights)
    return out


def jacobians(net: DeformationNet, points):
    """(N, 3, 3) Jacobians of the composite map along each point's orbit."""
    pts, _ = _as_array(points)
    J = np.broadcast_to(np.eye(3), (pts.shape[0], 3, 3)).copy()
    cur = pts
    for layer in net.layers:
        M = prism.jacobians(layer, cur)
        J = M @ J
        cur = prism.map_points(layer, cur)
    return J


def jacobian(net: DeformationNet, p):
    """Jacobian of the composite at one point: the product of layer
    Jacobians evaluated along the point's orbit, first layer rightmost."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {p.shape}")
    return jacobians(net, p.reshape(1, 3))[0]


def inverse_jacobians(net: DeformationNet, points):
    """(N, 3, 3) Jacobians of the inverse map at image-space points."""
    pts, _ = _as_array(points)
    J = np.broadcast_to(np.eye(3), (pts.shape[0], 3, 3)).copy()
    cur = pts
    for layer in reversed(net.layers):
        cur = prism.invert_points(layer, cur)
        M = prism.jacobians(layer, cur)
        # Inverse of the layer Jacobian at the preimage point; the inverse
        # chain multiplies out as M_1^-1 ... M_k^-1.
        J = np.linalg.inv(M) @ J
    return J


def inverse_jacobian(net: DeformationNet, p):
    """Jacobian of the inverse map at a single image-space point."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {p.shape}")
    return inverse_jacobians(net, p.reshape(1, 3))[0]


@dataclass
class OrbitTrace:
    """Per-layer location data recorded during a forward pass.

    Everything the backward pass needs to turn output/Jacobian cotangents
    into per-layer vertex-position cotangents: the triangle and barycentric
    coordinates of every point at every layer, and (when Jacobian losses are
    in play) the running Jacobian products entering each layer.
    """

    points: np.ndarray     # (N, 3) inputs
    outputs: np.ndarray    # (N, 3) final images
    tris: np.ndarray       # (L, N) triangle index per layer
    barys: np.ndarray      # (L, N, 3)
    jac: Optional[np.ndarray] = None       # (N, 3, 3) full-composite Jacobians
    prefixes: Optional[np.ndarray] = None  # (L, N, 3, 3) product before layer l


def forward_trace(net: DeformationNet, points, need_jacobian: bool = False) -> OrbitTrace:
    """Forward pass that records orbits (and optionally Jacobian prefixes)."""
    pts, _ = _as_array(points)
    n = pts.shape[0]
    L = net.num_layers
    tris = np.empty((L, n), dtype=np.int64)
    barys = np.empty((L, n, 3))
    prefixes = np.empty((L, n, 3, 3)) if need_jacobian else None
    J = np.broadcast_to(np.eye(3), (n, 3, 3)).copy() if need_jacobian else None

    cur = pts
    for l, layer in enumerate(net.layers):
        local = cur @ layer.frame.rotation
        tri, bary = mesh2d.locate_points(layer.plmap.mesh, local[:, :2],
                                         layer_index=l)
        tris[l] = tri
        barys[l] = bary
        corners = layer.plmap.vertex_positions[net.mesh.triangles[tri]]
        xy = np.einsum("nk,nkd->nd", bary, corners)
        cur = np.column_stack([xy, local[:, 2]]) @ layer.frame.rotation.T
        if need_jacobian:
            prefixes[l] = J
            R = layer.frame.rotation
            M = np.einsum("ij,njk,lk->nil", R, prism._lift(layer.plmap.A[tri]), R)
            J = M @ J
    return OrbitTrace(points=pts, outputs=cur, tris=tris, barys=barys,
                      jac=J, prefixes=prefixes)
