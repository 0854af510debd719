"""Exact gradients of the losses with respect to raw layer parameters.

The chain has three stages, mirrored by the private helpers here:

1.  Point and Jacobian cotangents are pulled back through the layer stack to
    per-layer cotangents on deformed vertex positions (``dL/dU``).  A
    point's triangle memberships are piecewise constant in the parameters,
    so away from cell crossings the exact gradient treats them as fixed;
    barycentric weights recorded in the forward trace do the bookkeeping.

2.  Each layer's ``dL/dU`` is converted into gradients of its edge weights
    and boundary positions by an adjoint solve against the same factorized
    interior matrix used by the forward solve (the matrix is symmetric, so
    one factorization serves both directions).

3.  Boundary-position gradients chain through the ray-square intersection,
    the per-side angle normalization, and the bounded sigmoid back to the
    raw parameters; weight gradients chain through the sigmoid alone.

Parameters of different layers never mix outside stage 1: perturbing one
layer's weights changes other layers' losses only through the transported
points, which is exactly what the stage-1 sweep accounts for.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import prism
from .deform import DeformationNet, OrbitTrace, PointSet, forward_trace
from .energy import (DISTORTION_MULTIPLIERS, DISTORTION_THRESHOLDS,
                     FittingLoss, HandleConstraint, LossWeights,
                     distortion_multipliers, layer_regularization,
                     strain_energy_density, triangle_gradient_frames)
from .errors import NumericalError
from .mesh2d import Mesh2D
from .tutte import (BOUNDARY_EPS, EDGE_WEIGHT_EPS, TutteLayerParams,
                    squash, squash_derivative)


@dataclass(frozen=True)
class ParamGradient:
    """Gradient with the same per-layer structure as the raw parameters."""

    edge_weights: tuple      # tuple of (E,) arrays, one per layer
    boundary_increments: tuple  # tuple of (m,) arrays

    def flat(self):
        parts = []
        for e, b in zip(self.edge_weights, self.boundary_increments):
            parts.extend([e, b])
        return np.concatenate(parts)


@dataclass(frozen=True)
class FitTarget:
    """Source geometry and its target for direct fitting."""

    source: PointSet
    target_vertices: np.ndarray
    triangles: Optional[np.ndarray] = None
    gradient_weight: float = 0.1


@dataclass(frozen=True)
class LossConfig:
    """What to differentiate: any combination of the supported terms."""

    weights: LossWeights = field(default_factory=LossWeights)
    step: int = 0
    constraints: Sequence[HandleConstraint] = ()
    elastic_samples: Optional[PointSet] = None
    fit: Optional[FitTarget] = None
    use_regularization: bool = True


@dataclass(frozen=True)
class LossValues:
    total: float
    elastic: float = 0.0
    handle: float = 0.0
    reg: float = 0.0
    fit_vertex: float = 0.0
    fit_gradient: float = 0.0
    elastic_weight: float = 0.0
    max_distortion: float = 0.0


class _Accumulator:
    """Per-layer cotangent stores shared by all loss terms."""

    def __init__(self, net: DeformationNet):
        V = net.mesh.num_vertices
        T = net.mesh.num_triangles
        self.dU = [np.zeros((V, 2)) for _ in range(net.num_layers)]
        self.dA = [np.zeros((T, 2, 2)) for _ in range(net.num_layers)]


def _scatter_rows(out, idx, vals):
    # out: (V, 2); idx: (N,); vals: (N, 2).  bincount is deterministic and
    # much faster than np.add.at for our sizes.
    out[:, 0] += np.bincount(idx, weights=vals[:, 0], minlength=out.shape[0])
    out[:, 1] += np.bincount(idx, weights=vals[:, 1], minlength=out.shape[0])


def _backward_points(net: DeformationNet, trace: OrbitTrace, acc: _Accumulator,
                     g_out=None, g_jac=None):
    """Pull point/Jacobian cotangents back through the layers.

    ``g_out`` is dL/d(final points), ``g_jac`` dL/d(composite Jacobian);
    either may be None.  Accumulates into ``acc`` in place.
    """
    n = trace.points.shape[0]
    g = np.zeros((n, 3)) if g_out is None else g_out.copy()
    S = None
    if g_jac is not None:
        S = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()

    tris3 = net.mesh.triangles
    for l in range(net.num_layers - 1, -1, -1):
        layer = net.layers[l]
        R = layer.frame.rotation
        tri = trace.tris[l]
        bary = trace.barys[l]
        A = layer.plmap.A[tri]

        g_loc = g @ R
        # Direct contribution to this layer's deformed vertices.
        vals = bary[:, :, None] * g_loc[:, None, :2]  # (N, 3, 2)
        verts = tris3[tri]
        for k in range(3):
            _scatter_rows(acc.dU[l], verts[:, k], vals[:, k])
        # Continue the chain: local-out xy = q_xy @ A^T + delta.
        g_xy = np.einsum("ni,nij->nj", g_loc[:, :2], A)
        g = np.column_stack([g_xy, g_loc[:, 2]]) @ R.T

        if g_jac is not None:
            M = np.einsum("ij,njk,lk->nil", R, prism._lift(A), R)
            P = trace.prefixes[l]
            dM = np.einsum("nji,njk,nlk->nil", S, g_jac, P)
            dA_loc = np.einsum("ji,njk,kl->nil", R, dM, R)[:, :2, :2]
            for a in range(2):
                for b in range(2):
                    acc.dA[l][:, a, b] += np.bincount(
                        tri, weights=dA_loc[:, a, b],
                        minlength=acc.dA[l].shape[0])
            S = S @ M


def _affine_to_vertices(mesh: Mesh2D, dA):
    """Convert per-triangle affine cotangents (T, 2, 2) to vertex ones."""
    dUe = dA @ np.swapaxes(mesh.edge_inverse, -1, -2)  # dL/d[u1-u0, u2-u0]
    out = np.zeros((mesh.num_vertices, 2))
    t = mesh.triangles
    _scatter_rows(out, t[:, 1], dUe[:, :, 0])
    _scatter_rows(out, t[:, 2], dUe[:, :, 1])
    _scatter_rows(out, t[:, 0], -(dUe[:, :, 0] + dUe[:, :, 1]))
    return out


def _tutte_adjoint(mesh: Mesh2D, system, U, dU):
    """Edge-weight and boundary-position gradients from vertex cotangents.

    Solves the adjoint system against the stored factorization and applies
    the Laplacian's bilinear structure: for edge (i, j),
    ``dL/dw = -(lam_i - lam_j) . (U_i - U_j)`` with the adjoint vector
    extended by zero on the boundary.
    """
    lam = np.zeros((mesh.num_vertices, 2))
    lam[mesh.interior_ids] = system.solver(dU[mesh.interior_ids])

    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    d_w = -np.sum((lam[i] - lam[j]) * (U[i] - U[j]), axis=1)

    # Boundary positions feel the interior solution through boundary-incident
    # edges, plus any direct cotangent on boundary vertices.
    loop_pos = np.full(mesh.num_vertices, -1, dtype=np.int64)
    loop_pos[mesh.boundary_loop] = np.arange(mesh.boundary_loop.size)
    d_b = dU[mesh.boundary_loop].copy()
    w = system.weights
    i_int = (mesh.interior_index[i] >= 0) & (mesh.interior_index[j] < 0)
    j_int = (mesh.interior_index[i] < 0) & (mesh.interior_index[j] >= 0)
    for c in range(2):
        d_b[:, c] += np.bincount(
            loop_pos[j[i_int]], weights=w[i_int] * lam[i[i_int], c],
            minlength=d_b.shape[0])
        d_b[:, c] += np.bincount(
            loop_pos[i[j_int]], weights=w[j_int] * lam[j[j_int], c],
            minlength=d_b.shape[0])
    return d_w, d_b


def _boundary_chain(mesh: Mesh2D, params: TutteLayerParams, d_b):
    """Chain boundary-position gradients back to the raw increments."""
    raw = params.raw_boundary_increments
    q = mesh.resolution - 1
    s = squash(raw, BOUNDARY_EPS).reshape(4, q)
    partial = np.concatenate(
        [np.zeros((4, 1)), np.cumsum(s, axis=1)[:, :-1]], axis=1)
    totals = s.sum(axis=1, keepdims=True)
    corners = -0.75 * np.pi + 0.5 * np.pi * np.arange(4)
    beta = (corners[:, None] + 0.5 * np.pi * partial / totals).ravel()

    # d(point)/d(angle) on the square: the coordinate pinned at +-1 is
    # locally constant, the other moves as the ray sweeps.  The selected
    # branch always has denominator >= 1/2, so no guard is needed beyond
    # evaluating each branch only where it applies.
    c, sn = np.cos(beta), np.sin(beta)
    on_vertical = np.abs(c) >= np.abs(sn)  # left/right edges of the square
    db_dbeta = np.zeros((beta.size, 2))
    v, h = on_vertical, ~on_vertical
    db_dbeta[v, 1] = np.sign(c[v]) / c[v] ** 2
    db_dbeta[h, 0] = -np.sign(sn[h]) / sn[h] ** 2
    g_beta = np.sum(np.asarray(d_b) * db_dbeta, axis=1).reshape(4, q)

    # beta_j = corner + (pi/2) C_j / T with C_j the partial sum below j.
    rev = np.cumsum(g_beta[:, ::-1], axis=1)[:, ::-1]
    tail = np.concatenate([rev[:, 1:], np.zeros((4, 1))], axis=1)
    weighted = np.sum(g_beta * partial, axis=1, keepdims=True)
    d_s = 0.5 * np.pi * (tail / totals - weighted / totals ** 2)
    return (d_s.ravel() * squash_derivative(raw, BOUNDARY_EPS))


def _finalize_layer(net, l, dU_total):
    mesh = net.mesh
    params = net.params[l]
    U = net.layers[l].plmap.vertex_positions
    d_w, d_b = _tutte_adjoint(mesh, net.systems[l], U, dU_total)
    d_raw_edges = d_w * squash_derivative(params.raw_edge_weights, EDGE_WEIGHT_EPS)
    d_raw_boundary = _boundary_chain(mesh, params, d_b)
    if not (np.all(np.isfinite(d_raw_edges)) and np.all(np.isfinite(d_raw_boundary))):
        raise NumericalError(f"non-finite gradient in layer {l}")
    return d_raw_edges, d_raw_boundary


def evaluate_with_gradient(net: DeformationNet, config: LossConfig):
    """Loss values and the exact gradient of their weighted total."""
    acc = _Accumulator(net)
    w = config.weights
    w_el = w.elastic_at(config.step)
    values = dict(elastic=0.0, handle=0.0, reg=0.0,
                  fit_vertex=0.0, fit_gradient=0.0, max_distortion=0.0)

    if config.constraints:
        all_pts = np.concatenate([c.points.points for c in config.constraints
                                  if len(c.points)])
        trace = forward_trace(net, all_pts)
        g_out = np.empty_like(all_pts)
        ofs = 0
        for c in config.constraints:
            n = len(c.points)
            if n == 0:
                continue
            d = trace.outputs[ofs:ofs + n] - c.targets()
            values["handle"] += float(np.mean(np.sum(d * d, axis=1)))
            g_out[ofs:ofs + n] = (w.handle * 2.0 / n) * d
            ofs += n
        _backward_points(net, trace, acc, g_out=g_out)

    if config.elastic_samples is not None and len(config.elastic_samples):
        samples = config.elastic_samples
        if samples.weights is None:
            raise ValueError("elastic loss needs density weights on its samples")
        trace = forward_trace(net, samples.points, need_jacobian=True)
        J = trace.jac
        e = strain_energy_density(J)
        m = distortion_multipliers(e, w.thresholds, w.multipliers)
        values["elastic"] = float(np.mean(m * samples.weights * e))
        values["max_distortion"] = float(e.max()) if e.size else 0.0
        coef = (w_el * m * samples.weights / e.size)
        JtJ = np.swapaxes(J, -1, -2) @ J - np.eye(3)
        g_jac = 4.0 * coef[:, None, None] * (J @ JtJ)
        _backward_points(net, trace, acc, g_jac=g_jac)

    if config.fit is not None:
        fit = config.fit
        target = np.asarray(fit.target_vertices, dtype=np.float64)
        trace = forward_trace(net, fit.source.points)
        mapped = trace.outputs
        n = mapped.shape[0]
        d = mapped - target
        values["fit_vertex"] = float(np.mean(np.sum(d * d, axis=1)))
        g_out = (2.0 / n) * d
        if fit.triangles is not None and len(fit.triangles):
            tris = np.asarray(fit.triangles, dtype=np.int64)
            _, P = triangle_gradient_frames(fit.source.points, tris)
            def edges_of(v):
                tv = v[tris]
                return np.stack([tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0]], axis=-1)
            F = edges_of(mapped) @ P
            F_target = edges_of(target) @ P
            diff = F - F_target
            values["fit_gradient"] = float(np.mean(np.sum(diff ** 2, axis=(1, 2))))
            dEd = (fit.gradient_weight * 2.0 / tris.shape[0]) * (
                diff @ np.swapaxes(P, -1, -2))  # (T, 3, 2)
            for k, col in ((1, 0), (2, 1)):
                for c in range(3):
                    g_out[:, c] += np.bincount(
                        tris[:, k], weights=dEd[:, c, col], minlength=n)
            for c in range(3):
                g_out[:, c] -= np.bincount(
                    tris[:, 0], weights=dEd[:, c, 0] + dEd[:, c, 1], minlength=n)
        _backward_points(net, trace, acc, g_out=g_out)

    if config.use_regularization:
        L = net.num_layers
        for l, layer in enumerate(net.layers):
            A = layer.plmap.A
            values["reg"] += layer_regularization(layer) / L
            G = A @ (np.swapaxes(A, -1, -2) @ A - np.eye(2))
            acc.dA[l] += (4.0 * w.reg / L) * net.mesh.areas[:, None, None] * G

    edge_grads, boundary_grads = [], []
    for l in range(net.num_layers):
        dU_total = acc.dU[l] + _affine_to_vertices(net.mesh, acc.dA[l])
        de, db = _finalize_layer(net, l, dU_total)
        edge_grads.append(de)
        boundary_grads.append(db)

    total = (w_el * values["elastic"] + w.handle * values["handle"]
             + w.reg * values["reg"]
             + values["fit_vertex"]
             + (config.fit.gradient_weight if config.fit else 0.0) * values["fit_gradient"])
    loss = LossValues(total=total, elastic_weight=w_el, **values)
    grad = ParamGradient(edge_weights=tuple(edge_grads),
                         boundary_increments=tuple(boundary_grads))
    return loss, grad


def grad_total(net: DeformationNet, config: LossConfig):
    """Total loss under ``config`` and its exact gradient.

    Returns ``(loss_value, ParamGradient)``.  The gradient is exact for the
    piecewise definition of the losses: triangle memberships and distortion
    multipliers are treated as locally constant, which matches the losses
    almost everywhere.
    """
    loss, grad = evaluate_with_gradient(net, config)
    return loss.total, grad
