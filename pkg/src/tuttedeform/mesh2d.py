"""Triangulated square domain and piecewise-linear maps over it.

Every deformation layer shares the same 2D domain: the square [-1, 1]^2
triangulated as a regular (n-1) x (n-1) grid of cells, each cell split along
its bottom-left to top-right diagonal.  Vertices are ordered row-major with
x varying fastest, cells row-major, and each cell contributes its lower
triangle before its upper one, so every ordering is a deterministic function
of the resolution alone.

A :class:`PLMap2D` carries the realized piecewise-linear map for one layer:
per-triangle affine factors ``A_t``, offsets ``delta_t``, determinants, and
inverses.  Meshes and maps are immutable after construction (arrays are
marked read-only), which makes them safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .errors import InternalError, NotInImageError, OutOfDomainError

# Slack before a query point is rejected as out of domain; points within
# this distance of the square are clamped onto it.
DOMAIN_TOL = 1e-9
# Containment slack (barycentric units) for image-side point location.
_BARY_STRICT = 1e-12
_BARY_FALLBACK = 1e-9


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Mesh2D:
    """Regular triangulation of [-1, 1]^2.  Immutable after construction."""

    resolution: int
    vertices: np.ndarray       # (V, 2) float64
    triangles: np.ndarray      # (T, 3) int64, counter-clockwise
    edges: np.ndarray          # (E, 2) int64, i < j, lexicographically sorted
    boundary_loop: np.ndarray  # (4(n-1),) int64, CCW from corner (-1, -1)
    interior_ids: np.ndarray   # (V - 4(n-1),) int64, ascending
    grid: np.ndarray           # (n,) axis coordinates
    edge_inverse: np.ndarray   # (T, 2, 2) inverses of rest edge matrices
    areas: np.ndarray          # (T,) rest triangle areas
    boundary_mask: np.ndarray  # (V,) bool
    interior_index: np.ndarray # (V,) int64, position among interior ids, -1 on boundary

    @property
    def cell_size(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]


def build_mesh(resolution: int) -> Mesh2D:
    """Build the regular triangulated square at the given resolution.

    ``resolution`` is the vertex count per axis; must be >= 2.  The mesh has
    resolution^2 vertices, 2 (resolution-1)^2 triangles, and a boundary loop
    of 4 (resolution-1) vertices.
    """
    n = int(resolution)
    if n < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")

    axis = np.linspace(-1.0, 1.0, n)
    vertices = np.column_stack([np.tile(axis, n), np.repeat(axis, n)])

    # Cells row-major; lower triangle (below the diagonal) first in each cell.
    ix = np.tile(np.arange(n - 1), n - 1)
    iy = np.repeat(np.arange(n - 1), n - 1)
    v00 = iy * n + ix
    v10 = v00 + 1
    v01 = v00 + n
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * (n - 1) ** 2, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    pairs = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [0, 2]]])
    pairs.sort(axis=1)
    edges = np.unique(pairs, axis=0)

    boundary_loop = np.concatenate([
        np.arange(0, n),                          # bottom, left to right
        np.arange(1, n) * n + (n - 1),            # right, bottom to top
        (n - 1) * n + np.arange(n - 2, -1, -1),   # top, right to left
        np.arange(n - 2, 0, -1) * n,              # left, top to bottom
    ]).astype(np.int64)

    boundary_mask = np.zeros(n * n, dtype=bool)
    boundary_mask[boundary_loop] = True
    interior_ids = np.flatnonzero(~boundary_mask).astype(np.int64)
    interior_index = np.full(n * n, -1, dtype=np.int64)
    interior_index[interior_ids] = np.arange(interior_ids.size)

    tri_v = vertices[triangles]
    rest_edges = np.stack([tri_v[:, 1] - tri_v[:, 0], tri_v[:, 2] - tri_v[:, 0]], axis=-1)
    edge_inverse = _inv22(rest_edges)
    areas = 0.5 * _det22(rest_edges)
    if not np.all(areas > 0):
        raise InternalError("regular mesh produced a non-positive triangle area")

    return Mesh2D(
        resolution=n,
        vertices=_readonly(vertices),
        triangles=_readonly(triangles),
        edges=_readonly(edges),
        boundary_loop=_readonly(boundary_loop),
        interior_ids=_readonly(interior_ids),
        grid=_readonly(axis),
        edge_inverse=_readonly(edge_inverse),
        areas=_readonly(areas),
        boundary_mask=_readonly(boundary_mask),
        interior_index=_readonly(interior_index),
    )


def _det22(m):
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def _inv22(m):
    det = _det22(m)
    out = np.empty_like(m)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[..., 0, 0] = m[..., 1, 1] / det
        out[..., 0, 1] = -m[..., 0, 1] / det
        out[..., 1, 0] = -m[..., 1, 0] / det
        out[..., 1, 1] = m[..., 0, 0] / det
    return out


def _axis_cells(mesh, coords):
    """Cell index and local fraction along one axis, with exact gridline ties.

    A coordinate exactly on an interior gridline is assigned to the cell on
    its lower side with local fraction 1.0, which realizes the lowest-index
    tie-break of :func:`locate_triangle`.
    """
    n = mesh.resolution
    grid = mesh.grid
    step = mesh.cell_size
    idx = np.clip(((coords + 1.0) / step).astype(np.int64), 0, n - 2)
    # Floating-point floor can land one cell off near gridlines; snap back.
    idx = np.where(coords < grid[idx], idx - 1, idx)
    idx = np.where(coords > grid[idx + 1], idx + 1, idx)
    frac = (coords - grid[idx]) / (grid[idx + 1] - grid[idx])
    on_lower_line = (coords == grid[idx]) & (idx > 0)
    idx = np.where(on_lower_line, idx - 1, idx)
    frac = np.where(on_lower_line, 1.0, frac)
    return idx, frac


def locate_points(mesh, points, layer_index=None):
    """Vectorized triangle location for points in [-1, 1]^2.

    Returns ``(tri, bary)`` with ``tri`` of shape (N,) and ``bary`` of shape
    (N, 3) giving barycentric coordinates w.r.t. the located triangle's
    vertex order.  Points within DOMAIN_TOL outside the square are clamped;
    beyond that an OutOfDomainError identifies the first offender.
    """
    pts = np.asarray(points, dtype=np.float64)
    scalar_input = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 2:
        raise ValueError(f"expected 2D points, got shape {pts.shape}")

    over = np.abs(pts) - 1.0
    bad = np.flatnonzero(np.any(over > DOMAIN_TOL, axis=1))
    if bad.size:
        i = int(bad[0])
        raise OutOfDomainError(
            f"point {pts[i]} lies outside [-1,1]^2 by {float(np.max(over[i])):.3e}",
            point=pts[i].copy(), layer_index=layer_index, point_index=i,
        )
    x = np.clip(pts[:, 0], -1.0, 1.0)
    y = np.clip(pts[:, 1], -1.0, 1.0)

    ix, fx = _axis_cells(mesh, x)
    iy, fy = _axis_cells(mesh, y)
    lower = fx >= fy
    tri = 2 * (iy * (mesh.resolution - 1) + ix) + np.where(lower, 0, 1)

    # Lower triangle (v00, v10, v11): bary = (1-fx, fx-fy, fy).
    # Upper triangle (v00, v11, v01): bary = (1-fy, fx, fy-fx).
    bary = np.empty((pts.shape[0], 3))
    bary[:, 0] = np.where(lower, 1.0 - fx, 1.0 - fy)
    bary[:, 1] = np.where(lower, fx - fy, fx)
    bary[:, 2] = np.where(lower, fy, fy - fx)

    if scalar_input:
        return int(tri[0]), bary[0]
    return tri, bary


def locate_triangle(mesh, q) -> int:
    """Index of the triangle containing ``q``.

    For a point incident to several triangles (on a shared edge or vertex)
    the lowest-index incident triangle is returned, so the choice is
    deterministic and consistent across calls.
    """
    tri, _ = locate_points(mesh, q)
    return tri


@dataclass
class PLMap2D:
    """Realized piecewise-linear map of the square, one entry per triangle.

    On each rest triangle t the map acts as ``q -> A[t] @ q + delta[t]``.
    ``det`` holds the per-triangle determinants; a map realized from a Tutte
    embedding has all determinants strictly positive.  Instances are frozen
    in practice: arrays are read-only and the image-side locator is the only
    lazily built (cached) member.
    """

    mesh: Mesh2D
    vertex_positions: np.ndarray  # (V, 2) deformed vertex positions
    A: np.ndarray                 # (T, 2, 2)
    delta: np.ndarray             # (T, 2)
    det: np.ndarray               # (T,)
    A_inv: np.ndarray             # (T, 2, 2), NaN where det == 0
    _locator: object = field(default=None, repr=False, compare=False)

    def image_locator(self):
        # Benign race under concurrent first use: both builds agree.
        if self._locator is None:
            object.__setattr__(self, "_locator", _ImageLocator(self))
        return self._locator


def realize_plmap(mesh: Mesh2D, vertex_positions) -> PLMap2D:
    """Realize per-triangle affine factors from deformed vertex positions.

    Solves ``A_t v_i + delta_t = u_i`` per triangle from the two rest edge
    vectors; exact for the data that produced it by construction.
    """
    U = np.asarray(vertex_positions, dtype=np.float64)
    if U.shape != (mesh.num_vertices, 2):
        raise ValueError(
            f"vertex positions must have shape {(mesh.num_vertices, 2)}, got {U.shape}")
    if not np.all(np.isfinite(U)):
        raise ValueError("vertex positions contain non-finite values")

    tri_u = U[mesh.triangles]
    deformed_edges = np.stack(
        [tri_u[:, 1] - tri_u[:, 0], tri_u[:, 2] - tri_u[:, 0]], axis=-1)
    A = deformed_edges @ mesh.edge_inverse
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    delta = tri_u[:, 0] - np.einsum("tij,tj->ti", A, v0)
    det = _det22(A)
    A_inv = _inv22(A)
    return PLMap2D(
        mesh=mesh,
        vertex_positions=_readonly(U.copy()),
        A=_readonly(A),
        delta=_readonly(delta),
        det=_readonly(det),
        A_inv=_readonly(A_inv),
    )


def map_points(plmap: PLMap2D, points, layer_index=None):
    """Apply the PL map to a batch of points; returns (N, 2) images."""
    tri, bary = locate_points(plmap.mesh, points, layer_index=layer_index)
    tri = np.atleast_1d(tri)
    bary = np.atleast_2d(bary)
    corners = plmap.vertex_positions[plmap.mesh.triangles[tri]]
    return np.einsum("nk,nkd->nd", bary, corners)


def apply_plmap(plmap: PLMap2D, q):
    """Image of a single 2D point under the PL map.

    Evaluation goes through barycentric interpolation of the deformed
    triangle corners, which agrees with ``A_t q + delta_t`` and is exact on
    vertices; shared edges therefore evaluate identically from either side.
    """
    out = map_points(plmap, np.asarray(q, dtype=np.float64).reshape(1, 2))
    return out[0]


class _ImageLocator:
    """Uniform bin grid over the deformed mesh for image-side point location.

    Each background cell stores the (ascending) indices of triangles whose
    image bounding box touches it; queries test candidates in index order so
    the lowest-index tie-break matches the forward locator.
    """

    def __init__(self, plmap: PLMap2D):
        mesh = plmap.mesh
        U = plmap.vertex_positions
        tri_u = U[mesh.triangles]  # (T, 3, 2)
        self.plmap = plmap
        self.tri_u0 = np.ascontiguousarray(tri_u[:, 0])
        # Inverse of the deformed edge matrix: B_img = B_rest @ A_inv.
        self.B_img = mesh.edge_inverse @ plmap.A_inv

        self.lo = U.min(axis=0)
        hi = U.max(axis=0)
        span = np.maximum(hi - self.lo, 1e-30)
        self.ncell = max(mesh.resolution - 1, 1)
        self.cell = span / self.ncell

        pad = 1e-12 + 1e-9 * span
        blo = np.floor((tri_u.min(axis=1) - pad - self.lo) / self.cell).astype(np.int64)
        bhi = np.floor((tri_u.max(axis=1) + pad - self.lo) / self.cell).astype(np.int64)
        blo = np.clip(blo, 0, self.ncell - 1)
        bhi = np.clip(bhi, 0, self.ncell - 1)

        nx = bhi[:, 0] - blo[:, 0] + 1
        ny = bhi[:, 1] - blo[:, 1] + 1
        counts = nx * ny
        tri_ids = np.repeat(np.arange(mesh.num_triangles), counts)
        # Enumerate covered cells per triangle without a Python loop.
        offsets = np.concatenate([[0], np.cumsum(counts)])
        local = np.arange(counts.sum()) - offsets[tri_ids]
        cx = blo[tri_ids, 0] + local % nx[tri_ids]
        cy = blo[tri_ids, 1] + local // nx[tri_ids]
        cell_ids = cy * self.ncell + cx

        order = np.lexsort((tri_ids, cell_ids))
        self.bucket_tris = tri_ids[order]
        self.bucket_start = np.searchsorted(
            cell_ids[order], np.arange(self.ncell * self.ncell + 1))

    def _bary(self, pts, tris):
        local = np.einsum(
            "nij,nj->ni", self.B_img[tris], pts - self.tri_u0[tris])
        return np.column_stack([1.0 - local[:, 0] - local[:, 1], local])

    def query(self, points, layer_index=None):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = pts.shape[0]
        cidx = np.clip(
            np.floor((pts - self.lo) / self.cell).astype(np.int64), 0, self.ncell - 1)
        cells = cidx[:, 1] * self.ncell + cidx[:, 0]
        start = self.bucket_start[cells]
        length = self.bucket_start[cells + 1] - start
        kmax = int(length.max()) if n else 0

        tri = np.full(n, -1, dtype=np.int64)
        bary = np.zeros((n, 3))
        if kmax:
            k = np.arange(kmax)
            valid = k[None, :] < length[:, None]
            flat_idx = start[:, None] + np.minimum(k, np.maximum(length[:, None] - 1, 0))
            flat_idx = np.minimum(flat_idx, self.bucket_tris.size - 1)
            cand = np.where(valid, self.bucket_tris[flat_idx], 0)
            flat_pts = np.repeat(pts, kmax, axis=0)
            b = self._bary(flat_pts, cand.ravel()).reshape(n, kmax, 3)
            inside = valid & (b.min(axis=2) >= -_BARY_STRICT)
            first = inside.argmax(axis=1)
            hit = inside.any(axis=1)
            tri[hit] = cand[hit, first[hit]]
            bary[hit] = b[hit, first[hit]]

        miss = np.flatnonzero(tri < 0)
        if miss.size:
            # Rare: points at the polygon boundary whose bin candidates all
            # failed the strict test.  Scan every triangle for those few.
            T = self.plmap.mesh.num_triangles
            all_tris = np.arange(T)
            for i in miss:
                b = self._bary(np.repeat(pts[i:i + 1], T, axis=0), all_tris)
                scores = b.min(axis=1)
                best = int(scores.argmax())
                if scores[best] < -_BARY_FALLBACK:
                    raise NotInImageError(
                        f"point {pts[i]} is outside the deformed mesh "
                        f"(best containment violation {-scores[best]:.3e})",
                        point=pts[i].copy(), layer_index=layer_index,
                        point_index=int(i))
                tri[i] = best
                bary[i] = b[best]
        return tri, bary


def locate_image_points(plmap: PLMap2D, points, layer_index=None):
    """Triangle indices and barycentrics of points in the deformed mesh."""
    return plmap.image_locator().query(points, layer_index=layer_index)


def locate_triangle_in_image(plmap: PLMap2D, r) -> int:
    """Index of the deformed triangle containing the image-space point ``r``.

    Uses a bin grid over deformed triangle bounding boxes, testing candidates
    in ascending index order: ties on shared edges resolve to the lowest
    incident index, mirroring :func:`locate_triangle`.
    """
    tri, _ = locate_image_points(plmap, np.asarray(r, dtype=np.float64).reshape(1, 2))
    return int(tri[0])


def invert_points(plmap: PLMap2D, points, layer_index=None):
    """Preimages of image-space points under the PL map, batched."""
    tri, bary = locate_image_points(plmap, points, layer_index=layer_index)
    corners = plmap.mesh.vertices[plmap.mesh.triangles[tri]]
    return np.einsum("nk,nkd->nd", bary, corners)
