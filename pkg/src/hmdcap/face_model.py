"""Linear morphable face model: basis, pose, projection, visibility, landmarks.

A face is encoded by three orthonormal PCA-style bases (identity,
expression, albedo) around a mean shape and mean per-vertex color.
Geometry is flat float64 arrays of length 3N laid out [x0,y0,z0, x1,...].

Conventions used throughout the package:

* image coordinates are (x, y) with x along columns and y along rows,
  origin at the top-left pixel; pixel (r, c) samples the plane at (c, r)
* camera space is ``q = R @ v``; the viewer sits at z = +inf looking down
  the -z axis, so a larger q_z is nearer to the viewer
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, GeometryError

ORTHONORMAL_TOL = 1e-10
DEPTH_TOL = 1e-6

_MAGIC = b"FEB1"


@dataclass(frozen=True)
class FaceBasis:
    """Mean face plus orthonormal deformation axes and fixed topology.

    Axis matrices have shape (3N, D) with orthonormal columns; the
    per-axis scales play the role of prior standard deviations.
    """

    mean_shape: np.ndarray
    mean_albedo: np.ndarray
    identity_axes: np.ndarray
    expression_axes: np.ndarray
    albedo_axes: np.ndarray
    identity_scales: np.ndarray
    expression_scales: np.ndarray
    albedo_scales: np.ndarray
    triangles: np.ndarray
    landmarks_lower: np.ndarray
    landmarks_mouth: np.ndarray

    def __post_init__(self):
        n3 = self.mean_shape.shape[0]
        if n3 % 3 != 0 or self.mean_albedo.shape[0] != n3:
            raise DimensionError("mean shape/albedo must be flat length-3N arrays")
        for name, axes, scales in (
            ("identity", self.identity_axes, self.identity_scales),
            ("expression", self.expression_axes, self.expression_scales),
            ("albedo", self.albedo_axes, self.albedo_scales),
        ):
            if axes.shape[0] != n3:
                raise DimensionError(f"{name} axes rows != 3N")
            if axes.shape[1] != scales.shape[0]:
                raise DimensionError(f"{name} scales length != axis count")
            gram = axes.T @ axes
            if not np.allclose(gram, np.eye(axes.shape[1]), atol=ORTHONORMAL_TOL):
                raise GeometryError(f"{name} axes are not orthonormal")
            if np.any(scales <= 0):
                raise GeometryError(f"{name} scales must be positive")
        if self.triangles.size and self.triangles.max() >= self.vertex_count:
            raise GeometryError("triangle index out of range")
        for lm in (self.landmarks_lower, self.landmarks_mouth):
            if len(np.unique(lm)) != len(lm):
                raise GeometryError("duplicate landmark indices")
            if lm.size and lm.max() >= self.vertex_count:
                raise GeometryError("landmark index out of range")

    @property
    def vertex_count(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def dims(self) -> tuple[int, int, int]:
        return (
            self.identity_axes.shape[1],
            self.expression_axes.shape[1],
            self.albedo_axes.shape[1],
        )


@dataclass(frozen=True)
class FaceParams:
    """Coefficient vectors for one face instance."""

    identity: np.ndarray
    expression: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        for v in (self.identity, self.expression, self.albedo):
            if not np.all(np.isfinite(v)):
                raise DimensionError("face coefficients must be finite")

    @classmethod
    def zeros(cls, basis: FaceBasis) -> "FaceParams":
        d_id, d_exp, d_alb = basis.dims
        return cls(np.zeros(d_id), np.zeros(d_exp), np.zeros(d_alb))

    def with_expression(self, expression: np.ndarray) -> "FaceParams":
        return FaceParams(self.identity, np.asarray(expression, dtype=float), self.albedo)


@dataclass(frozen=True)
class Pose:
    """Rigid pose for weak-perspective projection: rotation, 2D shift, scale."""

    R: np.ndarray
    t: np.ndarray
    s: float

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        if R.shape != (3, 3):
            raise GeometryError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHONORMAL_TOL):
            raise GeometryError("rotation matrix is not orthogonal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise GeometryError("rotation matrix determinant is not +1")
        if np.asarray(self.t).shape != (2,):
            raise GeometryError("translation must be a 2-vector")
        if not self.s > 0:
            raise GeometryError("scale must be positive")

    @classmethod
    def identity(cls, t=(0.0, 0.0), s: float = 1.0) -> "Pose":
        return cls(np.eye(3), np.asarray(t, dtype=float), float(s))


@dataclass(frozen=True)
class Mesh:
    """Flat vertex array sharing a triangle topology."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        if self.vertices.shape[0] % 3 != 0:
            raise DimensionError("vertices must be a flat length-3N array")
        if self.triangles.size and self.triangles.max() + 1 != self.vertex_count:
            raise GeometryError("vertex count does not match topology's max index + 1")

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0] // 3

    def points(self) -> np.ndarray:
        """Vertices as an (N, 3) view."""
        return self.vertices.reshape(-1, 3)


def _check_params(basis: FaceBasis, params: FaceParams):
    d_id, d_exp, d_alb = basis.dims
    if params.identity.shape != (d_id,):
        raise DimensionError(f"identity coefficients: expected {d_id}, got {params.identity.shape}")
    if params.expression.shape != (d_exp,):
        raise DimensionError(f"expression coefficients: expected {d_exp}, got {params.expression.shape}")
    if params.albedo.shape != (d_alb,):
        raise DimensionError(f"albedo coefficients: expected {d_alb}, got {params.albedo.shape}")


def evaluate_shape(basis: FaceBasis, params: FaceParams) -> Mesh:
    """Mean shape plus identity and expression axis offsets."""
    _check_params(basis, params)
    v = (
        basis.mean_shape
        + basis.identity_axes @ params.identity
        + basis.expression_axes @ params.expression
    )
    return Mesh(v, basis.triangles)


def evaluate_albedo(basis: FaceBasis, params: FaceParams) -> np.ndarray:
    """Per-vertex color as a flat length-3N array; raw, unclamped."""
    _check_params(basis, params)
    return basis.mean_albedo + basis.albedo_axes @ params.albedo


def project(pose: Pose, vertex) -> np.ndarray:
    """Weak-perspective projection of one 3-vector to image pixels."""
    q = pose.R @ np.asarray(vertex, dtype=float)
    return pose.s * q[:2] + pose.t


def project_points(pose: Pose, points: np.ndarray) -> np.ndarray:
    """Project an (N, 3) array of points; returns (N, 2) pixel positions."""
    q = points @ pose.R.T
    return pose.s * q[:, :2] + pose.t


def camera_space(pose: Pose, points: np.ndarray) -> np.ndarray:
    return points @ pose.R.T


def landmarks_2d(basis: FaceBasis, params: FaceParams, pose: Pose, which: str = "lower") -> np.ndarray:
    """Projected landmark vertex positions, (L, 2), in index order."""
    if which == "lower":
        idx = basis.landmarks_lower
    elif which == "mouth":
        idx = basis.landmarks_mouth
    else:
        raise ValueError(f"unknown landmark set {which!r}")
    mesh = evaluate_shape(basis, params)
    return project_points(pose, mesh.points()[idx])


def _occlusion_depths(qx, qy, tri_q):
    """Interpolated triangle depth over each query point, else -inf.

    tri_q: (T, 3, 3) triangle vertices in camera space. For each query
    point the viewing ray is the z-axis line through (qx, qy); a triangle
    covers the point when its camera-space 2D footprint contains it.
    Returns a (V, T) array of interpolated z where covered, -inf where not.
    """
    ax, ay, az = tri_q[:, 0, 0], tri_q[:, 0, 1], tri_q[:, 0, 2]
    bx, by, bz = tri_q[:, 1, 0], tri_q[:, 1, 1], tri_q[:, 1, 2]
    cx, cy, cz = tri_q[:, 2, 0], tri_q[:, 2, 1], tri_q[:, 2, 2]
    # signed double areas for barycentric coordinates, (V, T) via broadcast
    px = qx[:, None]
    py = qy[:, None]
    d = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
    w0 = (by - cy) * (px - cx) + (cx - bx) * (py - cy)
    w1 = (cy - ay) * (px - cx) + (ax - cx) * (py - cy)
    with np.errstate(divide="ignore", invalid="ignore"):
        l0 = w0 / d
        l1 = w1 / d
    l2 = 1.0 - l0 - l1
    inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0) & np.isfinite(l0) & np.isfinite(l1)
    z = l0 * az + l1 * bz + l2 * cz
    z = np.where(inside, z, -np.inf)
    return z


def visible_vertices(mesh: Mesh, pose: Pose, occluders=(), method: str = "raycast",
                     raster_size: int = 768) -> set[int]:
    """Indices of mesh vertices not hidden along the viewing direction.

    A vertex is visible when no triangle of the mesh or of any occluder
    lies strictly nearer (camera z larger by more than DEPTH_TOL) on the
    viewing ray through it. ``method="zbuffer"`` uses a depth raster of
    at most ``raster_size`` pixels per side instead of exact ray casts;
    both paths agree on well-separated geometry.
    """
    n = mesh.vertex_count
    if n == 0:
        return set()
    pts = camera_space(pose, mesh.points())
    tri_list = []
    if mesh.triangles.size:
        tri_list.append(pts[mesh.triangles])
    for occ in occluders:
        opts = camera_space(pose, occ.points())
        if occ.triangles.size:
            tri_list.append(opts[occ.triangles])
    if not tri_list:
        return set(range(n))
    tris = np.concatenate(tri_list, axis=0)
    if method == "raycast":
        z = _occlusion_depths(pts[:, 0], pts[:, 1], tris)
        occluded = np.any(z > pts[:, 2][:, None] + DEPTH_TOL, axis=1)
        return set(np.nonzero(~occluded)[0].tolist())
    if method == "zbuffer":
        return _visible_zbuffer(pts, tris, raster_size)
    raise ValueError(f"unknown visibility method {method!r}")


def _visible_zbuffer(pts: np.ndarray, tris: np.ndarray, raster_size: int) -> set[int]:
    """Depth-raster variant: sample occluding depth on a uniform grid.

    Vertices are snapped to their nearest grid sample, so accuracy is
    limited by raster_size; intended for large meshes where the all-pairs
    ray cast is too slow.
    """
    flat = tris.reshape(-1, 3)
    lo = flat[:, :2].min(axis=0)
    hi = flat[:, :2].max(axis=0)
    span = max(hi[0] - lo[0], hi[1] - lo[1], 1e-12)
    scale = (raster_size - 1) / span

    depth = np.full((raster_size, raster_size), -np.inf)
    for t in tris:
        p = (t[:, :2] - lo) * scale
        x0, y0 = np.maximum(np.floor(p.min(axis=0)).astype(int), 0)
        x1 = min(int(np.ceil(p[:, 0].max())), raster_size - 1)
        y1 = min(int(np.ceil(p[:, 1].max())), raster_size - 1)
        if x1 < x0 or y1 < y0:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1, dtype=float),
                             np.arange(y0, y1 + 1, dtype=float))
        cell_tri = t.copy()
        cell_tri[:, :2] = p
        zq = _occlusion_depths(gx.ravel(), gy.ravel(), cell_tri[None])[:, 0]
        block = depth[y0:y1 + 1, x0:x1 + 1]
        np.maximum(block, zq.reshape(block.shape), out=block)

    cells = (pts[:, :2] - lo) * scale
    ix = np.clip(np.round(cells[:, 0]).astype(int), 0, raster_size - 1)
    iy = np.clip(np.round(cells[:, 1]).astype(int), 0, raster_size - 1)
    near = depth[iy, ix]
    return set(np.nonzero(near <= pts[:, 2] + DEPTH_TOL)[0].tolist())


def save_basis(basis: FaceBasis, path, seed=None, preset: str = "custom"):
    """Write a basis file plus a JSON sidecar with provenance."""
    n = basis.vertex_count
    d_id, d_exp, d_alb = basis.dims
    tcount = basis.triangles.shape[0]
    header = struct.pack(
        "<7I", n, d_id, d_exp, d_alb, tcount,
        basis.landmarks_lower.shape[0], basis.landmarks_mouth.shape[0],
    )
    payload = [
        basis.mean_shape, basis.mean_albedo,
        basis.identity_axes, basis.expression_axes, basis.albedo_axes,
        basis.identity_scales, basis.expression_scales, basis.albedo_scales,
        basis.triangles, basis.landmarks_lower, basis.landmarks_mouth,
    ]
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(header)
        for arr in payload:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    sidecar = {"preset": preset, "seed": seed, "format": _MAGIC.decode()}
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")


def load_basis(path) -> FaceBasis:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: not a face basis file (bad magic)")
    n, d_id, d_exp, d_alb, tcount, n_lower, n_mouth = struct.unpack_from("<7I", blob, 4)
    off = 4 + 28

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
        off += count * 8
        return arr.reshape(shape)

    mean_shape = take(3 * n, (3 * n,))
    mean_albedo = take(3 * n, (3 * n,))
    axes_id = take(3 * n * d_id, (3 * n, d_id))
    axes_exp = take(3 * n * d_exp, (3 * n, d_exp))
    axes_alb = take(3 * n * d_alb, (3 * n, d_alb))
    s_id = take(d_id, (d_id,))
    s_exp = take(d_exp, (d_exp,))
    s_alb = take(d_alb, (d_alb,))
    tris = take(3 * tcount, (tcount, 3)).astype(np.int64)
    lower = take(n_lower, (n_lower,)).astype(np.int64)
    mouth = take(n_mouth, (n_mouth,)).astype(np.int64)
    if off != len(blob):
        raise DataError(f"{path}: trailing or missing payload bytes")
    return FaceBasis(mean_shape, mean_albedo, axes_id, axes_exp, axes_alb,
                     s_id, s_exp, s_alb, tris, lower, mouth)
