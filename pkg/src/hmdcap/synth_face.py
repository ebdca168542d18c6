"""Synthetic facial training corpus: seeded bases, rendering, headset masking.

The generator replaces recorded human footage with a procedural pipeline:
a seeded half-ellipsoid face basis, expression and pose trajectories,
flat-shaded z-buffer rendering, black-pixel masking of a procedural
headset proxy, lower-face cropping, and random-crop augmentation. Every
sample carries the exact expression coefficients and pose used to render
it.

Face object space: +x to the face's left in the image, +y down the face
(chin at positive y), +z out of the face toward the viewer. Image pixel
(r, c) samples the projection plane at (x=c, y=r).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import dataio
from .errors import DataError, DimensionError, GeometryError
from .face_model import (
    FaceBasis,
    FaceParams,
    Mesh,
    Pose,
    landmarks_2d,
    project_points,
    save_basis,
)

FACE_SAMPLE_SHAPE = (112, 224)
FACE_REGION_SHAPE = (120, 230)

# half-ellipsoid radii: width, chin-to-forehead, depth
_FACE_RADII = (1.0, 1.3, 0.85)
_MOUTH_CENTER = (0.0, 0.55)  # parametric (azimuth, elevation), chin side positive


@dataclass(frozen=True)
class SyntheticBasisSpec:
    """Recipe for a seeded synthetic face basis."""

    seed: int = 0
    vertex_count: int = 600
    dim_identity: int = 8
    dim_expression: int = 8
    dim_albedo: int = 6
    decay: float = 0.8

    def __post_init__(self):
        if self.vertex_count < 100:
            raise DimensionError("vertex count must be at least 100")
        if min(self.dim_identity, self.dim_expression, self.dim_albedo) < 1:
            raise DimensionError("basis dimensions must be positive")
        if not 0.0 < self.decay < 1.0:
            raise DimensionError("decay must lie in (0, 1)")


def desk_basis_spec(seed: int = 0) -> SyntheticBasisSpec:
    return SyntheticBasisSpec(seed=seed)


def paper_basis_spec(seed: int = 0) -> SyntheticBasisSpec:
    """Full-scale dimensions: 100 identity/albedo axes, 79 expression axes."""
    return SyntheticBasisSpec(seed=seed, vertex_count=5000, dim_identity=100,
                              dim_expression=79, dim_albedo=100, decay=0.95)


def _face_grid(n: int):
    """Parametric grid over the half ellipsoid with exactly n vertices.

    Rows sweep elevation from the chin (+) to the forehead (-); any
    surplus grid points are trimmed from the tail, which removes a corner
    of the forehead region (hidden behind the headset anyway).
    """
    rows = max(3, int(np.sqrt(n / 2.0)))
    cols = int(np.ceil(n / rows))
    total = rows * cols
    u = np.linspace(-1.2, 1.2, cols)          # azimuth, left to right
    w = np.linspace(1.2, -1.2, rows)          # elevation, chin to forehead
    uu, ww = np.meshgrid(u, w)
    uv = np.stack([uu.ravel(), ww.ravel()], axis=1)[:n]

    tris = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            a = r * cols + c
            b = a + 1
            d = a + cols
            e = d + 1
            if max(a, b, d) < n:
                tris.append((a, b, d))
            if max(d, b, e) < n:
                tris.append((d, b, e))
    return uv, np.asarray(tris, dtype=np.int64)


def _ellipsoid_points(uv: np.ndarray) -> np.ndarray:
    ax, ay, az = _FACE_RADII
    u, w = uv[:, 0], uv[:, 1]
    x = ax * np.cos(w) * np.sin(u)
    y = ay * np.sin(w)
    z = az * np.cos(w) * np.cos(u)
    return np.stack([x, y, z], axis=1)


def _smooth_fields(uv: np.ndarray, count: int, rng, weight=None) -> np.ndarray:
    """Random low-frequency scalar fields over the grid, one column each.

    A pinch of white noise keeps the columns linearly independent so the
    later orthonormalization cannot collapse.
    """
    n = uv.shape[0]
    cols = np.empty((3 * n, count))
    for k in range(count):
        field3 = np.empty((n, 3))
        for ch in range(3):
            acc = np.zeros(n)
            for _ in range(4):
                freq = rng.uniform(0.5, 3.5, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                amp = rng.uniform(0.3, 1.0)
                acc += amp * np.sin(freq[0] * uv[:, 0] + freq[1] * uv[:, 1] + phase)
            acc += 0.08 * rng.standard_normal(n)
            field3[:, ch] = acc
        if weight is not None:
            field3 *= weight[:, None]
        cols[:, k] = field3.ravel()
    return cols


def _orthonormalize(cols: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt, run twice for numerical orthonormality."""
    q = cols.astype(float).copy()
    for _ in range(2):
        for j in range(q.shape[1]):
            for i in range(j):
                q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
            norm = np.linalg.norm(q[:, j])
            if norm < 1e-12:
                raise GeometryError("basis columns are linearly dependent")
            q[:, j] /= norm
    return q


def _pick_landmarks(uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """29 lower-face vertex indices: a 12-vertex mouth ring plus a jaw arc."""
    mu, mw = _MOUTH_CENTER
    targets = []
    for k in range(12):
        ang = 2 * np.pi * k / 12
        targets.append((mu + 0.42 * np.cos(ang), mw + 0.24 * np.sin(ang)))
    for k in range(17):
        f = k / 16.0
        targets.append((-1.02 + 2.04 * f, 0.92 + 0.16 * np.sin(np.pi * f)))
    chosen = []
    for tu, tw in targets:
        d2 = (uv[:, 0] - tu) ** 2 + (uv[:, 1] - tw) ** 2
        order = np.argsort(d2, kind="stable")
        pick = next(i for i in order if i not in chosen)
        chosen.append(int(pick))
    lower = np.asarray(chosen, dtype=np.int64)
    mouth = lower[:12].copy()
    return lower, mouth


def gen_basis(spec: SyntheticBasisSpec) -> FaceBasis:
    """Deterministic synthetic basis with orthonormal axes and decaying scales."""
    uv, tris = _face_grid(spec.vertex_count)
    n = uv.shape[0]
    if max(spec.dim_identity, spec.dim_expression, spec.dim_albedo) > 3 * n:
        raise DimensionError("basis dimension exceeds 3N")
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))

    mean_shape = _ellipsoid_points(uv).ravel()

    mu, mw = _MOUTH_CENTER
    d2 = (uv[:, 0] - mu) ** 2 + ((uv[:, 1] - mw) / 0.8) ** 2
    mouth_weight = np.exp(-d2 / (2 * 0.45 ** 2))

    skin = np.array([0.75, 0.62, 0.55])
    albedo = np.tile(skin, (n, 1))
    albedo -= mouth_weight[:, None] * np.array([0.10, 0.28, 0.25])
    wash = 0.05 * np.sin(2.1 * uv[:, 0] + 0.7) * np.cos(1.3 * uv[:, 1])
    albedo += wash[:, None]
    mean_albedo = np.clip(albedo, 0.05, 0.95).ravel()

    axes_id = _orthonormalize(_smooth_fields(uv, spec.dim_identity, rng))
    axes_exp = _orthonormalize(_smooth_fields(uv, spec.dim_expression, rng, weight=mouth_weight))
    axes_alb = _orthonormalize(_smooth_fields(uv, spec.dim_albedo, rng))

    scales = lambda d: spec.decay ** np.arange(d, dtype=float)
    lower, mouth = _pick_landmarks(uv)
    return FaceBasis(
        mean_shape=mean_shape,
        mean_albedo=mean_albedo,
        identity_axes=axes_id,
        expression_axes=axes_exp,
        albedo_axes=axes_alb,
        identity_scales=scales(spec.dim_identity),
        expression_scales=scales(spec.dim_expression),
        albedo_scales=scales(spec.dim_albedo),
        triangles=tris,
        landmarks_lower=lower,
        landmarks_mouth=mouth,
    )


# ---------------------------------------------------------------------------
# headset proxy

@dataclass(frozen=True)
class HmdProxy:
    """Watertight headset shell positioned over the upper face."""

    mesh: Mesh
    mount_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def placed_points(self) -> np.ndarray:
        return self.scale * self.mesh.points() + self.mount_offset


def default_hmd_proxy() -> HmdProxy:
    """Chamfered box covering the face above the mouth at identity pose."""
    ch = 0.2
    x0, x1 = -1.12, 1.12
    y0, y1 = -1.45, 0.12   # forehead side is negative y
    z0, z1 = 0.25, 1.2
    ring = [
        (x0 + ch, y0), (x1 - ch, y0), (x1, y0 + ch), (x1, y1 - ch),
        (x1 - ch, y1), (x0 + ch, y1), (x0, y1 - ch), (x0, y0 + ch),
    ]
    verts = [(x, y, z0) for x, y in ring] + [(x, y, z1) for x, y in ring]
    cx = (x0 + x1) / 2
    cy = (y0 + y1) / 2
    verts += [(cx, cy, z0), (cx, cy, z1)]
    back_c, front_c = 16, 17
    tris = []
    for i in range(8):
        j = (i + 1) % 8
        tris.append((i, j, 8 + i))
        tris.append((8 + i, j, 8 + j))
        tris.append((back_c, j, i))
        tris.append((front_c, 8 + i, 8 + j))
    mesh = Mesh(np.asarray(verts, dtype=float).ravel(), np.asarray(tris, dtype=np.int64))
    return HmdProxy(mesh=mesh)


# ---------------------------------------------------------------------------
# rasterization

def _triangle_cover(tri2d: np.ndarray, width: int, height: int):
    """Pixels whose lattice point lies inside the 2D triangle (edges included).

    Returns (rows, cols, bary) where bary is (k, 3) barycentric weights.
    """
    xs, ys = tri2d[:, 0], tri2d[:, 1]
    det = (ys[1] - ys[2]) * (xs[0] - xs[2]) + (xs[2] - xs[1]) * (ys[0] - ys[2])
    if abs(det) < 1e-12:
        return None
    c0 = max(int(np.ceil(xs.min())), 0)
    c1 = min(int(np.floor(xs.max())), width - 1)
    r0 = max(int(np.ceil(ys.min())), 0)
    r1 = min(int(np.floor(ys.max())), height - 1)
    if c1 < c0 or r1 < r0:
        return None
    cc, rr = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
    px = cc.astype(float)
    py = rr.astype(float)
    l0 = ((ys[1] - ys[2]) * (px - xs[2]) + (xs[2] - xs[1]) * (py - ys[2])) / det
    l1 = ((ys[2] - ys[0]) * (px - xs[2]) + (xs[0] - xs[2]) * (py - ys[2])) / det
    l2 = 1.0 - l0 - l1
    inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    if not inside.any():
        return None
    rows = rr[inside]
    cols = cc[inside]
    bary = np.stack([l0[inside], l1[inside], l2[inside]], axis=1)
    return rows, cols, bary


def render_face(basis: FaceBasis, params: FaceParams, pose: Pose,
                width: int, height: int, light_dir=(0.25, -0.2, 1.0),
                rgb: bool = False) -> np.ndarray:
    """Flat-shaded z-buffer render; background pixels are 255.

    Vertex colors are barycentrically interpolated, the Lambert factor
    uses the per-triangle camera-space normal (flipped toward the viewer),
    and grayscale output averages the three color channels.
    """
    from .face_model import camera_space, evaluate_albedo, evaluate_shape

    if width <= 0 or height <= 0:
        raise GeometryError("zero-area viewport")
    mesh = evaluate_shape(basis, params)
    colors = np.clip(evaluate_albedo(basis, params).reshape(-1, 3), 0.0, 1.0)
    if not rgb:
        colors = colors.mean(axis=1, keepdims=True)

    q = camera_space(pose, mesh.points())
    screen = pose.s * q[:, :2] + pose.t
    light = np.asarray(light_dir, dtype=float)
    light = light / np.linalg.norm(light)

    channels = colors.shape[1]
    img = np.full((height, width, channels), 255.0)
    zbuf = np.full((height, width), -np.inf)

    for tri in basis.triangles:
        cover = _triangle_cover(screen[tri], width, height)
        if cover is None:
            continue
        rows, cols, bary = cover
        depth = bary @ q[tri, 2]
        better = depth > zbuf[rows, cols]
        if not better.any():
            continue
        rows, cols, bary, depth = rows[better], cols[better], bary[better], depth[better]

        a, b, c = q[tri]
        normal = np.cross(b - a, c - a)
        nn = np.linalg.norm(normal)
        if nn < 1e-15:
            continue
        normal /= nn
        if normal[2] < 0:
            normal = -normal
        lambert = max(0.0, float(normal @ light))

        shade = (bary @ colors[tri]) * (255.0 * lambert)
        zbuf[rows, cols] = depth
        img[rows, cols] = shade

    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img[:, :, 0] if not rgb else img


def hmd_pixel_set(image_shape, hmd: HmdProxy, pose: Pose) -> np.ndarray:
    """Boolean mask of pixels inside the projected headset triangles."""
    height, width = image_shape[:2]
    pts = project_points(pose, hmd.placed_points())
    mask = np.zeros((height, width), dtype=bool)
    for tri in hmd.mesh.triangles:
        cover = _triangle_cover(pts[tri], width, height)
        if cover is None:
            continue
        rows, cols, _ = cover
        mask[rows, cols] = True
    return mask


def mask_hmd(image: np.ndarray, hmd: HmdProxy, pose: Pose) -> np.ndarray:
    """Black out every pixel covered by the projected headset; copy returned."""
    out = image.copy()
    mask = hmd_pixel_set(image.shape, hmd, pose)
    out[mask] = 0
    return out


# ---------------------------------------------------------------------------
# cropping

def face_window(image_shape, pose: Pose, basis: FaceBasis, params: FaceParams):
    """Top-left corner of the 120x230 lower-face window, clamped in-bounds."""
    height, width = image_shape[:2]
    wh, ww = FACE_REGION_SHAPE
    if height < wh or width < ww:
        raise DataError(f"image smaller than the {wh}x{ww} face region")
    lm = landmarks_2d(basis, params, pose, "lower")
    if (lm[:, 0].min() < 0 or lm[:, 0].max() > width - 1
            or lm[:, 1].min() < 0 or lm[:, 1].max() > height - 1):
        raise DataError("lower-face landmarks project outside the image")
    cx, cy = lm.mean(axis=0)
    top = int(np.clip(round(cy) - wh // 2, 0, height - wh))
    left = int(np.clip(round(cx) - ww // 2, 0, width - ww))
    return top, left


def crop_face_region(image: np.ndarray, pose: Pose, basis: FaceBasis,
                     params: FaceParams) -> np.ndarray:
    """120x230 window centered on the projected lower-landmark centroid."""
    top, left = face_window(image.shape, pose, basis, params)
    wh, ww = FACE_REGION_SHAPE
    return image[top:top + wh, left:left + ww].copy()


def random_crops(region: np.ndarray, count: int = 10, seed=0):
    """Random 112x224 crops of a 120x230 region plus their (row, col) offsets."""
    if region.shape[:2] != FACE_REGION_SHAPE:
        raise DimensionError(f"expected a {FACE_REGION_SHAPE} region, got {region.shape[:2]}")
    if count < 1:
        raise DimensionError("count must be at least 1")
    ch, cw = FACE_SAMPLE_SHAPE
    rng = np.random.default_rng(seed)
    span = (FACE_REGION_SHAPE[0] - ch + 1, FACE_REGION_SHAPE[1] - cw + 1)
    offsets = rng.integers(0, span, size=(count, 2))
    crops = [region[r:r + ch, c:c + cw].copy() for r, c in offsets]
    return crops, offsets


# ---------------------------------------------------------------------------
# trajectories and dataset generation

def rotation_ypr(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """R = Rz(roll) @ Rx(pitch) @ Ry(yaw), angles in radians."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ rx @ ry


@dataclass(frozen=True)
class GenFaceConfig:
    """Sizes, trajectory amplitudes, and camera setup for corpus generation."""

    subjects: int = 1
    frames_per_subject: int = 8
    crops_per_frame: int = 10
    width: int = 320
    height: int = 280
    scale: float = 110.0
    yaw_deg: float = 15.0
    pitch_deg: float = 12.0
    roll_deg: float = 4.0
    jitter_px: float = 6.0
    expression_gain: float = 1.0
    identity_gain: float = 1.0
    light_dir: tuple = (0.25, -0.2, 1.0)
    rgb: bool = False
    test_subjects: tuple = ()
    keep_prerender: bool = False

    @property
    def total_samples(self) -> int:
        return self.subjects * self.frames_per_subject * self.crops_per_frame


def paper_face_config() -> GenFaceConfig:
    """Full-scale corpus arithmetic: 8608 base frames, 10 crops each."""
    return GenFaceConfig(subjects=1, frames_per_subject=8608)


def _subject_identity(basis: FaceBasis, rng, gain: float):
    ident = gain * basis.identity_scales * rng.standard_normal(basis.dims[0])
    alb = 0.8 * basis.albedo_scales * rng.standard_normal(basis.dims[2])
    return ident, alb


def _expression_trajectory(basis: FaceBasis, rng, frames: int, gain: float) -> np.ndarray:
    """Smooth per-axis sinusoids imitating mouth open/close and smiles."""
    d = basis.dims[1]
    amp = gain * basis.expression_scales * rng.uniform(0.4, 1.3, size=d)
    freq = rng.uniform(0.5, 2.5, size=d)
    phase = rng.uniform(0, 2 * np.pi, size=d)
    t = np.arange(frames) / max(frames, 1)
    return amp[None, :] * np.sin(2 * np.pi * freq[None, :] * t[:, None] + phase[None, :])


def _pose_trajectory(cfg: GenFaceConfig, rng, frames: int) -> list[Pose]:
    phases = rng.uniform(0, 2 * np.pi, size=5)
    freqs = rng.uniform(0.6, 1.8, size=5)
    t = np.arange(frames) / max(frames, 1)
    deg = np.pi / 180.0
    poses = []
    cx = cfg.width / 2.0
    cy = cfg.height / 2.0 - 0.15 * cfg.height
    for i in range(frames):
        yaw = cfg.yaw_deg * deg * np.sin(2 * np.pi * freqs[0] * t[i] + phases[0])
        pitch = cfg.pitch_deg * deg * np.sin(2 * np.pi * freqs[1] * t[i] + phases[1])
        roll = cfg.roll_deg * deg * np.sin(2 * np.pi * freqs[2] * t[i] + phases[2])
        jx = cfg.jitter_px * np.sin(2 * np.pi * freqs[3] * t[i] + phases[3])
        jy = cfg.jitter_px * np.sin(2 * np.pi * freqs[4] * t[i] + phases[4])
        s = cfg.scale * (1.0 + 0.04 * np.sin(2 * np.pi * t[i] + phases[0]))
        poses.append(Pose(rotation_ypr(yaw, pitch, roll), np.array([cx + jx, cy + jy]), s))
    return poses


def _pose_record(pose: Pose) -> dict:
    return {"R": pose.R.ravel().tolist(), "t": pose.t.tolist(), "s": float(pose.s)}


def pose_from_record(rec: dict) -> Pose:
    return Pose(np.asarray(rec["R"], dtype=float).reshape(3, 3),
                np.asarray(rec["t"], dtype=float), float(rec["s"]))


def gen_face_dataset(basis: FaceBasis, cfg: GenFaceConfig, hmd: HmdProxy,
                     out_dir, seed: int = 0) -> dataio.DatasetManifest:
    """Render, mask, crop, and augment a labeled facial corpus on disk."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    if cfg.keep_prerender:
        os.makedirs(os.path.join(out_dir, "rendered"), exist_ok=True)
    ext = ".png" if cfg.rgb else ".pgm"

    basis_rel = "basis.feb"
    save_basis(basis, os.path.join(out_dir, basis_rel), seed=seed, preset="generated")

    config_echo = asdict(cfg)
    config_echo.update({
        "seed": seed,
        "pixel_convention": "image[r,c] samples (x=c, y=r), origin top-left",
        "sample_shape": list(FACE_SAMPLE_SHAPE),
        "region_shape": list(FACE_REGION_SHAPE),
        "test_subjects": list(cfg.test_subjects),
        "light_dir": list(cfg.light_dir),
    })
    manifest = dataio.DatasetManifest(kind="face", config=config_echo,
                                      basis_path=basis_rel, root=str(out_dir))
    labels: list[dict] = []
    rejected = 0

    for subj in range(cfg.subjects):
        srng = np.random.default_rng(np.random.SeedSequence([seed, subj]))
        ident, alb = _subject_identity(basis, srng, cfg.identity_gain)
        exps = _expression_trajectory(basis, srng, cfg.frames_per_subject, cfg.expression_gain)
        poses = _pose_trajectory(cfg, srng, cfg.frames_per_subject)
        split = "test" if subj in cfg.test_subjects else "train"
        manifest.subjects.append({
            "id": subj, "split": split,
            "identity": ident.tolist(), "albedo": alb.tolist(),
        })
        for fr in range(cfg.frames_per_subject):
            params = FaceParams(ident, exps[fr], alb)
            pose = poses[fr]
            img = render_face(basis, params, pose, cfg.width, cfg.height,
                              light_dir=cfg.light_dir, rgb=cfg.rgb)
            prerender_rel = None
            if cfg.keep_prerender:
                prerender_rel = f"rendered/{subj:03d}_{fr:05d}{ext}"
                dataio.write_image(os.path.join(out_dir, prerender_rel), img)
            masked = mask_hmd(img, hmd, pose)
            try:
                region = crop_face_region(masked, pose, basis, params)
            except DataError:
                rejected += 1
                continue
            frame_id = len(manifest.frames)
            manifest.frames.append({
                "id": frame_id, "subject": subj, "frame": fr,
                "expression": exps[fr].tolist(), "pose": _pose_record(pose),
                "prerender": prerender_rel,
            })
            crop_seed = np.random.SeedSequence([seed, subj, fr])
            crops, offsets = random_crops(region, cfg.crops_per_frame, seed=crop_seed)
            for k, (crop, off) in enumerate(zip(crops, offsets)):
                idx = len(manifest.samples)
                rel = f"images/{idx:06d}{ext}"
                dataio.write_image(os.path.join(out_dir, rel), crop)
                manifest.samples.append({
                    "image": rel, "subject": subj, "frame_id": frame_id,
                    "split": split, "crop_offset": [int(off[0]), int(off[1])],
                })
                labels.append({
                    "expression": exps[fr].tolist(),
                    "pose": _pose_record(pose),
                    "crop_offset": [int(off[0]), int(off[1])],
                    "subject": subj,
                    "frame_id": frame_id,
                })
    manifest.config["rejected_frames"] = rejected
    dataio.save_manifest(manifest, labels)
    return manifest
