"""Classical pupil extraction: seed, watershed, morphology, ellipse fit.

This is the optimization-route counterpart of the learned eye regressor:
find the darkest 5x5 neighborhood, flood the gradient-magnitude image
from that seed against a border marker, repair glint holes, fit a conic
to the traced boundary, and read pupil centre/size (and a gaze estimate
from the ellipse axis ratio) off the fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EllipseFitError, GeometryError
from .synth_eye import vector_to_gaze

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_FLOOD_LEVELS = 511


@dataclass(frozen=True)
class EllipseFit:
    """Geometric ellipse parameters; orientation is the major-axis angle."""

    centre: np.ndarray
    semi_major: float
    semi_minor: float
    orientation: float

    def __post_init__(self):
        if not self.semi_major >= self.semi_minor > 0:
            raise EllipseFitError("requires semi_major >= semi_minor > 0")


@dataclass(frozen=True)
class PupilMask:
    """Refined binary segmentation plus its ordered closed boundary."""

    mask: np.ndarray
    contour: np.ndarray


def darkest_point(image: np.ndarray) -> tuple[int, int]:
    """Interior pixel minimizing the 5x5 box sum; ties go to the smallest
    row, then the smallest column."""
    img = np.asarray(image, dtype=np.int64)
    if img.shape[0] < 5 or img.shape[1] < 5:
        raise GeometryError("image must be at least 5x5")
    c = np.cumsum(np.cumsum(np.pad(img, ((1, 0), (1, 0))), axis=0), axis=1)
    sums = c[5:, 5:] - c[:-5, 5:] - c[5:, :-5] + c[:-5, :-5]
    flat = int(np.argmin(sums))
    r, col = divmod(flat, sums.shape[1])
    return r + 2, col + 2


def _gradient_magnitude(image: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(np.asarray(image, dtype=float))
    return np.hypot(gy, gx)


def _flood_two_markers(altitude: np.ndarray, seed_rc) -> np.ndarray:
    """Two-marker watershed by level immersion on a quantized altitude map.

    Labels: 1 grows from the seed, 2 from the image border. Within each
    altitude level the two fronts advance one dilation step at a time, so
    contested ridge pixels go to whichever front reaches them first.
    """
    peak = altitude.max()
    q = np.zeros(altitude.shape, dtype=np.int32)
    if peak > 0:
        q = np.rint(altitude / peak * _FLOOD_LEVELS).astype(np.int32)
    labels = np.zeros(altitude.shape, dtype=np.int8)
    labels[seed_rc] = 1
    labels[0, :] = 2
    labels[-1, :] = 2
    labels[:, 0] = 2
    labels[:, -1] = 2
    labels[seed_rc] = 1

    for level in np.unique(q):
        cand = (q <= level) & (labels == 0)
        while cand.any():
            grew = False
            for lab in (1, 2):
                frontier = ndimage.binary_dilation(labels == lab, structure=_CROSS) & cand
                if frontier.any():
                    labels[frontier] = lab
                    cand &= ~frontier
                    grew = True
            if not grew:
                break
    return labels


def _refine(mask: np.ndarray, seed_rc) -> np.ndarray:
    """Hole filling, one 3x3-cross closing, then the seed's component."""
    out = ndimage.binary_fill_holes(mask)
    out = ndimage.binary_closing(out, structure=_CROSS)
    out = ndimage.binary_fill_holes(out)
    comp, _ = ndimage.label(out, structure=_CROSS)
    seed_label = comp[seed_rc]
    if seed_label == 0:
        raise GeometryError("refinement removed the seed pixel")
    return comp == seed_label


_MOORE = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]


def trace_contour(mask: np.ndarray) -> np.ndarray:
    """Moore-neighbor boundary trace with Jacob's stopping criterion.

    Returns the ordered boundary as rows of (r, c); the sequence is a
    closed loop (the last point neighbors the first).
    """
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise GeometryError("empty mask has no contour")
    h, w = mask.shape
    start = (int(rows[0]), int(cols[0]))
    # the west neighbor precedes start in the row-major scan, so it is empty
    back0 = (start[0], start[1] - 1)

    def advance(p, b):
        ib = _MOORE.index((b[0] - p[0], b[1] - p[1]))
        for k in range(1, 9):
            dr, dc = _MOORE[(ib + k) % 8]
            q = (p[0] + dr, p[1] + dc)
            if 0 <= q[0] < h and 0 <= q[1] < w and mask[q]:
                pr, pc = _MOORE[(ib + k - 1) % 8]
                return q, (p[0] + pr, p[1] + pc)
        return None, None

    contour = [start]
    p, b = advance(start, back0)
    if p is None:
        return np.asarray(contour, dtype=np.int64)
    init_state = (p, b)
    while True:
        contour.append(p)
        p, b = advance(p, b)
        if (p, b) == init_state:
            break
        if len(contour) > 4 * mask.size + 8:
            raise GeometryError("contour tracing did not close")
    if contour[-1] == start:
        contour.pop()
    return np.asarray(contour, dtype=np.int64)


def segment_pupil(image: np.ndarray, seed_rc) -> PupilMask:
    """Marker watershed from the seed against the border, then refinement."""
    h, w = image.shape[:2]
    r, c = seed_rc
    if r <= 0 or c <= 0 or r >= h - 1 or c >= w - 1:
        raise GeometryError("seed must not lie on the image border")
    altitude = _gradient_magnitude(image)
    labels = _flood_two_markers(altitude, (r, c))
    mask = _refine(labels == 1, (r, c))
    return PupilMask(mask=mask, contour=trace_contour(mask))


def fit_ellipse(points: np.ndarray) -> EllipseFit:
    """Direct least-squares conic fit constrained to ellipses.

    Uses the numerically stable split-design formulation with the
    4AC - B^2 = 1 normalization; input is (K, 2) of (x, y), K >= 6.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 6:
        raise EllipseFitError("need at least 6 (x, y) points")
    mean = pts.mean(axis=0)
    x = pts[:, 0] - mean[0]
    y = pts[:, 1] - mean[1]

    d1 = np.stack([x * x, x * y, y * y], axis=1)
    d2 = np.stack([x, y, np.ones_like(x)], axis=1)
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError:
        raise EllipseFitError("degenerate point configuration") from None
    m = s1 + s2 @ t
    m = np.stack([m[2] / 2.0, -m[1], m[0] / 2.0])
    eigval, eigvec = np.linalg.eig(m)
    a1 = None
    for i in range(3):
        if abs(eigval[i].imag) > 1e-9:
            continue
        vec = eigvec[:, i].real
        disc = 4 * vec[0] * vec[2] - vec[1] ** 2
        if disc > 0:
            a1 = vec / np.sqrt(disc)
            break
    if a1 is None:
        raise EllipseFitError("no elliptical solution (hyperbolic fit)")
    a2 = t @ a1
    A, B, C = a1
    # undo the centering shift
    mx, my = mean
    D = a2[0] - 2 * A * mx - B * my
    E = a2[1] - B * mx - 2 * C * my
    F = a2[2] + A * mx * mx + B * mx * my + C * my * my - a2[0] * mx - a2[1] * my
    return _conic_to_ellipse(A, B, C, D, E, F)


def _conic_to_ellipse(A, B, C, D, E, F) -> EllipseFit:
    den = B * B - 4 * A * C
    if den >= 0:
        raise EllipseFitError("conic is not an ellipse")
    cx = (2 * C * D - B * E) / den
    cy = (2 * A * E - B * D) / den
    fc = F + (D * cx + E * cy) / 2.0
    theta = 0.5 * np.arctan2(B, A - C)
    ct, st = np.cos(theta), np.sin(theta)
    a_rot = A * ct * ct + B * ct * st + C * st * st
    c_rot = A * st * st - B * ct * st + C * ct * ct
    if a_rot == 0 or c_rot == 0:
        raise EllipseFitError("degenerate conic")
    su2 = -fc / a_rot
    sv2 = -fc / c_rot
    if su2 <= 0 or sv2 <= 0:
        raise EllipseFitError("conic is not a real ellipse")
    su, sv = np.sqrt(su2), np.sqrt(sv2)
    if su >= sv:
        a, b = su, sv
    else:
        a, b = sv, su
        theta += np.pi / 2.0
    return EllipseFit(np.array([cx, cy]), float(a), float(b), float(theta % np.pi))


def pupil_labels(fit: EllipseFit) -> tuple[np.ndarray, float]:
    """(pupil centre, pupil size); size is the full major-axis length."""
    return fit.centre.copy(), 2.0 * fit.semi_major


def gaze_baseline(fit: EllipseFit, image_centre) -> tuple[float, float]:
    """Gaze angles from the ellipse axis ratio.

    Inclination is arccos(minor/major); the tilt direction follows the
    major axis, with its two-fold sign ambiguity resolved toward the
    displacement of the ellipse centre from the image centre.
    """
    ratio = float(np.clip(fit.semi_minor / fit.semi_major, 0.0, 1.0))
    inc = float(np.arccos(ratio))
    u = np.array([np.cos(fit.orientation), np.sin(fit.orientation)])
    d = fit.centre - np.asarray(image_centre, dtype=float)
    if float(u @ d) < 0:
        u = -u
    v = np.array([np.sin(inc) * u[0], -np.sin(inc) * u[1], np.cos(inc)])
    return vector_to_gaze(v)


@dataclass(frozen=True)
class PupilResult:
    seed: tuple
    segmentation: PupilMask
    fit: EllipseFit
    centre: np.ndarray
    size: float
    pitch: float
    yaw: float


def run_pipeline(image: np.ndarray) -> PupilResult:
    """Full classical path from a raw eye frame to labels and gaze."""
    seed = darkest_point(image)
    seg = segment_pupil(image, seed)
    contour_xy = seg.contour[:, ::-1].astype(float)
    fit = fit_ellipse(contour_xy)
    centre, size = pupil_labels(fit)
    h, w = image.shape[:2]
    pitch, yaw = gaze_baseline(fit, ((w - 1) / 2.0, (h - 1) / 2.0))
    return PupilResult(seed, seg, fit, centre, size, pitch, yaw)


def dump_debug_rasters(image: np.ndarray, out_dir):
    """Write the pipeline's intermediate stages as PGM files."""
    import os

    from . import dataio

    os.makedirs(out_dir, exist_ok=True)
    img = np.asarray(image)
    c = np.cumsum(np.cumsum(np.pad(img.astype(np.int64), ((1, 0), (1, 0))), axis=0), axis=1)
    sums = c[5:, 5:] - c[:-5, 5:] - c[5:, :-5] + c[:-5, :-5]
    heat = np.pad(sums, 2, mode="edge").astype(float)
    heat = 255 * (heat - heat.min()) / max(np.ptp(heat), 1)
    dataio.write_pgm(os.path.join(out_dir, "seed_heatmap.pgm"), heat)

    seed = darkest_point(img)
    labels = _flood_two_markers(_gradient_magnitude(img), seed)
    dataio.write_pgm(os.path.join(out_dir, "watershed_labels.pgm"),
                     (labels.astype(np.uint8) * 127))
    seg = segment_pupil(img, seed)
    dataio.write_pgm(os.path.join(out_dir, "refined_mask.pgm"),
                     seg.mask.astype(np.uint8) * 255)

    fit = fit_ellipse(seg.contour[:, ::-1].astype(float))
    overlay = img.copy()
    tt = np.linspace(0, 2 * np.pi, 720)
    ct, st = np.cos(fit.orientation), np.sin(fit.orientation)
    ex = fit.centre[0] + fit.semi_major * np.cos(tt) * ct - fit.semi_minor * np.sin(tt) * st
    ey = fit.centre[1] + fit.semi_major * np.cos(tt) * st + fit.semi_minor * np.sin(tt) * ct
    rr = np.clip(np.rint(ey), 0, img.shape[0] - 1).astype(int)
    cc = np.clip(np.rint(ex), 0, img.shape[1] - 1).astype(int)
    overlay[rr, cc] = 255
    dataio.write_pgm(os.path.join(out_dir, "ellipse_overlay.pgm"), overlay)
