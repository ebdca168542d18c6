"""Recover pose, shared identity, and per-frame expression from landmarks.

The pose solver fits the weak-perspective model in closed form (linear
least squares for an affine camera, then SVD factorization onto a scaled
rotation) and polishes with a few damped Gauss-Newton steps. Identity and
expression are recovered by alternating that pose solve with ridge
least-squares in the coefficients; the objective never increases across
outer iterations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, GeometryError, NumericalError
from .face_model import FaceBasis, Pose

_P2 = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class FrameObservation:
    """Landmark measurements for one frame: vertex index -> pixel position."""

    indices: np.ndarray
    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.indices.shape[0] != self.points.shape[0]:
            raise DataError("indices and points disagree in length")
        if self.indices.shape[0] < 4:
            raise GeometryError("at least 4 landmark correspondences are required")


@dataclass(frozen=True)
class LandmarkObservations:
    frames: tuple

    def __post_init__(self):
        if len(self.frames) == 0:
            raise DataError("at least one frame of observations is required")


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 30
    damping: float = 1e-10
    reg_weight: float = 5e-5
    tol: float = 1e-10

    def __post_init__(self):
        if min(self.max_iters, self.damping, self.reg_weight, self.tol) <= 0:
            raise DataError("fit configuration values must be positive")


@dataclass
class FitResult:
    identity: np.ndarray
    expressions: list
    poses: list
    converged: bool
    objective_history: list


def _rodrigues(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-16:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def _project_so3(m: np.ndarray) -> np.ndarray:
    """Nearest rotation; the smallest singular direction flips if det < 0."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.diag([1.0, 1.0, d])
    return u @ fix @ vt


def _reprojection_cost(pose: Pose, pts3: np.ndarray, pts2: np.ndarray, w: np.ndarray) -> float:
    proj = pose.s * (pts3 @ pose.R.T)[:, :2] + pose.t
    return float((w[:, None] * (proj - pts2) ** 2).sum())


def fit_pose(points3d: np.ndarray, points2d: np.ndarray, weights=None,
             refine_iters: int = 12) -> Pose:
    """Least-squares weak-perspective pose for 3D-2D correspondences."""
    pts3 = np.asarray(points3d, dtype=float).reshape(-1, 3)
    pts2 = np.asarray(points2d, dtype=float).reshape(-1, 2)
    k = pts3.shape[0]
    if k < 4 or pts2.shape[0] != k:
        raise GeometryError("need at least 4 matched 3D-2D points")
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=float)
    wsum = w.sum()

    x_bar = (w[:, None] * pts3).sum(axis=0) / wsum
    p_bar = (w[:, None] * pts2).sum(axis=0) / wsum
    xc = pts3 - x_bar
    pc = pts2 - p_bar

    cov = (w[:, None, None] * (xc[:, :, None] * xc[:, None, :])).sum(axis=0)
    eig = np.sort(np.linalg.eigvalsh(cov))
    if eig[1] <= 1e-12 * max(eig[2], 1e-300):
        raise GeometryError(
            "degenerate landmark configuration: 3D points are collinear (rank < 2)")

    sw = np.sqrt(w)[:, None]
    bt, *_ = np.linalg.lstsq(sw * xc, sw * pc, rcond=None)
    b = bt.T  # 2x3 affine row pair
    u, sig, vt = np.linalg.svd(b, full_matrices=False)
    s = float(sig.mean())
    if s <= 0:
        raise GeometryError("degenerate configuration: zero projected extent")
    r2 = u @ vt
    r = np.vstack([r2, np.cross(r2[0], r2[1])])
    r = _project_so3(r)
    t = p_bar - s * (r @ x_bar)[:2]
    pose = Pose(r, t, s)

    # damped Gauss-Newton polish on (rotation increment, scale, translation)
    cost = _reprojection_cost(pose, pts3, pts2, w)
    lam = 1e-10
    for _ in range(refine_iters):
        rx = pts3 @ pose.R.T
        proj = pose.s * rx[:, :2] + pose.t
        res = (proj - pts2)  # (k, 2)
        jac = np.zeros((k, 2, 6))
        jac[:, 0, 0] = 1.0
        jac[:, 1, 1] = 1.0
        jac[:, :, 2] = rx[:, :2]
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = 1.0
            drx = np.cross(np.broadcast_to(e, rx.shape), rx)
            jac[:, :, 3 + axis] = pose.s * drx[:, :2]
        jw = jac * w[:, None, None]
        jt = jac.reshape(-1, 6)
        jtw = jw.reshape(-1, 6)
        h = jtw.T @ jt + lam * np.eye(6)
        g = jtw.T @ res.reshape(-1)
        try:
            step = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            break
        cand = Pose(
            _project_so3(_rodrigues(step[3:]) @ pose.R),
            pose.t + step[:2],
            max(pose.s + step[2], 1e-12),
        )
        cand_cost = _reprojection_cost(cand, pts3, pts2, w)
        if cand_cost < cost:
            pose, cost = cand, cand_cost
            lam = max(lam / 4, 1e-14)
            if cost < 1e-24:
                break
        else:
            lam *= 16
            if lam > 1e6:
                break
    return pose


def _frame_blocks(basis: FaceBasis, indices: np.ndarray):
    rows3 = (3 * np.asarray(indices, dtype=np.int64)[:, None] + np.arange(3)).ravel()
    mean = basis.mean_shape[rows3].reshape(-1, 3)
    a_id = basis.identity_axes[rows3].reshape(-1, 3, basis.dims[0])
    a_exp = basis.expression_axes[rows3].reshape(-1, 3, basis.dims[1])
    return mean, a_id, a_exp


def _ridge_solve(j: np.ndarray, b: np.ndarray, scales: np.ndarray, w_r: float) -> np.ndarray:
    h = j.T @ j + w_r * np.diag(1.0 / scales ** 2)
    return np.linalg.solve(h, j.T @ b)


def _objective(frames, blocks, poses, x_id, x_exps, scales_id, scales_exp, w_r) -> float:
    total = w_r * float(((x_id / scales_id) ** 2).sum())
    for f, obs in enumerate(frames):
        mean, a_id, a_exp = blocks[f]
        pts3 = mean + a_id @ x_id + a_exp @ x_exps[f]
        proj = poses[f].s * (pts3 @ poses[f].R.T)[:, :2] + poses[f].t
        total += float(((proj - obs.points) ** 2).sum())
        total += w_r * float(((x_exps[f] / scales_exp) ** 2).sum())
    return total


def fit_identity_expression(obs: LandmarkObservations, basis: FaceBasis,
                            config: FitConfig = FitConfig()) -> FitResult:
    """Alternating pose / expression / shared-identity recovery.

    Poses are refit per frame (kept only when they lower that frame's
    reprojection error), then expression and identity are exact ridge
    least-squares solves, so the objective is non-increasing; violation
    beyond rounding raises NumericalError.
    """
    d_id, d_exp, _ = basis.dims
    frames = list(obs.frames)
    blocks = [_frame_blocks(basis, f.indices) for f in frames]
    x_id = np.zeros(d_id)
    x_exps = [np.zeros(d_exp) for _ in frames]
    poses = [None] * len(frames)
    w_r = config.reg_weight
    s_id, s_exp = basis.identity_scales, basis.expression_scales

    history = []
    converged = False
    for it in range(config.max_iters):
        for f, frame in enumerate(frames):
            mean, a_id, a_exp = blocks[f]
            pts3 = mean + a_id @ x_id + a_exp @ x_exps[f]
            w = frame.weights if frame.weights is not None else np.ones(len(frame.indices))
            cand = fit_pose(pts3, frame.points, weights=frame.weights)
            if poses[f] is None or (_reprojection_cost(cand, pts3, frame.points, w)
                                    < _reprojection_cost(poses[f], pts3, frame.points, w)):
                poses[f] = cand

        for f, frame in enumerate(frames):
            mean, a_id, a_exp = blocks[f]
            pose = poses[f]
            pmat = pose.s * (_P2 @ pose.R)
            j = np.einsum("ab,kbd->kad", pmat, a_exp).reshape(-1, d_exp)
            base = (mean + a_id @ x_id) @ pmat.T + pose.t
            b = (frame.points - base).reshape(-1)
            x_exps[f] = _ridge_solve(j, b, s_exp, w_r)

        j_rows, b_rows = [], []
        for f, frame in enumerate(frames):
            mean, a_id, a_exp = blocks[f]
            pose = poses[f]
            pmat = pose.s * (_P2 @ pose.R)
            j_rows.append(np.einsum("ab,kbd->kad", pmat, a_id).reshape(-1, d_id))
            base = (mean + a_exp @ x_exps[f]) @ pmat.T + pose.t
            b_rows.append((frame.points - base).reshape(-1))
        x_id = _ridge_solve(np.concatenate(j_rows), np.concatenate(b_rows), s_id, w_r)

        e = _objective(frames, blocks, poses, x_id, x_exps, s_id, s_exp, w_r)
        if history and e > history[-1] * (1 + 1e-9) + 1e-12:
            raise NumericalError(
                f"objective increased at iteration {it}: {history[-1]} -> {e}")
        done = history and abs(history[-1] - e) <= config.tol * (1.0 + e)
        history.append(e)
        if done:
            converged = True
            break
    return FitResult(identity=x_id, expressions=x_exps, poses=poses,
                     converged=converged, objective_history=history)


# ---------------------------------------------------------------------------
# file interfaces

def read_landmarks_json(path) -> LandmarkObservations:
    """Frames of [vertex index, x, y] triples keyed under "frames"."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise DataError(f"landmarks file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: {e}") from None
    frames = []
    for fr in doc["frames"]:
        triples = np.asarray(fr["points"], dtype=float)
        if triples.ndim != 2 or triples.shape[1] != 3:
            raise DataError("each frame needs [index, x, y] triples")
        frames.append(FrameObservation(indices=triples[:, 0].astype(np.int64),
                                       points=triples[:, 1:3]))
    return LandmarkObservations(frames=tuple(frames))


def write_params_json(result: FitResult, path, albedo=None):
    doc = {
        "identity": result.identity.tolist(),
        "albedo": list(albedo) if albedo is not None else None,
        "converged": result.converged,
        "frames": [
            {
                "expression": result.expressions[f].tolist(),
                "pose": {"R": result.poses[f].R.ravel().tolist(),
                         "t": result.poses[f].t.tolist(),
                         "s": float(result.poses[f].s)},
            }
            for f in range(len(result.expressions))
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
