"""Per-frame integration, retargeting, metrics, and benchmarking.

This is the online path: given a masked face frame, two eye frames, and a
pose from the pose provider, run both regressors and assemble a complete
avatar state with per-stage timings. Evaluation mirrors the two offline
protocols: mean 2D landmark error over the 29 lower-face landmarks, and
mean angular gaze error against the classical ellipse-ratio baseline.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace, field

import numpy as np

from . import dataio, nets, pupil
from .errors import DataError, DimensionError
from .face_model import FaceBasis, FaceParams, Mesh, Pose, evaluate_albedo, evaluate_shape, landmarks_2d, visible_vertices
from .synth_eye import EyeState, eye_network_input, gaze_to_vector
from .synth_face import (FACE_SAMPLE_SHAPE, FACE_REGION_SHAPE, HmdProxy,
                         crop_face_region, pose_from_record)


@dataclass(frozen=True)
class AvatarState:
    """One frame of integrated capture output."""

    identity: np.ndarray
    albedo: np.ndarray
    expression: np.ndarray
    pose: Pose
    left_eye: EyeState | None
    right_eye: EyeState | None
    frame: int
    timings_ms: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PoseProvider:
    """Pose lookup by frame id; stands in for live marker tracking."""

    poses: dict

    @classmethod
    def from_manifest(cls, manifest: dataio.DatasetManifest) -> "PoseProvider":
        return cls({fr["id"]: pose_from_record(fr["pose"]) for fr in manifest.frames})

    @classmethod
    def from_json(cls, path) -> "PoseProvider":
        try:
            with open(path) as f:
                doc = json.load(f)
        except FileNotFoundError:
            raise DataError(f"pose file not found: {path}") from None
        return cls({fr["id"]: pose_from_record(fr["pose"]) for fr in doc["frames"]})

    def get(self, frame_id: int) -> Pose | None:
        return self.poses.get(frame_id)


def _as_face_regressor(net_or_fn):
    if isinstance(net_or_fn, nets.Network):
        return lambda img: nets.predict_expression(net_or_fn, img)
    return net_or_fn


def _as_eye_regressor(net_or_fn):
    if isinstance(net_or_fn, nets.Network):
        return lambda frame: nets.predict_eye(net_or_fn, eye_network_input(frame))
    return net_or_fn


def process_frame(face_image, eye_images, pose: Pose, facial_net, eye_net,
                  identity: FaceParams, basis: FaceBasis, frame_id: int = 0) -> AvatarState:
    """Crop, regress, and assemble one frame; wall-clock per stage in ms.

    ``facial_net``/``eye_net`` may be Network instances or callables (a
    callable facial regressor maps a 112x224 crop to expression
    coefficients; an eye regressor maps a full eye frame to an EyeState).
    """
    face_fn = _as_face_regressor(facial_net)
    eye_fn = _as_eye_regressor(eye_net)
    timings = {}

    t0 = time.perf_counter()
    region = crop_face_region(face_image, pose, basis, identity)
    dr = (FACE_REGION_SHAPE[0] - FACE_SAMPLE_SHAPE[0]) // 2
    dc = (FACE_REGION_SHAPE[1] - FACE_SAMPLE_SHAPE[1]) // 2
    crop = region[dr:dr + FACE_SAMPLE_SHAPE[0], dc:dc + FACE_SAMPLE_SHAPE[1]]
    timings["face_crop"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    expression = np.asarray(face_fn(crop), dtype=float)
    timings["face_net"] = (time.perf_counter() - t0) * 1e3

    eyes = []
    t0 = time.perf_counter()
    for eye_img in eye_images:
        eyes.append(eye_fn(eye_img) if eye_img is not None else None)
    timings["eye_net"] = (time.perf_counter() - t0) * 1e3
    while len(eyes) < 2:
        eyes.append(None)

    timings["total"] = sum(timings.values())
    return AvatarState(identity=identity.identity.copy(), albedo=identity.albedo.copy(),
                       expression=expression, pose=pose, left_eye=eyes[0],
                       right_eye=eyes[1], frame=frame_id, timings_ms=timings)


def retarget(state: AvatarState, new_identity, new_albedo) -> AvatarState:
    """Same performance on a different avatar: swap identity and albedo only."""
    new_identity = np.asarray(new_identity, dtype=float)
    new_albedo = np.asarray(new_albedo, dtype=float)
    if new_identity.shape != state.identity.shape or new_albedo.shape != state.albedo.shape:
        raise DimensionError("retarget coefficients must match the avatar's dimensions")
    return replace(state, identity=new_identity, albedo=new_albedo)


def export_avatar(state: AvatarState, basis: FaceBasis, path_prefix):
    """Write `<prefix>.obj` with vertex colors and `<prefix>_gaze.json`."""
    params = FaceParams(state.identity, state.expression, state.albedo)
    mesh = evaluate_shape(basis, params)
    colors = np.clip(evaluate_albedo(basis, params).reshape(-1, 3), 0.0, 1.0)
    pts = mesh.points()
    obj_path = f"{path_prefix}.obj"
    with open(obj_path, "w") as f:
        for p, c in zip(pts, colors):
            f.write("v " + " ".join(f"{v:.9g}" for v in (*p, *c)) + "\n")
        for tri in basis.triangles:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")
    gaze = {}
    for name, eye in (("left", state.left_eye), ("right", state.right_eye)):
        if eye is not None:
            gaze[name] = gaze_to_vector(eye.pitch, eye.yaw).tolist()
    with open(f"{path_prefix}_gaze.json", "w") as f:
        json.dump({"frame": state.frame, "gaze": gaze}, f, indent=1)
        f.write("\n")
    return obj_path


# ---------------------------------------------------------------------------
# metrics

def mean_landmark_error(states, manifest: dataio.DatasetManifest, basis: FaceBasis) -> float:
    """Mean L2 distance (pixels) between predicted and true lower landmarks."""
    frames = {fr["id"]: fr for fr in manifest.frames}
    subjects = {s["id"]: s for s in manifest.subjects}
    total = 0.0
    count = 0
    for st in states:
        if st.frame not in frames:
            raise DataError(f"no ground-truth frame with id {st.frame}")
        fr = frames[st.frame]
        subj = subjects[fr["subject"]]
        gt_params = FaceParams(np.asarray(subj["identity"]),
                               np.asarray(fr["expression"]),
                               np.asarray(subj["albedo"]))
        gt_pose = pose_from_record(fr["pose"])
        lm_gt = landmarks_2d(basis, gt_params, gt_pose, "lower")
        pred_params = FaceParams(st.identity, st.expression, st.albedo)
        lm_pred = landmarks_2d(basis, pred_params, st.pose, "lower")
        total += float(np.linalg.norm(lm_pred - lm_gt, axis=1).mean())
        count += 1
    if count == 0:
        raise DataError("no states to evaluate")
    return total / count


def mean_gaze_error(predicted, labels) -> float:
    """Mean angle in degrees between predicted and labeled gaze vectors."""
    if len(predicted) != len(labels):
        raise DataError("prediction and label counts differ")
    total = 0.0
    for p, l in zip(predicted, labels):
        vp = gaze_to_vector(p.pitch, p.yaw) if isinstance(p, EyeState) else gaze_to_vector(*p)
        vl = gaze_to_vector(l.pitch, l.yaw) if isinstance(l, EyeState) else gaze_to_vector(*l)
        cosang = np.clip(vp @ vl / (np.linalg.norm(vp) * np.linalg.norm(vl)), -1.0, 1.0)
        total += float(np.degrees(np.arccos(cosang)))
    return total / len(predicted)


# ---------------------------------------------------------------------------
# dataset adapters

def face_training_data(manifest: dataio.DatasetManifest, labels, basis: FaceBasis,
                       hmd: HmdProxy | None = None, split: str = "train",
                       dense_weight: float = 0.0, landmark_weight: float = 0.0):
    """Images, labels, and per-frame loss matrices for the facial trainer.

    The dense term's visible-vertex set is computed once per frame from
    the label mesh, occluded by the placed headset proxy when given.
    """
    xs, ys, aux = [], [], []
    wanted = [i for i, s in enumerate(manifest.samples) if s["split"] == split]
    if not wanted:
        raise DataError(f"no samples with split {split!r}")
    frames = {fr["id"]: fr for fr in manifest.frames}
    subjects = {s["id"]: s for s in manifest.subjects}
    need = sorted({manifest.samples[i]["frame_id"] for i in wanted})
    matrices = {}
    occ = []
    if hmd is not None:
        occ = [Mesh(hmd.placed_points().ravel(), hmd.mesh.triangles)]
    for fid in need:
        fr = frames[fid]
        pose = pose_from_record(fr["pose"])
        if dense_weight != 0.0:
            subj = subjects[fr["subject"]]
            params = FaceParams(np.asarray(subj["identity"]),
                                np.asarray(fr["expression"]),
                                np.asarray(subj["albedo"]))
            mesh = evaluate_shape(basis, params)
            vis = sorted(visible_vertices(mesh, pose, occ))
        else:
            vis = []
        matrices[fid] = nets.facial_loss_matrix(basis, pose, dense_weight,
                                                landmark_weight, vis)
    for i in wanted:
        rec = manifest.samples[i]
        img = dataio.read_image(manifest.path(rec["image"]))
        xs.append(nets.to_unit(img)[None].astype(np.float32))
        ys.append(np.asarray(labels[i]["expression"], dtype=float))
        aux.append(rec["frame_id"])
    data = nets.TrainingData(inputs=np.stack(xs), labels=np.stack(ys), aux=aux)
    return data, matrices


def eye_training_data(manifest: dataio.DatasetManifest, labels, split: str = "train"):
    xs, ys = [], []
    for i, rec in enumerate(manifest.samples):
        if rec["split"] != split:
            continue
        img = dataio.read_image(manifest.path(rec["image"]))
        xs.append(nets.to_unit(img)[None].astype(np.float32))
        lab = labels[i]
        ys.append(np.array([lab["pitch"], lab["yaw"], lab["pupil_size"],
                            lab["centre"][0], lab["centre"][1]]))
    if not xs:
        raise DataError(f"no samples with split {split!r}")
    return nets.TrainingData(inputs=np.stack(xs), labels=np.stack(ys))


def evaluate_face(manifest: dataio.DatasetManifest, labels, basis: FaceBasis,
                  facial_net, split: str = "test") -> float:
    """Predict per test crop and score the landmark metric against labels."""
    face_fn = _as_face_regressor(facial_net)
    frames = {fr["id"]: fr for fr in manifest.frames}
    subjects = {s["id"]: s for s in manifest.subjects}
    states = []
    for i, rec in enumerate(manifest.samples):
        if rec["split"] != split:
            continue
        img = dataio.read_image(manifest.path(rec["image"]))
        exp = np.asarray(face_fn(img), dtype=float)
        fr = frames[rec["frame_id"]]
        subj = subjects[fr["subject"]]
        states.append(AvatarState(
            identity=np.asarray(subj["identity"]), albedo=np.asarray(subj["albedo"]),
            expression=exp, pose=pose_from_record(fr["pose"]),
            left_eye=None, right_eye=None, frame=rec["frame_id"]))
    if not states:
        raise DataError(f"no samples with split {split!r}")
    return mean_landmark_error(states, manifest, basis)


def eye_test_frames(manifest: dataio.DatasetManifest, split: str = "test"):
    """(image, EyeState label) pairs for stored full frames of a split."""
    out = []
    for fr in manifest.frames:
        if fr["split"] != split or not fr.get("frame_path"):
            continue
        img = dataio.read_image(manifest.path(fr["frame_path"]))
        out.append((img, EyeState.from_vector(fr["state"]), fr["id"]))
    if not out:
        raise DataError(f"no stored frames with split {split!r}")
    return out


def evaluate_eye(manifest: dataio.DatasetManifest, eye_net, split: str = "test",
                 with_baseline: bool = True) -> dict:
    """Gaze error and per-frame latency for the regressor and the baseline."""
    eye_fn = _as_eye_regressor(eye_net)
    frames = eye_test_frames(manifest, split)
    preds, labels = [], []
    t_net = 0.0
    for img, label, _ in frames:
        t0 = time.perf_counter()
        preds.append(eye_fn(img))
        t_net += time.perf_counter() - t0
        labels.append(label)
    report = {
        "frames": len(frames),
        "net_gaze_error_deg": mean_gaze_error(preds, labels),
        "net_ms_per_frame": 1e3 * t_net / len(frames),
    }
    if with_baseline:
        base_preds = []
        t_base = 0.0
        for img, _, _ in frames:
            t0 = time.perf_counter()
            res = pupil.run_pipeline(img)
            t_base += time.perf_counter() - t0
            base_preds.append((res.pitch, res.yaw))
        report["baseline_gaze_error_deg"] = mean_gaze_error(base_preds, labels)
        report["baseline_ms_per_frame"] = 1e3 * t_base / len(frames)
    return report


# ---------------------------------------------------------------------------
# benchmarking

# Published figures for the full-scale real-time system; kept for the
# comparison table, never asserted.
REFERENCE_MS = {"face_net": 31.5, "eye_net": 2.18, "pupil_baseline": 136.9,
                "end_to_end_30fps": 33.3}


@dataclass
class BenchReport:
    mean_ms: float
    median_ms: float
    p95_ms: float
    frames: int
    stage_means: dict

    def table(self) -> str:
        lines = ["stage                measured_ms   reference_ms",
                 "-----                -----------   ------------"]
        for stage, ms in self.stage_means.items():
            ref = REFERENCE_MS.get(stage)
            ref_s = f"{ref:12.2f}" if ref is not None else "           -"
            lines.append(f"{stage:<20} {ms:11.3f}   {ref_s}")
        lines.append(f"{'total (mean)':<20} {self.mean_ms:11.3f}   "
                     f"{REFERENCE_MS['end_to_end_30fps']:12.2f}")
        lines.append(f"{'total (median)':<20} {self.median_ms:11.3f}              -")
        lines.append(f"{'total (p95)':<20} {self.p95_ms:11.3f}              -")
        return "\n".join(lines)


def benchmark(fn, frames, warmup: int = 5) -> BenchReport:
    """Per-frame wall clock for fn over frames, after warmup frames."""
    frames = list(frames)
    if len(frames) < 10:
        raise DataError("benchmarking needs at least 10 frames")
    times = []
    stages = {}
    counted = 0
    for i, frame in enumerate(frames):
        t0 = time.perf_counter()
        result = fn(frame)
        dt = (time.perf_counter() - t0) * 1e3
        if i < warmup:
            continue
        times.append(dt)
        counted += 1
        timings = getattr(result, "timings_ms", None)
        if timings:
            for k, v in timings.items():
                if k != "total":
                    stages[k] = stages.get(k, 0.0) + v
    arr = np.asarray(times)
    return BenchReport(
        mean_ms=float(arr.mean()),
        median_ms=float(np.median(arr)),
        p95_ms=float(np.percentile(arr, 95)),
        frames=counted,
        stage_means={k: v / counted for k, v in stages.items()},
    )


# ---------------------------------------------------------------------------
# avatar-state files

def avatar_state_record(state: AvatarState) -> dict:
    rec = {
        "frame": state.frame,
        "identity": state.identity.tolist(),
        "albedo": state.albedo.tolist(),
        "expression": state.expression.tolist(),
        "pose": {"R": state.pose.R.ravel().tolist(), "t": state.pose.t.tolist(),
                 "s": float(state.pose.s)},
        "timings_ms": state.timings_ms,
    }
    for name, eye in (("left_eye", state.left_eye), ("right_eye", state.right_eye)):
        rec[name] = None if eye is None else {
            "pitch": eye.pitch, "yaw": eye.yaw, "pupil_size": eye.pupil_size,
            "centre": [float(eye.centre[0]), float(eye.centre[1])],
        }
    return rec


def avatar_state_from_record(rec: dict) -> AvatarState:
    def eye(doc):
        if doc is None:
            return None
        return EyeState(doc["pitch"], doc["yaw"], doc["pupil_size"],
                        np.asarray(doc["centre"], dtype=float))

    return AvatarState(
        identity=np.asarray(rec["identity"], dtype=float),
        albedo=np.asarray(rec["albedo"], dtype=float),
        expression=np.asarray(rec["expression"], dtype=float),
        pose=pose_from_record(rec["pose"]),
        left_eye=eye(rec["left_eye"]), right_eye=eye(rec["right_eye"]),
        frame=rec["frame"], timings_ms=rec.get("timings_ms", {}),
    )
