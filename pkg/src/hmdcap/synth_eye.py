"""Stylized IR eye-image synthesis with exact labels.

Each render is a layered composition at 320x240: sclera background, a
concentric iris disk, a filled pupil ellipse, additive seeded noise, and
six bright glint dots. Appearance is deliberately flat (no corneal
refraction); what matters downstream is contrast structure plus exact
ground truth for the five regressed parameters: pitch, yaw, pupil size
(major-axis length in pixels), and pupil centre (x, y).

Convention: the pupil ellipse's major axis lies along the in-image gaze
tilt direction and the minor/major ratio equals cos(inclination), where
inclination is the angle between the gaze and the optical axis. Image y
grows downward, so a positive pitch (looking up) tilts toward smaller y.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import dataio
from .errors import DimensionError, GeometryError

EYE_IMAGE_SHAPE = (240, 320)
EYE_DOWNSCALE_SHAPE = (95, 141)
EYE_INPUT_SHAPE = (87, 135)

PUPIL_SIZE_RANGE = (8.0, 60.0)
GAZE_LIMIT = np.deg2rad(45.0)


def gaze_to_vector(pitch: float, yaw: float) -> np.ndarray:
    """Unit gaze direction; (0, 0) looks along +z, positive pitch looks up."""
    cp = np.cos(pitch)
    return np.array([cp * np.sin(yaw), np.sin(pitch), cp * np.cos(yaw)])


def vector_to_gaze(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    return float(np.arcsin(np.clip(v[1], -1, 1))), float(np.arctan2(v[0], v[2]))


@dataclass(frozen=True)
class EyeState:
    """The five regressed eye parameters."""

    pitch: float
    yaw: float
    pupil_size: float
    centre: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw, self.pupil_size,
                         self.centre[0], self.centre[1]])

    @classmethod
    def from_vector(cls, vec) -> "EyeState":
        vec = np.asarray(vec, dtype=float)
        return cls(float(vec[0]), float(vec[1]), float(vec[2]), vec[3:5].copy())


@dataclass(frozen=True)
class TruthEllipse:
    """Exact parameters of the rendered pupil ellipse."""

    centre: np.ndarray
    semi_major: float
    semi_minor: float
    orientation: float

    def to_record(self) -> dict:
        return {"cx": float(self.centre[0]), "cy": float(self.centre[1]),
                "a": self.semi_major, "b": self.semi_minor,
                "theta": self.orientation}

    @classmethod
    def from_record(cls, rec) -> "TruthEllipse":
        return cls(np.array([rec["cx"], rec["cy"]]), rec["a"], rec["b"], rec["theta"])


def _hex_glints(radius: float = 46.0, phase: float = 0.0) -> np.ndarray:
    cy, cx = EYE_IMAGE_SHAPE[0] / 2.0, EYE_IMAGE_SHAPE[1] / 2.0
    ang = phase + np.arange(6) * (np.pi / 3.0)
    return np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)


@dataclass(frozen=True)
class EyeRenderSpec:
    """Appearance knobs for one synthetic eye camera."""

    image_shape: tuple = EYE_IMAGE_SHAPE
    iris_color_index: int = 6
    glints: np.ndarray = field(default_factory=_hex_glints)
    sclera_intensity: float = 175.0
    iris_base_intensity: float = 70.0
    iris_step: float = 4.0
    pupil_intensity: float = 25.0
    iris_margin: float = 26.0
    noise_amp: float = 3.5
    seed: int = 0

    def __post_init__(self):
        g = np.asarray(self.glints, dtype=float)
        if g.shape != (6, 2):
            raise DimensionError("exactly six glint positions are required")
        if not 0 <= self.iris_color_index < 20:
            raise GeometryError("iris color index must lie in 0..19")
        if not self.pupil_intensity < self.iris_intensity < self.sclera_intensity:
            raise GeometryError("intensities must be ordered pupil < iris < sclera")

    @property
    def iris_intensity(self) -> float:
        return self.iris_base_intensity + self.iris_step * self.iris_color_index


def _ellipse_coverage(shape, centre, a, b, theta) -> np.ndarray:
    """Per-pixel coverage in [0,1]; boundary pixels are 4x4 supersampled."""
    h, w = shape
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    def implicit(px, py):
        dx = px - centre[0]
        dy = py - centre[1]
        xr = dx * cos_t + dy * sin_t
        yr = -dx * sin_t + dy * cos_t
        return (xr / a) ** 2 + (yr / b) ** 2

    cc, rr = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    g = implicit(cc, rr)
    cover = (g <= 1.0).astype(float)
    # the value of the implicit changes by roughly 2/b per pixel near the rim
    band = np.abs(g - 1.0) <= 3.0 / max(b, 1.0)
    if band.any():
        rows, cols = np.nonzero(band)
        sub = (np.arange(4) + 0.5) / 4.0 - 0.5
        sx, sy = np.meshgrid(sub, sub)
        px = cols[:, None] + sx.ravel()[None, :]
        py = rows[:, None] + sy.ravel()[None, :]
        cover[rows, cols] = (implicit(px, py) <= 1.0).mean(axis=1)
    return cover


def render_eye(state: EyeState, spec: EyeRenderSpec):
    """Render one eye image; returns (uint8 image, TruthEllipse)."""
    if abs(state.pitch) > GAZE_LIMIT + 1e-12 or abs(state.yaw) > GAZE_LIMIT + 1e-12:
        raise GeometryError("gaze angles exceed the 45 degree generation range")
    lo, hi = PUPIL_SIZE_RANGE
    if not lo <= state.pupil_size <= hi:
        raise GeometryError(f"pupil size must lie in [{lo}, {hi}] px")

    v = gaze_to_vector(state.pitch, state.yaw)
    cos_inc = float(np.clip(v[2], -1.0, 1.0))
    tilt = np.array([v[0], -v[1]])
    norm = np.linalg.norm(tilt)
    u = tilt / norm if norm > 1e-12 else np.array([1.0, 0.0])
    theta = float(np.arctan2(u[1], u[0])) % np.pi

    a = state.pupil_size / 2.0
    b = a * cos_inc
    truth = TruthEllipse(np.asarray(state.centre, dtype=float).copy(), a, b, theta)

    h, w = spec.image_shape
    img = np.full((h, w), spec.sclera_intensity)
    ia = a + spec.iris_margin
    iris_cover = _ellipse_coverage((h, w), state.centre, ia, ia * cos_inc, theta)
    img += iris_cover * (spec.iris_intensity - spec.sclera_intensity)
    pupil_cover = _ellipse_coverage((h, w), state.centre, a, b, theta)
    img = img * (1 - pupil_cover) + spec.pupil_intensity * pupil_cover

    if spec.noise_amp > 0:
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
        img += spec.noise_amp * rng.standard_normal((h, w))
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    cc, rr = np.meshgrid(np.arange(w), np.arange(h))
    for gx, gy in np.asarray(spec.glints, dtype=float):
        disk = (cc - gx) ** 2 + (rr - gy) ** 2 <= 1.7 ** 2
        img[disk] = 255
    return img, truth


def mirror_eye_sample(image: np.ndarray, state: EyeState,
                      truth: TruthEllipse) -> tuple[np.ndarray, EyeState, TruthEllipse]:
    """Horizontal flip with consistently negated yaw and mirrored x positions."""
    w = image.shape[1]
    m_img = image[:, ::-1].copy()
    m_state = EyeState(state.pitch, -state.yaw, state.pupil_size,
                       np.array([(w - 1) - state.centre[0], state.centre[1]]))
    m_truth = TruthEllipse(np.array([(w - 1) - truth.centre[0], truth.centre[1]]),
                           truth.semi_major, truth.semi_minor,
                           (np.pi - truth.orientation) % np.pi)
    return m_img, m_state, m_truth


def _box_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging fractional input spans per output cell."""
    f = n_in / n_out
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * f, (i + 1) * f
        for c in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            ov = min(hi, c + 1) - max(lo, c)
            if ov > 0:
                w[i, c] = ov
    return w / f


def area_resample(image: np.ndarray, out_shape) -> np.ndarray:
    """Area-average resampling to out_shape (rows, cols); returns float64."""
    h, w = image.shape[:2]
    wr = _box_weights(h, out_shape[0])
    wc = _box_weights(w, out_shape[1])
    return wr @ np.asarray(image, dtype=float) @ wc.T


def eye_network_input(frame: np.ndarray, offset=None) -> np.ndarray:
    """Downscale a full eye frame and cut the 87x135 network window.

    With no offset the window is centered (the inference-time choice);
    training crops pass their stored offsets.
    """
    small = area_resample(frame, EYE_DOWNSCALE_SHAPE)
    if offset is None:
        offset = ((EYE_DOWNSCALE_SHAPE[0] - EYE_INPUT_SHAPE[0]) // 2,
                  (EYE_DOWNSCALE_SHAPE[1] - EYE_INPUT_SHAPE[1]) // 2)
    r, c = offset
    return small[r:r + EYE_INPUT_SHAPE[0], c:c + EYE_INPUT_SHAPE[1]]


@dataclass(frozen=True)
class GenEyeConfig:
    """Trajectory and augmentation settings for the eye corpus."""

    subjects: int = 1
    frames_per_subject: int = 100
    crops_per_frame: int = 10
    mirror: bool = True
    gaze_amp_deg: float = 28.0
    pupil_base: float = 26.0
    pupil_amp: float = 12.0
    centre_gain: float = 35.0
    centre_jitter: float = 2.0
    test_subjects: tuple = ()
    keep_frames: str = "test"  # none | test | all

    @property
    def total_samples(self) -> int:
        m = 2 if self.mirror else 1
        return self.subjects * self.frames_per_subject * m * self.crops_per_frame


def paper_eye_config() -> GenEyeConfig:
    """Full-scale arithmetic: 18806 frames, mirrored, 10 crops each."""
    return GenEyeConfig(subjects=1, frames_per_subject=18806)


def _subject_spec(rng) -> EyeRenderSpec:
    return EyeRenderSpec(
        iris_color_index=int(rng.integers(0, 20)),
        glints=_hex_glints(radius=float(rng.uniform(42, 50)),
                           phase=float(rng.uniform(0, np.pi / 3))),
        sclera_intensity=float(rng.uniform(165, 185)),
        iris_base_intensity=float(rng.uniform(62, 78)),
        pupil_intensity=float(rng.uniform(18, 32)),
        noise_amp=float(rng.uniform(2.5, 4.5)),
    )


def _subject_states(cfg: GenEyeConfig, rng, frames: int) -> list[EyeState]:
    """Dot-following trajectory: one circular sweep, then 8 radial sweeps."""
    amp = np.deg2rad(rng.uniform(0.75, 1.0) * cfg.gaze_amp_deg)
    n_circle = max(1, int(0.6 * frames))
    cy, cx = EYE_IMAGE_SHAPE[0] / 2.0, EYE_IMAGE_SHAPE[1] / 2.0
    states = []
    for i in range(frames):
        if i < n_circle:
            ph = 2 * np.pi * i / n_circle
            pitch = amp * np.sin(ph)
            yaw = amp * np.cos(ph)
            pupil = cfg.pupil_base + 0.25 * cfg.pupil_amp * np.sin(3 * ph)
        else:
            j = i - n_circle
            n_sweep = frames - n_circle
            prog = 8.0 * j / max(n_sweep, 1)
            direction = int(prog) % 8
            p = prog - int(prog)
            r = np.sin(np.pi * p)
            ang = direction * np.pi / 4.0
            pitch = r * amp * np.sin(ang)
            yaw = r * amp * np.cos(ang)
            pupil = cfg.pupil_base + cfg.pupil_amp * np.sin(2 * np.pi * p - np.pi / 2)
        pupil = float(np.clip(pupil, *PUPIL_SIZE_RANGE))

        v = gaze_to_vector(pitch, yaw)
        sin_inc = float(np.sqrt(max(0.0, 1.0 - v[2] ** 2)))
        tilt = np.array([v[0], -v[1]])
        nrm = np.linalg.norm(tilt)
        u = tilt / nrm if nrm > 1e-12 else np.zeros(2)
        jitter = rng.uniform(-cfg.centre_jitter, cfg.centre_jitter, size=2)
        centre = np.array([cx, cy]) + cfg.centre_gain * sin_inc * u + jitter
        states.append(EyeState(float(pitch), float(yaw), pupil, centre))
    return states


def gen_eye_dataset(cfg: GenEyeConfig, out_dir, seed: int = 0) -> dataio.DatasetManifest:
    """Write a labeled eye corpus: crops for training, frames for the baseline."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    if cfg.keep_frames != "none":
        os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)

    config_echo = asdict(cfg)
    config_echo.update({
        "seed": seed,
        "image_shape": list(EYE_IMAGE_SHAPE),
        "downscale_shape": list(EYE_DOWNSCALE_SHAPE),
        "input_shape": list(EYE_INPUT_SHAPE),
        "test_subjects": list(cfg.test_subjects),
        "label_coords": "original 320x240 frame pixels",
    })
    manifest = dataio.DatasetManifest(kind="eye", config=config_echo, root=str(out_dir))
    labels: list[dict] = []

    for subj in range(cfg.subjects):
        srng = np.random.default_rng(np.random.SeedSequence([seed, subj]))
        spec = _subject_spec(srng)
        states = _subject_states(cfg, srng, cfg.frames_per_subject)
        split = "test" if subj in cfg.test_subjects else "train"
        keep = cfg.keep_frames == "all" or (cfg.keep_frames == "test" and split == "test")
        manifest.subjects.append({"id": subj, "split": split,
                                  "render_spec": _spec_record(spec)})
        for fr, state in enumerate(states):
            fseq = np.random.SeedSequence([seed, subj, fr])
            noise_seed, crop_seed = fseq.spawn(2)
            img, truth = render_eye(state, replace(spec, seed=_seed_int(noise_seed)))
            variants = [(img, state, truth, False)]
            if cfg.mirror:
                variants.append((*mirror_eye_sample(img, state, truth), True))
            crng = np.random.default_rng(crop_seed)
            for vimg, vstate, vtruth, mirrored in variants:
                frame_id = len(manifest.frames)
                frame_rel = None
                if keep:
                    frame_rel = f"frames/{frame_id:06d}.pgm"
                    dataio.write_pgm(os.path.join(out_dir, frame_rel), vimg)
                manifest.frames.append({
                    "id": frame_id, "subject": subj, "frame": fr,
                    "mirrored": mirrored, "split": split, "frame_path": frame_rel,
                    "state": vstate.as_vector().tolist(),
                    "ellipse": vtruth.to_record(),
                })
                small = area_resample(vimg, EYE_DOWNSCALE_SHAPE)
                span = (EYE_DOWNSCALE_SHAPE[0] - EYE_INPUT_SHAPE[0] + 1,
                        EYE_DOWNSCALE_SHAPE[1] - EYE_INPUT_SHAPE[1] + 1)
                offsets = crng.integers(0, span, size=(cfg.crops_per_frame, 2))
                for off in offsets:
                    r, c = int(off[0]), int(off[1])
                    crop = small[r:r + EYE_INPUT_SHAPE[0], c:c + EYE_INPUT_SHAPE[1]]
                    idx = len(manifest.samples)
                    rel = f"images/{idx:06d}.pgm"
                    dataio.write_pgm(os.path.join(out_dir, rel), crop)
                    manifest.samples.append({
                        "image": rel, "subject": subj, "frame_id": frame_id,
                        "split": split, "crop_offset": [r, c],
                    })
                    labels.append({
                        "pitch": vstate.pitch, "yaw": vstate.yaw,
                        "pupil_size": vstate.pupil_size,
                        "centre": [float(vstate.centre[0]), float(vstate.centre[1])],
                        "mirrored": mirrored,
                        "ellipse": vtruth.to_record(),
                        "crop_offset": [r, c],
                        "subject": subj, "frame_id": frame_id,
                    })
    dataio.save_manifest(manifest, labels)
    return manifest


def _spec_record(spec: EyeRenderSpec) -> dict:
    rec = asdict(spec)
    rec["glints"] = np.asarray(spec.glints).tolist()
    rec["image_shape"] = list(spec.image_shape)
    return rec


def spec_from_record(rec: dict) -> EyeRenderSpec:
    rec = dict(rec)
    rec["glints"] = np.asarray(rec["glints"], dtype=float)
    rec["image_shape"] = tuple(rec["image_shape"])
    return EyeRenderSpec(**rec)


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, dtype=np.uint64)[0])
