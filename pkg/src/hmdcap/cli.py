"""Command-line front end.

Subcommands cover the whole offline/online loop: basis and dataset
generation, identity fitting, training, evaluation, inference, retarget,
and benchmarking. Exit codes: 0 success, 1 usage, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import capture, dataio, inverse_fit, nets, pupil, synth_eye, synth_face
from .errors import DataError, DimensionError, EllipseFitError, GeometryError, NumericalError
from .face_model import FaceParams, load_basis, save_basis


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: {e}") from None


def _apply(cfg, overrides: dict):
    known = {f.name for f in dataclasses.fields(cfg)}
    extra = {k: v for k, v in overrides.items() if k in known}
    for k in extra:
        if isinstance(getattr(cfg, k), tuple) and isinstance(extra[k], list):
            extra[k] = tuple(extra[k])
    return dataclasses.replace(cfg, **extra)


def _basis_spec(preset: str, seed: int):
    if preset == "paper":
        return synth_face.paper_basis_spec(seed)
    return synth_face.desk_basis_spec(seed)


def _face_gen_config(preset: str) -> synth_face.GenFaceConfig:
    if preset == "paper":
        return synth_face.paper_face_config()
    return synth_face.GenFaceConfig(subjects=2, frames_per_subject=8,
                                    crops_per_frame=10, test_subjects=(1,))


def _eye_gen_config(preset: str) -> synth_eye.GenEyeConfig:
    if preset == "paper":
        return synth_eye.paper_eye_config()
    return synth_eye.GenEyeConfig(subjects=2, frames_per_subject=30,
                                  crops_per_frame=4, test_subjects=(1,))


def _train_config(preset: str, kind: str) -> nets.TrainConfig:
    if preset == "paper":
        return nets.paper_facial_train() if kind == "face" else nets.paper_eye_train()
    if kind == "face":
        return nets.TrainConfig(lr=3e-3, decay_base=0.92, epochs=8, batch_size=32,
                                landmark_weight=1.0, dense_weight=1.0)
    return nets.TrainConfig(lr=2e-3, decay_base=0.96, decay_every="half_epoch",
                            epochs=6, batch_size=64)


def cmd_gen_basis(args):
    spec = _apply(_basis_spec(args.preset, args.seed), _load_config(args.config))
    basis = synth_face.gen_basis(spec)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "basis.feb")
    save_basis(basis, path, seed=spec.seed, preset=args.preset)
    print(f"wrote {path} ({basis.vertex_count} vertices, dims {basis.dims})")
    return 0


def cmd_gen_face_data(args):
    overrides = _load_config(args.config)
    spec = _apply(_basis_spec(args.preset, args.seed), overrides.get("basis", {}))
    cfg = _apply(_face_gen_config(args.preset), overrides)
    basis = synth_face.gen_basis(spec)
    hmd = synth_face.default_hmd_proxy()
    manifest = synth_face.gen_face_dataset(basis, cfg, hmd, args.out, seed=args.seed)
    print(f"wrote {manifest.count} samples under {args.out}")
    return 0


def cmd_gen_eye_data(args):
    cfg = _apply(_eye_gen_config(args.preset), _load_config(args.config))
    manifest = synth_eye.gen_eye_dataset(cfg, args.out, seed=args.seed)
    print(f"wrote {manifest.count} samples under {args.out}")
    return 0


def cmd_fit_identity(args):
    obs = inverse_fit.read_landmarks_json(args.landmarks)
    basis = load_basis(args.basis)
    cfg = _apply(inverse_fit.FitConfig(), _load_config(args.config))
    result = inverse_fit.fit_identity_expression(obs, basis, cfg)
    albedo = None
    if args.albedo:
        with open(args.albedo) as f:
            albedo = json.load(f)["albedo"]
    inverse_fit.write_params_json(result, args.out, albedo=albedo)
    tag = "converged" if result.converged else "NOT converged"
    print(f"wrote {args.out} ({tag}, final objective "
          f"{result.objective_history[-1]:.6g})")
    return 0


def _loss_for(args, basis, manifest, labels, cfg):
    if args.loss == "l2":
        return nets.l2_batch_loss, None
    hmd = synth_face.default_hmd_proxy()
    data, matrices = capture.face_training_data(
        manifest, labels, basis, hmd, split="train",
        dense_weight=cfg.dense_weight, landmark_weight=cfg.landmark_weight)
    return nets.make_facial_batch_loss(matrices), data


def cmd_train_face(args):
    manifest, labels = dataio.load_manifest(args.data)
    basis = load_basis(manifest.path(manifest.basis_path))
    cfg = _apply(_train_config(args.preset, "face"), _load_config(args.config))
    cfg = dataclasses.replace(cfg, seed=args.seed)
    spec = nets.desk_facial_spec(basis.dims[1], seed=args.seed, dtype="float32")
    net = nets.Network(spec)
    loss_fn, data = _loss_for(args, basis, manifest, labels, cfg)
    if data is None:
        data, _ = capture.face_training_data(manifest, labels, basis, None,
                                             split="train", dense_weight=0.0,
                                             landmark_weight=0.0)
    result = nets.train(net, data, cfg, loss_fn, log_path=args.out + ".log.jsonl")
    nets.save_network(net, args.out)
    print(f"wrote {args.out}; final mean loss {result.history[-1]:.6g}")
    return 0


def cmd_train_eye(args):
    manifest, labels = dataio.load_manifest(args.data)
    cfg = _apply(_train_config(args.preset, "eye"), _load_config(args.config))
    cfg = dataclasses.replace(cfg, seed=args.seed)
    data = capture.eye_training_data(manifest, labels, split="train")
    spec = (nets.paper_eye_spec(seed=args.seed) if args.preset == "paper"
            else nets.desk_eye_spec(seed=args.seed, dtype="float32"))
    net = nets.Network(spec)
    result = nets.train(net, data, cfg, nets.l2_batch_loss,
                        log_path=args.out + ".log.jsonl")
    nets.save_network(net, args.out)
    print(f"wrote {args.out}; final mean loss {result.history[-1]:.6g}")
    return 0


def cmd_eval_face(args):
    manifest, labels = dataio.load_manifest(args.data)
    basis = load_basis(manifest.path(manifest.basis_path))
    net = nets.load_network(args.weights)
    err = capture.evaluate_face(manifest, labels, basis, net, split=args.split)
    print(f"mean landmark error ({args.split}): {err:.4f} px")
    return 0


def cmd_eval_eye(args):
    manifest, _ = dataio.load_manifest(args.data)
    net = nets.load_network(args.weights)
    report = capture.evaluate_eye(manifest, net, split=args.split,
                                  with_baseline=not args.no_baseline)
    print(f"frames: {report['frames']}")
    print(f"regressor: {report['net_gaze_error_deg']:.3f} deg, "
          f"{report['net_ms_per_frame']:.2f} ms/frame")
    if not args.no_baseline:
        print(f"axis-ratio baseline: {report['baseline_gaze_error_deg']:.3f} deg, "
              f"{report['baseline_ms_per_frame']:.2f} ms/frame")
    return 0


def _identity_params(manifest, subject_id):
    for s in manifest.subjects:
        if s["id"] == subject_id:
            return np.asarray(s["identity"]), np.asarray(s["albedo"])
    raise DataError(f"subject {subject_id} not in manifest")


def cmd_infer(args):
    manifest, labels = dataio.load_manifest(args.face_data)
    basis = load_basis(manifest.path(manifest.basis_path))
    face_net = nets.load_network(args.face_weights)
    eye_net = eye_frames = None
    if args.eye_data and args.eye_weights:
        eye_manifest, _ = dataio.load_manifest(args.eye_data)
        eye_net = nets.load_network(args.eye_weights)
        eye_frames = [f for f, _, _ in capture.eye_test_frames(eye_manifest, "test")]
    provider = (capture.PoseProvider.from_json(args.poses) if args.poses
                else capture.PoseProvider.from_manifest(manifest))
    frames = [fr for fr in manifest.frames
              if args.split == "all" or fr["subject"] in
              [s["id"] for s in manifest.subjects if s["split"] == args.split]]
    if not frames:
        raise DataError("no frames to process")
    subjects = {s["id"]: s for s in manifest.subjects}
    count = 0
    with open(args.out, "w") as out_f:
        for k, fr in enumerate(frames):
            pose = provider.get(fr["id"])
            if pose is None:
                print(f"warning: no pose for frame {fr['id']}, skipped", file=sys.stderr)
                continue
            if not fr.get("prerender"):
                raise DataError("infer needs datasets generated with keep_prerender")
            img = dataio.read_image(manifest.path(fr["prerender"]))
            hmd = synth_face.default_hmd_proxy()
            masked = synth_face.mask_hmd(img, hmd, pose)
            subj = subjects[fr["subject"]]
            identity = FaceParams(np.asarray(subj["identity"]),
                                  np.zeros(basis.dims[1]),
                                  np.asarray(subj["albedo"]))
            eyes = ()
            if eye_frames:
                eyes = (eye_frames[k % len(eye_frames)],)
            state = capture.process_frame(masked, eyes, pose, face_net, eye_net or (lambda f: None),
                                          identity, basis, frame_id=fr["id"])
            out_f.write(json.dumps(capture.avatar_state_record(state)) + "\n")
            if args.export_obj:
                os.makedirs(args.export_obj, exist_ok=True)
                capture.export_avatar(state, basis,
                                      os.path.join(args.export_obj, f"frame_{fr['id']:06d}"))
            count += 1
    print(f"wrote {count} avatar states to {args.out}")
    return 0


def cmd_retarget(args):
    with open(args.identity) as f:
        target = json.load(f)
    basis = load_basis(args.basis) if args.basis else None
    count = 0
    with open(args.states) as in_f, open(args.out, "w") as out_f:
        for line in in_f:
            if not line.strip():
                continue
            state = capture.avatar_state_from_record(json.loads(line))
            new = capture.retarget(state, target["identity"], target["albedo"])
            out_f.write(json.dumps(capture.avatar_state_record(new)) + "\n")
            if args.export_obj and basis is not None:
                os.makedirs(args.export_obj, exist_ok=True)
                capture.export_avatar(new, basis,
                                      os.path.join(args.export_obj, f"retarget_{new.frame:06d}"))
            count += 1
    print(f"retargeted {count} states to {args.out}")
    return 0


def cmd_bench(args):
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        face_dir = args.data or os.path.join(tmp, "face")
        if args.data:
            manifest, _ = dataio.load_manifest(face_dir)
            basis = load_basis(manifest.path(manifest.basis_path))
        else:
            basis = synth_face.gen_basis(_basis_spec("desk", args.seed))
            cfg = synth_face.GenFaceConfig(subjects=1, frames_per_subject=16,
                                           crops_per_frame=1, keep_prerender=True)
            manifest = synth_face.gen_face_dataset(basis, cfg,
                                                   synth_face.default_hmd_proxy(),
                                                   face_dir, seed=args.seed)
        eye_cfg = synth_eye.GenEyeConfig(subjects=1, frames_per_subject=16,
                                         crops_per_frame=1, mirror=False,
                                         keep_frames="all")
        eye_manifest = synth_eye.gen_eye_dataset(eye_cfg, os.path.join(tmp, "eye"),
                                                 seed=args.seed)
        eye_frames = capture.eye_test_frames(eye_manifest, split="train")

        face_net = nets.Network(nets.desk_facial_spec(basis.dims[1], dtype="float32"))
        eye_net = nets.Network(nets.desk_eye_spec(dtype="float32"))
        subjects = {s["id"]: s for s in manifest.subjects}
        jobs = []
        for k, fr in enumerate(manifest.frames):
            pose = synth_face.pose_from_record(fr["pose"])
            img = dataio.read_image(manifest.path(fr["prerender"]))
            subj = subjects[fr["subject"]]
            identity = FaceParams(np.asarray(subj["identity"]),
                                  np.zeros(basis.dims[1]),
                                  np.asarray(subj["albedo"]))
            eye_img = eye_frames[k % len(eye_frames)][0]
            jobs.append((img, eye_img, pose, identity, fr["id"]))

        def run(job):
            img, eye_img, pose, identity, fid = job
            return capture.process_frame(img, (eye_img,), pose, face_net, eye_net,
                                         identity, basis, frame_id=fid)

        report = capture.benchmark(run, jobs)

        base_times = []
        for img, *_ in [(j[1],) for j in jobs[:10]]:
            import time as _t
            t0 = _t.perf_counter()
            pupil.run_pipeline(img)
            base_times.append((_t.perf_counter() - t0) * 1e3)
        report.stage_means["pupil_baseline"] = float(np.mean(base_times))

    print(report.table())
    return 0


def cmd_pupil_debug(args):
    img = dataio.read_image(args.image)
    pupil.dump_debug_rasters(img, args.out)
    res = pupil.run_pipeline(img)
    print(f"seed {res.seed}; centre ({res.centre[0]:.2f}, {res.centre[1]:.2f}); "
          f"size {res.size:.2f}px; gaze ({np.degrees(res.pitch):.1f}, "
          f"{np.degrees(res.yaw):.1f}) deg")
    print(f"debug rasters under {args.out}")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="hmdcap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--preset", choices=("paper", "desk"), default="desk")
        sp.add_argument("--config", help="JSON file overriding preset fields")
        if out:
            sp.add_argument("--out", required=True)

    sp = sub.add_parser("gen-basis", help="write a synthetic face basis")
    common(sp)
    sp.set_defaults(fn=cmd_gen_basis)

    sp = sub.add_parser("gen-face-data", help="generate the facial corpus")
    common(sp)
    sp.set_defaults(fn=cmd_gen_face_data)

    sp = sub.add_parser("gen-eye-data", help="generate the eye corpus")
    common(sp)
    sp.set_defaults(fn=cmd_gen_eye_data)

    sp = sub.add_parser("fit-identity", help="fit identity/expression from landmarks")
    common(sp)
    sp.add_argument("--landmarks", required=True)
    sp.add_argument("--basis", required=True)
    sp.add_argument("--albedo", help="JSON with externally supplied albedo coefficients")
    sp.set_defaults(fn=cmd_fit_identity)

    sp = sub.add_parser("train-face", help="train the facial regressor")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--loss", choices=("l2", "combined"), default="combined")
    sp.set_defaults(fn=cmd_train_face)

    sp = sub.add_parser("train-eye", help="train the eye regressor")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.set_defaults(fn=cmd_train_eye)

    sp = sub.add_parser("eval-face", help="mean landmark error on a split")
    common(sp, out=False)
    sp.add_argument("--data", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--split", default="test")
    sp.set_defaults(fn=cmd_eval_face)

    sp = sub.add_parser("eval-eye", help="gaze error and latency vs baseline")
    common(sp, out=False)
    sp.add_argument("--data", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--no-baseline", action="store_true")
    sp.set_defaults(fn=cmd_eval_eye)

    sp = sub.add_parser("infer", help="write per-frame avatar states")
    common(sp)
    sp.add_argument("--face-data", required=True)
    sp.add_argument("--face-weights", required=True)
    sp.add_argument("--eye-data")
    sp.add_argument("--eye-weights")
    sp.add_argument("--poses", help="poses JSON instead of manifest poses")
    sp.add_argument("--split", default="test", choices=("train", "test", "all"))
    sp.add_argument("--export-obj", help="directory for OBJ exports")
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("retarget", help="swap identity/albedo in avatar states")
    common(sp)
    sp.add_argument("--states", required=True)
    sp.add_argument("--identity", required=True)
    sp.add_argument("--basis")
    sp.add_argument("--export-obj")
    sp.set_defaults(fn=cmd_retarget)

    sp = sub.add_parser("bench", help="per-stage timing report")
    common(sp, out=False)
    sp.add_argument("--data", help="existing face dataset (else a small one is generated)")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("pupil-debug", help="dump pipeline intermediates for one image")
    common(sp)
    sp.add_argument("--image", required=True)
    sp.set_defaults(fn=cmd_pupil_debug)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (DataError, DimensionError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (NumericalError, GeometryError, EllipseFitError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
