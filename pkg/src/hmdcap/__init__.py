"""Desk-scale face and eye performance capture for headset wearers.

Everything runs from synthetic data: a seeded morphable face basis,
rendered faces with black headset masking, stylized IR eye images, two
small regression networks trained from scratch, a classical pupil
pipeline as the optimization baseline, and the evaluation metrics that
compare the two routes.
"""

from .face_model import (FaceBasis, FaceParams, Mesh, Pose, evaluate_albedo,
                         evaluate_shape, landmarks_2d, load_basis, project,
                         project_points, save_basis, visible_vertices)
from .synth_face import (GenFaceConfig, HmdProxy, SyntheticBasisSpec,
                         crop_face_region, default_hmd_proxy, gen_basis,
                         gen_face_dataset, mask_hmd, random_crops, render_face)
from .synth_eye import (EyeRenderSpec, EyeState, GenEyeConfig, gaze_to_vector,
                        gen_eye_dataset, render_eye, vector_to_gaze)
from .inverse_fit import (FitConfig, FrameObservation, LandmarkObservations,
                          fit_identity_expression, fit_pose)
from .pupil import (EllipseFit, PupilMask, darkest_point, fit_ellipse,
                    gaze_baseline, pupil_labels, run_pipeline, segment_pupil)
from .nets import (Network, NetworkSpec, TrainConfig, TrainingData, eye_loss,
                   facial_loss, load_network, predict_expression, predict_eye,
                   save_network, train)
from .capture import (AvatarState, PoseProvider, benchmark, export_avatar,
                      mean_gaze_error, mean_landmark_error, process_frame,
                      retarget)

__version__ = "0.1.0"
