"""Point cloud completion with ray-sampled candidates and a class-aware decoder."""

from .autodiff import Adam, Tape, Tensor, backward, grad_check
from .geometry import (CandidateSet, FaceFrame, PointCloud, Prediction, Role,
                       Transform, ViewRig, assemble_output, build_view_rig,
                       generate_candidates, local_to_world, normalize_cloud,
                       offsets_to_world, union_prediction)
from .metrics import (MetricReport, NnIndex, add_gaussian_noise, chamfer,
                      density_aware_cd, f1_at_threshold, metric_report,
                      nn_distance)
from .model import (ClassDistribution, ModelConfig, ModelParams, classify,
                    encode, face_transformer, forward, fuse, global_feature,
                    init_model_params)
from .training import (Sample, TrainConfig, classification_loss,
                       completion_loss, density_bench, evaluate,
                       generate_synthetic_dataset, noise_bench, opacity_loss,
                       total_loss, train)

__version__ = "0.1.0"
