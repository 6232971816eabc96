"""Pose-invariant face verification lab: joint 2D-3D attention with
joint-entropy regularization, on a small reverse-mode tensor engine."""

__version__ = "0.1.0"

from .attention import JamParams, jam_forward, shared_parameter_audit
from .autodiff import Tape, Tensor, grad_check, primitive_forward
from .config import ExperimentConfig, load_config, save_config
from .encoders import CompressionHead, Encoder2D, Encoder3D, EncoderDims
from .entropy import BinningConfig, je_loss, joint_distribution, joint_entropy
from .margin import ClassifierHead, MarginParams, adaface_probability, domain_loss, total_loss
from .model import VerificationModel
from .synthetic import GeneratorConfig, build_dataset, render_lambertian
from .verification import ScoreSet, VerificationReport, cosine_scores, pose_binned_report

__all__ = [
    "BinningConfig",
    "ClassifierHead",
    "CompressionHead",
    "Encoder2D",
    "Encoder3D",
    "EncoderDims",
    "ExperimentConfig",
    "GeneratorConfig",
    "JamParams",
    "MarginParams",
    "ScoreSet",
    "Tape",
    "Tensor",
    "VerificationModel",
    "VerificationReport",
    "__version__",
    "adaface_probability",
    "build_dataset",
    "cosine_scores",
    "domain_loss",
    "grad_check",
    "jam_forward",
    "je_loss",
    "joint_distribution",
    "joint_entropy",
    "load_config",
    "pose_binned_report",
    "primitive_forward",
    "render_lambertian",
    "save_config",
    "shared_parameter_audit",
    "total_loss",
]
