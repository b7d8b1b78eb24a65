"""Expression recognition guided by per-class facial motion masks."""
from .dataset import (
    AlignedFace,
    AlignedSet,
    AugmentPolicy,
    DatasetManifest,
    FaceSample,
    FoldPlan,
    LandmarkSet,
    align_face,
    load_aligned,
    load_manifest,
    plan_folds,
    write_manifest,
)
from .estimator import FaceAligner, FMPNClassifier, SubjectKFold
from .evaluation import EvalReport, confusion_matrix, cross_validate, predict, run_ablation, transfer_masks
from .exceptions import FMPNError, ValidationError
from .maskgen import MaskBank, MotionMask, compute_class_mask, generate_mask_bank, load_bank, save_bank
from .networks import FMPN, ArchConfig, load_checkpoint, register_backbone, save_checkpoint
from .synthdata import SynthSpec, generate, verify_separability
from .training import TrainConfig, train_joint, train_stage1

__version__ = "0.1.0"

__all__ = [
    "AlignedFace", "AlignedSet", "ArchConfig", "AugmentPolicy", "DatasetManifest", "EvalReport", "FMPN",
    "FMPNClassifier", "FMPNError", "FaceAligner", "FaceSample", "FoldPlan", "LandmarkSet", "MaskBank",
    "MotionMask", "SubjectKFold", "SynthSpec", "TrainConfig", "ValidationError", "align_face",
    "compute_class_mask", "confusion_matrix", "cross_validate", "generate", "generate_mask_bank",
    "load_aligned", "load_bank", "load_checkpoint", "load_manifest", "plan_folds", "predict",
    "register_backbone", "run_ablation", "save_bank", "save_checkpoint", "train_joint", "train_stage1",
    "transfer_masks", "verify_separability", "write_manifest",
]
