"""Training, LOSO evaluation, metrics, checkpoints and CAM export."""

from .checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from .loso import (
    SWEEP_MODELS,
    SWEEP_RESOLUTIONS,
    EvalReport,
    FoldResult,
    cam_map,
    complexity_sweep,
    export_cam,
    read_report,
    run_loso,
    sweep_summary,
    to_uint8,
    top_decile_inside,
    train_fold,
    write_csv,
)
from .metrics import MetricError, compute_uar, compute_uf1, confusion_matrix, per_class_f1, per_class_recall
from .training import DESK_TRAIN_CONFIG, TrainConfig, TrainLog, predict, predict_proba, train_single

__all__ = [
    "DESK_TRAIN_CONFIG", "SWEEP_MODELS", "SWEEP_RESOLUTIONS", "EvalReport", "FoldResult", "MetricError",
    "TrainConfig", "TrainLog",
    "cam_map", "checkpoint_bytes", "complexity_sweep", "compute_uar", "compute_uf1", "confusion_matrix",
    "export_cam", "load_checkpoint", "per_class_f1", "per_class_recall", "predict", "predict_proba",
    "read_report", "run_loso", "save_checkpoint", "sweep_summary", "to_uint8", "top_decile_inside",
    "train_fold", "train_single", "write_csv",
]
