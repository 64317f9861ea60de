"""
Insulator Disk Anomaly Detection

One-class fully convolutional anomaly detection for detector-cropped
insulator disks: unsupervised and semi-supervised FCDD training (original,
BCE-aligned and focal losses), Gaussian receptive-field heatmaps, ROC/AUC
evaluation and a two-stage inspection front end.
"""

__version__ = "1.0.0"
__author__ = "Insulator Inspection Team"

from .model import NetworkConfig, build_network, forward, backward, receptive_field, load_checkpoint, save_checkpoint
from .losses import fcdd_unsup_loss, fcdd_ss_loss_original, fcdd_ss_loss_modified, fcdd_focal_loss, bce_loss, hsc_loss
from .heatmap import huber_map, gaussian_upsample, image_score
from .data import load_dataset, synth_generate, SynthConfig, parse_labelme, rasterize_polygon
from .trainer import TrainConfig, train, train_autoencoder, NonFiniteBatchError
from .evaluation import roc_curve, auc, optimal_threshold, gtmap_auc, evaluate_experiment
from .pipeline import parse_boxes, crop_disks, inspect

__all__ = [
    "NetworkConfig",
    "build_network",
    "forward",
    "backward",
    "receptive_field",
    "load_checkpoint",
    "save_checkpoint",
    "fcdd_unsup_loss",
    "fcdd_ss_loss_original",
    "fcdd_ss_loss_modified",
    "fcdd_focal_loss",
    "bce_loss",
    "hsc_loss",
    "huber_map",
    "gaussian_upsample",
    "image_score",
    "load_dataset",
    "synth_generate",
    "SynthConfig",
    "parse_labelme",
    "rasterize_polygon",
    "TrainConfig",
    "train",
    "train_autoencoder",
    "NonFiniteBatchError",
    "roc_curve",
    "auc",
    "optimal_threshold",
    "gtmap_auc",
    "evaluate_experiment",
    "parse_boxes",
    "crop_disks",
    "inspect",
]
