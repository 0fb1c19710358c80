"""Chest X-ray triage classifier: data preparation, training, evaluation and saliency."""

from .classes import ClassConfig
from .dataset import DatasetManifest, ImageRecord, PreprocessSpec, build_manifest, load_and_preprocess, split_by_patient
from .loss import compute_class_weights, weighted_bce_loss
from .metrics import PredictionMatrix, auroc, bootstrap_f1, decide, evaluate
from .model import ClassifierSpec, build_model, load_checkpoint, save_checkpoint, set_backbone_trainable
from .saliency import MaskSpec, generate_masks, rise_saliency
from .sampling import BatchPlan, RatioBatchSampler, compose_batches

__version__ = "0.1.0"
