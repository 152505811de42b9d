"""Networks, anchors, training loops and checkpoints for the cascade."""

from .anchors import AnchorGrid, Detection, nms
from .checkpoint import arch_descriptor, build_model, load_model, save_model
from .inference import (baseline_predict, classifier_predict, classifier_predict_batch,
                        detections_from_outputs, detector_predict, detector_raw_outputs,
                        segmentor_predict)
from .nets import (CLASSIFIER_INPUT, SEGMENTOR_INPUT, Baseline3DNet, ClassifierNet,
                   DetectorNet, SegmentorNet)
from .training import (Adam, EpochBudget, TrainConfig, detector_targets_for_sample,
                       matched_baseline_steps, preprocess_baseline_volume,
                       preprocess_classifier_batch, preprocess_roi, train_baseline,
                       train_classifier, train_detector, train_segmentor)

__all__ = [
    "Adam", "AnchorGrid", "Baseline3DNet", "CLASSIFIER_INPUT", "ClassifierNet",
    "Detection", "DetectorNet", "EpochBudget", "SEGMENTOR_INPUT", "SegmentorNet",
    "TrainConfig", "arch_descriptor", "baseline_predict", "build_model",
    "classifier_predict", "classifier_predict_batch", "detections_from_outputs",
    "detector_predict", "detector_raw_outputs", "detector_targets_for_sample",
    "load_model", "matched_baseline_steps", "nms", "preprocess_baseline_volume",
    "preprocess_classifier_batch", "preprocess_roi", "save_model",
    "segmentor_predict", "train_baseline", "train_classifier", "train_detector",
    "train_segmentor",
]
