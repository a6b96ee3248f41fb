"""Evaluation: box metrics, training losses, synthetic sequences and a toy trainer."""
from .losses import EmptyMaskWarning, bce_loss, iou_loss, total_loss
from .metrics import (THRESHOLDS, Box, SequenceResult, center_error, iou, iou_many, precision,
                      success_auc, success_curve)
from .synth import SynthSequence, synth_sequence

__all__ = [
    "Box", "iou", "iou_many", "center_error", "success_curve", "success_auc", "precision",
    "THRESHOLDS", "SequenceResult", "bce_loss", "iou_loss", "total_loss", "EmptyMaskWarning",
    "SynthSequence", "synth_sequence",
]
