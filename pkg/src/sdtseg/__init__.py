"""Signed distance transform regularized semantic segmentation."""

from .edt import SdtParams, brute_force_sdt, class_sdt_stack, signed_dt
from .metrics import ConfusionMatrix, accumulate, f1_per_class, iou, overall_accuracy
from .network import LossInputs, backward, forward, init_network, loss, sgd_step
from .raster import FieldStack, LabelMask, read_field_stack, read_mask, write_field_stack, write_mask
from .trainer import TrainConfig, lr_at, sliding_window_infer, train

__all__ = [
    "ConfusionMatrix",
    "FieldStack",
    "LabelMask",
    "LossInputs",
    "SdtParams",
    "TrainConfig",
    "accumulate",
    "backward",
    "brute_force_sdt",
    "class_sdt_stack",
    "f1_per_class",
    "forward",
    "init_network",
    "iou",
    "loss",
    "lr_at",
    "overall_accuracy",
    "read_field_stack",
    "read_mask",
    "sgd_step",
    "signed_dt",
    "sliding_window_infer",
    "train",
    "write_field_stack",
    "write_mask",
]
