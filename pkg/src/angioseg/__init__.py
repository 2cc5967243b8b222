"""Weakly supervised catheter and vessel segmentation for X-ray angiography.

Top-hat masks and optical flow generate three-class labels automatically;
a numpy U-Net is trained on them in three stages (binary, multi-class,
Siamese with temporal consistency).
"""
__version__ = "0.1.0"

from .core import BACKGROUND, CATHETER, VESSEL, Sequence  # noqa: E402
from .evalmetrics import dice, per_class_dice  # noqa: E402
from .labelgen import annotate_sequence, transfer_catheter  # noqa: E402
from .morphology import background_segmentation, black_top_hat  # noqa: E402
from .nnet import DESK, PAPER, UNetConfig, init_params  # noqa: E402
from .optflow import estimate_flow, warp_frame, warp_labels, warp_probs  # noqa: E402
from .synth import SynthConfig, generate_sequence, true_flow  # noqa: E402

__all__ = [
    "BACKGROUND", "CATHETER", "VESSEL", "Sequence", "dice", "per_class_dice",
    "annotate_sequence", "transfer_catheter", "background_segmentation", "black_top_hat",
    "DESK", "PAPER", "UNetConfig", "init_params", "estimate_flow", "warp_frame",
    "warp_labels", "warp_probs", "SynthConfig", "generate_sequence", "true_flow",
]
