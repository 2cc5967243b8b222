"""Three-class labels from binary masks and motion.

Foreground in the pre-contrast reference frame is catheter. Warping that
mask onto frame ``t`` and intersecting it with the binary mask of ``t``
splits the foreground: overlap is catheter, the rest is contrast-filled
vessel.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .core import BACKGROUND, CATHETER, VESSEL, Sequence
from .morphology import MorphologyConfig, background_segmentation, dilate
from .optflow import FlowConfig, estimate_flow, warp_labels


class ReferenceSelection(NamedTuple):
    sequence: str
    index: int
    rationale: str


@dataclass(frozen=True)
class LabelConfig:
    reference: str = "second"  # "second" or "auto"
    auto_tolerance: float = 0.2
    halo: int = 3  # side of the square dilation of the warped reference; 1 disables
    chain_flow: bool = False
    mask_source: str = "refined"  # "refined" (binary U-Net) or "raw" (top-hat)
    morphology: MorphologyConfig = field(default_factory=MorphologyConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)

    def with_(self, **kw) -> "LabelConfig":
        return dataclasses.replace(self, **kw)


def select_reference(seq: Sequence, binary_masks, auto: bool = False,
                     tolerance: float = 0.2) -> ReferenceSelection:
    """Pick the catheter-only reference frame.

    The default is the second frame. With ``auto`` the latest frame of the
    leading run whose foreground area stays within ``tolerance`` of the first
    frame's is chosen.
    """
    if len(seq) < 2:
        raise ValueError("reference selection needs at least two frames")
    if len(binary_masks) != len(seq):
        raise ValueError("one binary mask per frame is required")
    if not auto:
        return ReferenceSelection(seq.name, 1, "second frame")
    areas = np.array([np.count_nonzero(m) for m in binary_masks], dtype=np.float64)
    base = areas[0]
    idx = 0
    for t in range(1, len(areas)):
        if abs(areas[t] - base) > tolerance * max(base, 1.0):
            break
        idx = t
    return ReferenceSelection(seq.name, idx, f"area within {tolerance:.0%} of frame 0")


def transfer_catheter(ref_mask, flow_ref_to_t, mask_t, halo: int = 3) -> np.ndarray:
    """Split ``mask_t`` into catheter (matched by the warped reference) and vessel.

    ``flow_ref_to_t`` follows the backward convention on the grid of frame
    ``t``: ``frame_t(p) ~ frame_ref(p + u(p))``.
    """
    ref_mask = np.asarray(ref_mask, dtype=bool)
    mask_t = np.asarray(mask_t, dtype=bool)
    if ref_mask.shape != mask_t.shape or np.shape(flow_ref_to_t)[:2] != mask_t.shape:
        raise ValueError("reference mask, flow and target mask must share dimensions")
    warped = warp_labels(ref_mask, flow_ref_to_t)
    if halo > 1:
        from .morphology import StructuringElement
        warped = dilate(warped.astype(np.float64), StructuringElement(halo, halo)) > 0.5
    out = np.full(mask_t.shape, BACKGROUND, dtype=np.uint8)
    out[mask_t & warped] = CATHETER
    out[mask_t & ~warped] = VESSEL
    return out


def raw_masks(seq: Sequence, cfg: MorphologyConfig = MorphologyConfig()) -> np.ndarray:
    return np.stack([background_segmentation(f, cfg) for f in seq.frames])


def reference_flows(seq: Sequence, ref: int, cfg: LabelConfig,
                    flow_fn: Callable | None = None) -> list[np.ndarray]:
    """Flow from every frame's grid into the reference frame.

    ``flow_fn(t1, t2)`` may supply (e.g. cached) flows with the convention
    ``frame_t1(p) ~ frame_t2(p + u(p))``.
    """
    if flow_fn is None:
        def flow_fn(t1, t2):
            return estimate_flow(seq.frames[t1], seq.frames[t2], cfg.flow)
    H, W = seq.shape
    flows = []
    for t in range(len(seq)):
        if t == ref:
            flows.append(np.zeros((H, W, 2)))
        elif not cfg.chain_flow:
            flows.append(flow_fn(t, ref))
        else:
            flows.append(None)
    if cfg.chain_flow:
        # compose consecutive flows outward from the reference
        for t in list(range(ref + 1, len(seq))) + list(range(ref - 1, -1, -1)):
            prev = t - 1 if t > ref else t + 1
            step = flow_fn(t, prev)
            flows[t] = _compose(step, flows[prev])
    return flows


def _compose(first, second):
    """Flow of ``p -> p + a(p) -> (p + a) + b(p + a)``."""
    from .optflow import BilinearSampler
    H, W = first.shape[:2]
    smp = BilinearSampler(first)
    b = smp.gather(second)
    # outside samples keep the first displacement only
    return first + np.where(smp.inside[..., None], b, 0.0)


def annotate_sequence(seq: Sequence, cfg: LabelConfig = LabelConfig(), binary_masks=None,
                      flow_fn: Callable | None = None):
    """Per-frame three-class labels for a whole sequence.

    ``binary_masks`` overrides the top-hat masks (e.g. with binary U-Net
    predictions). Returns ``(labels, reference_selection, flows)``.
    """
    if len(seq) < 2:
        raise ValueError("annotation needs at least two frames")
    masks = raw_masks(seq, cfg.morphology) if binary_masks is None \
        else np.asarray(binary_masks, dtype=bool)
    ref = select_reference(seq, masks, auto=cfg.reference == "auto",
                           tolerance=cfg.auto_tolerance)
    flows = reference_flows(seq, ref.index, cfg, flow_fn)
    labels = []
    for t in range(len(seq)):
        if t <= ref.index:
            # nothing but the catheter is visible before contrast arrives
            labels.append(np.where(masks[t], CATHETER, BACKGROUND).astype(np.uint8))
        else:
            labels.append(transfer_catheter(masks[ref.index], flows[t], masks[t], cfg.halo))
    return np.stack(labels), ref, flows
