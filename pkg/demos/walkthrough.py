"""One synthetic sequence through every building block, printing as it goes.

    python demos/walkthrough.py [seed]

Takes a couple of minutes on one core: top-hat masks, flow against the true
motion, a short binary U-Net fit, and automatic catheter/vessel labels from
raw and from refined masks.
"""
import sys

import numpy as np

from angioseg.evalmetrics import dice, per_class_dice
from angioseg.labelgen import annotate_sequence
from angioseg.morphology import background_segmentation
from angioseg.optflow import central_crop, endpoint_error, estimate_flow
from angioseg.synth import SynthConfig, generate_sequence, true_flow
from angioseg.train import TrainConfig, cc_postprocess, infer_batch, train_binary


def main(seed=0):
    seq, gt = generate_sequence(SynthConfig(seed=seed))
    truth = gt.labels > 0
    print(f"sequence {seq.name}: {len(seq)} frames of {seq.frames.shape[1:]}, contrast from t={gt.onset}")

    masks = np.stack([background_segmentation(f) for f in seq.frames])
    d = [dice(m, t) for m, t in zip(masks, truth)]
    print("top-hat + CC Dice per frame:", np.round(d, 2))

    t = len(seq) - 1
    v = true_flow(gt, t, t - 1)
    epe = central_crop(endpoint_error(estimate_flow(seq.frames[t], seq.frames[t - 1]), v)).mean()
    print(f"flow frame {t} -> {t - 1}: mean endpoint error {epe:.2f} px "
          f"(true motion {central_crop(np.hypot(v[..., 0], v[..., 1])).mean():.2f} px)")

    others = [generate_sequence(SynthConfig(seed=seed + k)) for k in range(1, 9)]
    frames = np.concatenate([s.frames for s, _ in others])
    train_masks = np.stack([background_segmentation(f) for f in frames])
    params, report = train_binary(frames, train_masks, TrainConfig(epochs=20, seed=seed))
    pred = infer_batch(params, seq.frames) > 0
    print(f"binary U-Net after {len(report.losses)} epochs on 8 other sequences: "
          f"loss {report.initial_loss:.3f} -> {report.losses[-1]:.3f}, "
          f"Dice {np.mean([dice(p, t) for p, t in zip(pred, truth)]):.3f} vs top-hat {np.mean(d):.3f}")

    refined = np.stack([cc_postprocess(p.astype(np.uint8)) > 0 for p in pred])
    for source, masks in (("top-hat", None), ("U-Net", refined)):
        labels, ref, _ = annotate_sequence(seq, binary_masks=masks)
        scores = [per_class_dice(a, b) for a, b in zip(labels[gt.onset:], gt.labels[gt.onset:])]
        print(f"automatic labels from {source} masks (reference frame {ref.index}): catheter Dice "
              f"{np.mean([s.catheter for s in scores]):.2f}, vessel Dice "
              f"{np.mean([s.vessel for s in scores if s.vessel is not None]):.2f}")

if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
