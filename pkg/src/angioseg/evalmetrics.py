"""Dice scores: binary, per class, and per pipeline variant."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import BACKGROUND, CATHETER, VESSEL


def confusion(x, y) -> tuple[int, int, int]:
    """``(TP, FP, FN)`` of prediction ``x`` against truth ``y``."""
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    tp = int(np.count_nonzero(x & y))
    return tp, int(np.count_nonzero(x)) - tp, int(np.count_nonzero(y)) - tp


def dice_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def dice(x, y) -> float:
    """``2TP / (2TP + FP + FN)``; two empty masks score 1."""
    return dice_from_counts(*confusion(x, y))


@dataclass
class EvalResult:
    binary: float
    vessel: float | None
    catheter: float | None
    counts: dict = field(default_factory=dict)  # class name -> (tp, fp, fn)
    frames: int = 1

    def as_row(self) -> dict:
        return {"binary_dice": self.binary, "catheter_dice": self.catheter,
                "vessel_dice": self.vessel}


def per_class_dice(pred, truth) -> EvalResult:
    """Class-vs-rest Dice for vessel and catheter plus Dice of the foreground union.

    A class missing from both ``pred`` and ``truth`` is reported as ``None``.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    counts = {"binary": confusion(pred != BACKGROUND, truth != BACKGROUND)}
    scores = {}
    for name, cls in (("vessel", VESSEL), ("catheter", CATHETER)):
        c = confusion(pred == cls, truth == cls)
        counts[name] = c
        scores[name] = None if sum(c) == 0 else dice_from_counts(*c)
    return EvalResult(dice_from_counts(*counts["binary"]), scores["vessel"], scores["catheter"],
                      counts)


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def aggregate(results: list[EvalResult]) -> EvalResult:
    """Unweighted mean over frames; absent class scores are skipped."""
    if not results:
        return EvalResult(float("nan"), None, None, {}, 0)
    counts = {}
    for k in ("binary", "vessel", "catheter"):
        have = [r.counts[k] for r in results if k in r.counts]
        if have:
            counts[k] = tuple(int(sum(c[i] for c in have)) for i in range(3))
    return EvalResult(float(np.mean([r.binary for r in results])),
                      _mean_or_none([r.vessel for r in results]),
                      _mean_or_none([r.catheter for r in results]),
                      counts, len(results))


def evaluate_pipeline(truths, variants: dict) -> dict[str, EvalResult]:
    """Score each variant's predictions against the ground truth frames.

    ``truths`` is a list of label masks; ``variants`` maps a variant name to a
    list of predicted masks aligned with ``truths``. Binary predictions (0/1)
    only contribute to the binary score; pass them as boolean arrays.
    """
    table = {}
    for name, preds in variants.items():
        if len(preds) != len(truths):
            raise ValueError(f"variant {name!r}: {len(preds)} predictions for "
                             f"{len(truths)} frames")
        results = []
        for p, t in zip(preds, truths):
            p = np.asarray(p)
            if p.dtype == bool:
                r = per_class_dice(p.astype(np.uint8), t)
                r = EvalResult(r.binary, None, None, {"binary": r.counts["binary"]})
            else:
                r = per_class_dice(p, t)
            results.append(r)
        table[name] = aggregate(results)
    return table


def write_table(table: dict[str, EvalResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "binary_dice", "catheter_dice", "vessel_dice"])
        for name, r in table.items():
            w.writerow([name] + [_cell(v) for v in (r.binary, r.catheter, r.vessel)])


def _cell(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}"
