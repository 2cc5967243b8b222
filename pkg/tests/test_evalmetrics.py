import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from angioseg.core import CATHETER, VESSEL
from angioseg.evalmetrics import (aggregate, confusion, dice, evaluate_pipeline, per_class_dice,
                                  write_table)

masks = arrays(bool, st.tuples(st.integers(1, 6), st.integers(1, 6)))


def enum_dice(x, y):
    """Pixel-by-pixel enumeration of 2TP / (2TP + FP + FN)."""
    tp = fp = fn = 0
    for a, b in zip(np.ravel(x), np.ravel(y)):
        tp += a and b
        fp += a and not b
        fn += b and not a
    return 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def test_examples():
    x = np.zeros((2, 2), bool)
    y = np.zeros((2, 2), bool)
    x[0, 0] = x[0, 1] = True
    y[0, 1] = y[1, 1] = True
    assert confusion(x, y) == (1, 1, 1)
    assert dice(x, y) == 0.5
    assert dice(x, x) == 1.0
    assert dice(x, ~x) == 0.0
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_dice_properties(data):
    x = data.draw(masks)
    y = data.draw(arrays(bool, x.shape))
    d = dice(x, y)
    assert d == dice(y, x) == enum_dice(x, y)
    assert 0.0 <= d <= 1.0 and dice(x, x) == 1.0
    # adding a correctly labelled pixel never lowers the score
    missing = np.argwhere(y & ~x)
    if len(missing):
        x2 = x.copy()
        x2[tuple(missing[0])] = True
        assert dice(x2, y) >= d


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_binary_score_is_union_dice(data):
    shape = data.draw(st.tuples(st.integers(1, 6), st.integers(1, 6)))
    labels = arrays(np.uint8, shape, elements=st.integers(0, 2))
    p, t = data.draw(labels), data.draw(labels)
    r = per_class_dice(p, t)
    assert r.binary == enum_dice(p > 0, t > 0)
    tp, fp, fn = r.counts["binary"]
    assert r.binary == (1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    for name, cls in (("vessel", VESSEL), ("catheter", CATHETER)):
        score = getattr(r, name)
        if not (p == cls).any() and not (t == cls).any():
            assert score is None
        else:
            assert score == enum_dice(p == cls, t == cls)


def test_per_class_examples(rng):
    t = rng.integers(0, 3, (8, 8)).astype(np.uint8)
    t[0, :2] = [VESSEL, CATHETER]
    r = per_class_dice(t, t)
    assert (r.binary, r.vessel, r.catheter) == (1.0, 1.0, 1.0)
    swapped = np.choose(t, [0, CATHETER, VESSEL]).astype(np.uint8)
    r = per_class_dice(swapped, t)
    assert (r.binary, r.vessel, r.catheter) == (1.0, 0.0, 0.0)
    r = per_class_dice(np.zeros((4, 4), np.uint8), np.zeros((4, 4), np.uint8))
    assert r.binary == 1.0 and r.vessel is None and r.catheter is None
    with pytest.raises(ValueError):
        per_class_dice(np.zeros((2, 2)), np.zeros((3, 2)))


def test_aggregate_mean_over_frames():
    a = per_class_dice(np.array([[1, 0]], np.uint8), np.array([[1, 0]], np.uint8))
    b = per_class_dice(np.array([[2, 0]], np.uint8), np.array([[0, 2]], np.uint8))
    agg = aggregate([a, b])
    assert agg.binary == 0.5 and agg.vessel == 1.0 and agg.catheter == 0.0
    assert agg.frames == 2 and agg.counts["binary"] == (1, 1, 1)
    assert np.isnan(aggregate([]).binary)


def test_pipeline_table(tmp_path, rng):
    t = rng.integers(0, 3, (6, 6)).astype(np.uint8)
    p = rng.integers(0, 3, (6, 6)).astype(np.uint8)
    table = evaluate_pipeline([t], {"net": [p], "bin": [p > 0]})
    r = per_class_dice(p, t)
    assert (table["net"].binary, table["net"].vessel, table["net"].catheter) == \
        (r.binary, r.vessel, r.catheter)
    assert table["bin"].binary == r.binary and table["bin"].catheter is None
    with pytest.raises(ValueError):
        evaluate_pipeline([t, t], {"net": [p]})
    write_table(table, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["variant", "binary_dice", "catheter_dice", "vessel_dice"]
    assert rows[2][0] == "bin" and rows[2][2] == "" and float(rows[1][1]) == pytest.approx(r.binary)
