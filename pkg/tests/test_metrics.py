import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddpm_cd.errors import ContractError, DataError, DimensionError
from ddpm_cd.metrics import (ConfusionCounts, accumulate, evaluate, format_table, from_json, scores,
                             to_json)


def test_all_ones_perfect():
    c = accumulate(None, np.ones((2, 2)), np.ones((2, 2)))
    assert c == ConfusionCounts(4, 0, 0, 0)
    s = scores(c)
    assert s.f1 == s.iou == s.oa == 1.0


def test_all_missed():
    assert accumulate(None, np.zeros(7), np.ones(7)) == ConfusionCounts(0, 0, 7, 0)


def test_hand_counted_example():
    s = scores(ConfusionCounts(tp=3, fp=1, fn=1, tn=5))
    assert (s.precision, s.recall, s.f1, s.oa) == (0.75, 0.75, 0.75, 0.8)
    assert s.iou == pytest.approx(0.6, abs=1e-15)
    assert 2 * s.iou / (1 + s.iou) == pytest.approx(0.75, abs=1e-12)


def test_nothing_to_find_is_flagged():
    s = scores(ConfusionCounts(tn=9))
    assert s.undefined and s.f1 == 0.0 and s.oa == 1.0
    with pytest.raises(ContractError):
        scores(ConfusionCounts())


def test_validation():
    with pytest.raises(DataError):
        accumulate(None, np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(DimensionError):
        accumulate(None, np.zeros(3), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 200), st.integers(0, 200), st.integers(0, 200), st.integers(0, 200))
def test_f1_iou_identity(tp, fp, fn, tn):
    c = ConfusionCounts(tp, fp, fn, tn)
    if c.total == 0:
        return
    s = scores(c)
    if tp + fp + fn:
        assert abs(s.f1 - 2 * s.iou / (1 + s.iou)) <= 1e-12


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_shard_merge_equivalence(seed, shards):
    rng = np.random.default_rng(seed)
    n = 1_000_000
    pred, gt = rng.random(n) < 0.3, rng.random(n) < 0.2
    whole = accumulate(None, pred, gt)
    cuts = np.sort(rng.choice(np.arange(1, n), size=shards - 1, replace=False)) if shards > 1 else []
    merged = ConfusionCounts()
    for p, g in zip(np.split(pred, cuts), np.split(gt, cuts)):
        merged = merged + accumulate(None, p, g)
    assert merged == whole


def test_json_and_table_roundtrip(rng):
    c, s = evaluate([rng.integers(0, 2, (4, 4)) for _ in range(3)], [rng.integers(0, 2, (4, 4)) for _ in range(3)])
    assert from_json(to_json(c)) == c
    t = format_table([("a", c), ("b", ConfusionCounts(3, 1, 1, 5))])
    assert t.splitlines()[-1].split() == ["b", "75.00", "60.00", "80.00"]
