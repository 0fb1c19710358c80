import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cxr_triage.classes import ClassConfig
from cxr_triage.loss import class_config_with_weights, compute_class_weights, weighted_bce_loss

# training column of the sample-wise split table
REFERENCE_TRAIN = {"Normal": 1341, "BacterialPneumonia": 2530, "ViralPneumonia": 1337, "COVID19": 115}


def scalar_loss_oracle(scores, labels, wpos, wneg, eps=1e-7):
    """Per-element loop with math.log; no vectorization."""
    total = 0.0
    for row, y in zip(scores, labels):
        s = 0.0
        for c, p in enumerate(row):
            p = min(max(float(p), eps), 1 - eps)
            if c == y:
                s -= wpos[c] * math.log(p)
            else:
                s -= wneg[c] * math.log(1 - p)
        total += s
    return total / len(labels)


def test_symmetric_weights():
    assert compute_class_weights([1, 1]) == {0: (0.5, 0.5), 1: (0.5, 0.5)}


def test_reference_table_weights_are_exact_rationals():
    w = compute_class_weights(REFERENCE_TRAIN)
    assert sum(REFERENCE_TRAIN.values()) == 5323
    assert w["COVID19"] == (float(Fraction(5208, 5323)), float(Fraction(115, 5323)))
    assert w["Normal"][0] == float(Fraction(3982, 5323))
    assert w["COVID19"][0] == pytest.approx(0.97840, abs=5e-6)
    assert w["Normal"][0] == pytest.approx(0.74807, abs=5e-6)
    for wp, wn in w.values():
        assert abs(wp + wn - 1) <= 1e-15


def test_zero_count_rejected():
    with pytest.raises(ValueError):
        compute_class_weights({"a": 3, "b": 0})


def test_hand_case_ln2():
    loss = weighted_bce_loss(torch.tensor([[0.5, 0.5]], dtype=torch.float64), torch.tensor([1]),
                             [0.5, 0.5], [0.5, 0.5])
    assert abs(loss.item() - math.log(2)) < 1e-9


def test_perfect_prediction_goes_to_zero():
    scores = torch.tensor([[1 - 1e-12, 1e-12, 1e-12]], dtype=torch.float64)
    loss = weighted_bce_loss(scores, torch.tensor([0]), [0.7, 0.2, 0.9], [0.3, 0.8, 0.1])
    assert loss.item() < 1e-6


def test_label_out_of_range():
    with pytest.raises(ValueError):
        weighted_bce_loss(torch.full((2, 3), 0.5), torch.tensor([0, 3]), [0.5] * 3, [0.5] * 3)


def test_matches_oracle_on_random_batches():
    rng = np.random.default_rng(7)
    for _ in range(100):
        b, c = rng.integers(1, 17), rng.choice([3, 4])
        scores = rng.uniform(0, 1, size=(b, c))
        labels = rng.integers(0, c, size=b)
        wpos = rng.uniform(0.01, 0.99, size=c)
        wneg = 1 - wpos
        got = weighted_bce_loss(torch.from_numpy(scores), torch.from_numpy(labels), wpos, wneg).item()
        assert abs(got - scalar_loss_oracle(scores, labels, wpos, wneg)) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=4, max_size=4), st.integers(0, 3),
       st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_monotone_in_true_class_score(row, y, p, step):
    w = [0.6, 0.7, 0.8, 0.9]
    lo, hi = list(row), list(row)
    lo[y], hi[y] = p, p + step
    l_lo = weighted_bce_loss(torch.tensor([lo], dtype=torch.float64), torch.tensor([y]), w, [1 - x for x in w])
    l_hi = weighted_bce_loss(torch.tensor([hi], dtype=torch.float64), torch.tensor([y]), w, [1 - x for x in w])
    assert l_hi < l_lo


def test_class_config_weights_from_labels():
    cfg = class_config_with_weights(ClassConfig.from_mode("three_class"),
                                    ["Normal"] * 3 + ["BacterialPneumonia", "ViralPneumonia"] + ["COVID19"])
    assert cfg.pos_weight == pytest.approx((3 / 6, 4 / 6, 5 / 6))
    assert cfg.neg_weight == pytest.approx((3 / 6, 2 / 6, 1 / 6))
