import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locseg.evaluation_stats import (
    MethodScores,
    aggregate,
    benefit_vs_foreground,
    dice,
    format_cell,
    two_sided_t_test,
)
from oracles import pooled_t_test_oracle

# reference test-set means (baseline, two stage, gt localised)
REFERENCE_TEST_MEANS = {
    "spleen": (0.4433, 0.6503, 0.8255),
    "pancreas": (0.4366, 0.6519, 0.7397),
    "prostate": (0.797, 0.7204, 0.8361),
}
REFERENCE_FG_PERCENT = {"pancreas": 0.2, "prostate": 2.7}


def _mask(idx, shape=(3, 3, 3)):
    m = np.zeros(shape, dtype=np.uint8)
    for i in idx:
        m[i] = 1
    return m


def test_dice_examples():
    a = _mask([(0, 0, 0), (0, 0, 1), (0, 0, 2)])
    b = _mask([(0, 0, 0), (0, 0, 1), (1, 1, 1), (2, 2, 2)])
    assert dice(a, b) == 4 / 7
    assert dice(a, a) == 1.0
    assert dice(a, _mask([(2, 2, 2)])) == 0.0
    assert dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dice_symmetric_and_reflexive(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((4, 4, 4)) > 0.6
    b = rng.random((4, 4, 4)) > 0.6
    assert dice(a, b) == dice(b, a)
    assert dice(a, a) == 1.0


def test_t_test_identical_samples():
    assert two_sided_t_test([1, 2, 3, 4, 5], [1, 2, 3, 4, 5]) == (0.0, 1.0)


def test_t_test_spec_example_against_oracle():
    a, b = [0.60, 0.62, 0.61], [0.70, 0.71, 0.69]
    t, p = two_sided_t_test(a, b)
    t_ref, p_ref = pooled_t_test_oracle(a, b)
    assert t == pytest.approx(t_ref, abs=1e-9)
    assert p == pytest.approx(p_ref, abs=1e-9)


def test_t_test_small_sample_error():
    with pytest.raises(ValueError):
        two_sided_t_test([1.0], [1.0, 2.0])


def test_t_test_zero_variance():
    assert two_sided_t_test([0.5, 0.5], [0.5, 0.5]) == (0.0, 1.0)
    t, p = two_sided_t_test([0.4, 0.4], [0.5, 0.5])
    assert t == -math.inf and p == 0.0


def test_t_test_welch_differs():
    a, b = [0.1, 0.2, 0.9, 0.5], [0.5, 0.51, 0.52]
    assert two_sided_t_test(a, b)[1] != two_sided_t_test(a, b, equal_var=False)[1]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-5, 5))
def test_t_test_antisymmetry_and_shift(seed, shift):
    rng = np.random.default_rng(seed)
    a, b = rng.random(6), rng.random(5) + 0.2
    t, p = two_sided_t_test(a, b)
    t2, p2 = two_sided_t_test(b, a)
    assert t2 == pytest.approx(-t, rel=1e-12)
    assert p2 == pytest.approx(p, rel=1e-12)
    t3, _ = two_sided_t_test(a + shift, b + shift)
    assert t3 == pytest.approx(t, rel=1e-7, abs=1e-9)


def _cells(organ, split, base, two, gt):
    return [MethodScores(organ, "baseline", split, base), MethodScores(organ, "two_stage", split, two),
            MethodScores(organ, "gt_localised", split, gt)]


def test_format_cell():
    assert format_cell(0.6491, 0.0997) == "0.6491 ± 0.0997"


def test_aggregate_rows_and_flags():
    rng = np.random.default_rng(0)
    base = list(0.5 + 0.01 * rng.standard_normal(10))
    two = list(0.7 + 0.01 * rng.standard_normal(10))
    gt = list(0.8 + 0.01 * rng.standard_normal(10))
    rows = aggregate(_cells("spleen", "test", base, two, gt))
    assert [r["method"] for r in rows] == ["baseline", "two_stage", "gt_localised"]
    assert rows[0]["mean"] == pytest.approx(np.mean(base))
    assert rows[0]["std"] == pytest.approx(np.std(base, ddof=1))
    assert math.isnan(rows[0]["p_vs_baseline"]) and not rows[0]["bold"]
    assert rows[1]["sig_0.001"] and rows[1]["bold"]
    assert rows[2]["p_vs_two_stage"] < 0.001


def test_aggregate_single_run_std_zero():
    rows = aggregate(_cells("heart", "validation", [0.4], [0.5], [0.6]))
    assert all(r["std"] == 0.0 for r in rows)
    assert all(math.isnan(r["p_vs_baseline"]) for r in rows)


def test_aggregate_identical_scores_not_significant():
    vals = [0.3, 0.4, 0.5]
    rows = aggregate(_cells("liver", "test", vals, vals, vals))
    assert rows[1]["p_vs_baseline"] == 1.0 and not rows[1]["bold"]


def test_aggregate_permutation_invariant():
    vals = [0.3, 0.41, 0.52, 0.6]
    r1 = aggregate(_cells("x", "test", vals, vals[::-1], vals))
    r2 = aggregate(_cells("x", "test", vals[::-1], vals, vals[1:] + vals[:1]))
    for a, b in zip(r1, r2):
        assert a["mean"] == pytest.approx(b["mean"])


def test_aggregate_missing_cell():
    cells = _cells("x", "test", [0.1, 0.2], [0.1, 0.2], [0.1, 0.2])[:2]
    with pytest.raises(KeyError):
        aggregate(cells)


def test_method_scores_validation():
    with pytest.raises(ValueError):
        MethodScores("x", "baseline", "test", [1.2])
    with pytest.raises(ValueError):
        MethodScores("x", "nope", "test", [0.2])


def test_benefit_reference_spleen():
    b, t, g = REFERENCE_TEST_MEANS["spleen"]
    rows = benefit_vs_foreground(_cells("spleen", "test", [b], [t], [g]), {"spleen": 0.5})
    assert rows[0]["gt_localised_benefit"] == pytest.approx(0.3822, abs=1e-12)


def test_benefit_equal_means_zero():
    rows = benefit_vs_foreground(_cells("x", "test", [0.5, 0.6], [0.6, 0.5], [0.55, 0.55]), {"x": 1.0})
    assert rows[0]["two_stage_benefit"] == pytest.approx(0.0, abs=1e-15)
    assert rows[0]["gt_localised_benefit"] == pytest.approx(0.0, abs=1e-15)


def test_benefit_trend_on_reference_values():
    cells = []
    for organ in ("pancreas", "prostate"):
        cells += _cells(organ, "test", *([v] for v in REFERENCE_TEST_MEANS[organ]))
    rows = {r["organ"]: r for r in benefit_vs_foreground(cells, REFERENCE_FG_PERCENT)}
    assert rows["pancreas"]["foreground_percent"] < rows["prostate"]["foreground_percent"]
    assert rows["pancreas"]["gt_localised_benefit"] > rows["prostate"]["gt_localised_benefit"]
    assert rows["pancreas"]["two_stage_benefit"] > rows["prostate"]["two_stage_benefit"]


def test_benefit_missing_method():
    with pytest.raises(KeyError):
        benefit_vs_foreground([MethodScores("x", "baseline", "test", [0.5])], {"x": 1.0})
