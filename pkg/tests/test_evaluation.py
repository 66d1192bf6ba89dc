import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import linear_scorer
from mpt_xplain.evaluation import (
    THRESHOLDS, EvaluationError, augmentation_test, classify_metrics, deduction_test, functional_analysis,
    good_explanation, oracle_explainer, random_explainer, sweep_good_explanation,
)


def test_good_all_positive():
    assert good_explanation([0, 1, 2], np.array([0.1, 0.2, 0.3, -1.0]), 0.9)


def test_good_counting_rule():
    a = np.array([0.1, 0.2, -0.1, -0.2, 0.0])
    assert not good_explanation(range(5), a, 0.5)   # 2/5 = 0.4


def test_good_zero_activated():
    with pytest.raises(EvaluationError):
        good_explanation([], np.ones(3), 0.1)


def test_sweep_all_positive():
    res = sweep_good_explanation([[0, 1], [2]], [np.ones(3), np.ones(3)])
    assert res.fractions == [1.0] * len(THRESHOLDS)


def naive_sweep(activated_sets, attributions, thresholds):
    out = []
    for t in thresholds:
        good = 0
        for act, a in zip(activated_sets, attributions):
            pos = 0
            for i in act:
                if a[i] > 0:
                    pos += 1
            if pos / len(act) > t:
                good += 1
        out.append(good / len(activated_sets))
    return out


cases = st.integers(1, 12).flatmap(lambda m: st.lists(
    st.tuples(st.lists(st.integers(0, m - 1), min_size=1, max_size=m, unique=True),
              st.lists(st.floats(-1, 1, allow_nan=False), min_size=m, max_size=m)),
    min_size=1, max_size=10))


@settings(max_examples=200, deadline=None)
@given(cases)
def test_sweep_monotone_and_matches_recount(items):
    acts = [a for a, _ in items]
    attrs = [np.array(v) for _, v in items]
    res = sweep_good_explanation(acts, attrs)
    assert all(b <= a for a, b in zip(res.fractions, res.fractions[1:]))
    assert res.fractions == naive_sweep(acts, attrs, THRESHOLDS)


def test_functional_single_candidate():
    a = np.ones(20)
    fb = functional_analysis([0.95], [list(range(10))], [a])
    rows = {(s, c): v for s, c, v in fb.rows()}
    assert rows[("(0.9,1.0]", "(0,30]")] == 1.0
    assert rows[("(0.5,0.6]", "(0,30]")] == "n/a"


def test_functional_matches_double_loop():
    rng = np.random.default_rng(0)
    n, m = 300, 80
    scores = rng.uniform(0.5 + 1e-9, 1.0, n)
    acts = [rng.choice(m, size=rng.integers(1, 70), replace=False) for _ in range(n)]
    attrs = [rng.normal(size=m) for _ in range(n)]
    fb = functional_analysis(scores, acts, attrs, good_threshold=0.4)
    s_edges = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    c_edges = [(0, 30), (30, 50), (50, 10 ** 9)]
    for i in range(5):
        for j in range(3):
            tot = good = 0
            for s, act, a in zip(scores, acts, attrs):
                if s_edges[i] < s <= s_edges[i + 1] and c_edges[j][0] < len(act) <= c_edges[j][1]:
                    tot += 1
                    good += sum(a[k] > 0 for k in act) / len(act) > 0.4
            assert fb.total[i, j] == tot and fb.good[i, j] == good


# ---------------------------------------------------------------- fidelity

def planted_world(seed=0, m=20, planted=(3, 7, 11), n=60):
    rng = np.random.default_rng(seed)
    w = np.zeros(m)
    w[list(planted)] = 4.0
    sc = linear_scorer(w, b=-6.0)
    Xm = (rng.random((n, m)) < 0.3).astype(float)
    Xm[:, list(planted)] = 1.0
    Xb = (rng.random((n, m)) < 0.3).astype(float)
    Xb[:, list(planted)] = 0.0
    return sc, w, Xm, Xb


def test_deduction_oracle_drops():
    sc, w, Xm, _ = planted_world()
    curve = deduction_test(Xm, sc, oracle_explainer(w), max_features=5)
    assert curve.pcr[0] == 1.0
    assert curve.pcr[3] < 0.2


def test_oracle_below_random_everywhere():
    sc, w, Xm, _ = planted_world(1)
    oracle = deduction_test(Xm, sc, oracle_explainer(w), 10)
    rand = deduction_test(Xm, sc, random_explainer(0), 10)
    assert all(o <= r for o, r in zip(oracle.pcr, rand.pcr))


def test_deduction_truncates_at_m():
    sc, w, Xm, _ = planted_world()
    assert deduction_test(Xm, sc, oracle_explainer(w), 100).n[-1] == 20


def test_augmentation_oracle_rises():
    sc, w, Xm, Xb = planted_world(2)
    curve = augmentation_test(Xm, Xb, sc, oracle_explainer(w), 5)
    assert curve.pcr[3] > 0.8


def test_augmentation_n0_is_benign_fpr():
    sc, w, Xm, Xb = planted_world(3)
    Xb[:5, [3, 7, 11]] = 1.0     # a few benign rows the model flags
    curve = augmentation_test(Xm, Xb, sc, oracle_explainer(w), 2)
    assert curve.pcr[0] == pytest.approx(np.mean(sc.predict_proba(Xb) >= 0.5))


def test_augmentation_empty_sets():
    sc, w, Xm, _ = planted_world()
    with pytest.raises(EvaluationError):
        augmentation_test(Xm, Xm[:0], sc, oracle_explainer(w), 3)


# ---------------------------------------------------------------- detector metrics

def test_mcc_perfect():
    assert classify_metrics([1, 0, 1, 0], [1, 0, 1, 0])["mcc"] == 1.0


def test_mcc_no_skill():
    assert classify_metrics([1, 0, 1, 0], [1, 1, 1, 1])["mcc"] == 0.0


def test_mcc_single_class():
    out = classify_metrics([1, 1, 1], [1, 0, 1])
    assert out["mcc"] is None and out["mcc_reason"]


def test_rates():
    out = classify_metrics([1, 1, 0, 0], [1, 0, 1, 0])
    assert out["tpr"] == 0.5 and out["fpr"] == 0.5 and -1 <= out["mcc"] <= 1
