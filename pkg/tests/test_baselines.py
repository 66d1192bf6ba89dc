from itertools import combinations
from math import factorial

import numpy as np
import pytest
from scipy.stats import spearmanr

from mpt_xplain.baselines import BaselineConfig, BaselineError, explain_kshap_style, explain_lime_style
from mpt_xplain.models import FunctionScorer


def brute_shapley(f, x):
    """Shapley values with zero background by enumerating every coalition."""
    d = len(x)
    phi = np.zeros(d)

    def v(S):
        z = np.zeros(d)
        z[list(S)] = x[list(S)]
        return f(z[None, :])[0]

    for i in range(d):
        rest = [j for j in range(d) if j != i]
        for s in range(d):
            for S in combinations(rest, s):
                wgt = factorial(s) * factorial(d - s - 1) / factorial(d)
                phi[i] += wgt * (v(S + (i,)) - v(S))
    return phi


def additive_scorer(rng, m):
    a, b, c = rng.normal(size=(3, m)) * 0.1
    fn = lambda X: 0.5 + np.sum(a * X + b * X ** 2 + c * np.sin(3 * X), axis=1) / m
    return FunctionScorer(fn, m), (a, b, c)


def interacting_scorer(m):
    return FunctionScorer(lambda X: 1 / (1 + np.exp(-(X[:, 0] * X[:, 1] + X.sum(axis=1) - 1))), m)


def test_kshap_additive_matches_gi():
    rng = np.random.default_rng(0)
    for m in (1, 2, 5, 9):
        sc, (a, b, c) = additive_scorer(rng, m)
        x = rng.uniform(0.1, 1.0, m)
        res = explain_kshap_style(x, sc, BaselineConfig(method="kshap", target_class=1))
        g = (a * x + b * x ** 2 + c * np.sin(3 * x)) / m
        assert np.allclose(res.a, g, atol=1e-6)


def test_kshap_matches_brute_force_on_interactions():
    rng = np.random.default_rng(1)
    for m in (3, 6, 8):
        sc = interacting_scorer(m)
        x = rng.uniform(0.2, 1.0, m)
        res = explain_kshap_style(x, sc, BaselineConfig(method="kshap", target_class=1))
        assert np.allclose(res.a, brute_shapley(sc.predict_proba, x), atol=1e-6)


def test_kshap_efficiency_exact_and_sampled():
    rng = np.random.default_rng(2)
    for m, exact in ((6, True), (20, False)):
        sc = interacting_scorer(m)
        x = rng.uniform(0.2, 1.0, m)
        res = explain_kshap_style(x, sc, BaselineConfig(method="kshap", exact=exact, target_class=1))
        gap = res.a.sum() - (sc.predict_proba(x[None])[0] - sc.predict_proba(np.zeros((1, m)))[0])
        assert abs(gap) <= 1e-8


def test_kshap_symmetry_of_duplicates():
    m = 6
    sc = FunctionScorer(lambda X: 1 / (1 + np.exp(-(X[:, 0] * X[:, 1] + X[:, 2:].sum(axis=1)))), m)
    x = np.array([0.7, 0.7, 0.2, 0.5, 0.1, 0.9])
    a = explain_kshap_style(x, sc, BaselineConfig(method="kshap", target_class=1)).a
    assert abs(a[0] - a[1]) <= 1e-8


def test_kshap_sampled_converges():
    m = 10
    sc = interacting_scorer(m)
    x = np.random.default_rng(3).uniform(0.2, 1.0, m)
    exact = explain_kshap_style(x, sc, BaselineConfig(method="kshap", exact=True, target_class=1)).a
    errs = [np.abs(explain_kshap_style(x, sc, BaselineConfig(method="kshap", exact=False, num_samples=n,
                                                              target_class=1)).a - exact).max()
            for n in (64, 4096)]
    assert errs[1] <= 1e-2
    assert errs[1] <= errs[0]


def test_kshap_budget_error():
    with pytest.raises(BaselineError, match="at least"):
        explain_kshap_style(np.ones(30), interacting_scorer(30), BaselineConfig(method="kshap", num_samples=10))


def test_kshap_zero_features_get_zero():
    sc = interacting_scorer(5)
    a = explain_kshap_style(np.array([0.5, 0.0, 0.3, 0.0, 0.9]), sc).a
    assert a[1] == 0.0 and a[3] == 0.0


def _linear_prob(w):
    return FunctionScorer(lambda X: np.clip(0.5 + 0.02 * (X @ w), 0, 1), len(w))


def test_lime_rank_correlates_with_contribution():
    rng = np.random.default_rng(4)
    w = rng.normal(size=10)
    x = rng.uniform(0.2, 1.0, 10)
    res = explain_lime_style(x, _linear_prob(w), BaselineConfig(method="lime", target_class=1))
    assert spearmanr(res.a, w * x)[0] >= 0.9


def test_lime_constant_scorer():
    sc = FunctionScorer(lambda X: np.full(len(X), 0.7), 8)
    a = explain_lime_style(np.full(8, 0.5), sc).a
    assert np.abs(a).max() <= 1e-8


def test_baselines_deterministic():
    sc = interacting_scorer(15)
    x = np.linspace(0.1, 1.0, 15)
    for fn, method in ((explain_lime_style, "lime"), (explain_kshap_style, "kshap")):
        cfg = BaselineConfig(method=method, seed=3)
        assert np.array_equal(fn(x, sc, cfg).a, fn(x, sc, cfg).a)


def test_lime_too_few_samples():
    with pytest.raises(BaselineError):
        explain_lime_style(np.ones(10), interacting_scorer(10), BaselineConfig(num_samples=5))
