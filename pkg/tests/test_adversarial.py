import itertools

import numpy as np
import pytest

from conftest import linear_scorer
from mpt_xplain.adversarial import (
    AdversarialCandidate, AttackError, GAConfig, _Embedder, adversarial_sample, build_candidate_pool, generate,
    stratify_by_score,
)
from mpt_xplain.corpus import FeatureToken, Sample, embed, fit_vocabulary
from mpt_xplain.models import FunctionScorer

PERMS = [FeatureToken("permission", f"P{i:02d}") for i in range(20)]
APIS = [FeatureToken("api_call", f"A{i}") for i in range(3)]


def toy_world():
    # every permission and api call appears in some but not all documents
    training = [Sample(f"b{i}", "benign", (PERMS[i], APIS[i % 3])) for i in range(20)]
    training.append(Sample("m0", "malware", tuple(APIS)))
    training.append(Sample("b_extra", "benign", (FeatureToken("activity", "Main"),)))
    vocab = fit_vocabulary(training)
    w = np.zeros(len(vocab))
    for t in PERMS:
        w[vocab.index[t]] = -1.0
    for t in APIS:
        w[vocab.index[t]] = 3.0
    scorer = linear_scorer(w, b=-1.5, scale=2.0)
    base = Sample("mal", "malware", tuple(APIS) + (PERMS[0],))
    return training, vocab, scorer, base


def test_pool_set_difference():
    p = [FeatureToken("permission", n) for n in ("p1", "p2", "p3")]
    training = [Sample("a", "benign", (p[0], p[1])), Sample("b", "benign", (p[2],))]
    base = Sample("m", "malware", (p[1], FeatureToken("api_call", "x")))
    assert build_candidate_pool(training, base) == [p[0], p[2]]


def test_pool_exhausted():
    p = [FeatureToken("permission", n) for n in ("p1", "p2")]
    training = [Sample("a", "benign", tuple(p))]
    with pytest.raises(AttackError, match="no candidate features"):
        build_candidate_pool(training, Sample("m", "malware", tuple(p)))


def test_pool_matches_naive_scan(small_corpus):
    training = small_corpus["train"]
    for base in small_corpus["test"][:10]:
        expected = set()
        for s in training:
            for t in s.tokens:
                if t.category == "permission" and t not in base.tokens:
                    expected.add(t)
        assert build_candidate_pool(training, base) == sorted(expected)


def test_embedder_matches_full_embedding():
    training, vocab, _, base = toy_world()
    pool = build_candidate_pool(training, base)
    emb = _Embedder(base, pool, vocab)
    genes = np.zeros(len(pool), dtype=int)
    genes[[0, 4, 7]] = 1
    adv = Sample("x", "malware", base.tokens + tuple(pool[j] for j in (0, 4, 7)))
    assert np.allclose(emb(genes)[0], embed(adv, vocab).values, atol=1e-15)


def test_evading_subset_exists_and_ga_finds_it():
    training, vocab, scorer, base = toy_world()
    pool = build_candidate_pool(training, base)
    assert len(pool) == 19
    emb = _Embedder(base, pool, vocab)
    # exhaustive over the first 10 genes confirms that evasion is reachable
    small = np.array(list(itertools.product([0, 1], repeat=10)))
    genes = np.zeros((len(small), len(pool)), dtype=int)
    genes[:, :10] = small
    assert np.any(1 - scorer.predict_proba(emb(genes)) > 0.5)

    res = generate(base, scorer, vocab, pool, GAConfig(seed=0))
    assert res.candidates and res.generations <= 500
    for c in res.candidates:
        x = embed(adversarial_sample(base, c), vocab).values
        assert 1 - scorer.predict_proba(x)[0] > 0.5
        assert c.activated
        assert set(base.tokens) <= set(adversarial_sample(base, c).tokens)
        assert all(t.category == "permission" for t in c.activated)


def test_ga_deterministic():
    training, vocab, scorer, base = toy_world()
    pool = build_candidate_pool(training, base)
    a = generate(base, scorer, vocab, pool, GAConfig(seed=5))
    b = generate(base, scorer, vocab, pool, GAConfig(seed=5))
    assert [c.to_json() for c in a.candidates] == [c.to_json() for c in b.candidates]
    assert a.history == b.history


def test_running_max_nondecreasing():
    training, vocab, scorer, base = toy_world()
    pool = build_candidate_pool(training, base)
    h = generate(base, scorer, vocab, pool, GAConfig(seed=1, stop_fitness=1.1, max_loop=60)).history
    assert all(b >= a for a, b in zip(h, h[1:]))


def _constant(p):
    return FunctionScorer(lambda X: np.full(len(X), p), None)


def test_forced_idle_stops_at_generation_11():
    training, vocab, _, base = toy_world()
    pool = build_candidate_pool(training, base)
    res = generate(base, _constant(0.8), vocab, pool, GAConfig(seed=0))
    assert res.stop_reason == "idle"
    assert res.generations == 11
    assert res.candidates == []   # benign score 0.2 never evades


def test_cap_at_max_loop():
    training, vocab, _, base = toy_world()
    pool = build_candidate_pool(training, base)
    res = generate(base, _constant(0.8), vocab, pool, GAConfig(seed=0, idle_generations=10 ** 6))
    assert res.stop_reason == "max_loop" and res.generations == 500


def test_fitness_stop():
    training, vocab, _, base = toy_world()
    pool = build_candidate_pool(training, base)
    # malware unless any permission beyond the base is added, then very benign
    n0 = 4
    sc = FunctionScorer(lambda X: np.where((X > 0).sum(axis=1) > n0, 0.001, 0.9), len(vocab))
    res = generate(base, sc, vocab, pool, GAConfig(seed=0))
    assert res.stop_reason == "fitness" and res.generations == 1


def test_base_not_detected():
    training, vocab, _, base = toy_world()
    with pytest.raises(AttackError, match="base not detected"):
        generate(base, _constant(0.2), vocab, build_candidate_pool(training, base))


def test_multiple_scorers_all_evaded():
    training, vocab, scorer, base = toy_world()
    pool = build_candidate_pool(training, base)
    strict = FunctionScorer(lambda X: np.clip(scorer.predict_proba(X) + 0.1, 0, 1), len(vocab))
    res = generate(base, [scorer, strict], vocab, pool, GAConfig(seed=0))
    for c in res.candidates:
        assert len(c.scores) == 2 and min(c.scores) > 0.5
        assert c.fitness == min(c.scores)


# ---------------------------------------------------------------- stratification

def _cands(scores):
    return [AdversarialCandidate("b", (), s, [s], np.zeros(1)) for s in scores]


def test_stratify_sufficient_supply():
    rng = np.random.default_rng(0)
    scores = np.concatenate([rng.uniform(lo + 1e-6, lo + 0.1, 100) for lo in (0.5, 0.6, 0.7, 0.8, 0.9)])
    sel, warn = stratify_by_score(_cands(scores), per_bin=100)
    assert len(sel) == 500 and warn == []


def test_stratify_undersupplied_bin():
    scores = [0.55] * 7 + [0.65] * 150
    sel, warn = stratify_by_score(_cands(scores), per_bin=100)
    assert sum(c.fitness == 0.55 for c in sel) == 7
    assert sum(c.fitness == 0.65 for c in sel) == 100
    notes = {w["bin"]: w for w in warn}
    assert notes["(0.5,0.6]"]["available"] == 7
    assert notes["(0.9,1.0]"]["note"] == "empty bin omitted"


def test_stratify_deterministic():
    scores = np.random.default_rng(3).uniform(0.5, 1.0, 400)
    a, _ = stratify_by_score(_cands(scores), per_bin=20, seed=9)
    b, _ = stratify_by_score(_cands(scores), per_bin=20, seed=9)
    assert [c.fitness for c in a] == [c.fitness for c in b]
