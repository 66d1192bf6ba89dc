"""Genetic-search evasion: camouflage a malware sample by activating extra
features of one category until the detector scores it benign."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import MALWARE, FeatureToken, Sample, Vocabulary, token_counts, tfidf_from_counts

log = logging.getLogger(__name__)

SCORE_BINS = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


class AttackError(ValueError):
    pass


@dataclass
class GAConfig:
    population: int = 50
    mutation_rate: float = 0.02
    tournament: int = 3
    elitism: int = 1
    init_rate: float = 0.1
    max_loop: int = 500
    idle_generations: int = 10
    idle_tol: float = 1e-6
    stop_fitness: float = 0.99
    seed: int = 0


@dataclass
class AdversarialCandidate:
    base_sample_id: str
    activated: tuple[FeatureToken, ...]
    fitness: float
    scores: list[float]
    vector: np.ndarray = field(repr=False)
    generations: int = 0

    def to_json(self) -> dict:
        return {
            "base_id": self.base_sample_id,
            "activated": [str(t) for t in self.activated],
            "benign_scores": self.scores,
            "fitness": self.fitness,
            "generations": self.generations,
        }


@dataclass
class GAResult:
    candidates: list[AdversarialCandidate]
    generations: int
    history: list[float]
    stop_reason: str


def build_candidate_pool(training: Sequence[Sample], base: Sample, category: str = "permission",
                         source: str | None = None) -> list[FeatureToken]:
    """Distinct ``category`` tokens of the training set that ``base`` lacks.

    ``source`` restricts the donor samples to one label (e.g. "malware").
    """
    donors = [s for s in training if source is None or s.label == source]
    all_cat = {t for s in donors for t in s.tokens if t.category == category}
    if not all_cat:
        raise AttackError(f"category {category!r} not present in training features")
    pool = sorted(all_cat - base.token_set())
    if not pool:
        raise AttackError("no candidate features")
    return pool


class _Embedder:
    """TF-IDF of base + activated genes with frozen document frequencies."""

    def __init__(self, base: Sample, pool: Sequence[FeatureToken], vocab: Vocabulary):
        self.counts, self.total = token_counts(base, vocab)
        missing = [t for t in pool if t not in vocab.index]
        if missing:
            raise AttackError(f"candidate token {missing[0]} is not in the vocabulary")
        self.gene_index = np.array([vocab.index[t] for t in pool], dtype=int)
        self.vocab = vocab

    def __call__(self, genes: np.ndarray) -> np.ndarray:
        genes = np.atleast_2d(genes)
        counts = np.repeat(self.counts[None, :], len(genes), axis=0)
        counts[:, self.gene_index] += genes
        totals = self.total + genes.sum(axis=1)
        return tfidf_from_counts(counts, totals, self.vocab)


def _next_generation(pop, fit, cfg: GAConfig, rng):
    n, g = pop.shape
    order = np.argsort(-fit, kind="stable")
    elite = pop[order[: cfg.elitism]]
    n_child = n - len(elite)
    entrants = rng.integers(0, n, size=(2 * n_child, cfg.tournament))
    winners = entrants[np.arange(2 * n_child), np.argmax(fit[entrants], axis=1)]
    mothers, fathers = pop[winners[:n_child]], pop[winners[n_child:]]
    if g > 1:
        cut = rng.integers(1, g, size=n_child)
        take_mother = np.arange(g)[None, :] < cut[:, None]
        children = np.where(take_mother, mothers, fathers)
    else:
        children = mothers.copy()
    flip = rng.random(children.shape) < cfg.mutation_rate
    children = children ^ flip
    return np.vstack([elite, children])


def generate(base: Sample, scorers, vocab: Vocabulary, pool: Sequence[FeatureToken],
             config: GAConfig | None = None) -> GAResult:
    """Evolve activation sets over ``pool`` to maximise the benign score.

    With several scorers the fitness is the smallest benign score among them,
    and returned candidates score benign (> 0.5) under every scorer.
    """
    cfg = config or GAConfig()
    if hasattr(scorers, "predict_proba"):
        scorers = [scorers]
    scorers = list(scorers)
    if not pool:
        raise AttackError("no candidate features")
    if base.label != MALWARE:
        raise AttackError(f"base {base.id!r} is not labelled malware")
    emb = _Embedder(base, pool, vocab)
    x0 = emb(np.zeros((1, len(pool)), dtype=int))
    for s in scorers:
        if float(s.predict_proba(x0)[0]) < 0.5:
            raise AttackError(f"base not detected: {base.id!r} already scores benign")

    rng = np.random.default_rng(cfg.seed)
    pop = rng.random((cfg.population, len(pool))) < cfg.init_rate

    def fitness(p):
        X = emb(p.astype(int))
        return np.min([1.0 - s.predict_proba(X) for s in scorers], axis=0)

    best = -np.inf
    idle = 0
    history = []
    gen = 0
    reason = "max_loop"
    while True:
        fit = fitness(pop)
        top = float(fit.max())
        if top > best + cfg.idle_tol:
            best, idle = top, 0
        else:
            idle += 1
        history.append(top)
        pop = _next_generation(pop, fit, cfg, rng)
        gen += 1
        if gen >= cfg.max_loop:
            reason = "max_loop"
            break
        if idle >= cfg.idle_generations:
            reason = "idle"
            break
        if top > cfg.stop_fitness:
            reason = "fitness"
            break

    uniq = np.unique(pop, axis=0)
    uniq = uniq[uniq.any(axis=1)]
    out = []
    if len(uniq):
        X = emb(uniq.astype(int))
        benign = np.vstack([1.0 - s.predict_proba(X) for s in scorers])
        ok = np.all(benign > 0.5, axis=0)
        for row, x, sc in zip(uniq[ok], X[ok], benign[:, ok].T):
            out.append(AdversarialCandidate(
                base_sample_id=base.id,
                activated=tuple(pool[j] for j in np.flatnonzero(row)),
                fitness=float(sc.min()),
                scores=[float(v) for v in sc],
                vector=x,
                generations=gen,
            ))
    out.sort(key=lambda c: (-c.fitness, [str(t) for t in c.activated]))
    return GAResult(out, gen, history, reason)


def adversarial_sample(base: Sample, cand: AdversarialCandidate) -> Sample:
    """The camouflaged app as a token sample (base tokens plus activated ones)."""
    return Sample(id=f"{base.id}+adv", label=base.label, tokens=base.tokens + cand.activated, family=base.family)


def score_bin(score: float, edges=SCORE_BINS) -> int | None:
    """Index of the (lo, hi] bin containing ``score``; None outside the range."""
    for j in range(len(edges) - 1):
        if edges[j] < score <= edges[j + 1]:
            return j
    return None


def stratify_by_score(candidates: Sequence[AdversarialCandidate], per_bin: int = 100, seed: int = 0,
                      edges=SCORE_BINS):
    """Seeded uniform subsample of up to ``per_bin`` candidates per benign-score bin.

    Returns ``(selected, warnings)``; undersupplied or empty bins are reported
    in ``warnings``.
    """
    rng = np.random.default_rng(seed)
    selected, warnings = [], []
    for j in range(len(edges) - 1):
        members = [c for c in candidates if score_bin(c.fitness, edges) == j]
        label = f"({edges[j]:.1f},{edges[j + 1]:.1f}]"
        if not members:
            warnings.append({"bin": label, "available": 0, "requested": per_bin, "note": "empty bin omitted"})
            log.warning("score bin %s is empty", label)
            continue
        if len(members) < per_bin:
            warnings.append({"bin": label, "available": len(members), "requested": per_bin, "note": "undersupplied"})
            log.warning("score bin %s has only %d candidates", label, len(members))
            selected.extend(members)
        else:
            pick = np.sort(rng.choice(len(members), size=per_bin, replace=False))
            selected.extend(members[i] for i in pick)
    return selected, warnings
