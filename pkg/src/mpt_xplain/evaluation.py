"""Explanation quality metrics: "good" explanations of adversarial samples,
functional analysis bins, deduction/augmentation fidelity, detector metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .adversarial import SCORE_BINS, score_bin
from .attribution import ExplainConfig, explain, rank
from .baselines import BaselineConfig, explain_kshap_style, explain_lime_style
from .models import Scorer

THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(10))
COUNT_BINS = ((0, 30), (30, 50), (50, math.inf))

Explainer = Callable[[np.ndarray, Scorer], np.ndarray]


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------- good explanations

def positive_fraction(activated: Sequence[int], attribution) -> float:
    a = np.asarray(getattr(attribution, "a", attribution), dtype=float)
    activated = list(activated)
    if not activated:
        raise EvaluationError("candidate has zero activated features")
    return sum(a[i] > 0 for i in activated) / len(activated)


def good_explanation(activated: Sequence[int], attribution, threshold: float) -> bool:
    """True when the share of activated features with positive attribution exceeds ``threshold``.

    ``activated`` holds vocabulary indices of the camouflage features.
    """
    return positive_fraction(activated, attribution) > threshold


@dataclass
class GoodExplanationResult:
    thresholds: list[float]
    fractions: list[float]
    details: list[dict] = field(default_factory=list)

    def rows(self):
        return list(zip(self.thresholds, self.fractions))


def sweep_good_explanation(activated_sets: Sequence[Sequence[int]], attributions,
                           thresholds=THRESHOLDS) -> GoodExplanationResult:
    if len(activated_sets) != len(attributions):
        raise EvaluationError("need exactly one attribution per candidate")
    details = []
    for act, attr in zip(activated_sets, attributions):
        frac = positive_fraction(act, attr)
        a = np.asarray(getattr(attr, "a", attr))
        details.append({"activated": len(act), "positive": int(sum(a[i] > 0 for i in act)), "fraction": frac})
    n = len(details)
    fractions = [
        (sum(d["fraction"] > t for d in details) / n) if n else float("nan")
        for t in thresholds
    ]
    return GoodExplanationResult(list(thresholds), fractions, details)


@dataclass
class FunctionalBins:
    score_bins: list[str]
    count_bins: list[str]
    good: np.ndarray         # counts of good explanations per cell
    total: np.ndarray        # population per cell

    @property
    def fractions(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.total > 0, self.good / np.maximum(self.total, 1), np.nan)

    def rows(self):
        out = []
        frac = self.fractions
        for i, sb in enumerate(self.score_bins):
            for j, cb in enumerate(self.count_bins):
                out.append((sb, cb, "n/a" if self.total[i, j] == 0 else float(frac[i, j])))
        return out


def count_bin(n: int, bins=COUNT_BINS) -> int | None:
    for j, (lo, hi) in enumerate(bins):
        if lo < n <= hi:
            return j
    return None


def _bin_label(lo, hi):
    return f"{lo}+" if math.isinf(hi) else f"({lo},{hi}]"


def functional_analysis(scores: Sequence[float], activated_sets: Sequence[Sequence[int]], attributions,
                        good_threshold: float = 0.4, score_edges=SCORE_BINS, count_bins=COUNT_BINS) -> FunctionalBins:
    """Share of good explanations per (benign score bin, activated-count bin) cell."""
    ns, nc = len(score_edges) - 1, len(count_bins)
    good = np.zeros((ns, nc), dtype=int)
    total = np.zeros((ns, nc), dtype=int)
    for s, act, attr in zip(scores, activated_sets, attributions):
        i, j = score_bin(s, score_edges), count_bin(len(act), count_bins)
        if i is None or j is None:
            raise EvaluationError(f"candidate with score {s} and {len(act)} activated features falls outside every cell")
        total[i, j] += 1
        good[i, j] += good_explanation(act, attr, good_threshold)
    return FunctionalBins(
        score_bins=[f"({score_edges[i]:.1f},{score_edges[i + 1]:.1f}]" for i in range(ns)],
        count_bins=[_bin_label(lo, hi) for lo, hi in count_bins],
        good=good,
        total=total,
    )


# ---------------------------------------------------------------- explainers

def mpt_explainer(config: ExplainConfig | None = None) -> Explainer:
    return lambda x, scorer: explain(x, scorer, config).a


def lime_explainer(config: BaselineConfig | None = None) -> Explainer:
    return lambda x, scorer: explain_lime_style(x, scorer, config).a


def kshap_explainer(config: BaselineConfig | None = None) -> Explainer:
    return lambda x, scorer: explain_kshap_style(x, scorer, config).a


def random_explainer(seed: int = 0) -> Explainer:
    rng = np.random.default_rng(seed)
    return lambda x, scorer: rng.random(len(x))


def oracle_explainer(weights) -> Explainer:
    """Ranks features by their true contribution |w_i x_i| to a known linear model."""
    w = np.asarray(weights, dtype=float)
    return lambda x, scorer: np.abs(w * x)


def make_explainer(method: str, seed: int = 0, k: int = 50) -> Explainer:
    if method == "mpt":
        return mpt_explainer(ExplainConfig(k=k))
    if method == "lime":
        return lime_explainer(BaselineConfig(method="lime", seed=seed))
    if method == "kshap":
        return kshap_explainer(BaselineConfig(method="kshap", seed=seed))
    raise EvaluationError(f"unknown explanation method {method!r}")


# ---------------------------------------------------------------- fidelity

@dataclass
class FidelityCurve:
    n: list[int]
    pcr: list[float]
    mode: str
    method: str = ""

    def rows(self):
        return [(n, p, self.method) for n, p in zip(self.n, self.pcr)]


def deduction_test(X: np.ndarray, scorer: Scorer, explainer: Explainer, max_features: int,
                   method: str = "", attributions=None) -> FidelityCurve:
    """Zero the top-n attributed features and measure how often the prediction survives.

    Rows of ``X`` are expected to be predicted in their labelled class; PCR(n)
    is the share still predicted as the explained (original) class.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(X) == 0:
        raise EvaluationError("empty dataset")
    m = X.shape[1]
    top_n = min(max_features, m)
    cls = (scorer.predict_proba(X) >= 0.5).astype(int)
    if attributions is None:
        attributions = [explainer(x, scorer) for x in X]
    orders = [rank(a) for a in attributions]
    pcr = []
    for n in range(top_n + 1):
        Xn = X.copy()
        for r, order in enumerate(orders):
            Xn[r, order[:n]] = 0.0
        pred = (scorer.predict_proba(Xn) >= 0.5).astype(int)
        pcr.append(float(np.mean(pred == cls)))
    return FidelityCurve(list(range(top_n + 1)), pcr, "deduction", method)


def augmentation_test(X_malware: np.ndarray, X_benign: np.ndarray, scorer: Scorer, explainer: Explainer,
                      max_features: int, method: str = "", attributions=None) -> FidelityCurve:
    """Graft the top-n attributed feature values of each malware row into a paired benign row.

    Pairs are formed index-wise, cycling the shorter set. PCR(n) is the share
    of grafted rows predicted as the source (explained) class.
    """
    Xm = np.atleast_2d(np.asarray(X_malware, dtype=float))
    Xb = np.atleast_2d(np.asarray(X_benign, dtype=float))
    if len(Xm) == 0 or len(Xb) == 0:
        raise EvaluationError("augmentation needs non-empty malware and benign sets")
    if Xm.shape[1] != Xb.shape[1]:
        raise EvaluationError("feature dimension mismatch")
    m = Xm.shape[1]
    top_n = min(max_features, m)
    n_pairs = max(len(Xm), len(Xb))
    src = Xm[np.arange(n_pairs) % len(Xm)]
    dst = Xb[np.arange(n_pairs) % len(Xb)]
    src_cls = (scorer.predict_proba(Xm) >= 0.5).astype(int)[np.arange(n_pairs) % len(Xm)]
    if attributions is None:
        attributions = [explainer(x, scorer) for x in Xm]
    orders = [rank(attributions[i % len(Xm)]) for i in range(n_pairs)]
    pcr = []
    for n in range(top_n + 1):
        out = dst.copy()
        for r, order in enumerate(orders):
            idx = order[:n]
            out[r, idx] = src[r, idx]
        pred = (scorer.predict_proba(out) >= 0.5).astype(int)
        pcr.append(float(np.mean(pred == src_cls)))
    return FidelityCurve(list(range(top_n + 1)), pcr, "augmentation", method)


# ---------------------------------------------------------------- detector metrics

def classify_metrics(y_true, y_pred) -> dict:
    """TPR, FPR and Matthews correlation with malware as the positive class."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    tn = int(np.sum((y_pred == 0) & (y_true == 0)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    out = {"tp": tp, "tn": tn, "fp": fp, "fn": fn}
    out["tpr"] = tp / (tp + fn) if tp + fn else None
    out["fpr"] = fp / (fp + tn) if fp + tn else None
    if len(np.unique(y_true)) < 2:
        out["mcc"] = None
        out["mcc_reason"] = "single-class corpus"
        return out
    denom = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    # no-skill predictor (one predicted class) has MCC 0 by convention
    out["mcc"] = (tp * tn - fp * fn) / denom if denom else 0.0
    return out


def model_metrics(model: Scorer, X, y) -> dict:
    return classify_metrics(y, (model.predict_proba(np.asarray(X)) >= 0.5).astype(int))
