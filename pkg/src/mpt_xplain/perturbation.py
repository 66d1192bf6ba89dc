"""One-feature-at-a-time multiplicative perturbation and score responses."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .models import Scorer, as_rows, class_proba

DEFAULT_K = 50
SCORE_FLOOR = 1e-6


class PerturbationError(ValueError):
    pass


def alpha_schedule(k: int) -> np.ndarray:
    """K evenly spaced scaling factors from 0 to 1, both endpoints included."""
    if k < 2:
        raise PerturbationError(f"k must be at least 2, got {k}")
    return np.linspace(0.0, 1.0, k)


@dataclass(frozen=True)
class PerturbationSet:
    base: np.ndarray
    alphas: np.ndarray

    @property
    def k(self) -> int:
        return len(self.alphas)

    @property
    def m(self) -> int:
        return len(self.base)

    def __len__(self):
        return self.k * self.m

    def point(self, i: int, k: int) -> np.ndarray:
        x = self.base.copy()
        x[i] = self.alphas[k] * self.base[i]
        return x

    def moving_cells(self) -> np.ndarray:
        """Flat (i, k) indices whose perturbed point differs from the base."""
        i = np.flatnonzero(self.base != 0.0)
        k = np.flatnonzero(self.alphas != 1.0)
        return (i[:, None] * self.k + k[None, :]).ravel()

    def batches(self, cells=None, batch_size: int = 4096):
        """Yield ``(flat_index, rows)`` for the given flat cells (default: all).

        Perturbed points are materialised only one batch at a time.
        """
        cells = np.arange(len(self)) if cells is None else np.asarray(cells)
        for start in range(0, len(cells), batch_size):
            flat = cells[start:start + batch_size]
            i, k = np.divmod(flat, self.k)
            rows = np.broadcast_to(self.base, (len(flat), self.m)).copy()
            rows[np.arange(len(flat)), i] = self.alphas[k] * self.base[i]
            yield flat, rows


def perturb(base, k: int = DEFAULT_K) -> PerturbationSet:
    x = as_rows(base)[0].copy()
    x.setflags(write=False)
    return PerturbationSet(base=x, alphas=alpha_schedule(k))


@dataclass(frozen=True)
class ResponseMatrix:
    r: np.ndarray            # (m, K) relative score changes
    base_score: float
    target_class: int
    scores: np.ndarray       # (m, K) raw target-class scores

    @property
    def mu(self) -> np.ndarray:
        return self.r.mean(axis=1)


def respond(pset: PerturbationSet, scorer: Scorer, target_class: int | None = None,
            batch_size: int = 4096) -> ResponseMatrix:
    """Relative change of the target-class score for every perturbed point.

    ``target_class`` defaults to the class the scorer predicts for the base.
    """
    p_base = float(scorer.predict_proba(pset.base[None, :])[0])
    if target_class is None:
        target_class = 1 if p_base >= 0.5 else 0
    f_x = p_base if target_class == 1 else 1.0 - p_base
    if f_x < SCORE_FLOOR:
        raise PerturbationError(f"degenerate base score {f_x:.3g} < {SCORE_FLOOR}")
    # cells equal to the base (zero coordinate or alpha = 1) keep f(x) exactly
    scores = np.full(len(pset), f_x)
    for flat, rows in pset.batches(pset.moving_cells(), batch_size):
        scores[flat] = class_proba(scorer, rows, target_class)
    scores = scores.reshape(pset.m, pset.k)
    r = (scores - f_x) / f_x
    if not np.all(np.isfinite(r)):
        raise PerturbationError("non-finite response ratio")
    return ResponseMatrix(r=r, base_score=f_x, target_class=target_class, scores=scores)


def dump_perturbations(pset: PerturbationSet, resp: ResponseMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "k", "alpha", "score"])
        for i in range(pset.m):
            for k in range(pset.k):
                w.writerow([i, k, repr(float(pset.alphas[k])), repr(float(resp.scores[i, k]))])
