"""Comparison explainers: a LIME-style masked linear surrogate and kernel SHAP.

Both operate on binary presence masks over the features that are non-zero in
the explained instance; absent features get attribution 0. Outputs use the
same index space as the MPT attribution.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb, sqrt

import numpy as np

from .attribution import AttributionVector
from .models import Scorer, as_rows, class_proba

EXACT_LIMIT = 12


class BaselineError(ValueError):
    pass


@dataclass
class BaselineConfig:
    method: str = "lime"
    num_samples: int | None = None     # lime: 1000, kshap: 2048
    kernel_width: float | None = None  # lime: 0.75 * sqrt(d)
    ridge: float = 1.0
    exact: bool | None = None          # kshap: None -> exact when d <= 12
    seed: int = 0
    target_class: int | None = None


def _target(scorer, x, target_class):
    if target_class is None:
        target_class = int(scorer.predict_proba(x[None, :])[0] >= 0.5)
    return target_class


def _masked(x, present, Z):
    rows = np.zeros((len(Z), len(x)))
    rows[:, present] = Z * x[present]
    return rows


def explain_lime_style(x, scorer: Scorer, config: BaselineConfig | None = None) -> AttributionVector:
    cfg = config or BaselineConfig(method="lime")
    x = as_rows(x)[0]
    present = np.flatnonzero(x)
    d = len(present)
    n = cfg.num_samples or 1000
    if d == 0:
        raise BaselineError("instance has no non-zero features")
    if n < d + 2:
        raise BaselineError(f"num_samples must be at least {d + 2} for {d} features")
    cls = _target(scorer, x, cfg.target_class)
    rng = np.random.default_rng(cfg.seed)
    Z = np.ones((n, d))
    n_off = rng.integers(1, d + 1, size=n - 1)
    for row, k in enumerate(n_off, start=1):
        Z[row, rng.choice(d, size=k, replace=False)] = 0.0
    if np.all(Z == Z[0]):
        raise BaselineError("singular regression: all masks identical")
    y = class_proba(scorer, _masked(x, present, Z), cls)

    width = cfg.kernel_width or 0.75 * sqrt(d)
    dist = d - Z.sum(axis=1)
    w = np.exp(-(dist ** 2) / width ** 2)
    wn = w / w.sum()
    Zc = Z - wn @ Z
    yc = y - wn @ y
    A = Zc.T @ (w[:, None] * Zc) + cfg.ridge * np.eye(d)
    coef = np.linalg.solve(A, Zc.T @ (w * yc))
    a = np.zeros(len(x))
    a[present] = coef
    f_x = float(class_proba(scorer, x[None, :], cls)[0])
    return AttributionVector(a, float("nan"), {"num_samples": n, "kernel_width": width, "d": d},
                             base_score=f_x, target_class=cls, method="lime")


def shapley_kernel_weight(d: int, s: int) -> float:
    return (d - 1) / (comb(d, s) * s * (d - s))


def _kshap_solve(Z, v, w, v0, v_full):
    """Weighted least squares for phi with sum(phi) = v_full - v0 (eliminating the last)."""
    d = Z.shape[1]
    delta = v_full - v0
    if d == 1:
        return np.array([delta])
    X = Z[:, :-1] - Z[:, -1:]
    y = v - v0 - Z[:, -1] * delta
    sw = np.sqrt(w)
    phi_head, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    return np.append(phi_head, delta - phi_head.sum())


def explain_kshap_style(x, scorer: Scorer, config: BaselineConfig | None = None) -> AttributionVector:
    cfg = config or BaselineConfig(method="kshap")
    x = as_rows(x)[0]
    present = np.flatnonzero(x)
    d = len(present)
    cls = _target(scorer, x, cfg.target_class)
    v_full = float(class_proba(scorer, x[None, :], cls)[0])
    v0 = float(class_proba(scorer, np.zeros((1, len(x))), cls)[0])
    a = np.zeros(len(x))
    exact = cfg.exact if cfg.exact is not None else d <= EXACT_LIMIT
    stats = {"d": d, "exact": bool(exact)}
    if d == 0:
        return AttributionVector(a, float("nan"), stats, base_score=v_full, target_class=cls, method="kshap")

    if exact:
        if d > 20:
            raise BaselineError(f"exact enumeration over {d} features is infeasible")
        rows, weights = [], []
        for s in range(1, d):
            ws = shapley_kernel_weight(d, s)
            for S in combinations(range(d), s):
                z = np.zeros(d)
                z[list(S)] = 1.0
                rows.append(z)
                weights.append(ws)
        Z = np.array(rows).reshape(-1, d)
        w = np.array(weights)
    else:
        n = cfg.num_samples or 2048
        if n < 2 * d + 2:
            raise BaselineError(f"sampling budget {n} too small for {d} features; use at least {2 * d + 2}")
        rng = np.random.default_rng(cfg.seed)
        sizes = np.arange(1, d)
        p = np.array([(d - 1) / (s * (d - s)) for s in sizes])
        p /= p.sum()
        half = n // 2
        Z = np.zeros((2 * half, d))
        for r, s in enumerate(rng.choice(sizes, size=half, p=p)):
            Z[2 * r, rng.choice(d, size=s, replace=False)] = 1.0
            Z[2 * r + 1] = 1.0 - Z[2 * r]
        w = np.ones(len(Z))
        stats["num_samples"] = len(Z)
    if len(Z):
        v = class_proba(scorer, _masked(x, present, Z), cls)
        phi = _kshap_solve(Z, v, w, v0, v_full)
    else:
        phi = np.array([v_full - v0])
    a[present] = phi
    stats["efficiency_gap"] = float(abs(phi.sum() - (v_full - v0)))
    return AttributionVector(a, float("nan"), stats, base_score=v_full, target_class=cls, method="kshap")


def explain_with(method: str, x, scorer: Scorer, config: BaselineConfig | None = None) -> AttributionVector:
    if method == "lime":
        return explain_lime_style(x, scorer, config)
    if method == "kshap":
        return explain_kshap_style(x, scorer, config)
    raise BaselineError(f"unknown baseline method {method!r}")
