"""Minimum-variance feature attribution.

Each feature is treated like an asset whose "returns" are the relative score
changes it causes under perturbation. The attribution vector is the
minimum-variance allocation over the sum-to-one, [-1, 1]-boxed set.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import Scorer, as_rows
from .perturbation import DEFAULT_K, ResponseMatrix, perturb, respond

LOWER, UPPER = -1.0, 1.0
TOTAL = 1.0


class SolverError(ValueError):
    pass


@dataclass(frozen=True)
class CovarianceMatrix:
    q: np.ndarray
    regularization: float

    @property
    def m(self) -> int:
        return self.q.shape[0]


@dataclass
class AttributionVector:
    a: np.ndarray
    objective: float
    solver_stats: dict = field(default_factory=dict)
    base_score: float | None = None
    target_class: int | None = None
    method: str = "mpt"

    def __len__(self):
        return len(self.a)

    def ranked(self, top: int | None = None) -> np.ndarray:
        return rank(self.a, top)


def rank(a, top: int | None = None) -> np.ndarray:
    """Indices by attribution descending; ties keep vocabulary order."""
    order = np.argsort(-np.asarray(a, dtype=float), kind="stable")
    return order if top is None else order[:top]


def default_lambda(q_raw: np.ndarray) -> float:
    m = q_raw.shape[0]
    return max(1e-6 * float(np.trace(q_raw)) / m, 1e-9)


def covariance(r, lam: float | None = None) -> CovarianceMatrix:
    """Sample covariance (1/(K-1)) of the response rows plus ``lam`` on the diagonal.

    ``r`` is a ResponseMatrix or an (m, K) array. ``lam=None`` picks the
    scale-aware default.
    """
    r = np.asarray(getattr(r, "r", r), dtype=float)
    if r.ndim != 2 or r.shape[1] < 2:
        raise SolverError("need an (m, K) response matrix with K >= 2")
    centred = r - r.mean(axis=1, keepdims=True)
    q = centred @ centred.T / (r.shape[1] - 1)
    q = 0.5 * (q + q.T)
    if lam is None:
        lam = default_lambda(q)
    if lam < 0:
        raise SolverError("lambda must be non-negative")
    q[np.diag_indices_from(q)] += lam
    q.setflags(write=False)
    return CovarianceMatrix(q=q, regularization=float(lam))


def project(v: np.ndarray, lo: float = LOWER, hi: float = UPPER, total: float = TOTAL) -> np.ndarray:
    """Euclidean projection onto {a : sum(a) = total, lo <= a_i <= hi}.

    The projection is clip(v - tau, lo, hi) for the unique shift tau that meets
    the sum. g(tau) = sum clip(v - tau) is piecewise linear and non-increasing
    with kinks at v_i - hi and v_i - lo, so tau is located exactly between
    neighbouring kinks and then solved linearly.
    """
    v = np.asarray(v, dtype=float)
    m = len(v)
    if not m * lo <= total <= m * hi:
        raise SolverError("infeasible box-simplex")
    vs = np.sort(v)
    csum = np.concatenate([[0.0], np.cumsum(vs)])

    def g(tau):
        tau = np.atleast_1d(tau)
        n_hi = m - np.searchsorted(vs, tau + hi, side="left")     # v_i - tau >= hi
        n_lo = np.searchsorted(vs, tau + lo, side="right")        # v_i - tau <= lo
        mid_sum = csum[m - n_hi] - csum[n_lo]
        n_mid = m - n_hi - n_lo
        return n_hi * hi + n_lo * lo + mid_sum - n_mid * tau, n_mid

    kinks = np.unique(np.concatenate([v - hi, v - lo]))
    vals, _ = g(kinks)
    # vals is non-increasing in tau; find the bracket with vals >= total >= next
    j = np.searchsorted(-vals, -total, side="right") - 1
    if j < 0:
        tau = kinks[0]
    elif j >= len(kinks) - 1:
        tau = kinks[-1]
    else:
        t0, t1 = kinks[j], kinks[j + 1]
        g0, g1 = vals[j], vals[j + 1]
        tau = t0 if g0 == g1 else t0 + (g0 - total) * (t1 - t0) / (g0 - g1)
    return np.clip(v - tau, lo, hi)


def project_bisect(v: np.ndarray, lo=LOWER, hi=UPPER, total=TOTAL, iters: int = 200) -> np.ndarray:
    """Same projection by plain bisection on the shift; slower, kept as a cross-check."""
    v = np.asarray(v, dtype=float)
    a, b = v.min() - hi - 1.0, v.max() - lo + 1.0
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if np.clip(v - mid, lo, hi).sum() > total:
            a = mid
        else:
            b = mid
    return np.clip(v - 0.5 * (a + b), lo, hi)


def objective(q, a) -> float:
    q = getattr(q, "q", q)
    return float(a @ q @ a)


def projected_gradient_norm(q, a, step: float | None = None) -> float:
    """Norm of the gradient mapping; zero exactly at a KKT point."""
    q = getattr(q, "q", q)
    if step is None:
        step = 1.0 / lipschitz(q)
    g = 2.0 * q @ a
    return float(np.linalg.norm(a - project(a - step * g)) / step)


def lipschitz(q: np.ndarray) -> float:
    # gradient 2Qa is Lipschitz with constant 2 * lambda_max(Q) <= 2 * max row abs-sum
    return 2.0 * max(float(np.abs(q).sum(axis=1).max()), 1e-300)


def pairwise_certificate(q, a, delta: float = 1e-4) -> float:
    """Largest objective decrease from a feasible transfer a_i += d, a_j -= d."""
    q = getattr(q, "q", q)
    g = 2.0 * q @ a
    d = np.diag(q)
    change = delta * (g[:, None] - g[None, :]) + delta ** 2 * (d[:, None] + d[None, :] - 2.0 * q)
    ok = (a[:, None] + delta <= UPPER) & (a[None, :] - delta >= LOWER)
    np.fill_diagonal(ok, False)
    if not ok.any():
        return 0.0
    return float(max(0.0, -change[ok].min()))


def _polish(q, a, bound_tol=1e-12):
    """Exact minimiser on the face suggested by ``a``, if that face is optimal."""
    m = len(a)
    at_hi = a >= UPPER - bound_tol
    at_lo = a <= LOWER + bound_tol
    free = ~(at_hi | at_lo)
    if not free.any():
        return None
    fixed = np.where(at_hi, UPPER, np.where(at_lo, LOWER, 0.0))
    F = np.flatnonzero(free)
    n = len(F)
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = 2.0 * q[np.ix_(F, F)]
    kkt[:n, n] = 1.0
    kkt[n, :n] = 1.0
    rhs = np.zeros(n + 1)
    rhs[:n] = -2.0 * q[F] @ fixed
    rhs[n] = TOTAL - fixed.sum()
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return None
    cand = fixed.copy()
    cand[F] = sol[:n]
    if np.any(cand[F] < LOWER) or np.any(cand[F] > UPPER):
        return None
    nu = sol[n]
    g = 2.0 * q @ cand + nu
    scale = max(1.0, float(np.abs(2.0 * q @ cand).max()))
    if np.any(g[at_hi] > 1e-10 * scale) or np.any(g[at_lo] < -1e-10 * scale):
        return None
    cand[F] += (TOTAL - cand.sum()) / n
    return cand


def solve_attribution(cov, tol: float = 1e-10, max_iter: int = 100_000, polish_every: int = 25) -> AttributionVector:
    """Minimise a'Qa subject to sum(a) = 1 and -1 <= a_i <= 1.

    Accelerated projected gradient from the uniform point, with function-value
    restarts. Every ``polish_every`` iterations the current face is solved
    exactly; the result is accepted only if it satisfies the KKT conditions.
    """
    q = np.asarray(getattr(cov, "q", cov), dtype=float)
    m = q.shape[0]
    if q.shape != (m, m):
        raise SolverError("covariance must be square")
    if not np.allclose(q, q.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.abs(q).max()))):
        raise SolverError("covariance is not symmetric")
    eig = np.linalg.eigvalsh(q)
    if eig[0] <= 1e-13 * max(float(eig[-1]), 0.0) or eig[0] <= 0.0:
        raise SolverError("singular covariance; increase lambda")
    if m == 1:
        a = np.ones(1)
        return AttributionVector(a, objective(q, a), {"iterations": 0, "pg_norm": 0.0, "sum_residual": 0.0,
                                                      "box_violation": 0.0, "polished": True})
    L = lipschitz(q)
    step = 1.0 / L
    a = np.full(m, TOTAL / m)
    y = a.copy()
    t = 1.0
    f_prev = objective(q, a)
    polished = False
    pg = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        a_new = project(y - step * (2.0 * q @ y))
        f_new = objective(q, a_new)
        if f_new > f_prev:
            # restart momentum
            t = 1.0
            y = a.copy()
            a_new = project(a - step * (2.0 * q @ a))
            f_new = objective(q, a_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = a_new + ((t - 1.0) / t_new) * (a_new - a)
        a, t, f_prev = a_new, t_new, f_new
        if it % polish_every == 0 or it == max_iter:
            cand = _polish(q, a)
            if cand is not None and objective(q, cand) <= f_prev + 1e-15 * max(1.0, abs(f_prev)):
                a = cand
                polished = True
            pg = projected_gradient_norm(q, a, step)
            if pg < tol or polished:
                break
            polished = False
    a = np.clip(a, LOWER, UPPER)
    stats = {
        "iterations": it,
        "pg_norm": projected_gradient_norm(q, a, step),
        "sum_residual": float(abs(a.sum() - TOTAL)),
        "box_violation": float(max(0.0, np.max(np.abs(a)) - UPPER)),
        "polished": polished,
    }
    if stats["sum_residual"] > 1e-8:
        raise SolverError(f"sum constraint violated by {stats['sum_residual']:.3g}")
    return AttributionVector(a, objective(q, a), stats)


@dataclass
class ExplainConfig:
    k: int = DEFAULT_K
    lam: float | None = None
    target_class: int | None = None
    batch_size: int = 4096


def explain_with_responses(x, scorer: Scorer, config: ExplainConfig | None = None):
    """Like ``explain`` but also returns the perturbation set and responses."""
    cfg = config or ExplainConfig()
    pset = perturb(as_rows(x)[0], cfg.k)
    resp = respond(pset, scorer, cfg.target_class, cfg.batch_size)
    cov = covariance(resp, cfg.lam)
    out = solve_attribution(cov)
    out.base_score = resp.base_score
    out.target_class = resp.target_class
    out.solver_stats["lambda"] = cov.regularization
    out.solver_stats["k"] = cfg.k
    return out, pset, resp


def explain(x, scorer: Scorer, config: ExplainConfig | None = None) -> AttributionVector:
    """Perturb, collect responses, estimate covariance and solve for attributions."""
    return explain_with_responses(x, scorer, config)[0]
