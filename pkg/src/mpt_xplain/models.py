"""Black-box scoring contract plus the built-in SVM detectors.

Every explainer and the evasion attack talk to a model only through
``predict_proba(X) -> p_malware`` on a batch of feature rows.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Protocol, runtime_checkable

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

MODEL_FORMAT = "mpt-xplain-model"
MODEL_VERSION = 1


class ModelError(ValueError):
    pass


class DimensionError(ModelError):
    pass


@runtime_checkable
class Scorer(Protocol):
    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Malware-class probability for every row of ``X``."""
        ...


@dataclass(frozen=True)
class ClassScores:
    p_malware: float
    p_benign: float

    @property
    def predicted(self) -> int:
        return 1 if self.p_malware >= 0.5 else 0

    def of(self, cls: int) -> float:
        return self.p_malware if cls == 1 else self.p_benign


class FunctionScorer:
    """Adapts a plain function ``X -> p_malware`` to the scorer contract."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], n_features: int | None = None, name: str = "function"):
        self.fn = fn
        self.n_features = n_features
        self.name = name

    def predict_proba(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.n_features is not None and X.shape[1] != self.n_features:
            raise DimensionError(f"dimension mismatch: expected {self.n_features} features, got {X.shape[1]}")
        return np.clip(np.asarray(self.fn(X), dtype=float).reshape(len(X)), 0.0, 1.0)


def as_rows(x) -> np.ndarray:
    values = getattr(x, "values", x)
    return np.atleast_2d(np.asarray(values, dtype=float))


def score(model: Scorer, x) -> ClassScores:
    p = float(model.predict_proba(as_rows(x))[0])
    return ClassScores(p_malware=p, p_benign=1.0 - p)


def class_proba(model: Scorer, X: np.ndarray, cls: int) -> np.ndarray:
    p = model.predict_proba(X)
    return p if cls == 1 else 1.0 - p


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    kind: str = "linear_svm"
    gamma: float = 1.0
    C: float | None = None            # rbf: None -> grid search
    lam: float | None = None          # linear: None -> grid search
    epochs: int = 40
    seed: int = 0
    validation_fraction: float = 0.2
    C_grid: tuple = (0.1, 1.0, 10.0, 100.0)
    lam_grid: tuple = (1e-3, 1e-4, 1e-5, 1e-6)
    max_epochs_dual: int = 300
    tol: float = 1e-3


@dataclass
class TrainedModel:
    kind: str
    n_features: int
    params: dict
    calibration: tuple[float, float]
    hyperparameters: dict
    vocabulary_ref: str | None = None
    metadata: dict = field(default_factory=dict)
    vocabulary: dict | None = None    # serialised vocabulary, kept so the file is self-contained

    def __post_init__(self):
        if self.kind not in ("linear_svm", "rbf_svm"):
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.kind == "rbf_svm" and not self.hyperparameters.get("gamma", 0) > 0:
            raise ModelError("rbf_svm requires gamma > 0")
        if not self.calibration[0] > 0:
            raise ModelError("calibration slope must be positive")
        for v in self.params.values():
            if isinstance(v, np.ndarray):
                v.setflags(write=False)

    def _check(self, X):
        X = as_rows(X)
        if X.shape[1] != self.n_features:
            raise DimensionError(f"dimension mismatch: model expects {self.n_features} features, got {X.shape[1]}")
        return X

    def decision_function(self, X) -> np.ndarray:
        X = self._check(X)
        if self.kind == "linear_svm":
            return X @ self.params["w"] + self.params["b"]
        sv = self.params["support_vectors"]
        k = rbf_kernel(X, sv, self.hyperparameters["gamma"])
        return k @ self.params["coef"] + self.params["b"]

    def predict_proba(self, X) -> np.ndarray:
        a, b = self.calibration
        return expit(a * self.decision_function(X) + b)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(json.dumps(self.hyperparameters, sort_keys=True).encode())
        for key in sorted(self.params):
            h.update(key.encode())
            h.update(np.ascontiguousarray(np.asarray(self.params[key], dtype=float)).tobytes())
        h.update(np.asarray(self.calibration, dtype=float).tobytes())
        return h.hexdigest()[:16]


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def _pegasos(X, y, lam, epochs, rng):
    """Averaged stochastic subgradient descent on the L2-regularised hinge loss."""
    n, m = X.shape
    s = 2.0 * y - 1.0
    w = np.zeros(m)
    b = 0.0
    w_avg = np.zeros(m)
    b_avg = 0.0
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * (t + 10))
            margin = s[i] * (X[i] @ w + b)
            w *= 1.0 - eta * lam
            if margin < 1.0:
                w += eta * s[i] * X[i]
                b += eta * s[i]
            w_avg += (w - w_avg) / t
            b_avg += (b - b_avg) / t
    return w_avg, b_avg


def _dual_cd(K, y, C, rng, max_epochs, tol):
    """Dual coordinate ascent for the kernel SVM; bias folded in via K + 1."""
    n = len(y)
    s = 2.0 * y - 1.0
    Q = (K + 1.0) * np.outer(s, s)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # Q @ alpha - 1
    diag = np.diag(Q).copy()
    for _ in range(max_epochs):
        worst = 0.0
        for i in rng.permutation(n):
            g = grad[i]
            if alpha[i] <= 0.0:
                pg = min(g, 0.0)
            elif alpha[i] >= C:
                pg = max(g, 0.0)
            else:
                pg = g
            worst = max(worst, abs(pg))
            if pg == 0.0:
                continue
            new = min(max(alpha[i] - g / diag[i], 0.0), C)
            delta = new - alpha[i]
            if delta != 0.0:
                alpha[i] = new
                grad += delta * Q[:, i]
        if worst < tol:
            break
    return alpha * s


def _platt(d, y):
    """Fit p = sigmoid(a*d + b) with Platt's smoothed targets."""
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    t = np.where(y == 1, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    scale = max(np.std(d), 1e-12)

    def nll(p):
        z = p[0] * d / scale + p[1]
        return np.sum(np.logaddexp(0.0, z) - t * z)

    res = minimize(nll, x0=np.array([1.0, 0.0]), method="BFGS")
    a = res.x[0] / scale
    if not a > 0:
        a = 1.0 / scale
    return float(a), float(res.x[1])


def _fit_once(X, y, cfg: TrainConfig, reg, rng):
    if cfg.kind == "linear_svm":
        w, b = _pegasos(X, y, reg, cfg.epochs, rng)
        return {"w": w, "b": float(b)}
    K = rbf_kernel(X, X, cfg.gamma)
    coef = _dual_cd(K, y, reg, rng, cfg.max_epochs_dual, cfg.tol)
    keep = coef != 0.0
    return {
        "support_vectors": X[keep].copy(),
        "coef": coef[keep].copy(),
        "b": float(coef[keep].sum()),
    }


def _decision(kind, params, X, gamma):
    if kind == "linear_svm":
        return X @ params["w"] + params["b"]
    return rbf_kernel(X, params["support_vectors"], gamma) @ params["coef"] + params["b"]


def train(X, y, config: TrainConfig | None = None, vocabulary_ref: str | None = None) -> TrainedModel:
    cfg = config or TrainConfig()
    if cfg.kind in ("linear", "rbf"):
        cfg = TrainConfig(**{**cfg.__dict__, "kind": cfg.kind + "_svm"})
    if cfg.kind not in ("linear_svm", "rbf_svm"):
        raise ModelError(f"unknown model kind {cfg.kind!r}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or len(X) != len(y):
        raise DimensionError(f"dimension mismatch: {X.shape} rows vs {len(y)} labels")
    if len(np.unique(y)) < 2:
        raise ModelError("training data contains a single class")
    if cfg.kind == "rbf_svm" and not cfg.gamma > 0:
        raise ModelError("gamma must be positive")

    fixed = cfg.lam if cfg.kind == "linear_svm" else cfg.C
    grid = cfg.lam_grid if cfg.kind == "linear_svm" else cfg.C_grid
    val_acc = None
    if fixed is None:
        rng = np.random.default_rng(cfg.seed)
        val = np.zeros(len(y), dtype=bool)
        for c in (0, 1):
            idx = np.flatnonzero(y == c)
            rng.shuffle(idx)
            val[idx[: int(round(cfg.validation_fraction * len(idx)))]] = True
        best = None
        for reg in grid:
            if len(np.unique(y[~val])) < 2 or not val.any():
                best = (0.0, grid[0])
                break
            p = _fit_once(X[~val], y[~val], cfg, reg, np.random.default_rng(cfg.seed))
            acc = float(np.mean((_decision(cfg.kind, p, X[val], cfg.gamma) >= 0) == y[val]))
            if best is None or acc > best[0]:
                best = (acc, reg)
        val_acc, fixed = best

    params = _fit_once(X, y, cfg, fixed, np.random.default_rng(cfg.seed))
    d = _decision(cfg.kind, params, X, cfg.gamma)
    calib = _platt(d, y)
    hyper = {"seed": cfg.seed}
    if cfg.kind == "linear_svm":
        hyper.update(lam=fixed, epochs=cfg.epochs)
    else:
        hyper.update(C=fixed, gamma=cfg.gamma)
    meta = {"train_accuracy": float(np.mean((d >= 0) == y)), "n_train": int(len(y))}
    if val_acc is not None:
        meta["validation_accuracy"] = val_acc
    return TrainedModel(cfg.kind, X.shape[1], params, calib, hyper, vocabulary_ref, meta)


def train_surrogate(teacher: Scorer, X, config: TrainConfig | None = None, holdout: float = 0.3,
                    seed: int = 0, vocabulary_ref: str | None = None) -> TrainedModel:
    """Distil ``teacher`` into a trainable SVM using its predicted labels.

    The returned model carries its held-out label agreement with the teacher
    in ``metadata["agreement"]``.
    """
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        raise ModelError("empty dataset")
    labels = (teacher.predict_proba(X) >= 0.5).astype(int)
    if len(np.unique(labels)) < 2:
        raise ModelError("degenerate teacher: predicts a single class on the dataset")
    rng = np.random.default_rng(seed)
    test = np.zeros(len(X), dtype=bool)
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        test[idx[: int(round(holdout * len(idx)))]] = True
    if len(np.unique(labels[~test])) < 2:
        test[:] = False
    model = train(X[~test], labels[~test], config, vocabulary_ref)
    if test.any():
        agreement = float(np.mean(model.predict(X[test]) == labels[test]))
    else:
        agreement = float(np.mean(model.predict(X) == labels))
    model.metadata.update(surrogate=True, agreement=agreement, n_holdout=int(test.sum()),
                          teacher=getattr(teacher, "fingerprint", type(teacher).__name__))
    return model


# ---------------------------------------------------------------- persistence

def _encode(v):
    if isinstance(v, np.ndarray):
        return {"__ndarray__": v.tolist(), "shape": list(v.shape)}
    return v


def _decode(v):
    if isinstance(v, dict) and "__ndarray__" in v:
        return np.asarray(v["__ndarray__"], dtype=float).reshape(v["shape"])
    return v


def save_model(model: TrainedModel, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": model.kind,
        "n_features": model.n_features,
        "vocabulary_ref": model.vocabulary_ref,
        "hyperparameters": model.hyperparameters,
        "calibration": list(model.calibration),
        "params": {k: _encode(v) for k, v in model.params.items()},
        "metadata": model.metadata,
        "vocabulary": model.vocabulary,
        "fingerprint": model.fingerprint,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path) -> TrainedModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ModelError(f"corrupt model file {path}: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelError(f"{path} is not a {MODEL_FORMAT} file")
    if doc.get("version") != MODEL_VERSION:
        raise ModelError(f"model version mismatch: file has {doc.get('version')}, reader supports {MODEL_VERSION}")
    try:
        model = TrainedModel(
            kind=doc["kind"],
            n_features=int(doc["n_features"]),
            params={k: _decode(v) for k, v in doc["params"].items()},
            calibration=tuple(doc["calibration"]),
            hyperparameters=doc["hyperparameters"],
            vocabulary_ref=doc.get("vocabulary_ref"),
            metadata=doc.get("metadata", {}),
            vocabulary=doc.get("vocabulary"),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ModelError(f"malformed model file {path}: {e}") from e
    if doc.get("fingerprint") and doc["fingerprint"] != model.fingerprint:
        raise ModelError(f"model file {path} fails its fingerprint check")
    return model
