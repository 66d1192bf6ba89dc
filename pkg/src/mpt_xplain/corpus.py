"""Token-set app samples, vocabulary fitting and TF-IDF embedding.

Samples arrive pre-extracted as DREBIN-style ``category::name`` strings.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MALWARE = "malware"
BENIGN = "benign"
LABELS = (MALWARE, BENIGN)

SEPARATOR = "::"

# S1..S8 plus the prefixes used in the public DREBIN feature files.
CATEGORY_ALIASES = {
    "S1": "feature",
    "S2": "permission",
    "S3": "activity",
    "S4": "intent",
    "S5": "api_call",
    "S6": "real_permission",
    "S7": "call",
    "S8": "url",
}
CATEGORIES = frozenset(
    list(CATEGORY_ALIASES.values()) + ["service_receiver", "provider", "service"]
)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class FeatureToken:
    category: str
    name: str

    def __post_init__(self):
        cat = CATEGORY_ALIASES.get(self.category.strip(), self.category.strip())
        object.__setattr__(self, "category", cat)
        object.__setattr__(self, "name", self.name.strip())

    @classmethod
    def parse(cls, text: str) -> "FeatureToken":
        if SEPARATOR not in text:
            raise CorpusError(f"token {text!r} has no '{SEPARATOR}' category separator")
        cat, name = text.split(SEPARATOR, 1)
        tok = cls(cat, name)
        if tok.category not in CATEGORIES:
            raise CorpusError(f"unknown category {cat.strip()!r} in token {text!r}")
        if not tok.name:
            raise CorpusError(f"empty feature name in token {text!r}")
        return tok

    def __str__(self):
        return f"{self.category}{SEPARATOR}{self.name}"


@dataclass(frozen=True)
class Sample:
    id: str
    label: str
    tokens: tuple[FeatureToken, ...]
    family: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise CorpusError(f"sample {self.id!r}: label must be one of {LABELS}, got {self.label!r}")
        if not self.tokens:
            raise CorpusError(f"sample {self.id!r}: empty sample")

    @property
    def y(self) -> int:
        return 1 if self.label == MALWARE else 0

    def token_set(self) -> frozenset[FeatureToken]:
        return frozenset(self.tokens)

    def to_json(self) -> dict:
        d = {"id": self.id, "label": self.label}
        if self.family is not None:
            d["family"] = self.family
        d["features"] = [str(t) for t in self.tokens]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Sample":
        for key in ("id", "label", "features"):
            if key not in d:
                raise CorpusError(f"missing field {key!r}")
        if not isinstance(d["features"], list):
            raise CorpusError("field 'features' must be an array")
        tokens = tuple(FeatureToken.parse(s) for s in d["features"])
        return cls(id=str(d["id"]), label=d["label"], tokens=tokens, family=d.get("family"))


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[FeatureToken, ...]
    document_frequency: np.ndarray
    corpus_size: int
    index: dict = field(init=False, repr=False, compare=False)
    idf: np.ndarray = field(init=False, repr=False, compare=False)
    fingerprint: str = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        df = self.document_frequency
        if len(df) != len(self.tokens):
            raise CorpusError("document_frequency length differs from token count")
        if len(df) and (df.min() < 1 or df.max() > self.corpus_size):
            raise CorpusError("document frequencies must lie in [1, corpus_size]")
        df.setflags(write=False)
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})
        idf = np.log(self.corpus_size / df)
        idf.setflags(write=False)
        object.__setattr__(self, "idf", idf)
        h = hashlib.sha256()
        h.update(str(self.corpus_size).encode())
        for t, n in zip(self.tokens, df):
            h.update(f"\n{t}\t{int(n)}".encode())
        object.__setattr__(self, "fingerprint", h.hexdigest()[:16])

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return (
            self.tokens == other.tokens
            and self.corpus_size == other.corpus_size
            and np.array_equal(self.document_frequency, other.document_frequency)
        )

    def to_json(self) -> dict:
        return {
            "corpus_size": self.corpus_size,
            "tokens": [str(t) for t in self.tokens],
            "document_frequency": [int(v) for v in self.document_frequency],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Vocabulary":
        return cls(
            tokens=tuple(FeatureToken.parse(s) for s in d["tokens"]),
            document_frequency=np.asarray(d["document_frequency"], dtype=np.int64),
            corpus_size=int(d["corpus_size"]),
        )


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    vocabulary_ref: str

    def __post_init__(self):
        self.values.setflags(write=False)

    def __len__(self):
        return len(self.values)


def fit_vocabulary(training: Sequence[Sample]) -> Vocabulary:
    if not training:
        raise CorpusError("empty corpus")
    df = Counter()
    for s in training:
        df.update(s.token_set())
    tokens = tuple(sorted(df))
    return Vocabulary(
        tokens=tokens,
        document_frequency=np.array([df[t] for t in tokens], dtype=np.int64),
        corpus_size=len(training),
    )


def token_counts(sample: Sample, vocab: Vocabulary) -> tuple[np.ndarray, int]:
    """In-vocabulary token counts and the sample's total token count |X|.

    Out-of-vocabulary tokens still count towards |X|.
    """
    counts = np.zeros(len(vocab))
    for tok, c in Counter(sample.tokens).items():
        i = vocab.index.get(tok)
        if i is not None:
            counts[i] = c
    return counts, len(sample.tokens)


def tfidf_from_counts(counts: np.ndarray, totals, vocab: Vocabulary) -> np.ndarray:
    """Vectorised TF-IDF for count rows; ``totals`` is |X| per row."""
    totals = np.asarray(totals, dtype=float)
    if np.any(totals <= 0):
        raise CorpusError("empty sample")
    return counts / totals[..., None] * vocab.idf if counts.ndim == 2 else counts / totals * vocab.idf


def embed(sample: Sample, vocab: Vocabulary) -> FeatureVector:
    if not sample.tokens:
        raise CorpusError("empty sample")
    counts, total = token_counts(sample, vocab)
    return FeatureVector(tfidf_from_counts(counts, total, vocab), vocab.fingerprint)


def embed_binary(sample: Sample, vocab: Vocabulary) -> FeatureVector:
    """Presence encoding (1 where the token occurs), used for binary-feature corpora."""
    counts, _ = token_counts(sample, vocab)
    return FeatureVector((counts > 0).astype(float), vocab.fingerprint)


def embed_many(samples: Iterable[Sample], vocab: Vocabulary, binary: bool = False) -> np.ndarray:
    f = embed_binary if binary else embed
    rows = [f(s, vocab).values for s in samples]
    if not rows:
        return np.zeros((0, len(vocab)))
    return np.vstack(rows)


def labels_of(samples: Iterable[Sample]) -> np.ndarray:
    return np.array([s.y for s in samples], dtype=int)


# ---------------------------------------------------------------- synthetic

@dataclass
class SyntheticConfig:
    malware: int = 500
    benign: int = 500
    vocab: int = 200
    signal: int = 10
    noise: float = 0.05
    seed: int = 0
    background_rate: float = 0.08
    signal_rate: float = 0.9
    permission_share: float = 0.4


_SYNTH_CATEGORIES = ("permission", "api_call", "intent", "feature", "activity", "url")


def _synthetic_tokens(cfg: SyntheticConfig) -> list[FeatureToken]:
    n_perm = max(1, int(round(cfg.vocab * cfg.permission_share)))
    toks = [FeatureToken("permission", f"PERM_{i:04d}") for i in range(n_perm)]
    others = _SYNTH_CATEGORIES[1:]
    for j in range(cfg.vocab - n_perm):
        cat = others[j % len(others)]
        toks.append(FeatureToken(cat, f"{cat.upper()}_{j:04d}"))
    return toks


def generate_synthetic(cfg: SyntheticConfig) -> list[Sample]:
    """Desk-scale corpus with planted class-signal tokens.

    Each class owns ``cfg.signal`` tokens, half of them permissions. A sample
    of class c contains each of its own signal tokens with probability
    ``signal_rate`` (1 when noise is 0) and each of the other class's with
    probability ``noise``; all remaining tokens appear at ``background_rate``.
    Malware families are named after the subset of signal tokens present.
    """
    if cfg.malware + cfg.benign <= 0:
        raise CorpusError("zero samples requested")
    if cfg.vocab <= 0:
        raise CorpusError("zero vocabulary requested")
    if cfg.malware < 0 or cfg.benign < 0:
        raise CorpusError("negative sample count")
    if 2 * cfg.signal > cfg.vocab:
        raise CorpusError("vocabulary too small for the requested signal tokens")
    if not 0.0 <= cfg.noise <= 1.0:
        raise CorpusError("noise must lie in [0, 1]")

    rng = np.random.default_rng(cfg.seed)
    toks, signal = _plant(cfg, rng)
    is_signal = np.zeros(len(toks), dtype=bool)
    for idx in signal.values():
        is_signal[idx] = True

    own_rate = 1.0 if cfg.noise == 0 else cfg.signal_rate
    samples = []
    plan = [MALWARE] * cfg.malware + [BENIGN] * cfg.benign
    for n, label in enumerate(plan):
        other = BENIGN if label == MALWARE else MALWARE
        present = np.zeros(len(toks), dtype=bool)
        present[~is_signal] = rng.random((~is_signal).sum()) < cfg.background_rate
        own = rng.random(len(signal[label])) < own_rate
        present[signal[label][own]] = True
        present[signal[other]] = rng.random(len(signal[other])) < cfg.noise
        if not present.any():
            present[signal[label][0]] = True
        idx = np.flatnonzero(present)
        # a few tokens repeat, mirroring multiset inputs
        reps = 1 + (rng.random(len(idx)) < 0.1)
        tokens = tuple(toks[i] for i, r in zip(idx, reps) for _ in range(r))
        family = None
        if label == MALWARE:
            bits = "".join("1" if o else "0" for o in own)
            family = f"fam_{int(bits, 2):x}" if bits else "fam_0"
        samples.append(Sample(id=f"{label[:3]}{n:06d}", label=label, tokens=tokens, family=family))
    return samples


def _plant(cfg: SyntheticConfig, rng):
    toks = _synthetic_tokens(cfg)
    n_perm = sum(t.category == "permission" for t in toks)
    perm_idx = rng.permutation(n_perm)
    other_idx = n_perm + rng.permutation(len(toks) - n_perm)
    n_p = min(cfg.signal // 2, n_perm // 2)
    n_o = cfg.signal - n_p
    signal = {
        MALWARE: np.concatenate([perm_idx[:n_p], other_idx[:n_o]]),
        BENIGN: np.concatenate([perm_idx[n_p:2 * n_p], other_idx[n_o:2 * n_o]]),
    }
    return toks, signal


def signal_tokens(cfg: SyntheticConfig) -> dict[str, list[FeatureToken]]:
    """The planted signal tokens of a synthetic config (re-derived from its seed)."""
    toks, signal = _plant(cfg, np.random.default_rng(cfg.seed))
    return {label: [toks[i] for i in idx] for label, idx in signal.items()}


# ---------------------------------------------------------------- I/O

def save_corpus(samples: Iterable[Sample], path, format: str = "jsonl") -> None:
    if format != "jsonl":
        raise CorpusError(f"unsupported corpus format {format!r}")
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")


def load_corpus(path, format: str = "jsonl") -> list[Sample]:
    if format != "jsonl":
        raise CorpusError(f"unsupported corpus format {format!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    samples, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                s = Sample.from_json(json.loads(line))
            except (json.JSONDecodeError, CorpusError, TypeError, AttributeError) as e:
                raise CorpusError(f"{path}:{lineno}: {e}") from e
            if s.id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate id {s.id!r}")
            seen.add(s.id)
            samples.append(s)
    return samples


def corpus_stats(samples: Sequence[Sample]) -> dict:
    cats = Counter(t.category for s in samples for t in s.tokens)
    lengths = [len(s.tokens) for s in samples]
    return {
        "samples": len(samples),
        "malware": sum(s.label == MALWARE for s in samples),
        "benign": sum(s.label == BENIGN for s in samples),
        "distinct_tokens": len({t for s in samples for t in s.tokens}),
        "families": len({s.family for s in samples if s.family}),
        "mean_tokens": float(np.mean(lengths)) if lengths else math.nan,
        "categories": dict(sorted(cats.items())),
    }


def split(samples: Sequence[Sample], test_fraction: float, seed: int):
    """Seeded stratified train/test split."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in LABELS:
        group = [s for s in samples if s.label == label]
        order = rng.permutation(len(group))
        n_test = int(round(test_fraction * len(group)))
        test += [group[i] for i in order[:n_test]]
        train += [group[i] for i in order[n_test:]]
    return train, test
