import numpy as np
import pytest

from mpt_xplain.corpus import SyntheticConfig, embed_many, fit_vocabulary, generate_synthetic, labels_of, split
from mpt_xplain.models import FunctionScorer, TrainConfig, train


def linear_scorer(w, b=0.0, scale=1.0):
    """Logistic scorer with known weights; the usual ground truth in these tests."""
    w = np.asarray(w, dtype=float)
    return FunctionScorer(lambda X: 1.0 / (1.0 + np.exp(-scale * (X @ w + b))), len(w), "planted")


@pytest.fixture(scope="session")
def small_corpus():
    cfg = SyntheticConfig(malware=150, benign=150, vocab=60, signal=6, seed=7)
    samples = generate_synthetic(cfg)
    train_s, test_s = split(samples, 0.3, seed=1)
    vocab = fit_vocabulary(train_s)
    return {
        "config": cfg,
        "samples": samples,
        "train": train_s,
        "test": test_s,
        "vocab": vocab,
        "X_train": embed_many(train_s, vocab),
        "y_train": labels_of(train_s),
        "X_test": embed_many(test_s, vocab),
        "y_test": labels_of(test_s),
    }


@pytest.fixture(scope="session")
def linear_model(small_corpus):
    c = small_corpus
    return train(c["X_train"], c["y_train"], TrainConfig(kind="linear_svm", seed=0), c["vocab"].fingerprint)


@pytest.fixture(scope="session")
def rbf_model(small_corpus):
    c = small_corpus
    return train(c["X_train"], c["y_train"], TrainConfig(kind="rbf_svm", seed=0), c["vocab"].fingerprint)
