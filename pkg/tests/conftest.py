import numpy as np
import pytest

from liger.data import Corpus
from liger.rng import Rng


def finite_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = g.reshape(-1)
    for i in range(x.size):
        p = x.copy()
        m = x.copy()
        p.reshape(-1)[i] += h
        m.reshape(-1)[i] -= h
        flat[i] = (fn(p) - fn(m)) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / (np.abs(b) + 1e-8)))


WORDS = (
    "the cat sat on a mat dog ran fast and then slept under warm sun rain fell "
    "over green hills while birds sang songs of morning light"
).split()


def synthetic_text(n_sentences: int, seed: int = 7) -> str:
    """Deterministic word-soup corpus; enough structure for a byte model to learn."""
    rng = Rng(seed).child("corpus")
    parts = []
    for _ in range(n_sentences):
        n = int(rng.integers(4, 9))
        parts.append(" ".join(WORDS[int(rng.integers(0, len(WORDS)))] for _ in range(n)) + ". ")
    return "".join(parts)


@pytest.fixture(scope="session")
def small_corpus() -> Corpus:
    return Corpus.from_text(synthetic_text(2500))


@pytest.fixture()
def rng() -> Rng:
    return Rng(0)
