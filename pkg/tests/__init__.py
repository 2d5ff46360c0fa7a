import os
import random

from loguru import logger

SLOW_TESTS = os.environ.get("SLOW_TESTS", "false").lower() == "true"
CORPUS_PATH = os.environ.get("CORPUS_PATH", "")

logger.disable("shishulm")

_WORDS = (
    "the a small model reads every byte of text and learns which one comes next while the "
    "shared layers keep their weights in pairs so that attention is only needed near the bottom "
    "of the stack where tokens still mix"
).split()


def synthetic_corpus(n_bytes: int, seed: int = 0) -> str:
    """Deterministic English-like text of about ``n_bytes`` bytes."""

    rng = random.Random(seed)
    words = []
    size = 0
    while size < n_bytes:
        word = rng.choice(_WORDS)
        if rng.random() < 0.08:
            word += "."
        words.append(word)
        size += len(word) + 1
    return " ".join(words)[:n_bytes]


def corpus_text(n_bytes: int) -> str:
    """The ``CORPUS_PATH`` file when set, a synthetic corpus otherwise."""

    if CORPUS_PATH:
        with open(CORPUS_PATH, "r", encoding="utf-8", errors="replace") as f:
            return f.read()
    return synthetic_corpus(n_bytes)
