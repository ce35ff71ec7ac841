"""Seeded, splittable random streams.

All randomness flows through :func:`make_rng`. A stream is identified by an
integer seed plus a tuple of labels, e.g. ``make_rng(7, "train", "shuffle")``;
distinct labels give statistically independent Philox streams.
"""
import hashlib

import numpy as np


def _label_word(label) -> int:
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, *labels) -> np.random.Generator:
    """Counter-based generator for the substream ``(seed, *labels)``."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_label_word(lab) for lab in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def split(rng: np.random.Generator, *labels) -> np.random.Generator:
    """Derive a child stream from an existing generator and labels."""
    base = int(rng.integers(0, 2**63 - 1))
    return make_rng(base, *labels)
