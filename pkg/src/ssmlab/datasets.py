"""Synthetic datasets for the experiment harness.

Genomic sequences carry a planted-motif labeling rule: label 1 iff a fixed
6-mer occurs anywhere in the sequence (implanted into half the items,
rejection-sampled out of the rest). Recall documents embed a (marker, value)
needle inside entropy-targeted filler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import make_haystack
from .stats import rng_for

__all__ = ["GenomicDataset", "gen_genomic_dataset", "RecallDataset",
           "gen_recall_dataset", "GENOMIC_ALPHABET", "DEFAULT_MOTIF"]

GENOMIC_ALPHABET = "ACGT"
DEFAULT_MOTIF = "GATTAC"


def _encode(s: str) -> np.ndarray:
    lut = {ch: i for i, ch in enumerate(GENOMIC_ALPHABET)}
    return np.array([lut[ch] for ch in s], dtype=np.int64)


def _contains(seq: np.ndarray, motif: np.ndarray) -> bool:
    m = motif.shape[0]
    for i in range(seq.shape[0] - m + 1):
        if np.array_equal(seq[i:i + m], motif):
            return True
    return False


@dataclass
class GenomicDataset:
    train_tokens: np.ndarray
    train_labels: np.ndarray
    test_tokens: np.ndarray
    test_labels: np.ndarray
    motif: str
    alphabet: str = GENOMIC_ALPHABET

    @property
    def train(self):
        return self.train_tokens, self.train_labels

    @property
    def test(self):
        return self.test_tokens, self.test_labels

    def save(self, path) -> None:
        np.savez(path, train_tokens=self.train_tokens, train_labels=self.train_labels,
                 test_tokens=self.test_tokens, test_labels=self.test_labels,
                 motif=np.bytes_(self.motif.encode()), alphabet=np.bytes_(self.alphabet.encode()))

    @classmethod
    def load(cls, path) -> "GenomicDataset":
        with np.load(path) as z:
            return cls(train_tokens=z["train_tokens"], train_labels=z["train_labels"],
                       test_tokens=z["test_tokens"], test_labels=z["test_labels"],
                       motif=bytes(z["motif"]).decode(), alphabet=bytes(z["alphabet"]).decode())


def gen_genomic_dataset(n: int = 1000, length: int = 200, seed: int = 42,
                        n_test: int = 360, motif: str = DEFAULT_MOTIF) -> GenomicDataset:
    """Planted-motif binary dataset over {A, C, G, T}.

    Exactly half of each split gets the motif implanted at a uniform
    position (label 1); motif-free sequences are rejection-sampled (label 0).
    Deterministic for a fixed seed.
    """
    rng = rng_for(seed, 0xDA7A)
    mot = _encode(motif)

    def make_split(count):
        tokens = np.empty((count, length), dtype=np.int64)
        labels = np.empty(count, dtype=np.int64)
        half = count // 2
        order = rng.permutation(count)
        for rank, idx in enumerate(order):
            seq = rng.integers(0, 4, length)
            if rank < half:
                pos = int(rng.integers(0, length - mot.shape[0] + 1))
                seq[pos:pos + mot.shape[0]] = mot
                labels[idx] = 1
            else:
                while _contains(seq, mot):
                    seq = rng.integers(0, 4, length)
                labels[idx] = 0
            tokens[idx] = seq
        return tokens, labels

    train_tokens, train_labels = make_split(n)
    test_tokens, test_labels = make_split(n_test)
    return GenomicDataset(train_tokens=train_tokens, train_labels=train_labels,
                          test_tokens=test_tokens, test_labels=test_labels,
                          motif=motif)


@dataclass
class RecallDataset:
    tokens: np.ndarray        # (n, T)
    labels: np.ndarray        # (n,) needle payload in {0, 1}
    needle_starts: np.ndarray
    measured_bits: np.ndarray
    mode: str
    marker: int
    value_tokens: tuple
    alphabet_size: int

    @property
    def data(self):
        return self.tokens, self.labels


def gen_recall_dataset(n: int, length: int, mode: str, position_fraction: float,
                       seed: int, alphabet_size: int = 128,
                       target_bits: float | None = None) -> RecallDataset:
    """Needle-recall documents: filler at a target entropy, needle = (marker, value).

    The marker token is reserved (never sampled by the filler); the payload
    value in {0, 1} is the recall label.
    """
    from .metrics import token_entropy

    rng = rng_for(seed, 0x4EED)
    marker = alphabet_size - 1
    value_tokens = (0, 1)
    tokens = np.empty((n, length), dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    starts = np.empty(n, dtype=np.int64)
    bits = np.empty(n)
    for i in range(n):
        value = int(rng.integers(0, 2))
        # filler drawn over ids 0..alphabet_size-2 so the marker stays unique;
        # the needle is spliced over the placeholder afterwards
        doc = make_haystack(length, [0, 0], position_fraction, mode=mode,
                            target_bits=target_bits,
                            alphabet_size=alphabet_size - 1,
                            seed=int(rng.integers(0, 2**31)))
        seq = doc.tokens.copy()
        seq[doc.needle_start] = marker
        seq[doc.needle_start + 1] = value_tokens[value]
        tokens[i] = seq
        labels[i] = value
        starts[i] = doc.needle_start
        bits[i] = token_entropy(seq.tolist(), range(alphabet_size))
    return RecallDataset(tokens=tokens, labels=labels, needle_starts=starts,
                         measured_bits=bits, mode=mode, marker=marker,
                         value_tokens=value_tokens, alphabet_size=alphabet_size)
