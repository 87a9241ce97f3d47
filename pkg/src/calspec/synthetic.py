"""Synthetic corpora with planted synonym pairs.

The generator is a first-order Markov chain over ``vocab_size - 1`` words
(id 0 is BOS).  A fixed set of synonym pairs ``(preferred, variant)`` share
their successor rows, and every row puts ``slot_mass`` of its probability on
one synonym slot, split ``preferred_share : 1 - preferred_share``.  A
draft that swaps each pair's logits therefore disagrees with the target
exactly at the synonym slots, and does so in a recoverable way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream, Vocabulary, derive_seed
from .models import NGramModel, PerturbedDraft, train_ngram


@dataclass(frozen=True)
class SynonymCorpus:
    vocab: Vocabulary
    pairs: tuple[tuple[int, int], ...]
    docs: tuple[tuple[int, ...], ...]
    transition: np.ndarray


def _dirichlet(rng: RngStream, k: int) -> np.ndarray:
    # Exponential spacings give a flat Dirichlet; stick to our own stream.
    e = np.array([-np.log(1.0 - rng.uniform()) for _ in range(k)])
    return e / e.sum()


def synonym_chain(vocab_size: int = 200, n_pairs: int = 5, successors: int = 4,
                  slot_mass: float = 0.45, preferred_share: float = 0.6,
                  seed: int = 0) -> tuple[np.ndarray, tuple[tuple[int, int], ...]]:
    """Transition matrix (row = previous token) and the planted pairs."""
    rng = RngStream(derive_seed(seed, "chain"))
    pairs = tuple((1 + 2 * k, 2 + 2 * k) for k in range(n_pairs))
    variants = {b for _, b in pairs}
    plain = [t for t in range(1, vocab_size) if t not in variants and t not in {a for a, _ in pairs}]
    trans = np.zeros((vocab_size, vocab_size))
    for row in range(vocab_size):
        picks = set()
        while len(picks) < successors:
            picks.add(plain[int(rng.uniform() * len(plain))])
        w = _dirichlet(rng, successors) * (1 - slot_mass)
        for tok, m in zip(sorted(picks), w):
            trans[row, tok] += m
        a, b = pairs[int(rng.uniform() * n_pairs)]
        trans[row, a] += slot_mass * preferred_share
        trans[row, b] += slot_mass * (1 - preferred_share)
    for a, b in pairs:
        trans[b] = trans[a]
    return trans, pairs


def make_synonym_corpus(n_docs: int = 600, doc_len: int = 40, vocab_size: int = 200,
                        n_pairs: int = 5, seed: int = 0, **chain_kw) -> SynonymCorpus:
    trans, pairs = synonym_chain(vocab_size, n_pairs, seed=seed, **chain_kw)
    cdf = np.cumsum(trans, axis=1)
    docs = []
    for d in range(n_docs):
        rng = RngStream(derive_seed(seed, "doc", d))
        prev, doc = 0, []
        for _ in range(doc_len):
            u = rng.uniform() * cdf[prev, -1]
            prev = int(np.searchsorted(cdf[prev], u, side="right"))
            doc.append(prev)
        docs.append(tuple(doc))
    symbols = ["<s>"] + [f"w{i:03d}" for i in range(1, vocab_size)]
    for k, (a, b) in enumerate(pairs):
        symbols[a], symbols[b] = f"syn{k}a", f"syn{k}b"
    return SynonymCorpus(Vocabulary(tuple(symbols)), pairs, tuple(docs), trans)


@dataclass(frozen=True)
class DivergenceFixture:
    corpus: SynonymCorpus
    target: NGramModel
    draft: PerturbedDraft
    calibration_prompts: tuple[tuple[int, ...], ...]
    eval_prompts: tuple[tuple[int, ...], ...]


def divergence_fixture(n_calibration: int = 200, n_eval: int = 100, prompt_len: int = 8,
                       order: int = 3, alpha: float = 0.01, vocab_size: int = 200,
                       n_pairs: int = 5, swap_strength: float = 1.0, sigma: float = 0.0,
                       n_train_docs: int = 600, seed: int = 0) -> DivergenceFixture:
    """Target n-gram, swapped draft, and disjoint calibration / evaluation prompts.

    Training documents, calibration prompts and evaluation prompts come from
    disjoint document ranges of the same chain.
    """
    total = n_train_docs + n_calibration + n_eval
    corpus = make_synonym_corpus(total, vocab_size=vocab_size, n_pairs=n_pairs, seed=seed)
    train = corpus.docs[:n_train_docs]
    cal = corpus.docs[n_train_docs:n_train_docs + n_calibration]
    ev = corpus.docs[n_train_docs + n_calibration:]
    target = train_ngram(train, order, alpha, vocab_size)
    draft = PerturbedDraft(target, corpus.pairs, swap_strength, sigma, derive_seed(seed, "draft"))
    return DivergenceFixture(corpus, target, draft,
                             tuple(d[:prompt_len] for d in cal), tuple(d[:prompt_len] for d in ev))
