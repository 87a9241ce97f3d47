"""Language-model backends used as draft and target.

Every backend maps a context (sequence of token ids) to a vector of raw
logits.  Probabilities are always obtained through
:func:`calspec.core.softmax_with_temperature`.

Persistence formats (UTF-8 text, one header line then tab-separated rows):

``#calspec-ngram v1 order=<n> alpha=<float> vocab_size=<V>``
    rows ``<context ids, space separated, or ->\\t<token>\\t<count>``
``#calspec-table v1 window=<k> vocab_size=<V>``
    rows ``<context ids or * for the default row>\\t<logits, space separated>``
``#calspec-perturbed v1 strength=<s> sigma=<sigma> seed=<seed> base=<path>``
    rows ``<a>\\t<b>`` (one swap pair per row); ``base`` is relative to the file

Floats are written with ``repr`` so every format round-trips exactly.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import BOS_ID, RngStream, Vocabulary, check_logits, derive_seed


class ModelFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class LanguageModel:
    """Base class: a pure function from context to logits."""

    vocab_size: int

    def logits(self, context: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    def save(self, path) -> None:
        raise NotImplementedError


def _frozen(z: np.ndarray) -> np.ndarray:
    z = np.array(z, dtype=np.float64)
    z.flags.writeable = False
    return z


def _pad_window(context: Sequence[int], width: int) -> tuple[int, ...]:
    if width == 0:
        return ()
    tail = tuple(int(t) for t in context[-width:])
    return (BOS_ID,) * (width - len(tail)) + tail


def _parse_header(path, line: str, magic: str) -> dict[str, str]:
    parts = line.split()
    if len(parts) < 2 or parts[0] != magic or parts[1] != "v1":
        raise ModelFormatError(path, 1, f"expected header '{magic} v1 ...'")
    fields = {}
    for item in parts[2:]:
        key, sep, value = item.partition("=")
        if not sep:
            raise ModelFormatError(path, 1, f"malformed header field {item!r}")
        fields[key] = value
    return fields


def _parse_ids(path, lineno: int, text: str) -> tuple[int, ...]:
    if text in ("", "-"):
        return ()
    try:
        return tuple(int(x) for x in text.split(" "))
    except ValueError:
        raise ModelFormatError(path, lineno, f"bad context {text!r}") from None


class NGramModel(LanguageModel):
    """Additive-smoothed n-gram model.

    ``P(t | ctx) = (count(ctx, t) + alpha) / (count(ctx) + alpha * V)``, where
    ``ctx`` is the last ``order - 1`` tokens, left-padded with BOS.
    """

    def __init__(self, order: int, alpha: float, vocab_size: int,
                 counts: Mapping[tuple[int, ...], Mapping[int, int]]):
        if order < 1:
            raise ValueError(f"order must be >= 1, got {order}")
        if not alpha > 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        if vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        self.order = order
        self.alpha = float(alpha)
        self.vocab_size = vocab_size
        self.counts = {tuple(ctx): dict(row) for ctx, row in counts.items()}
        self._cache: dict[tuple[int, ...], np.ndarray] = {}
        self._unseen = _frozen(np.full(vocab_size, -math.log(vocab_size)))

    def context_of(self, context: Sequence[int]) -> tuple[int, ...]:
        return _pad_window(context, self.order - 1)

    def prob(self, context: Sequence[int], token: int) -> float:
        row = self.counts.get(self.context_of(context), {})
        total = sum(row.values())
        return (row.get(token, 0) + self.alpha) / (total + self.alpha * self.vocab_size)

    def logits(self, context: Sequence[int]) -> np.ndarray:
        ctx = self.context_of(context)
        z = self._cache.get(ctx)
        if z is None:
            row = self.counts.get(ctx)
            if row is None:
                return self._unseen
            c = np.zeros(self.vocab_size)
            for tok, n in row.items():
                c[tok] = n
            z = _frozen(np.log((c + self.alpha) / (c.sum() + self.alpha * self.vocab_size)))
            self._cache[ctx] = z
        return z

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state

    def __eq__(self, other):
        return (isinstance(other, NGramModel) and self.order == other.order
                and self.alpha == other.alpha and self.vocab_size == other.vocab_size
                and self.counts == other.counts)

    def save(self, path) -> None:
        lines = [f"#calspec-ngram v1 order={self.order} alpha={self.alpha!r} "
                 f"vocab_size={self.vocab_size}"]
        for ctx in sorted(self.counts):
            ctx_text = " ".join(map(str, ctx)) if ctx else "-"
            for tok in sorted(self.counts[ctx]):
                lines.append(f"{ctx_text}\t{tok}\t{self.counts[ctx][tok]}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NGramModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ModelFormatError(path, 1, "empty model file")
        head = _parse_header(path, lines[0], "#calspec-ngram")
        try:
            order, alpha, vocab = int(head["order"]), float(head["alpha"]), int(head["vocab_size"])
        except (KeyError, ValueError) as exc:
            raise ModelFormatError(path, 1, f"bad header: {exc}") from None
        counts: dict[tuple[int, ...], dict[int, int]] = {}
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split("\t")
            if len(parts) != 3:
                raise ModelFormatError(path, lineno, "expected 3 tab-separated fields")
            ctx = _parse_ids(path, lineno, parts[0])
            try:
                tok, n = int(parts[1]), int(parts[2])
            except ValueError:
                raise ModelFormatError(path, lineno, "token and count must be integers") from None
            if len(ctx) != order - 1 or not 0 <= tok < vocab or n < 0:
                raise ModelFormatError(path, lineno, "row out of range")
            counts.setdefault(ctx, {})[tok] = n
        return cls(order, alpha, vocab, counts)


def train_ngram(corpus: Iterable[Sequence[int]], order: int, alpha: float,
                vocab_size: int) -> NGramModel:
    """Count every length-``order`` window of every document.

    Each document is left-padded with ``order - 1`` BOS tokens so that every
    token (the first one included) is predicted once.
    """
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    docs = [list(doc) for doc in corpus]
    if not docs:
        raise ValueError("corpus is empty")
    counts: dict[tuple[int, ...], dict[int, int]] = {}
    width = order - 1
    for d, doc in enumerate(docs):
        for i, tok in enumerate(doc):
            if not (isinstance(tok, (int, np.integer)) and 0 <= tok < vocab_size):
                raise ValueError(
                    f"out-of-vocabulary token {tok!r} at document {d}, position {i}")
        padded = [BOS_ID] * width + [int(t) for t in doc]
        for i in range(width, len(padded)):
            ctx = tuple(padded[i - width:i])
            row = counts.setdefault(ctx, {})
            row[padded[i]] = row.get(padded[i], 0) + 1
    return NGramModel(order, alpha, vocab_size, counts)


class TableModel(LanguageModel):
    """Explicit lookup from the last ``window`` tokens to a logits row."""

    def __init__(self, vocab_size: int, window: int,
                 rows: Mapping[tuple[int, ...], Sequence[float]], default: Sequence[float]):
        if window < 0:
            raise ValueError("window must be >= 0")
        self.vocab_size = vocab_size
        self.window = window
        self.default = _frozen(check_logits(default, vocab_size))
        self.rows = {}
        for ctx, z in rows.items():
            ctx = tuple(int(t) for t in ctx)
            if len(ctx) != window:
                raise ValueError(f"row key {ctx} does not have window length {window}")
            self.rows[ctx] = _frozen(check_logits(z, vocab_size))

    def logits(self, context: Sequence[int]) -> np.ndarray:
        return self.rows.get(_pad_window(context, self.window), self.default)

    def save(self, path) -> None:
        def fmt(z):
            return " ".join(repr(float(v)) for v in z)
        lines = [f"#calspec-table v1 window={self.window} vocab_size={self.vocab_size}",
                 f"*\t{fmt(self.default)}"]
        for ctx in sorted(self.rows):
            ctx_text = " ".join(map(str, ctx)) if ctx else "-"
            lines.append(f"{ctx_text}\t{fmt(self.rows[ctx])}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TableModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ModelFormatError(path, 1, "empty model file")
        head = _parse_header(path, lines[0], "#calspec-table")
        try:
            window, vocab = int(head["window"]), int(head["vocab_size"])
        except (KeyError, ValueError) as exc:
            raise ModelFormatError(path, 1, f"bad header: {exc}") from None
        default = None
        rows = {}
        for lineno, line in enumerate(lines[1:], start=2):
            key, sep, values = line.partition("\t")
            if not sep:
                raise ModelFormatError(path, lineno, "expected <context>\\t<logits>")
            try:
                z = [float(v) for v in values.split(" ")]
            except ValueError:
                raise ModelFormatError(path, lineno, "bad logit value") from None
            if len(z) != vocab:
                raise ModelFormatError(path, lineno, f"expected {vocab} logits")
            if key == "*":
                default = z
            else:
                rows[_parse_ids(path, lineno, key)] = z
        if default is None:
            raise ModelFormatError(path, len(lines), "missing default row '*'")
        try:
            return cls(vocab, window, rows, default)
        except ValueError as exc:
            raise ModelFormatError(path, 1, str(exc)) from None


class PerturbedDraft(LanguageModel):
    """A base model with selected logit pairs mixed and optional noise.

    For each pair ``(a, b)`` with strength ``s``:
    ``z'_a = (1 - s) z_a + s z_b`` and ``z'_b = (1 - s) z_b + s z_a``.
    Gaussian noise of scale ``sigma`` is then added; it is drawn from a
    stream seeded by ``(noise_seed, context)``, so it is a pure function of
    the context.
    """

    def __init__(self, base: LanguageModel, swap_pairs: Sequence[tuple[int, int]],
                 swap_strength: float, logit_noise_sigma: float = 0.0, noise_seed: int = 0,
                 base_path: str | None = None):
        if not 0.0 <= swap_strength <= 1.0:
            raise ValueError(f"swap_strength must be in [0, 1], got {swap_strength}")
        if logit_noise_sigma < 0:
            raise ValueError("logit_noise_sigma must be non-negative")
        seen: set[int] = set()
        pairs = []
        for a, b in swap_pairs:
            a, b = int(a), int(b)
            if a == b:
                raise ValueError(f"swap pair ({a}, {b}) must contain distinct tokens")
            for t in (a, b):
                if not 0 <= t < base.vocab_size:
                    raise ValueError(f"token {t} is outside the vocabulary")
                if t in seen:
                    raise ValueError(f"token {t} appears in more than one swap pair")
                seen.add(t)
            pairs.append((a, b))
        self.base = base
        self.vocab_size = base.vocab_size
        self.swap_pairs = tuple(pairs)
        self.swap_strength = float(swap_strength)
        self.logit_noise_sigma = float(logit_noise_sigma)
        self.noise_seed = int(noise_seed)
        self.base_path = base_path
        if pairs:
            self._a = np.array([a for a, _ in pairs])
            self._b = np.array([b for _, b in pairs])

    def logits(self, context: Sequence[int]) -> np.ndarray:
        z = np.array(self.base.logits(context), dtype=np.float64)
        if self.swap_pairs and self.swap_strength > 0:
            s = self.swap_strength
            za, zb = z[self._a], z[self._b]
            z[self._a] = (1 - s) * za + s * zb
            z[self._b] = (1 - s) * zb + s * za
        if self.logit_noise_sigma > 0:
            rng = RngStream(derive_seed(self.noise_seed, "noise", tuple(int(t) for t in context)))
            z += self.logit_noise_sigma * rng.normals(self.vocab_size)
        return z

    def save(self, path) -> None:
        if self.base_path is None:
            raise ValueError("PerturbedDraft needs base_path to be saved")
        lines = [f"#calspec-perturbed v1 strength={self.swap_strength!r} "
                 f"sigma={self.logit_noise_sigma!r} seed={self.noise_seed} base={self.base_path}"]
        lines += [f"{a}\t{b}" for a, b in self.swap_pairs]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PerturbedDraft":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ModelFormatError(path, 1, "empty model file")
        head = _parse_header(path, lines[0], "#calspec-perturbed")
        try:
            strength, sigma = float(head["strength"]), float(head["sigma"])
            seed, base_rel = int(head["seed"]), head["base"]
        except (KeyError, ValueError) as exc:
            raise ModelFormatError(path, 1, f"bad header: {exc}") from None
        pairs = []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split("\t")
            try:
                a, b = (int(x) for x in parts)
            except ValueError:
                raise ModelFormatError(path, lineno, "expected <a>\\t<b>") from None
            pairs.append((a, b))
        base = load_model(Path(path).parent / base_rel)
        try:
            return cls(base, pairs, strength, sigma, seed, base_path=base_rel)
        except ValueError as exc:
            raise ModelFormatError(path, 1, str(exc)) from None


def make_perturbed_draft(base: LanguageModel, swap_pairs, swap_strength: float,
                         sigma: float = 0.0, seed: int = 0) -> PerturbedDraft:
    return PerturbedDraft(base, swap_pairs, swap_strength, sigma, seed)


_LOADERS = {
    "#calspec-ngram": NGramModel.load,
    "#calspec-table": TableModel.load,
    "#calspec-perturbed": PerturbedDraft.load,
}


def load_model(path) -> LanguageModel:
    """Load any backend, dispatching on the header line."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    magic = first.split(" ", 1)[0].strip()
    loader = _LOADERS.get(magic)
    if loader is None:
        raise ModelFormatError(path, 1, f"unrecognized model header {first.strip()!r}")
    return loader(path)


def read_corpus(path, vocab: Vocabulary) -> list[list[int]]:
    """One document per line, whitespace-separated symbols."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            words = line.split()
            if not words:
                continue
            doc = []
            for col, w in enumerate(words, start=1):
                try:
                    doc.append(vocab.id_of(w))
                except KeyError:
                    raise ModelFormatError(path, lineno,
                                           f"unknown symbol {w!r} (word {col})") from None
            docs.append(doc)
    return docs
