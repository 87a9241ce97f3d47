"""Vocabulary, distribution and randomness primitives.

Logits and probability distributions are plain 1-D ``float64`` numpy arrays
indexed by token id.  The helpers here validate them at module boundaries;
everything downstream assumes they are well formed.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MASK64 = (1 << 64) - 1
BOS_ID = 0
PROB_ATOL = 1e-9

_TWO_NEG_53 = 2.0**-53


class EngineInvariantError(RuntimeError):
    """An internal consistency check failed (a bug, not bad input)."""


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.symbols) < 2:
            raise ValueError("vocabulary needs at least 2 symbols")
        index = {}
        for i, s in enumerate(self.symbols):
            if not s or any(c.isspace() for c in s):
                raise ValueError(f"symbol {i} is empty or contains whitespace: {s!r}")
            if s in index:
                raise ValueError(f"duplicate symbol {s!r} at ids {index[s]} and {i}")
            index[s] = i
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.symbols)

    def __len__(self) -> int:
        return len(self.symbols)

    def id_of(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise KeyError(f"unknown symbol {symbol!r}") from None

    def symbol(self, token_id: int) -> str:
        return self.symbols[token_id]

    def encode(self, symbols: Iterable[str]) -> list[int]:
        return [self.id_of(s) for s in symbols]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.symbols[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(tuple(line for line in text.split("\n") if line != ""))


def check_logits(logits, size: int | None = None) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"logits must be 1-D, got shape {z.shape}")
    if size is not None and z.shape[0] != size:
        raise ValueError(f"logits length {z.shape[0]} != vocabulary size {size}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain NaN or infinite entries")
    return z


def check_dist(probs, atol: float = PROB_ATOL) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"distribution must be 1-D, got shape {p.shape}")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    total = float(p.sum())
    if abs(total - 1.0) > atol:
        raise ValueError(f"probabilities sum to {total!r}, not 1")
    return p


def softmax_with_temperature(logits, temperature: float) -> np.ndarray:
    """Temperature-scaled softmax; ``temperature == 0`` means greedy.

    At zero temperature the result is one-hot at the argmax, ties going to
    the lowest token id.
    """
    if temperature < 0:
        raise ValueError(f"temperature must be non-negative, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if temperature == 0:
        out = np.zeros_like(z)
        out[int(np.argmax(z))] = 1.0
        return out
    e = np.exp((z - z.max()) / temperature)
    return e / e.sum()


def derive_seed(seed: int, *keys) -> int:
    """Mix a base seed with labels/indices into a new 64-bit seed.

    Uses BLAKE2b over a canonical byte encoding so the result does not depend
    on Python's per-process string hashing.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", seed & MASK64))
    for key in keys:
        if isinstance(key, (int, np.integer)):
            h.update(b"i" + int(key).to_bytes(16, "little", signed=True))
        elif isinstance(key, str):
            raw = key.encode("utf-8")
            h.update(b"s" + struct.pack("<I", len(raw)) + raw)
        elif isinstance(key, (tuple, list)):
            h.update(b"t" + struct.pack("<I", len(key)))
            h.update(np.asarray(key, dtype="<i8").tobytes())
        else:
            raise TypeError(f"cannot derive a seed from {type(key).__name__}")
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Reproducible uniform stream backed by the Philox4x64-10 generator.

    The key is the 64-bit seed and the counter starts at zero, so the raw
    64-bit output sequence is fixed by the algorithm and identical on every
    platform.  Doubles are formed from the top 53 bits.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self._bits = np.random.Philox(key=self.seed)
        self.draws = 0

    def next_u64(self) -> int:
        self.draws += 1
        return int(self._bits.random_raw())

    def uniform(self) -> float:
        """A double in [0, 1)."""
        return (self.next_u64() >> 11) * _TWO_NEG_53

    def uniforms(self, n: int) -> np.ndarray:
        raw = self._bits.random_raw(n)
        self.draws += n
        return (raw >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53

    def normals(self, n: int) -> np.ndarray:
        # Box-Muller on our own uniforms keeps the values platform independent.
        m = (n + 1) // 2
        u = self.uniforms(2 * m)
        rad = np.sqrt(-2.0 * np.log(1.0 - u[:m]))
        ang = 2.0 * np.pi * u[m:]
        return np.concatenate([rad * np.cos(ang), rad * np.sin(ang)])[:n]

    def spawn(self, *keys) -> "RngStream":
        return RngStream(derive_seed(self.seed, *keys))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, draws={self.draws})"


def sample(dist, rng: RngStream) -> int:
    """Inverse-CDF draw over token-id order; consumes exactly one uniform."""
    p = np.asarray(dist, dtype=np.float64)
    cdf = np.cumsum(p)
    u = rng.uniform() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    if idx >= p.shape[0]:  # only reachable through rounding in cdf[-1] * u
        idx = int(np.flatnonzero(p > 0)[-1])
    return idx


def total_variation(p: Sequence[float], q: Sequence[float]) -> float:
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())
