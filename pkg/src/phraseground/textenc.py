"""Caption encoding: closed vocabulary, learned word embeddings with one
self-attention block, and span-mean pooling into phrase embeddings.

Stands in for a frozen pretrained text encoder at desk scale; a freeze flag
restores the fixed-weights regime once warm-up has produced usable features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import all_grammar_words
from .tensor import ContractViolation, Parameter, Tensor, embedding

VOCAB_VERSION = 1


class VocabularyError(KeyError):
    """A caption word is outside the closed template vocabulary."""


class Vocabulary:
    def __init__(self, words: list[str]):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self):
        return len(self.words)

    def encode(self, caption: list[str]) -> np.ndarray:
        ids = np.empty(len(caption), dtype=np.int64)
        for i, w in enumerate(caption):
            if w not in self.index:
                raise VocabularyError(f"unknown word: {w!r}")
            ids[i] = self.index[w]
        return ids

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(all_grammar_words())

    def save(self, path: str):
        with open(path, "w") as fh:
            json.dump({"version": VOCAB_VERSION, "words": self.words}, fh, indent=0)

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("version") != VOCAB_VERSION:
            raise ValueError(f"unsupported vocabulary version {payload.get('version')}")
        return cls(payload["words"])


@dataclass
class PhraseSet:
    """Per-caption phrase embeddings plus the metadata that rides along."""

    embeddings: Tensor            # [N, C_t]
    categories: np.ndarray        # int [N]
    grounded: np.ndarray          # bool [N]
    plural: np.ndarray            # bool [N]
    is_thing: np.ndarray          # bool [N]

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]


class TextEncoder(nn.Module):
    def __init__(self, vocab: Vocabulary, c_t: int, heads: int, rng, dtype=np.float32,
                 max_words: int = 230, n_max: int = 30):
        super().__init__()
        self.vocab = vocab
        self.c_t = c_t
        self.max_words = max_words
        self.n_max = n_max
        self.embed = Parameter((rng.standard_normal((len(vocab), c_t)) * 0.05).astype(dtype))
        self.pos = nn.sinusoidal_rows(max_words, c_t, dtype)
        self.ln1 = nn.LayerNorm(c_t, dtype)
        self.attn = nn.MultiHeadAttention(c_t, c_t, c_t, heads, rng, dtype)
        self.ln2 = nn.LayerNorm(c_t, dtype)
        self.ffn = nn.FeedForward(c_t, rng, dtype)

    def encode_words(self, caption: list[str]) -> Tensor:
        M = len(caption)
        if M == 0:
            raise ContractViolation("empty caption")
        if M > self.max_words:
            raise ContractViolation(f"caption of {M} words exceeds cap {self.max_words}")
        ids = self.vocab.encode(caption)
        x = embedding(self.embed, ids) + self.pos[:M]
        h = self.ln1(x)
        a, _ = self.attn(h, h)
        x = x + a
        x = x + self.ffn(self.ln2(x))
        return x

    def pool_phrases(self, words: Tensor, spans, categories, grounded, plural, is_thing) -> PhraseSet:
        M = words.shape[0]
        N = len(spans)
        if N > self.n_max:
            raise ContractViolation(f"{N} phrases exceeds cap {self.n_max}")
        pool = np.zeros((N, M), dtype=words.dtype)
        for j, (s, e) in enumerate(spans):
            if not (0 <= s < e <= M):
                raise ContractViolation(f"span {(s, e)} invalid for {M} words")
            pool[j, s:e] = 1.0 / (e - s)
        emb = Tensor(pool) @ words
        return PhraseSet(
            embeddings=emb,
            categories=np.asarray(categories, dtype=np.int64),
            grounded=np.asarray(grounded, dtype=bool),
            plural=np.asarray(plural, dtype=bool),
            is_thing=np.asarray(is_thing, dtype=bool),
        )

    def encode_sample(self, caption: list[str], phrases) -> PhraseSet:
        words = self.encode_words(caption)
        return self.pool_phrases(
            words,
            spans=[p.word_span for p in phrases],
            categories=[p.category_id for p in phrases],
            grounded=[p.grounded for p in phrases],
            plural=[p.is_plural for p in phrases],
            is_thing=[p.is_thing for p in phrases],
        )
