"""Tokenization for the metric and the model vocabulary."""

from __future__ import annotations

import hashlib
import json
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .schema import BOS, EOS, PAD, CompiledSchema

UNK = "<unk>"
# Punctuation the monolithic JSON baseline needs to spell its output.
STRUCTURAL_TOKENS = ("{", "}", "[", "]", ":", ",", '"')

_WORD = re.compile(r"[^\W_]+")
_MODEL_PIECE = re.compile(r"[^\W_]+|[^\w\s]|_")
_NO_SPACE_BEFORE = {",", ".", ":", ";", ")", "]", "}", "!", "?", "-", "/"}
_NO_SPACE_AFTER = {"(", "[", "{", "-", "/"}


class VocabularyError(ValueError):
    pass


def _nfc_lower(text: str) -> str:
    return unicodedata.normalize("NFC", text).lower()


def metric_tokens(text: str) -> list[str]:
    """Lowercased alphanumeric runs, in order, duplicates kept."""
    return _WORD.findall(_nfc_lower(text))


def normalize_token_set(text: str) -> frozenset[str]:
    return frozenset(metric_tokens(text))


def model_tokens(text: str) -> list[str]:
    """Word-level pieces for the model: alphanumeric runs and single punctuation marks."""
    return _MODEL_PIECE.findall(_nfc_lower(text))


def detokenize(tokens: Sequence[str]) -> str:
    out: list[str] = []
    glue = True
    for tok in tokens:
        if out and not glue and tok not in _NO_SPACE_BEFORE:
            out.append(" ")
        out.append(tok)
        glue = tok in _NO_SPACE_AFTER
    return "".join(out)


class SubwordSplitter:
    """Greedy longest-match splitter in the style of sentencepiece output.

    Words are split into digit runs, letter runs and single punctuation marks;
    the first piece of each whitespace-delimited word carries the ``▁`` marker.
    Runs longer than any known piece are split greedily against ``inventory``
    (falling back to single characters). With no inventory every run is kept whole.
    """

    MARK = "▁"
    _RUN = re.compile(r"\d+|[^\W\d_]+|[^\w\s]|_")

    def __init__(self, inventory: Iterable[str] = (), lowercase: bool = False):
        self.inventory = frozenset(inventory)
        self.lowercase = lowercase
        self._max_len = max((len(p) for p in self.inventory), default=0)

    def _greedy(self, run: str) -> list[str]:
        if not self.inventory or run in self.inventory:
            return [run]
        pieces, i = [], 0
        while i < len(run):
            for j in range(min(len(run), i + self._max_len), i, -1):
                if run[i:j] in self.inventory:
                    break
            else:
                j = i + 1
            pieces.append(run[i:j])
            i = j
        return pieces

    def split(self, text: str) -> list[str]:
        if self.lowercase:
            text = text.lower()
        pieces = []
        for word in text.split():
            for k, run in enumerate(self._RUN.findall(word)):
                sub = self._greedy(run)
                if k == 0:
                    sub[0] = self.MARK + sub[0]
                pieces.extend(sub)
        return pieces


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    n_special: int  # schema/control tokens occupy ids [0, n_special)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise VocabularyError(f"id {idx} out of range for vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    @property
    def special_token_ids(self) -> frozenset[int]:
        return frozenset(range(self.n_special))

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "specials": {
                "n_special": self.n_special,
                "pad": self.pad_id,
                "bos": self.bos_id,
                "eos": self.eos_id,
                "unk": self.unk_id,
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Vocabulary":
        return cls(tuple(data["tokens"]), int(data["specials"]["n_special"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def build_vocab(
    corpus: Iterable[str],
    schema: CompiledSchema,
    min_count: int = 1,
    extra_tokens: Sequence[str] = STRUCTURAL_TOKENS,
) -> Vocabulary:
    """Reserve every schema/control token, then add corpus words seen ``min_count`` times.

    Words are ordered by descending frequency, ties alphabetically.
    """
    if min_count < 1:
        raise VocabularyError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        counts.update(model_tokens(text))
    if n_texts == 0:
        raise VocabularyError("cannot build a vocabulary from an empty corpus")
    specials = list(schema.special_tokens)
    tokens = specials + [UNK]
    seen = set(tokens)
    for tok in extra_tokens:
        if tok not in seen:
            tokens.append(tok)
            seen.add(tok)
    for word, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if c >= min_count and word not in seen:
            tokens.append(word)
            seen.add(word)
    return Vocabulary(tuple(tokens), len(specials))


class Tokenizer:
    """``Tokenizer()`` works in metric mode; ``Tokenizer(vocab)`` in model mode."""

    def __init__(self, vocab: Vocabulary | None = None):
        self.vocab = vocab

    @property
    def mode(self) -> str:
        return "metric-normalized" if self.vocab is None else "model-vocab"

    def token_set(self, text: str) -> frozenset[str]:
        return normalize_token_set(text)

    def _require_vocab(self) -> Vocabulary:
        if self.vocab is None:
            raise VocabularyError("encode/decode need a model-mode tokenizer")
        return self.vocab

    def encode(self, text_or_tokens: str | Sequence[str]) -> list[int]:
        vocab = self._require_vocab()
        toks = model_tokens(text_or_tokens) if isinstance(text_or_tokens, str) else text_or_tokens
        return [vocab.id(t) for t in toks]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Token strings up to the first EOS; PAD and BOS are dropped."""
        vocab = self._require_vocab()
        out = []
        for i in ids:
            tok = vocab.token(int(i))
            if tok == EOS:
                break
            if tok in (PAD, BOS):
                continue
            out.append(tok)
        return out

    def decode_text(self, ids: Iterable[int]) -> str:
        return detokenize(self.decode(ids))


def encode(tok: Tokenizer, text_or_tokens: str | Sequence[str]) -> list[int]:
    return tok.encode(text_or_tokens)


def decode(tok: Tokenizer, ids: Iterable[int]) -> list[str]:
    return tok.decode(ids)
