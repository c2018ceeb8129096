"""Vocabulary with reserved marker tokens and the reference whitespace tokenizer.

The reference tokenizer is deliberately simple (lowercase + whitespace split);
subword tokenization belongs to external-encoder adapters, which bring their
own vocabulary behind the same interface.
"""

from __future__ import annotations

from collections import Counter
from typing import Iterable

PAD, CLS, SEP, MASK, USR, SYS, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[USR]", "[SYS]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, MASK, USR, SYS, UNK)


def whitespace_tokens(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Dense token->id map with the seven reserved tokens at ids 0..6."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._id_to_token: list[str] = list(SPECIAL_TOKENS)
        self._token_to_id: dict[str, int] = {t: i for i, t in enumerate(self._id_to_token)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token in self._token_to_id:
            return self._token_to_id[token]
        idx = len(self._id_to_token)
        self._id_to_token.append(token)
        self._token_to_id[token] = idx
        return idx

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id(self, token: str) -> int:
        return self._token_to_id.get(token, self._token_to_id[UNK])

    def token(self, idx: int) -> str:
        return self._id_to_token[idx]

    @property
    def pad_id(self) -> int:
        return self._token_to_id[PAD]

    @property
    def cls_id(self) -> int:
        return self._token_to_id[CLS]

    @property
    def sep_id(self) -> int:
        return self._token_to_id[SEP]

    @property
    def mask_id(self) -> int:
        return self._token_to_id[MASK]

    @property
    def usr_id(self) -> int:
        return self._token_to_id[USR]

    @property
    def sys_id(self) -> int:
        return self._token_to_id[SYS]

    @property
    def unk_id(self) -> int:
        return self._token_to_id[UNK]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(len(SPECIAL_TOKENS)))

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in whitespace_tokens(text)]

    def to_list(self) -> list[str]:
        return list(self._id_to_token)

    @classmethod
    def from_list(cls, tokens: list[str]) -> "Vocabulary":
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary list must start with the reserved tokens")
        v = cls()
        for t in tokens[len(SPECIAL_TOKENS) :]:
            v.add(t)
        return v


def build_vocab(texts: Iterable[str], min_count: int = 1, max_size: int | None = None) -> Vocabulary:
    """Frequency-sorted vocabulary (ties broken lexicographically, so the
    result is deterministic for a fixed text stream)."""
    counts = Counter()
    for text in texts:
        counts.update(whitespace_tokens(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, c in ranked if c >= min_count]
    if max_size is not None:
        kept = kept[: max(0, max_size - len(SPECIAL_TOKENS))]
    return Vocabulary(kept)
