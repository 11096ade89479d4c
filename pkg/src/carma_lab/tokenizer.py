"""Fixed-chunk subword tokenizer that keeps track of word boundaries.

Words are split into consecutive 3-character chunks, so any word longer than
three letters becomes at least two tokens.  ``tokenize`` returns the ids plus
one ``(start, end)`` token range per surface word; those ranges are what the
MI loss and constituent pooling group on.
"""

from __future__ import annotations

import string
from typing import Iterable, Sequence

CHUNK = 3
ALPHABET = frozenset(string.ascii_lowercase)

PAD, BOS, SEP = "<pad>", "<bos>", "<sep>"
SPECIALS = (PAD, BOS, SEP)

Span = tuple[int, int]


class EncodingError(ValueError):
    """Text contains characters or chunks the vocabulary cannot encode."""


def chunk_word(word: str, size: int = CHUNK) -> list[str]:
    if not word:
        raise EncodingError("empty word")
    bad = set(word) - ALPHABET
    if bad:
        raise EncodingError(f"characters outside the alphabet: {''.join(sorted(bad))!r} in {word!r}")
    return [word[i:i + size] for i in range(0, len(word), size)]


class Tokenizer:
    """Vocabulary = special tokens, then every chunk of ``words``, then ``answers``.

    Answer tokens are whole words of at most three letters so each decodes to
    exactly one id.  Ids are assigned in sorted order for reproducibility.
    """

    def __init__(self, words: Iterable[str], answers: Iterable[str] = ()):
        chunks = sorted({c for w in words for c in chunk_word(w)})
        answers = list(dict.fromkeys(answers))
        for a in answers:
            if len(chunk_word(a)) != 1:
                raise EncodingError(f"answer {a!r} does not fit in a single token")
        self.itos: list[str] = list(SPECIALS) + chunks + [a for a in answers if a not in chunks]
        self.stoi: dict[str, int] = {s: i for i, s in enumerate(self.itos)}
        self.answer_ids: list[int] = [self.stoi[a] for a in answers]
        self._prompt_cache: dict[str, tuple[list[int], list[Span]]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    @property
    def sep_id(self) -> int:
        return self.stoi[SEP]

    def token_id(self, piece: str) -> int:
        try:
            return self.stoi[piece]
        except KeyError:
            raise EncodingError(f"chunk {piece!r} is not in the vocabulary") from None

    def tokenize(self, text: str) -> tuple[list[int], list[Span]]:
        ids: list[int] = []
        spans: list[Span] = []
        for word in text.split(" "):
            start = len(ids)
            ids.extend(self.token_id(c) for c in chunk_word(word))
            spans.append((start, len(ids)))
        return ids, spans

    def detokenize(self, ids: Sequence[int], spans: Sequence[Span]) -> str:
        return " ".join("".join(self.itos[i] for i in ids[s:e]) for s, e in spans)

    def encode_prompt(self, text: str) -> tuple[list[int], list[Span]]:
        """``<bos> text <sep>`` with spans shifted past the BOS token."""
        hit = self._prompt_cache.get(text)
        if hit is None:
            ids, spans = self.tokenize(text)
            hit = ([self.bos_id, *ids, self.sep_id], [(s + 1, e + 1) for s, e in spans])
            self._prompt_cache[text] = hit
        return list(hit[0]), list(hit[1])

    def decode_id(self, i: int) -> str:
        return self.itos[i]
