"""Turning examples into padded model batches and scoring predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import Transformer, pad_batch
from .tasks import Example
from .tokenizer import Tokenizer


@dataclass
class Batch:
    ids: np.ndarray            # [B, T] right-padded
    lengths: np.ndarray        # [B]
    answer_pos: np.ndarray     # [B] index of the <sep> token
    targets: np.ndarray        # [B]
    word_spans: list           # per sequence, in model token coordinates

    @property
    def mask(self) -> np.ndarray:
        return (np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]).astype(np.float64)


def encode(examples: Sequence[Example], tokenizer: Tokenizer) -> Batch:
    seqs, spans = [], []
    for ex in examples:
        ids, sp = tokenizer.encode_prompt(ex.prompt)
        seqs.append(ids)
        spans.append(sp)
    ids, lengths = pad_batch(seqs, tokenizer.pad_id)
    return Batch(ids, lengths, lengths - 1, np.array([ex.target for ex in examples], dtype=np.int64), spans)


def answer_logits(model: Transformer, h: T.Tensor, answer_pos: np.ndarray) -> T.Tensor:
    """Logits [B, V] at each row's answer position."""
    rows = np.arange(h.shape[0])
    return model.unembed(h[rows, answer_pos])


def restrict_argmax(logits: np.ndarray, candidates: Sequence[int] | None) -> np.ndarray:
    """Argmax over the candidate ids (full vocabulary if ``None``); ties -> lowest id."""
    if candidates is None:
        return np.argmax(logits, axis=-1)
    cand = np.asarray(sorted(candidates), dtype=np.int64)
    return cand[np.argmax(logits[..., cand], axis=-1)]


def predict(model: Transformer, examples: Sequence[Example], tokenizer: Tokenizer,
            candidates: Sequence[int] | None = None, batch_size: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(examples), batch_size):
            b = encode(examples[i:i + batch_size], tokenizer)
            h, _ = model.run(b.ids)
            out.append(restrict_argmax(answer_logits(model, h, b.answer_pos).data, candidates))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
