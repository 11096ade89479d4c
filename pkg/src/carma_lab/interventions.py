"""Robustness probes: constituent-aware pooling (CAP) and synonym replacement."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .batching import predict, restrict_argmax
from .metrics import accuracy, consist_syn
from .model import ContractError, LayerTrace, Transformer
from .tasks import Example, synonym_classes, task_tokenizer
from .tensor import Tensor
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)


class PoolMode(enum.Enum):
    MEAN = "mean"
    MAX = "max"
    SUM = "sum"


def pool_vectors(vectors: np.ndarray, mode: PoolMode) -> np.ndarray:
    if len(vectors) == 0:
        raise ContractError("cannot pool an empty span")
    if mode is PoolMode.MEAN:
        return vectors.mean(axis=0)
    if mode is PoolMode.MAX:
        return vectors.max(axis=0)
    return vectors.sum(axis=0)


def pool_hidden(h: np.ndarray, spans: Sequence[tuple[int, int]], mode: PoolMode) -> tuple[np.ndarray, list]:
    """Collapse each word span of ``h`` [T, D] to one row; other rows pass through in order."""
    rows, new_spans = [], []
    pos = 0
    for s, e in sorted(spans):
        if e <= s:
            raise ContractError(f"empty word span ({s}, {e})")
        if s < pos:
            raise ContractError("word spans overlap")
        rows.extend(h[pos:s])
        new_spans.append((len(rows), len(rows) + 1))
        rows.append(pool_vectors(h[s:e], mode))
        pos = e
    rows.extend(h[pos:])
    return np.stack(rows), new_spans


def cap_pool(trace: LayerTrace, layer: int, mode: PoolMode) -> tuple[Tensor, list]:
    """Pool ``trace.hidden[layer]`` (single sequence) to one vector per word."""
    if not 0 <= layer <= trace.n_layers:
        raise ContractError(f"layer {layer} outside trace with {trace.n_layers} layers")
    if not trace.word_spans:
        raise ContractError("trace has no word spans to pool over")
    h = trace.hidden[layer]
    if h.ndim != 2:
        raise ContractError("cap_pool works on a single sequence trace [T, D]")
    pooled, spans = pool_hidden(h.data, trace.word_spans, mode)
    return Tensor(pooled), spans


@dataclass
class CapResult:
    layer: int
    mode: PoolMode
    accuracy: float
    normalized_layer: float


def run_cap_eval(model: Transformer, examples: Sequence[Example], tokenizer: Tokenizer, layer: int,
                 mode: PoolMode, candidates: Sequence[int] | None = None) -> CapResult:
    """Pool at ``layer``, patch the pooled sequence back in, finish the forward pass, score."""
    n = model.config.n_layers
    if not 1 <= layer <= n:
        raise ContractError(f"CAP layer must be in [1, {n}], got {layer}")
    if not examples:
        raise ContractError("run_cap_eval needs at least one example")
    preds = []
    with T.no_grad():
        for ex in examples:
            ids, spans = tokenizer.encode_prompt(ex.prompt)
            patch = lambda h, spans=spans: Tensor(pool_hidden(h.data, spans, mode)[0])  # noqa: E731
            h, _ = model.run(ids, patches={layer: patch})
            logits = model.unembed(h[-1:]).data[0]
            preds.append(int(restrict_argmax(logits, candidates)))
    acc = accuracy(preds, [ex.target for ex in examples])
    return CapResult(layer, mode, acc, layer / n)


# -- synonym replacement ----------------------------------------------------------------

@dataclass
class SynonymLexicon:
    """word -> ranked substitutes.  ``identity=True`` maps every word to itself (test mode)."""

    table: dict[str, tuple[str, ...]]
    identity: bool = False

    @classmethod
    def for_task(cls, task: str) -> "SynonymLexicon":
        table = {}
        for cls_words in synonym_classes(task):
            for i, w in enumerate(cls_words):
                table[w] = tuple(cls_words[i + 1:] + cls_words[:i])
        return cls(table)

    @classmethod
    def identity_for(cls, task: str) -> "SynonymLexicon":
        return cls({w: (w,) for c in synonym_classes(task) for w in c}, identity=True)

    def __post_init__(self):
        if not self.identity:
            for w, subs in self.table.items():
                if not subs or w in subs:
                    raise ContractError(f"substitutes for {w!r} must be nonempty and exclude the word")

    def covers(self, word: str) -> bool:
        return word in self.table

    def top(self, word: str) -> str:
        return self.table[word][0]


@dataclass(frozen=True)
class Replacement:
    example: Example
    replaced: tuple[int, ...] = ()
    no_eligible: bool = False


def replace_synonyms(ex: Example, rate: float, seed, lexicon: SynonymLexicon,
                     tokenizer: Tokenizer | None = None) -> Replacement:
    """Swap ``ceil(rate * #eligible)`` eligible words for their top-ranked substitute.

    ``seed`` may be an int or a ``numpy.random.Generator`` (consumed in place).
    """
    if not 0.0 < rate <= 1.0:
        raise ContractError(f"rate must be in (0, 1], got {rate}")
    words = ex.words
    eligible = [i for i in ex.synonym_slots if lexicon.covers(words[i])]
    if not eligible:
        return Replacement(ex, (), True)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = min(len(eligible), math.ceil(rate * len(eligible) - 1e-9))
    # A full permutation keeps the stream aligned across rates, so for a fixed
    # seed the words swapped at a lower rate are a subset of those at a higher one.
    chosen = tuple(sorted(int(i) for i in rng.permutation(eligible)[:k]))
    for i in chosen:
        words[i] = lexicon.top(words[i])
    text = " ".join(words)
    tok = tokenizer or task_tokenizer(ex.task)
    return Replacement(replace(ex, prompt=text, word_spans=tuple(tok.tokenize(text)[1])), chosen)


@dataclass
class SynonymRecord:
    seed: int
    correct_before: int
    correct_after: int
    consist_syn: float | None
    n_examples: int
    replaced_words: int = 0
    flags: list = field(default_factory=list)


def run_synonym_eval(model: Transformer, examples: Sequence[Example], tokenizer: Tokenizer, rate: float,
                     seeds: Sequence[int], lexicon: SynonymLexicon,
                     candidates: Sequence[int] | None = None, base_seed: int = 0,
                     min_seeds: int = 5) -> list[SynonymRecord]:
    """One ConsistSyn record per seed, measured within the correct-before set."""
    if len(seeds) < min_seeds:
        raise ContractError(f"synonym evaluation needs at least {min_seeds} seeds, got {len(seeds)}")
    targets = np.array([ex.target for ex in examples])
    before = predict(model, examples, tokenizer, candidates) == targets
    keep = [ex for ex, ok in zip(examples, before) if ok]
    records = []
    for s in seeds:
        rng = np.random.default_rng([base_seed, int(s)])
        reps = [replace_synonyms(ex, rate, rng, lexicon, tokenizer) for ex in keep]
        flags = ["no_eligible_words"] * sum(r.no_eligible for r in reps)
        if keep:
            after = predict(model, [r.example for r in reps], tokenizer, candidates)
            n_after = int((after == np.array([ex.target for ex in keep])).sum())
        else:
            n_after = 0
            flags.append("empty_correct_before")
        records.append(SynonymRecord(int(s), len(keep), n_after, consist_syn(len(keep), n_after),
                                     len(examples), sum(len(r.replaced) for r in reps), flags))
    return records
