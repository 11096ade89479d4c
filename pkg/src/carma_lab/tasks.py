"""Synthetic inverse-dictionary (IDM) and sentiment (SC) tasks.

Both tasks are single-token cloze problems: ``<bos> prompt <sep>`` followed by
one answer token.  Surface words come in synonym classes; meaning (and hence
the answer) depends only on the classes, never on which synonym was used.
Held-out splits contain word combinations that never co-occur in training.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable

import numpy as np

from .tokenizer import Span, Tokenizer, chunk_word

IDM, SC = "idm", "sc"
TASKS = (IDM, SC)
MIN_ITEMS = 50
SPLITS = ("train", "validation", "test")


class GenerationError(ValueError):
    """The requested dataset cannot be generated."""


# Synonym classes.  Order inside a class is the substitute ranking.
IDM_CONCEPTS = (
    ("hound", "canine", "mutt"),
    ("feline", "kitty", "tomcat"),
    ("house", "dwelling", "residence"),
    ("boat", "vessel", "ship"),
    ("road", "street", "avenue"),
    ("river", "stream", "creek"),
    ("forest", "woodland", "grove"),
    ("hill", "mound", "hillock"),
)
IDM_ATTRIBUTES = (
    ("small", "little", "tiny"),
    ("large", "huge", "enormous"),
    ("ancient", "aged", "elderly"),
    ("young", "youthful", "juvenile"),
    ("swift", "rapid", "speedy"),
    ("quiet", "silent", "hushed"),
)
IDM_VERBS = (
    ("stands", "rests", "remains"),
    ("appears", "emerges", "shows"),
)
IDM_ADVERBS = (
    ("nearby", "close", "around"),
    ("often", "frequently", "regularly"),
)
IDM_TEMPLATES = (
    "the {attr} {concept} that {verb} {adv} is called",
    "any {concept} that is {attr} and {verb} {adv} is called",
)

SC_NOUNS = (
    ("film", "movie", "picture"),
    ("acting", "performance", "portrayal"),
    ("plot", "story", "storyline"),
    ("music", "soundtrack", "score"),
)
POSITIVE, NEGATIVE, NEUTRAL = "pos", "neg", "neu"
SC_LABELS = (POSITIVE, NEGATIVE, NEUTRAL)
SC_POLAR = {
    POSITIVE: (("brilliant", "excellent", "superb"),
               ("delightful", "charming", "lovely"),
               ("good", "great", "fine")),
    NEGATIVE: (("terrible", "dreadful", "horrible"),
               ("boring", "tedious", "dull"),
               ("bad", "poor", "awful")),
    NEUTRAL: (("average", "ordinary", "typical"),
              ("acceptable", "adequate", "passable"),
              ("standard", "regular", "usual")),
}
NEGATION, INTENSIFIER = "negation", "intensifier"
SC_MODIFIERS = {
    NEGATION: (("not", "never", "hardly"),),
    INTENSIFIER: (("very", "truly", "really"),
                  ("extremely", "incredibly", "remarkably")),
}
SC_TEMPLATES = (
    "the {noun} was {mod}{polar} and the sentiment is",
    "this {noun} felt {mod}{polar} so its sentiment is",
)


def synonym_classes(task: str) -> list[tuple[str, ...]]:
    """Every synonym class used by ``task`` (slot-preserving by construction)."""
    if task == IDM:
        return [*IDM_CONCEPTS, *IDM_ATTRIBUTES, *IDM_VERBS, *IDM_ADVERBS]
    if task == SC:
        return [*SC_NOUNS, *(c for cs in SC_POLAR.values() for c in cs),
                *(c for cs in SC_MODIFIERS.values() for c in cs)]
    raise ValueError(f"unknown task {task!r}")


def _template_words(templates: Iterable[str]) -> set[str]:
    words = set()
    for t in templates:
        words.update(w for w in t.replace("{mod}", "").split() if "{" not in w)
    return words


@lru_cache(maxsize=None)
def idm_terms() -> tuple[str, ...]:
    """One fresh 3-letter term per (attribute class, concept class) pair."""
    lexicon = {w for c in synonym_classes(IDM) for w in c} | _template_words(IDM_TEMPLATES)
    taken = {ch for w in lexicon for ch in chunk_word(w)}
    rng = np.random.default_rng(20240611)
    consonants, vowels = list("bdfgklmnprstvz"), list("aeiou")
    terms: list[str] = []
    while len(terms) < len(IDM_ATTRIBUTES) * len(IDM_CONCEPTS):
        t = rng.choice(consonants) + rng.choice(vowels) + rng.choice(consonants)
        if t not in taken and t not in terms:
            terms.append(t)
    return tuple(terms)


def idm_term(attr_class: int, concept_class: int) -> str:
    return idm_terms()[attr_class * len(IDM_CONCEPTS) + concept_class]


def sc_label(polarity: str, modifier_kind: str | None) -> str:
    if modifier_kind == NEGATION and polarity != NEUTRAL:
        return NEGATIVE if polarity == POSITIVE else POSITIVE
    return polarity


@lru_cache(maxsize=None)
def task_tokenizer(task: str) -> Tokenizer:
    if task == IDM:
        words = {w for c in synonym_classes(IDM) for w in c} | _template_words(IDM_TEMPLATES)
        answers = idm_terms()
    elif task == SC:
        words = {w for c in synonym_classes(SC) for w in c} | _template_words(SC_TEMPLATES)
        answers = SC_LABELS
    else:
        raise ValueError(f"unknown task {task!r}")
    tok = Tokenizer(sorted(words), answers)
    clash = set(answers) & {ch for w in words for ch in chunk_word(w)}
    if clash:
        raise GenerationError(f"answer tokens collide with prompt chunks: {sorted(clash)}")
    return tok


@dataclass(frozen=True)
class Example:
    prompt: str
    target: int
    task: str
    word_spans: tuple[Span, ...]
    synonym_slots: tuple[int, ...]
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def words(self) -> list[str]:
        return self.prompt.split(" ")

    @classmethod
    def build(cls, prompt: str, answer: str, task: str, synonym_slots: Iterable[int],
              meta: dict | None = None, tokenizer: Tokenizer | None = None) -> "Example":
        tok = tokenizer or task_tokenizer(task)
        _, spans = tok.tokenize(prompt)
        return cls(prompt, tok.token_id(answer), task, tuple(spans), tuple(synonym_slots), meta or {})


@dataclass
class DatasetSplit:
    train: list[Example]
    validation: list[Example]
    test: list[Example]
    generator_seed: int
    task: str

    def splits(self) -> dict[str, list[Example]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}

    @property
    def tokenizer(self) -> Tokenizer:
        return task_tokenizer(self.task)

    def answer_ids(self) -> list[int]:
        return list(self.tokenizer.answer_ids)


def _hold_out(pairs: list, n_items_of: dict, quotas: tuple[int, int], can_remove) -> tuple[set, set]:
    """Greedily move whole pairs into test, then validation, until item quotas are met."""
    held: list[set] = [set(), set()]
    for slot, quota in enumerate(quotas):
        got = 0
        for p in pairs:
            if got >= quota:
                break
            if p in held[0] or p in held[1] or not can_remove(p):
                continue
            held[slot].add(p)
            got += n_items_of[p]
    return held[0], held[1]


def _check_n(n_items: int, limit: int) -> None:
    if n_items < MIN_ITEMS:
        raise GenerationError(f"n_items must be >= {MIN_ITEMS}, got {n_items}")
    if n_items > limit:
        raise GenerationError(f"n_items={n_items} exceeds the {limit} distinct prompts available")


def gen_idm(seed: int, n_items: int = 600) -> DatasetSplit:
    """Definitions ``the <attr> <concept> ... is called`` -> term token.

    The term is a function of the attribute class and concept class only;
    (attribute word, concept word) pairs in validation/test never appear in
    training, but every class pair does (through other synonyms).
    """
    attrs = [(w, ci) for ci, c in enumerate(IDM_ATTRIBUTES) for w in c]
    concepts = [(w, ci) for ci, c in enumerate(IDM_CONCEPTS) for w in c]
    verbs = [w for c in IDM_VERBS for w in c]
    advs = [w for c in IDM_ADVERBS for w in c]
    pairs = [(a, c) for a in attrs for c in concepts]
    _check_n(n_items, len(pairs) * len(verbs) * len(advs) * len(IDM_TEMPLATES))

    rng = np.random.default_rng(seed)
    order = [pairs[i] for i in rng.permutation(len(pairs))]
    seen, items = set(), []
    i = 0
    while len(items) < n_items:
        (a, ac), (c, cc) = order[i % len(order)]
        v, d = verbs[rng.integers(len(verbs))], advs[rng.integers(len(advs))]
        t = int(rng.integers(len(IDM_TEMPLATES)))
        key = (a, c, v, d, t)
        i += 1
        if key in seen:
            continue
        seen.add(key)
        items.append(key)

    pair_of = {it: (it[0], it[1]) for it in items}
    n_of: dict = {}
    for it in items:
        n_of[pair_of[it]] = n_of.get(pair_of[it], 0) + 1
    used = list(dict.fromkeys(pair_of[it] for it in items))
    attr_cls = {w: ci for w, ci in attrs}
    conc_cls = {w: ci for w, ci in concepts}
    remaining: dict = {}
    for a, c in used:
        k = (attr_cls[a], conc_cls[c])
        remaining[k] = remaining.get(k, 0) + 1

    def can_remove(p):
        k = (attr_cls[p[0]], conc_cls[p[1]])
        if remaining[k] <= 1:
            return False
        remaining[k] -= 1
        return True

    quota = round(0.1 * n_items)
    test_pairs, val_pairs = _hold_out(used, n_of, (quota, quota), can_remove)

    out = {s: [] for s in SPLITS}
    for a, c, v, d, t in items:
        text = IDM_TEMPLATES[t].format(attr=a, concept=c, verb=v, adv=d)
        words = text.split(" ")
        slots = [words.index(a), words.index(c), words.index(v), words.index(d)]
        ex = Example.build(text, idm_term(attr_cls[a], conc_cls[c]), IDM, sorted(slots),
                           meta={"attr_class": attr_cls[a], "concept_class": conc_cls[c],
                                 "pair": [a, c]})
        split = "test" if (a, c) in test_pairs else "validation" if (a, c) in val_pairs else "train"
        out[split].append(ex)
    return DatasetSplit(out["train"], out["validation"], out["test"], seed, IDM)


def gen_sc(seed: int, n_items: int = 600) -> DatasetSplit:
    """Review snippets with optional negation / intensifier -> pos / neg / neu.

    Negation flips positive and negative and leaves neutral alone; intensifiers
    preserve polarity.  (modifier, polarity word) pairs held out for
    validation/test are modified compositions that never occur in training.
    """
    nouns = [w for c in SC_NOUNS for w in c]
    polar = [(w, pol) for pol, cs in SC_POLAR.items() for c in cs for w in c]
    mods = [(None, None)] + [(w, kind) for kind, cs in SC_MODIFIERS.items() for c in cs for w in c]
    pairs = [(m, p) for m in mods for p in polar]
    _check_n(n_items, len(pairs) * len(nouns) * len(SC_TEMPLATES))

    rng = np.random.default_rng(seed)
    order = [pairs[i] for i in rng.permutation(len(pairs))]
    seen, items = set(), []
    i = 0
    while len(items) < n_items:
        (m, mk), (p, pol) = order[i % len(order)]
        noun = nouns[rng.integers(len(nouns))]
        t = int(rng.integers(len(SC_TEMPLATES)))
        key = (m, p, noun, t)
        i += 1
        if key in seen:
            continue
        seen.add(key)
        items.append((key, mk, pol))

    n_of: dict = {}
    for (m, p, _, _), _, _ in items:
        n_of[(m, p)] = n_of.get((m, p), 0) + 1
    kind_of = dict(mods)
    pol_of = dict(polar)
    used = list(dict.fromkeys((m, p) for (m, p, _, _), _, _ in items))
    by_label: dict = {lab: [] for lab in SC_LABELS}
    for m, p in used:
        if m is not None:
            by_label[sc_label(pol_of[p], kind_of[m])].append((m, p))
    # Each polarity word must keep a training pair with the same modifier kind,
    # and each modifier word must keep one with the same polarity.
    word_kind: dict = {}
    mod_pol: dict = {}
    for m, p in used:
        if m is None:
            continue
        word_kind[(p, kind_of[m])] = word_kind.get((p, kind_of[m]), 0) + 1
        mod_pol[(m, pol_of[p])] = mod_pol.get((m, pol_of[p]), 0) + 1

    def can_remove(pair):
        m, p = pair
        a, b = (p, kind_of[m]), (m, pol_of[p])
        if word_kind[a] <= 1 or mod_pol[b] <= 1:
            return False
        word_kind[a] -= 1
        mod_pol[b] -= 1
        return True

    # Per-label quotas keep the held-out splits balanced across classes.
    quota = round(0.1 * n_items / len(SC_LABELS))
    test_pairs, val_pairs = set(), set()
    for group in by_label.values():
        t, v = _hold_out(group, n_of, (quota, quota), can_remove)
        test_pairs |= t
        val_pairs |= v

    out = {s: [] for s in SPLITS}
    for (m, p, noun, t), mk, pol in items:
        text = SC_TEMPLATES[t].format(noun=noun, mod=f"{m} " if m else "", polar=p)
        words = text.split(" ")
        slots = [words.index(noun), words.index(p)] + ([words.index(m)] if m else [])
        label = sc_label(pol, mk)
        ex = Example.build(text, label, SC, sorted(slots),
                           meta={"polarity": pol, "modifier": mk, "pair": [m, p]})
        split = "test" if (m, p) in test_pairs else "validation" if (m, p) in val_pairs else "train"
        out[split].append(ex)
    return DatasetSplit(out["train"], out["validation"], out["test"], seed, SC)


GENERATORS = {IDM: gen_idm, SC: gen_sc}


def generate(task: str, seed: int, n_items: int) -> DatasetSplit:
    try:
        gen = GENERATORS[task]
    except KeyError:
        raise GenerationError(f"unknown task {task!r}; expected one of {TASKS}") from None
    return gen(seed, n_items)


# -- TSV round trip ---------------------------------------------------------------

TSV_COLUMNS = ("split", "prompt", "target", "task", "synonym_slots")


def dataset_to_tsv(ds: DatasetSplit) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(TSV_COLUMNS)
    tok = ds.tokenizer
    for split, examples in ds.splits().items():
        for ex in examples:
            w.writerow([split, ex.prompt, tok.decode_id(ex.target), ex.task,
                        json.dumps(list(ex.synonym_slots))])
    return buf.getvalue()


def dataset_from_tsv(text: str, generator_seed: int = -1) -> DatasetSplit:
    rows = list(csv.reader(io.StringIO(text), delimiter="\t"))
    if not rows or tuple(rows[0]) != TSV_COLUMNS:
        raise ValueError(f"dataset TSV must start with header {TSV_COLUMNS}")
    out = {s: [] for s in SPLITS}
    task = None
    for split, prompt, target, row_task, slots in rows[1:]:
        if task is None:
            task = row_task
        elif row_task != task:
            raise ValueError("dataset TSV mixes tasks")
        out[split].append(Example.build(prompt, target, row_task, json.loads(slots)))
    if task is None:
        raise ValueError("dataset TSV has no rows")
    return DatasetSplit(out["train"], out["validation"], out["test"], generator_seed, task)
