"""Training loop for the three variants.

* ``original`` -- generic next-token pre-training over the task sentences
  (no ``<sep>``, no cloze formatting); the non-fine-tuned baseline.
* ``ft`` -- task fine-tuning, lambda forced to 0.
* ``carma`` -- task fine-tuning with the CARMA regularisers mixed in.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .batching import Batch, answer_logits, encode, predict
from .losses import CarmaConfig, build_groups, carma_loss, mi_loss, stability_loss, total_loss
from .metrics import VARIANTS, accuracy
from .model import ContractError, Transformer, TransformerConfig, pad_batch
from .tasks import DatasetSplit

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Loss became NaN/inf; training aborted."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 0.006
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    variant: str = "carma"
    seed: int = 0
    carma: CarmaConfig = field(default_factory=CarmaConfig)
    log_aux: bool = False          # compute MI/stability even when lambda == 0
    select_best: bool = True       # return the best-validation checkpoint

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_steps < 0:
            raise ContractError("epochs and batch_size must be positive, warmup_steps >= 0")
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be >= 0")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def effective(self) -> "TrainConfig":
        """The variant contract: ``ft`` always trains with lambda = 0."""
        if self.variant == "ft" and self.carma.lam != 0.0:
            return replace(self, carma=replace(self.carma, lam=0.0))
        return self


def warmup_schedule(warmup_steps: int, total_steps: int) -> int:
    """Warmup length actually used; shrinks when the run is shorter than 2x warmup."""
    if total_steps < 2 * warmup_steps:
        return max(1, total_steps // 10)
    return warmup_steps


def warmup_factor(step: int, warmup: int) -> float:
    return min(1.0, (step + 1) / warmup) if warmup > 0 else 1.0


class Adam:
    def __init__(self, params: Sequence[T.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if lr:
                p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_grads(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class StepRecord:
    step: int
    L_task: float
    L_MI: float | None
    L_stab: float | None
    L_total: float
    wall_ms: float
    mi_empty: bool = False


@dataclass
class TrainLog:
    variant: str
    seed: int
    steps: list[StepRecord] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1
    wall_ms: float = 0.0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(s)) + "\n" for s in self.steps)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path: str | Path, variant: str = "", seed: int = -1) -> "TrainLog":
        steps = [StepRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line]
        return cls(variant, seed, steps, wall_ms=sum(s.wall_ms for s in steps))

    def summary(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, "steps": len(self.steps),
                "val_accuracy": self.val_accuracy, "best_epoch": self.best_epoch, "wall_ms": self.wall_ms}


def model_config_for(ds: DatasetSplit, **overrides) -> TransformerConfig:
    tok = ds.tokenizer
    longest = max(len(tok.encode_prompt(ex.prompt)[0]) for split in ds.splits().values() for ex in split)
    base = dict(vocab_size=tok.vocab_size, max_seq=longest + 1)
    base.update(overrides)
    return TransformerConfig(**base)


def _losses(model: Transformer, batch: Batch, cfg: TrainConfig, neg_rng: np.random.Generator,
            with_aux: bool) -> tuple[T.Tensor, T.Tensor, T.Tensor | None, T.Tensor | None, bool]:
    h, trace = model.run(batch.ids, word_spans=batch.word_spans)
    task = T.cross_entropy(answer_logits(model, h, batch.answer_pos), batch.targets)
    if not with_aux:
        return task, task, None, None, False
    groups = build_groups(batch.word_spans, batch.ids.shape[1], cfg.carma.max_negatives, neg_rng)
    mi = mi_loss(trace, groups, cfg.carma)
    stab = stability_loss(trace, cfg.carma, mask=batch.mask)
    total = total_loss(task, carma_loss(mi, stab, cfg.carma), cfg.carma)
    return total, task, mi, stab, groups.is_empty


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def train(model: Transformer, ds: DatasetSplit, cfg: TrainConfig,
          on_epoch=None) -> tuple[Transformer, TrainLog]:
    """Fine-tune ``model`` in place on ``ds.train``; returns (best model, log).

    The model passed in is modified; the returned model is a copy of the
    parameters at the best validation epoch (or the final one).
    """
    cfg = cfg.effective()
    if not ds.train:
        raise ContractError("empty training split")
    tok = ds.tokenizer
    if tok.vocab_size != model.config.vocab_size:
        raise ContractError(f"tokenizer vocab {tok.vocab_size} != model vocab {model.config.vocab_size}")
    data_rng = np.random.default_rng([cfg.seed, 0])
    neg_rng = np.random.default_rng([cfg.seed, cfg.carma.seed, 1])
    with_aux = cfg.carma.lam > 0 or cfg.log_aux
    if with_aux:
        cfg.carma.layer_range(model.config.n_layers)  # fail fast on a bad range

    steps_per_epoch = math.ceil(len(ds.train) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup = warmup_schedule(cfg.warmup_steps, total_steps)
    params = model.parameters()
    opt = Adam(params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    answers = tok.answer_ids
    tlog = TrainLog(cfg.variant, cfg.seed)
    best, best_acc = None, -1.0
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(ds.train), cfg.batch_size, data_rng):
            t0 = time.perf_counter()
            T.new_tape()
            model.zero_grad()
            batch = encode([ds.train[i] for i in idx], tok)
            try:
                total, task, mi, stab, empty = _losses(model, batch, cfg, neg_rng, with_aux)
            except FloatingPointError as e:
                raise DivergenceError(f"non-finite activations at step {step}: {e}") from e
            if not np.isfinite(total.data):
                raise DivergenceError(f"non-finite loss at step {step}: {float(total.data)}")
            T.backward(total)
            grads, _ = clip_grads([p.grad for p in params], cfg.clip_norm)
            lr = cfg.learning_rate * warmup_factor(step, warmup)
            opt.step(grads, lr)
            tlog.steps.append(StepRecord(
                step, float(task.data), None if mi is None else float(mi.data),
                None if stab is None else float(stab.data), float(total.data),
                (time.perf_counter() - t0) * 1000.0, empty))
            step += 1
        acc = accuracy(predict(model, ds.validation, tok, answers), [e.target for e in ds.validation]) \
            if ds.validation else 0.0
        tlog.val_accuracy.append(acc)
        if on_epoch is not None:
            on_epoch(epoch, acc)
        if not cfg.select_best or acc > best_acc:
            best_acc, best = acc, model.copy()
            tlog.best_epoch = epoch
    T.new_tape()
    tlog.wall_ms = sum(s.wall_ms for s in tlog.steps)
    return best, tlog


def pretrain_lm(model: Transformer, ds: DatasetSplit, epochs: int = 2, batch_size: int = 16,
                learning_rate: float = 0.006, seed: int = 0, clip_norm: float = 1.0) -> TrainLog:
    """Plain next-token training on ``<bos> prompt answer`` strings (no task marker)."""
    tok = ds.tokenizer
    seqs = [tok.encode_prompt(ex.prompt)[0][:-1] + [ex.target] for ex in ds.train]
    rng = np.random.default_rng([seed, 2])
    params = model.parameters()
    opt = Adam(params, learning_rate)
    total_steps = math.ceil(len(seqs) / batch_size) * epochs
    warmup = warmup_schedule(500, total_steps)
    tlog = TrainLog("original", seed)
    step = 0
    for _ in range(epochs):
        for idx in _batches(len(seqs), batch_size, rng):
            t0 = time.perf_counter()
            T.new_tape()
            model.zero_grad()
            ids, lengths = pad_batch([seqs[i] for i in idx], tok.pad_id)
            h, _ = model.run(ids[:, :-1])
            logits = model.unembed(h)
            valid = np.arange(ids.shape[1] - 1)[None, :] < (lengths[:, None] - 1)
            rows, cols = np.nonzero(valid)
            loss = T.cross_entropy(logits[rows, cols], ids[rows, cols + 1])
            T.backward(loss)
            grads, _ = clip_grads([p.grad for p in params], clip_norm)
            opt.step(grads, learning_rate * warmup_factor(step, warmup))
            tlog.steps.append(StepRecord(step, float(loss.data), None, None, float(loss.data),
                                         (time.perf_counter() - t0) * 1000.0))
            step += 1
    T.new_tape()
    tlog.wall_ms = sum(s.wall_ms for s in tlog.steps)
    return tlog


def overhead_report(ft_log: TrainLog, carma_log: TrainLog) -> float:
    """CARMA wall-clock divided by FT wall-clock."""
    if not ft_log.steps or not carma_log.steps or ft_log.wall_ms <= 0 or carma_log.wall_ms <= 0:
        raise ContractError("overhead_report needs timed training logs for both variants")
    return carma_log.wall_ms / ft_log.wall_ms
