"""CARMA regularisers: contrastive MI alignment and layer-wise stability.

Both losses read hidden states from a :class:`~carma_lab.model.LayerTrace` over
an inclusive layer range ``[layer_start, layer_end]``.  The MI term pulls the
hidden states of tokens belonging to the same surface word together and
pushes other words' tokens away (InfoNCE).  The stability term penalises the
normalised squared jump between consecutive layers.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import ContractError, LayerTrace
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CarmaConfig:
    lam: float = 0.4          # task vs CARMA trade-off
    gamma: float = 0.5        # MI weight
    eta: float = 0.5          # stability weight
    tau: float = 0.1
    epsilon: float = 1e-8
    layer_start: int | None = None   # None -> default_layer_range
    layer_end: int | None = None
    max_negatives: int = 16
    average_anchors: bool = True     # 1/Q over anchors; False keeps the raw anchor sum
    seed: int = 0

    def __post_init__(self):
        for name in ("lam", "gamma", "eta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        if self.tau <= 0 or self.epsilon <= 0:
            raise ContractError("tau and epsilon must be positive")
        if self.max_negatives < 0:
            raise ContractError("max_negatives must be >= 0")

    def layer_range(self, n_layers: int) -> tuple[int, int]:
        """Resolved ``(l, K)`` with ``0 < l <= K <= n_layers``."""
        lo, hi = default_layer_range(n_layers) if n_layers >= 2 else (1, 1)
        lo = self.layer_start if self.layer_start is not None else lo
        hi = self.layer_end if self.layer_end is not None else hi
        if not 0 < lo <= hi <= n_layers:
            raise ContractError(f"layer range ({lo}, {hi}) invalid for {n_layers} layers")
        return lo, hi

    def to_dict(self) -> dict:
        return asdict(self)


def default_layer_range(n_layers: int) -> tuple[int, int]:
    """Layers around one third of the depth.

    Reproduces 12 -> (3, 4) and 24 -> (6, 10); the window widens by one layer
    per six layers of depth beyond twelve.
    """
    if n_layers < 2:
        raise ContractError(f"need at least 2 layers, got {n_layers}")
    lo = max(1, n_layers // 4)
    hi = math.ceil(n_layers / 3) + max(0, (n_layers - 12) // 6)
    hi = min(n_layers - 1, max(lo + 1, hi))
    return min(lo, hi), hi


# -- composition groups -----------------------------------------------------------

@dataclass(frozen=True)
class Anchor:
    seq: int
    index: int
    positives: tuple[int, ...]
    negatives: tuple[int, ...]


@dataclass
class CompositionGroups:
    """Anchor tokens with their positive (same word) and negative (other word) sets."""

    anchors: list[Anchor]
    n_seqs: int
    seq_len: int

    def __post_init__(self):
        for a in self.anchors:
            pos, negs = set(a.positives), set(a.negatives)
            if not pos:
                raise ContractError(f"anchor {a.index} in sequence {a.seq} has no positives")
            if a.index in pos or a.index in negs:
                raise ContractError(f"anchor {a.index} appears in its own positive/negative set")
            if pos & negs:
                raise ContractError(f"anchor {a.index}: positive and negative sets overlap")
            idx = pos | negs | {a.index}
            if min(idx) < 0 or max(idx) >= self.seq_len or not 0 <= a.seq < self.n_seqs:
                raise ContractError(f"anchor {a.index} references a position outside the sequence")

    @property
    def is_empty(self) -> bool:
        return not self.anchors

    def masks(self, dtype=np.float64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(anchor [B, T], positive [B, T, T], negative [B, T, T]) indicator arrays."""
        b, t = self.n_seqs, self.seq_len
        anchor = np.zeros((b, t), dtype)
        pos = np.zeros((b, t, t), dtype)
        neg = np.zeros((b, t, t), dtype)
        for a in self.anchors:
            anchor[a.seq, a.index] = 1.0
            pos[a.seq, a.index, list(a.positives)] = 1.0
            if a.negatives:
                neg[a.seq, a.index, list(a.negatives)] = 1.0
        return anchor, pos, neg


def build_groups(word_spans: Sequence[Sequence[tuple[int, int]]], seq_len: int,
                 max_negatives: int = 16, rng: np.random.Generator | None = None) -> CompositionGroups:
    """One anchor per token of every multi-token word.

    Positives are the word's other tokens; negatives are tokens of the other
    words in the same sequence, uniformly subsampled to ``max_negatives``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    anchors = []
    for b, spans in enumerate(word_spans):
        for s, e in spans:
            if e - s < 2:
                continue
            others = np.array([j for s2, e2 in spans if (s2, e2) != (s, e) for j in range(s2, e2)], dtype=np.int64)
            for i in range(s, e):
                if len(others) > max_negatives:
                    negs = np.sort(rng.choice(others, size=max_negatives, replace=False))
                else:
                    negs = others
                anchors.append(Anchor(b, i, tuple(j for j in range(s, e) if j != i), tuple(int(j) for j in negs)))
    return CompositionGroups(anchors, len(word_spans), seq_len)


# -- similarity -----------------------------------------------------------------

def _normalise(x: Tensor, eps: float) -> Tensor:
    # sqrt(|x|^2 + eps^2): smooth, and exact for unit-scale vectors in float64.
    return x / T.sqrt((x * x).sum(axis=-1, keepdims=True) + eps * eps)


def similarity(a, b, eps: float = 1e-8) -> Tensor:
    """Cosine similarity of two vectors with epsilon-stabilised norms."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"similarity needs two equal-length vectors, got {a.shape} and {b.shape}")
    return (_normalise(a, eps) * _normalise(b, eps)).sum()


def similarity_matrix(h: Tensor, eps: float = 1e-8) -> Tensor:
    """Pairwise cosine similarities over the sequence axis: [..., T, D] -> [..., T, T]."""
    n = _normalise(h, eps)
    return n @ n.swapaxes(-1, -2)


# -- losses -----------------------------------------------------------------------

def _zero(trace: LayerTrace) -> Tensor:
    return T.Tensor(np.zeros((), dtype=trace.hidden[0].dtype))


def mi_loss(trace: LayerTrace, groups: CompositionGroups, cfg: CarmaConfig) -> Tensor:
    """InfoNCE MI surrogate averaged over the target layers.

    For each layer k in range and each anchor i::

        log sum_{j in H_i} exp(s_ij / tau) - log(sum_{j in H_i} exp(s_ij / tau) + sum_{m in N_i} exp(s_im / tau))

    is averaged over anchors (summed if ``cfg.average_anchors`` is False), summed
    over layers, divided by the number of layers and negated.  With one layer in
    range the default is the per-anchor mean InfoNCE loss.
    """
    lo, hi = cfg.layer_range(trace.n_layers)
    if groups.is_empty:
        log.debug("mi_loss: no anchors in batch, returning 0")
        return _zero(trace)
    dtype = trace.hidden[0].dtype
    anchor, pos, neg = groups.masks(dtype)
    single = trace.hidden[0].ndim == 2
    if single:
        anchor, pos, neg = anchor[0], pos[0], neg[0]
    fill = 1.0 - anchor  # keeps log() finite on non-anchor rows, which contribute log1 - log1 = 0
    total = None
    for k in range(lo, hi + 1):
        sims = similarity_matrix(trace.hidden[k], cfg.epsilon)
        # cos <= 1, so shifting by 1/tau keeps exp() <= 1 and cancels in the log ratio.
        e = T.exp((sims - 1.0) * (1.0 / cfg.tau))
        p = (e * pos).sum(axis=-1)
        n = (e * neg).sum(axis=-1)
        term = T.log(p + fill) - T.log(p + n + fill)
        layer_sum = term.sum()
        total = layer_sum if total is None else total + layer_sum
    n_layers = hi - lo + 1
    scale = -1.0 / n_layers
    if cfg.average_anchors:
        scale /= len(groups.anchors)
    return total * scale


def stability_loss(trace: LayerTrace, cfg: CarmaConfig, mask: np.ndarray | None = None) -> Tensor:
    """Sum over k in range of mean ||h_{k+1} - h_k||^2 / (E||h_k||^2 + E||h_{k+1}||^2 + eps).

    Expectations are means over the (sequence, position) samples selected by
    ``mask`` (all positions by default).  The range end is clamped to L-1.
    """
    lo, hi = cfg.layer_range(trace.n_layers)
    last = trace.n_layers - 1
    if hi > last:
        warnings.warn(f"stability range end {hi} clamped to {last} (needs layer k+1)", stacklevel=2)
        hi = last
    if lo > hi:
        return _zero(trace)
    h0 = trace.hidden[0]
    if mask is None:
        mask = np.ones(h0.shape[:-1], dtype=h0.dtype)
    mask = np.asarray(mask, dtype=h0.dtype)
    count = float(mask.sum())
    if count == 0:
        return _zero(trace)
    w = mask / count

    def expect(x: Tensor) -> Tensor:
        return ((x * x).sum(axis=-1) * w).sum()

    total = None
    energy = {}
    for k in range(lo, hi + 1):
        for j in (k, k + 1):
            if j not in energy:
                energy[j] = expect(trace.hidden[j])
        num = expect(trace.hidden[k + 1] - trace.hidden[k])
        term = num / (energy[k] + energy[k + 1] + cfg.epsilon)
        total = term if total is None else total + term
    return total


def carma_loss(mi, stab, cfg: CarmaConfig) -> Tensor:
    return cfg.gamma * T.as_tensor(mi) + cfg.eta * T.as_tensor(stab)


def total_loss(task, carma, cfg: CarmaConfig) -> Tensor:
    return (1.0 - cfg.lam) * T.as_tensor(task) + cfg.lam * T.as_tensor(carma)
