"""Tiny pre-norm decoder-only transformer that exposes every residual-stream layer."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_VERSION = 1
_MASK_VALUE = -1e9


class ContractError(ValueError):
    """Caller violated a documented precondition."""


class SequenceTooLong(ContractError):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_mlp: int = 256
    vocab_size: int = 200
    max_seq: int = 32
    activation: str = "gelu"
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_mlp", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.activation != "gelu":
            raise ContractError(f"unsupported activation {self.activation!r}")
        if self.dtype not in ("float64", "float32"):
            raise ContractError(f"dtype must be float64 or float32, got {self.dtype!r}")


@dataclass
class LayerTrace:
    """Residual stream after each block; ``hidden[0]`` is the embedding output.

    ``attn_out[k]`` / ``mlp_out[k]`` are the contributions block ``k`` (1-based)
    added to the stream, so ``hidden[k] = hidden[k-1] + attn_out[k] + mlp_out[k]``
    for unpatched layers.  Index 0 of both lists is ``None``.
    """

    hidden: list[Tensor]
    word_spans: list = field(default_factory=list)
    attn_out: list = field(default_factory=list)
    mlp_out: list = field(default_factory=list)
    patched: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) - 1


Patch = Tensor | np.ndarray | Callable[[Tensor], Tensor]


class Transformer:
    def __init__(self, config: TransformerConfig, seed: int = 0, init_std: float = 0.02):
        self.config = config
        rng = np.random.default_rng(seed)
        d, m, v = config.d_model, config.d_mlp, config.vocab_size
        dt = np.dtype(config.dtype)

        def normal(*shape):
            return rng.normal(0.0, init_std, size=shape).astype(dt)

        # Declaration order here is the checkpoint order.
        self.params: dict[str, Tensor] = {}
        self._add("tok_emb", normal(v, d))
        self._add("pos_emb", normal(config.max_seq, d))
        for i in range(1, config.n_layers + 1):
            self._add(f"b{i}.ln1_g", np.ones(d, dt))
            self._add(f"b{i}.ln1_b", np.zeros(d, dt))
            self._add(f"b{i}.w_qkv", normal(d, 3 * d))
            self._add(f"b{i}.b_qkv", np.zeros(3 * d, dt))
            self._add(f"b{i}.w_o", normal(d, d))
            self._add(f"b{i}.b_o", np.zeros(d, dt))
            self._add(f"b{i}.ln2_g", np.ones(d, dt))
            self._add(f"b{i}.ln2_b", np.zeros(d, dt))
            self._add(f"b{i}.w_in", normal(d, m))
            self._add(f"b{i}.b_in", np.zeros(m, dt))
            self._add(f"b{i}.w_out", normal(m, d))
            self._add(f"b{i}.b_out", np.zeros(d, dt))
        self._add("lnf_g", np.ones(d, dt))
        self._add("lnf_b", np.zeros(d, dt))
        self._add("w_unembed", normal(d, v))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    # -- forward ----------------------------------------------------------------
    def _attention(self, x: Tensor, i: int) -> Tensor:
        p, cfg = self.params, self.config
        *lead, t, d = x.shape
        h, dh = cfg.n_heads, d // cfg.n_heads
        qkv = x @ p[f"b{i}.w_qkv"] + p[f"b{i}.b_qkv"]
        nl = len(lead)
        # [..., t, 3, h, dh] -> [3, ..., h, t, dh]
        qkv = qkv.reshape(*lead, t, 3, h, dh).transpose(nl + 1, *range(nl), nl + 2, nl, nl + 3)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        causal = np.triu(np.full((t, t), _MASK_VALUE, dtype=x.dtype), k=1)
        att = T.softmax(scores + causal, axis=-1)
        out = att @ v  # [..., h, t, dh]
        out = out.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, t, d)
        return out @ p[f"b{i}.w_o"] + p[f"b{i}.b_o"]

    def _mlp(self, x: Tensor, i: int) -> Tensor:
        p = self.params
        return T.gelu(x @ p[f"b{i}.w_in"] + p[f"b{i}.b_in"]) @ p[f"b{i}.w_out"] + p[f"b{i}.b_out"]

    def embed(self, tokens) -> Tensor:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim not in (1, 2) or ids.shape[-1] == 0:
            raise ContractError(f"tokens must be a nonempty [seq] or [batch, seq] array, got {ids.shape}")
        if ids.shape[-1] > self.config.max_seq:
            raise SequenceTooLong(f"sequence length {ids.shape[-1]} exceeds max_seq={self.config.max_seq}")
        pos = self.params["pos_emb"][: ids.shape[-1]]
        return T.embedding(self.params["tok_emb"], ids) + pos

    def run(self, tokens, patches: Mapping[int, Patch] | None = None,
            word_spans: Sequence | None = None) -> tuple[Tensor, LayerTrace]:
        """Residual stream for ``tokens``; returns (final hidden, trace).

        ``patches[k]`` replaces ``hidden[k]`` before block ``k+1`` reads it.  A
        patch may be a tensor/array or a callable receiving the unpatched
        ``hidden[k]``; it may change the sequence length.
        """
        patches = dict(patches or {})
        n = self.config.n_layers
        bad = [k for k in patches if not 0 <= k <= n]
        if bad:
            raise ContractError(f"patch layers {bad} outside [0, {n}]")
        h = self.embed(tokens)
        trace = LayerTrace([], list(word_spans or []), [None], [None])
        for k in range(n + 1):
            if k > 0:
                a = self._attention(T.layer_norm(h, self.params[f"b{k}.ln1_g"], self.params[f"b{k}.ln1_b"]), k)
                h = h + a
                mo = self._mlp(T.layer_norm(h, self.params[f"b{k}.ln2_g"], self.params[f"b{k}.ln2_b"]), k)
                h = h + mo
                trace.attn_out.append(a)
                trace.mlp_out.append(mo)
            if k in patches:
                h = self._apply_patch(h, patches[k], k)
                trace.patched[k] = h
            trace.hidden.append(h)
        return h, trace

    def _apply_patch(self, h: Tensor, patch: Patch, k: int) -> Tensor:
        new = patch(h) if callable(patch) else patch
        new = T.as_tensor(new, dtype=h.dtype) if not isinstance(new, Tensor) else new
        if new.ndim != h.ndim or new.shape[-1] != h.shape[-1] or new.shape[:-2] != h.shape[:-2]:
            raise ContractError(f"patch at layer {k} has shape {new.shape}; expected [..., m, {h.shape[-1]}]"
                                f" compatible with {h.shape}")
        if new.shape[-2] < 1:
            raise ContractError(f"patch at layer {k} is empty")
        return new

    def unembed(self, h: Tensor) -> Tensor:
        h = T.layer_norm(h, self.params["lnf_g"], self.params["lnf_b"])
        return h @ self.params["w_unembed"]

    def forward(self, tokens, patches: Mapping[int, Patch] | None = None,
                word_spans: Sequence | None = None) -> tuple[Tensor, LayerTrace]:
        """Logits at every position plus the layer trace."""
        h, trace = self.run(tokens, patches, word_spans)
        return self.unembed(h), trace

    def generate_next(self, tokens) -> int:
        """Greedy next token; ``np.argmax`` breaks ties towards the lowest id."""
        with T.no_grad():
            logits, _ = self.forward(tokens)
        return int(np.argmax(logits.data[..., -1, :]))

    # -- checkpoints ----------------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "names": list(self.params),
            "params": [p.data.ravel().tolist() for p in self.params.values()],
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "Transformer":
        if state.get("format_version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {state.get('format_version')!r}")
        model = cls(TransformerConfig(**state["config"]))
        if list(model.params) != state["names"]:
            raise ContractError("checkpoint parameter names do not match the architecture")
        for (name, p), flat in zip(model.params.items(), state["params"]):
            p.data = np.asarray(flat, dtype=model.dtype).reshape(p.shape)
        return model

    def copy(self) -> "Transformer":
        model = Transformer.__new__(Transformer)
        model.config = self.config
        model.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.state_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Transformer":
        return cls.from_state_dict(json.loads(Path(path).read_text()))


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a rectangle; returns (ids [B, T], lengths [B])."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths
