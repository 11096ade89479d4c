"""Experiment configuration and the pipelines the CLI and acceptance suite share.

A config is one JSON object with five sections (``data``, ``model``, ``train``,
``carma``, ``eval``).  Unknown keys are rejected at every level so a typo
cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .interventions import PoolMode, SynonymLexicon, run_cap_eval, run_synonym_eval
from .losses import CarmaConfig
from .metrics import VARIANTS, accuracy, cv, ni
from .model import ContractError, Transformer
from .batching import predict
from .tasks import TASKS, DatasetSplit
from .train import TrainConfig, TrainLog, model_config_for, pretrain_lm, train

log = logging.getLogger(__name__)

MIN_CV_SEEDS = 5


class ConfigError(ValueError):
    """Config file or override does not match the schema."""


@dataclass(frozen=True)
class DataSection:
    task: str = "idm"
    seed: int = 0
    n_items: int = 1000


@dataclass(frozen=True)
class ModelSection:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_mlp: int = 256
    activation: str = "gelu"
    dtype: str = "float32"
    init_std: float = 0.02


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 0.006
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    pretrain_epochs: int = 2      # "original" LM stage; also the start point for ft / carma
    select_best: bool = True


@dataclass(frozen=True)
class EvalSection:
    rates: tuple = (0.25, 0.40)
    synonym_seeds: tuple = (0, 1, 2, 3, 4)
    cap_layers: Any = "all"
    cap_modes: Any = "all"


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    carma: CarmaConfig = field(default_factory=CarmaConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def train_config(self, variant: str, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
                           warmup_steps=t.warmup_steps, beta1=t.beta1, beta2=t.beta2,
                           adam_eps=t.adam_eps, clip_norm=t.clip_norm, variant=variant, seed=seed,
                           carma=self.carma, select_best=t.select_best)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}{name}.")
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value) if isinstance(value, (list, tuple)) else (value,)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ContractError) as e:
        raise ConfigError(f"{where.rstrip('.') or 'config'}: {e}") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    """``section.key=value`` pairs; values are parsed as JSON when possible."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        *path, leaf = key.split(".")
        node = raw
        for p in path:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[leaf] = _parse_value(value)
    return raw


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return config_from_dict(apply_overrides(raw, overrides))


def config_from_dict(raw: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "")
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.data.task not in TASKS:
        raise ConfigError(f"data.task must be one of {TASKS}, got {cfg.data.task!r}")
    if cfg.train.pretrain_epochs < 0:
        raise ConfigError("train.pretrain_epochs must be >= 0")
    for r in cfg.eval.rates:
        if not 0 < float(r) <= 1:
            raise ConfigError(f"eval.rates entries must be in (0, 1], got {r}")
    try:
        cfg.carma.layer_range(cfg.model.n_layers)
        cfg.train_config("carma", 0)
    except ContractError as e:
        raise ConfigError(str(e)) from None


# -- training pipeline ------------------------------------------------------------

@dataclass
class RunResult:
    variant: str
    task: str
    seed: int
    model: Transformer
    log: TrainLog
    pretrain_log: TrainLog | None
    test_accuracy: float


def base_model(cfg: ExperimentConfig, ds: DatasetSplit, seed: int) -> tuple[Transformer, TrainLog | None]:
    """Fresh model, LM-pretrained for ``train.pretrain_epochs`` (the Original variant)."""
    m = cfg.model
    mc = model_config_for(ds, n_layers=m.n_layers, d_model=m.d_model, n_heads=m.n_heads,
                          d_mlp=m.d_mlp, activation=m.activation, dtype=m.dtype)
    model = Transformer(mc, seed=seed, init_std=m.init_std)
    plog = None
    if cfg.train.pretrain_epochs:
        t = cfg.train
        plog = pretrain_lm(model, ds, epochs=t.pretrain_epochs, batch_size=t.batch_size,
                           learning_rate=t.learning_rate, seed=seed, clip_norm=t.clip_norm)
    return model, plog


def score_test(model: Transformer, ds: DatasetSplit) -> float:
    tok = ds.tokenizer
    return accuracy(predict(model, ds.test, tok, tok.answer_ids), [e.target for e in ds.test])


def fit_variant(cfg: ExperimentConfig, ds: DatasetSplit, variant: str, seed: int,
                base: tuple[Transformer, TrainLog | None] | None = None) -> RunResult:
    """Original = the pretrained base; ft / carma fine-tune a copy of it."""
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    model, plog = base if base is not None else base_model(cfg, ds, seed)
    model = model.copy()
    if variant == "original":
        tlog = plog or TrainLog("original", seed)
    else:
        model, tlog = train(model, ds, cfg.train_config(variant, seed))
    return RunResult(variant, ds.task, seed, model, tlog, plog, score_test(model, ds))


# -- evaluation tables --------------------------------------------------------------

def resolve_layers(spec, n_layers: int) -> list[int]:
    if spec == "all":
        return list(range(1, n_layers + 1))
    layers = [int(x) for x in (spec.split(",") if isinstance(spec, str) else spec)]
    bad = [k for k in layers if not 1 <= k <= n_layers]
    if bad:
        raise ConfigError(f"CAP layers {bad} outside 1..{n_layers}")
    return layers


def resolve_modes(spec) -> list[PoolMode]:
    if spec == "all":
        return list(PoolMode)
    names = spec.split(",") if isinstance(spec, str) else list(spec)
    try:
        return [PoolMode(n) for n in names]
    except ValueError as e:
        raise ConfigError(str(e)) from None


@dataclass(frozen=True)
class CapRow:
    variant: str
    task: str
    layer: int
    normalized_layer: float
    mode: str            # pooling mode or "average"
    accuracy: float
    n_runs: int


def cap_rows(runs: Sequence[tuple[str, Transformer]], ds: DatasetSplit, layers, modes) -> list[CapRow]:
    """Per (variant, layer, mode) test accuracy averaged over runs, plus the mode average."""
    tok = ds.tokenizer
    by_variant: dict[str, list[Transformer]] = {}
    for variant, model in runs:
        by_variant.setdefault(variant, []).append(model)
    rows = []
    for variant in sorted(by_variant, key=VARIANTS.index):
        models = by_variant[variant]
        n = models[0].config.n_layers
        for layer in resolve_layers(layers, n):
            accs = []
            for mode in resolve_modes(modes):
                a = float(np.mean([run_cap_eval(m, ds.test, tok, layer, mode, tok.answer_ids).accuracy
                                   for m in models]))
                accs.append(a)
                rows.append(CapRow(variant, ds.task, layer, layer / n, mode.value, a, len(models)))
            rows.append(CapRow(variant, ds.task, layer, layer / n, "average", float(np.mean(accs)),
                               len(models)))
    return rows


@dataclass(frozen=True)
class SynonymRow:
    model: str
    variant: str
    task: str
    rate: float
    cs: float | None
    cv: float | None
    ni: float | None
    n_runs: int
    n_seeds: int
    flag: str = ""


@dataclass(frozen=True)
class SynonymValue:
    variant: str
    task: str
    rate: float
    run_seed: int
    synonym_seed: int
    consist_syn: float | None


def synonym_values(runs: Sequence[tuple[str, int, Transformer]], ds: DatasetSplit, rates,
                   seeds: Sequence[int]) -> list[SynonymValue]:
    tok = ds.tokenizer
    lex = SynonymLexicon.for_task(ds.task)
    out = []
    for variant, run_seed, model in runs:
        for rate in rates:
            recs = run_synonym_eval(model, ds.test, tok, float(rate), list(seeds), lex, tok.answer_ids,
                                    base_seed=run_seed, min_seeds=1)
            out.extend(SynonymValue(variant, ds.task, float(rate), run_seed, r.seed, r.consist_syn)
                       for r in recs)
    return out


def mean_or_none(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def synonym_table(values: Sequence[SynonymValue], model_tag: str) -> list[SynonymRow]:
    """Table-1-shaped aggregation.

    A run's ConsistSyn is its mean over synonym seeds.  CV is taken across
    runs when there are at least two, otherwise across the synonym seeds of
    the single run.  Fewer than ``MIN_CV_SEEDS`` values flags the row.
    """
    groups: dict[tuple, dict[int, list]] = {}
    for v in values:
        groups.setdefault((v.variant, v.task, v.rate), {}).setdefault(v.run_seed, []).append(v.consist_syn)
    rows = []
    cs_of: dict[tuple, float | None] = {}
    keys = sorted(groups, key=lambda k: (k[1], k[2], VARIANTS.index(k[0])))
    stats = {}
    for key in keys:
        per_run = groups[key]
        run_cs = [mean_or_none(vs) for vs in per_run.values()]
        if len(per_run) >= 2:
            spread = [c for c in run_cs if c is not None]
        else:
            spread = [c for c in next(iter(per_run.values())) if c is not None]
        cv_val = cv(spread) if len(spread) >= 2 else None
        flags = []
        if len(spread) < MIN_CV_SEEDS:
            flags.append("insufficient_seeds")
        cs = mean_or_none(run_cs)
        if cs is None:
            flags.append("no_correct_before")
        cs_of[key] = cs
        stats[key] = (cs, cv_val, len(per_run), max(len(v) for v in per_run.values()), flags)
    for key in keys:
        variant, task, rate = key
        cs, cv_val, n_runs, n_seeds, flags = stats[key]
        nival = None
        if variant != "ft":
            base = cs_of.get(("ft", task, rate))
            if base is None:
                log.warning("no FT baseline for %s/%s at rate %s; NI left empty", variant, task, rate)
            else:
                nival = ni(cs, base)
        rows.append(SynonymRow(model_tag, variant, task, rate, cs, cv_val, nival, n_runs, n_seeds,
                               ";".join(flags)))
    return rows


def model_tag(model: Transformer) -> str:
    c = model.config
    return f"tf-{c.n_layers}L-{c.d_model}d"


def provenance(cfg_hash: str) -> str:
    return f"# carma_lab {__version__} config={cfg_hash}"


def fmt(x, digits: int = 4) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        if not math.isfinite(x):
            raise ContractError(f"refusing to write non-finite value {x}")
        return f"{x:.{digits}f}"
    return str(x)
