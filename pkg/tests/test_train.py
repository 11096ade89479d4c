import math
from dataclasses import replace

import numpy as np
import pytest

from carma_lab import tensor as T
from carma_lab.batching import encode, predict
from carma_lab.losses import CarmaConfig
from carma_lab.model import ContractError, Transformer
from carma_lab.tasks import gen_idm
from carma_lab.train import (Adam, DivergenceError, TrainConfig, TrainLog, _losses, clip_grads,
                             model_config_for, overhead_report, pretrain_lm, train, warmup_schedule)

SMALL = dict(n_layers=2, d_model=16, n_heads=2, d_mlp=32)


@pytest.fixture(scope="module")
def ds():
    return gen_idm(0, 200)


def fresh(ds, seed=0, init_std=0.02, **kw):
    return Transformer(model_config_for(ds, **{**SMALL, **kw}), seed=seed, init_std=init_std)


def short(**kw):
    base = dict(epochs=1, batch_size=16, carma=CarmaConfig(lam=0.4, layer_start=1, layer_end=1))
    base.update(kw)
    return TrainConfig(**base)


def test_lambda_zero_matches_ft_bit_for_bit(ds):
    cfg0 = short(variant="carma", seed=3, log_aux=True, carma=CarmaConfig(lam=0.0, layer_start=1, layer_end=1))
    m_carma, log_carma = train(fresh(ds), ds, cfg0)
    m_ft, log_ft = train(fresh(ds), ds, short(variant="ft", seed=3))
    assert [s.L_total for s in log_carma.steps] == [s.L_total for s in log_ft.steps]
    assert [s.L_task for s in log_carma.steps] == [s.L_task for s in log_ft.steps]
    assert all(s.L_MI is not None for s in log_carma.steps)
    for a, b in zip(m_carma.parameters(), m_ft.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_ft_variant_forces_lambda_zero():
    cfg = TrainConfig(variant="ft", carma=CarmaConfig(lam=0.7))
    assert cfg.effective().carma.lam == 0.0
    assert TrainConfig(variant="carma", carma=CarmaConfig(lam=0.7)).effective().carma.lam == 0.7


def test_zero_learning_rate_leaves_parameters_unchanged(ds):
    m = fresh(ds)
    before = [p.data.copy() for p in m.parameters()]
    train(m, ds, short(learning_rate=0.0))
    for a, p in zip(before, m.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_total_loss_affine_in_lambda_on_a_model(ds):
    m = fresh(ds, init_std=0.3)
    batch = encode(ds.train[:8], ds.tokenizer)
    vals = []
    for lam in (0.0, 0.5, 1.0):
        cfg = short(carma=CarmaConfig(lam=lam, layer_start=1, layer_end=1))
        total, *_ = _losses(m, batch, cfg, np.random.default_rng(0), True)
        vals.append(float(total.data))
    assert abs(vals[1] - (vals[0] + vals[2]) / 2) < 1e-10


def test_training_is_deterministic(ds):
    _, a = train(fresh(ds), ds, short(seed=1))
    _, b = train(fresh(ds), ds, short(seed=1))
    assert [s.L_total for s in a.steps] == [s.L_total for s in b.steps]
    assert a.val_accuracy == b.val_accuracy


def test_warmup_rule():
    assert warmup_schedule(500, 3000) == 500
    assert warmup_schedule(500, 1000) == 500
    assert warmup_schedule(500, 999) == 99
    assert warmup_schedule(500, 5) == 1


def test_clip_grads_global_norm():
    g = [np.array([3.0, 0.0]), np.array([[4.0]])]
    clipped, norm = clip_grads(g, 1.0)
    assert norm == 5.0
    assert math.sqrt(sum(float((c ** 2).sum()) for c in clipped)) == pytest.approx(1.0, abs=1e-9)
    kept, _ = clip_grads([np.array([0.3])], 1.0)
    np.testing.assert_array_equal(kept[0], [0.3])


def test_adam_first_step_moves_by_lr_times_sign():
    p = T.Tensor(np.array([1.0, -2.0, 0.5]))
    Adam([p], lr=0.1).step([np.array([4.0, -0.01, 0.0])], 0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 0.5], atol=1e-6)


def test_nan_loss_aborts(ds):
    m = fresh(ds)
    m.params["tok_emb"].data[:] = np.nan
    with pytest.raises(DivergenceError):
        train(m, ds, short())


def test_config_and_vocab_validation(ds):
    with pytest.raises(ContractError):
        TrainConfig(epochs=0)
    with pytest.raises(ContractError):
        TrainConfig(variant="lora")
    with pytest.raises(ContractError):
        train(fresh(ds, vocab_size=ds.tokenizer.vocab_size + 1), ds, short())


def test_train_log_jsonl_roundtrip(ds, tmp_path):
    _, log = train(fresh(ds), ds, short())
    path = tmp_path / "trainlog.jsonl"
    log.write(path)
    back = TrainLog.read(path)
    assert back.steps == log.steps
    assert set(log.steps[0].__dict__) >= {"step", "L_task", "L_MI", "L_stab", "L_total", "wall_ms"}


def test_overhead_report():
    log = TrainLog("ft", 0, wall_ms=120.0)
    log.steps.append(None)
    assert overhead_report(log, log) == 1.0
    with pytest.raises(ContractError):
        overhead_report(TrainLog("ft", 0), log)


def test_inference_op_count_is_variant_independent(ds):
    m_ft, _ = train(fresh(ds), ds, short(variant="ft"))
    m_carma, _ = train(fresh(ds), ds, short(variant="carma"))
    counts = []
    for m in (m_ft, m_carma):
        before = T.op_count()
        predict(m, ds.test, ds.tokenizer, ds.answer_ids())
        counts.append(T.op_count() - before)
    assert counts[0] == counts[1] > 0


@pytest.mark.slow
def test_toy_idm_four_layers_three_epochs_beats_five_times_chance():
    data = gen_idm(0, 2000)
    chance = 100.0 / len(data.answer_ids())
    m = Transformer(model_config_for(data, n_layers=4, d_model=32, n_heads=4, d_mlp=128, dtype="float32"), seed=0)
    pretrain_lm(m, data, seed=0)
    best, log = train(m, data, TrainConfig(variant="ft", epochs=3, seed=0))
    assert max(log.val_accuracy) > 5 * chance
    # The trained model completes a training prompt with its target under free decoding.
    tok = data.tokenizer
    hits = [best.generate_next(tok.encode_prompt(ex.prompt)[0]) == ex.target for ex in data.train[:20]]
    assert sum(hits) >= 18
