import math

import numpy as np
import pytest

from carma_lab import tensor as T
from carma_lab.model import ContractError, SequenceTooLong, Transformer, TransformerConfig, pad_batch

from oracles import forward_reference

CFG = TransformerConfig(n_layers=3, d_model=8, n_heads=2, d_mlp=16, vocab_size=11, max_seq=9)


@pytest.fixture
def model():
    m = Transformer(CFG, seed=3, init_std=0.3)
    rng = np.random.default_rng(0)
    for p in m.parameters():
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    return m


def test_matches_independent_numpy_forward(model):
    ids = [1, 4, 2, 9, 0, 3]
    logits, _ = model.forward(ids)
    np.testing.assert_allclose(logits.data, forward_reference(model, ids), atol=1e-12)


def test_batched_equals_per_sequence(model):
    ids = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])
    batched, _ = model.forward(ids)
    for b in range(2):
        single, _ = model.forward(ids[b])
        np.testing.assert_allclose(batched.data[b], single.data, atol=1e-12)


def test_trace_shape_and_residual_consistency(model):
    _, trace = model.forward([1, 2, 3, 4, 5])
    assert trace.n_layers == CFG.n_layers and len(trace.hidden) == CFG.n_layers + 1
    for k in range(1, CFG.n_layers + 1):
        rebuilt = trace.hidden[k - 1].data + trace.attn_out[k].data + trace.mlp_out[k].data
        assert np.abs(trace.hidden[k].data - rebuilt).max() < 1e-10


def test_patch_with_own_hidden_is_identity(model):
    ids = [3, 1, 4, 1, 5]
    base, trace = model.forward(ids)
    for k in range(CFG.n_layers + 1):
        patched, _ = model.forward(ids, patches={k: trace.hidden[k].data.copy()})
        np.testing.assert_array_equal(patched.data, base.data)


def test_patch_locality_and_consumption(model):
    ids = [2, 7, 1, 8]
    _, base = model.forward(ids)
    new = np.random.default_rng(1).normal(size=(2, CFG.d_model))
    _, tr = model.forward(ids, patches={1: new})
    np.testing.assert_array_equal(tr.hidden[0].data, base.hidden[0].data)
    np.testing.assert_array_equal(tr.hidden[1].data, new)  # blocks > 1 consume the shorter patch
    assert tr.hidden[2].shape == (2, CFG.d_model)


def test_callable_patch_receives_unpatched_hidden(model):
    seen = {}

    def patch(h):
        seen["h"] = h.data.copy()
        return h * 1.0

    _, base = model.forward([1, 2, 3])
    model.forward([1, 2, 3], patches={2: patch})
    np.testing.assert_array_equal(seen["h"], base.hidden[2].data)


def test_causal_masking(model):
    a, _ = model.forward([1, 2, 3, 4, 5])
    b, _ = model.forward([1, 2, 3, 9, 0])
    np.testing.assert_array_equal(a.data[:3], b.data[:3])
    assert not np.allclose(a.data[3:], b.data[3:])


def test_zero_weights_give_uniform_logits():
    m = Transformer(CFG, seed=0)
    for p in m.parameters():
        p.data = np.zeros_like(p.data)
    logits, _ = m.forward([1, 2, 3])
    np.testing.assert_array_equal(logits.data, np.zeros((3, CFG.vocab_size)))
    probs = T.softmax(logits).data
    np.testing.assert_allclose(probs, 1.0 / CFG.vocab_size)


def test_one_layer_d2_hand_computation():
    """Tokens [0, 1] with one-hot embeddings, identity q/k on the first axis, identity v."""
    cfg = TransformerConfig(n_layers=1, d_model=2, n_heads=1, d_mlp=2, vocab_size=2, max_seq=2)
    m = Transformer(cfg)
    P = m.params
    for p in m.parameters():
        p.data = np.zeros_like(p.data)
    P["tok_emb"].data = np.eye(2)
    P["b1.ln1_g"].data = np.ones(2)
    w = np.zeros((2, 6))
    w[0, 0] = 1.0  # q = xhat[0]
    w[0, 2] = 1.0  # k = xhat[0]
    w[:, 4:6] = np.eye(2)  # v = xhat
    P["b1.w_qkv"].data = w
    P["b1.w_o"].data = np.eye(2)
    # ln2 gain 0 -> MLP sees zeros -> gelu(0) = 0, so the block adds attention only
    P["lnf_g"].data = np.ones(2)
    P["w_unembed"].data = np.eye(2)

    c = 0.5 / math.sqrt(0.25 + 1e-5)           # layer-norm of [1, 0] is c * [1, -1]
    s = c * c / math.sqrt(2)                    # |q . k| / sqrt(d_head)
    w1 = 1 / (1 + math.exp(-2 * s))             # position 1: weight on itself (score +s vs -s)
    w0 = 1 - w1

    def ln2(a, b):
        half = (a - b) / 2
        v = half / math.sqrt(half * half + 1e-5)
        return [v, -v]

    h0 = (1 + c, -c)                            # x0 + v0
    h1 = (c * (w0 - w1), 1 - c * (w0 - w1))     # x1 + w0 v0 + w1 v1
    expected = np.array([ln2(*h0), ln2(*h1)])
    logits, _ = m.forward([0, 1])
    np.testing.assert_allclose(logits.data, expected, atol=1e-12)


def test_generate_next_ties_break_low(model):
    m = Transformer(TransformerConfig(n_layers=1, d_model=4, n_heads=1, d_mlp=4, vocab_size=12, max_seq=4))
    for p in m.parameters():
        p.data = np.zeros_like(p.data)
    m.params["lnf_b"].data = np.array([1.0, 0.0, 0.0, 0.0])
    w = np.zeros((4, 12))
    w[0, 7] = 2.0
    m.params["w_unembed"].data = w
    assert m.generate_next([1, 2]) == 7
    w[0, 3] = w[0, 9] = 5.0
    assert m.generate_next([1, 2]) == 3


def test_errors(model):
    with pytest.raises(SequenceTooLong):
        model.forward(list(range(10)))
    with pytest.raises(ContractError):
        model.forward([1, 2], patches={1: np.zeros((2, 3))})
    with pytest.raises(ContractError):
        model.forward([1, 2], patches={7: np.zeros((2, 8))})
    with pytest.raises(IndexError):
        model.forward([1, 99])
    with pytest.raises(ContractError):
        TransformerConfig(d_model=10, n_heads=4)


def test_checkpoint_roundtrip_bit_exact(model, tmp_path):
    path = tmp_path / "m.json"
    model.save(path)
    back = Transformer.load(path)
    for (k, a), (k2, b) in zip(model.params.items(), back.params.items()):
        assert k == k2
        np.testing.assert_array_equal(a.data, b.data)
    assert back.config == model.config


def test_checkpoint_float32_roundtrip(tmp_path):
    m = Transformer(TransformerConfig(n_layers=1, d_model=4, n_heads=1, d_mlp=4, vocab_size=5, max_seq=3,
                                      dtype="float32"), seed=1)
    m.save(tmp_path / "m.json")
    back = Transformer.load(tmp_path / "m.json")
    assert all(np.array_equal(a.data, b.data) and b.dtype == np.float32
               for a, b in zip(m.parameters(), back.parameters()))


def test_checkpoint_version_rejected(model):
    state = model.state_dict()
    state["format_version"] = 99
    with pytest.raises(ContractError):
        Transformer.from_state_dict(state)


def test_same_seed_same_forward():
    a, _ = Transformer(CFG, seed=5).forward([1, 2, 3])
    b, _ = Transformer(CFG, seed=5).forward([1, 2, 3])
    np.testing.assert_array_equal(a.data, b.data)


def test_pad_batch():
    ids, lengths = pad_batch([[1, 2, 3], [4]], pad_id=0)
    np.testing.assert_array_equal(ids, [[1, 2, 3], [4, 0, 0]])
    np.testing.assert_array_equal(lengths, [3, 1])
