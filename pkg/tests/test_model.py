import math

import numpy as np
import pytest

from clmdetour import numerics as nx
from clmdetour.model import (MaskMode, ModelConfig, apply_rope, checkpoint_bytes, extend_vocab_with_mask,
                             extract_representations, forward, git_blob_hash, init_model, load_checkpoint,
                             loss_and_grads, param_shapes, save_checkpoint)

from conftest import perturbed_std


def test_param_shapes_and_counts(tiny_config):
    shapes = param_shapes(tiny_config)
    assert shapes["tok_emb"] == (24, 16)
    assert shapes["blocks.1.mlp.w1"] == (16, 64)
    assert list(shapes)[-1] == "final_ln.b"
    m = init_model(tiny_config, 0)
    assert m.n_params() == sum(int(np.prod(s)) for s in shapes.values())


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=12, n_heads=4)  # odd head_dim
    assert ModelConfig().mask_token_id == 511
    assert ModelConfig(vocab_size=511, has_mask_token=False).mask_token_id is None


def test_init_is_deterministic(tiny_config):
    a, b = init_model(tiny_config, 3), init_model(tiny_config, 3)
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != init_model(tiny_config, 4).content_hash()


def test_zero_model_gives_uniform_loss():
    cfg = ModelConfig(n_layers=1, hidden_dim=16, n_heads=2, vocab_size=512, max_seq_len=8)
    m = init_model(cfg, 0)
    for v in m.params.values():
        v[...] = 0
    ids = np.arange(2, 10)[None]
    loss, _ = loss_and_grads(m, ids, ids, np.ones_like(ids, bool), MaskMode.BIDIRECTIONAL)
    assert loss == pytest.approx(math.log(512), rel=1e-6)


def test_rope_scores_depend_only_on_offset():
    rng = np.random.default_rng(0)
    q = rng.normal(size=8)
    k = rng.normal(size=8)
    scores = {}
    for pq, pk in [(3, 1), (10, 8), (7, 5)]:
        qq, _ = apply_rope(q[None], q[None], [pq])
        _, kk = apply_rope(k[None], k[None], [pk])
        scores[(pq, pk)] = float(qq[0] @ kk[0])
    vals = list(scores.values())
    assert max(vals) - min(vals) < 1e-12


def test_rope_matches_complex_rotation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 6))
    rot, _ = apply_rope(x, x, np.arange(5), base=100.0)
    z = x[:, 0::2] + 1j * x[:, 1::2]
    ang = np.arange(5)[:, None] * 100.0 ** (-np.arange(0, 6, 2) / 6)
    zr = z * np.exp(1j * ang)
    np.testing.assert_allclose(rot[:, 0::2], zr.real, atol=1e-12)
    np.testing.assert_allclose(rot[:, 1::2], zr.imag, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_one_block_model_gradients(seed):
    rng = np.random.default_rng(seed)
    B, L = int(rng.integers(1, 3)), int(rng.integers(2, 6))
    heads = int(rng.choice([1, 2]))
    cfg = ModelConfig(n_layers=1, hidden_dim=4 * heads, n_heads=heads, vocab_size=11, max_seq_len=8,
                      dropout_rate=float(rng.choice([0.0, 0.2])))
    model = perturbed_std(init_model(cfg, seed, dtype=np.float64), 0.3, seed)
    ids = rng.integers(0, 11, (B, L))
    tgt = rng.integers(0, 11, (B, L))
    sup = rng.random((B, L)) < 0.6
    sup[0, 0] = True
    mode = MaskMode.CAUSAL if seed % 2 else MaskMode.BIDIRECTIONAL

    def fn(params):
        model.params = params
        return loss_and_grads(model, ids, tgt, sup, mode, training=cfg.dropout_rate > 0,
                              rng=np.random.default_rng(7))

    assert nx.grad_check(fn, model.params) < 1e-5


def test_causal_prefix_logits_unchanged_by_future_tokens(tiny_model):
    rng = np.random.default_rng(0)
    ids = rng.integers(2, 24, 12)
    base = forward(tiny_model, ids, MaskMode.CAUSAL)
    ids2 = ids.copy()
    ids2[7] = (ids2[7] + 1) % 24
    after = forward(tiny_model, ids2, MaskMode.CAUSAL)
    assert np.array_equal(base[:7], after[:7])
    assert not np.array_equal(base[7:], after[7:])


def test_bidirectional_prefix_logits_change(tiny_model):
    rng = np.random.default_rng(0)
    ids = rng.integers(2, 24, 12)
    ids2 = ids.copy()
    ids2[9] = (ids2[9] + 5) % 24
    assert not np.array_equal(forward(tiny_model, ids)[:9], forward(tiny_model, ids2)[:9])


def test_training_forward_needs_rng(tiny_model):
    with pytest.raises(ValueError, match="rng"):
        forward(tiny_model, np.arange(4), training=True)


def test_out_of_vocab_and_too_long_inputs(tiny_model):
    with pytest.raises(ValueError):
        forward(tiny_model, np.array([1, 2, 99]))
    with pytest.raises(ValueError):
        forward(tiny_model, np.ones(17, int))


def test_capture_states_layout(tiny_model):
    logits, states = forward(tiny_model, np.arange(2, 8), capture=True)
    assert logits.shape == (6, 24)
    assert len(states) == tiny_model.config.n_layers + 1
    assert np.array_equal(states[0], tiny_model.params["tok_emb"][np.arange(2, 8)])


def test_extend_vocab_keeps_existing_params_bitwise():
    cfg = ModelConfig(n_layers=1, hidden_dim=8, n_heads=2, vocab_size=20, max_seq_len=8, has_mask_token=False)
    m = init_model(cfg, 0)
    e = extend_vocab_with_mask(m)
    assert e.config.vocab_size == 21 and e.config.mask_token_id == 20
    assert np.array_equal(e.params["tok_emb"][:20], m.params["tok_emb"])
    assert e.params["head_bias"][20] == 0
    for k in m.params:
        if k not in ("tok_emb", "head_bias"):
            assert np.array_equal(e.params[k], m.params[k])
    with pytest.raises(ValueError):
        extend_vocab_with_mask(e)


def test_representations_ignore_trailing_padding(tiny_model):
    texts = [np.array([3, 4, 5, 6]), np.array([7, 8, 9])]
    padded = [np.array([3, 4, 5, 6, 0, 0]), np.array([7, 8, 9, 0])]
    a = extract_representations(tiny_model, texts, 1)
    b = extract_representations(tiny_model, padded, 1)
    assert a.dtype == np.float64 and a.shape == (2, 16)
    np.testing.assert_array_equal(a, b)


def test_checkpoint_round_trip(tmp_path, tiny_model):
    h = save_checkpoint(tmp_path / "m.ckpt", tiny_model, {"phase": 1})
    data = (tmp_path / "m.ckpt").read_bytes()
    assert h == git_blob_hash(data)
    loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"phase": "1"}
    assert loaded.config == tiny_model.config
    assert loaded.content_hash() == tiny_model.content_hash()
    assert checkpoint_bytes(loaded, {"phase": 1}) == data


def test_git_blob_hash_matches_git_convention():
    # `printf 'hello\n' | git hash-object --stdin`
    assert git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_checkpoint_rejects_corruption(tmp_path, tiny_model):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, tiny_model)
    data = p.read_bytes()
    p.write_bytes(data[:-4])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(p)
    p.write_bytes(data + b"\0\0\0\0")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(p)
    p.write_bytes(b"garbage")
    with pytest.raises(ValueError):
        load_checkpoint(p)
