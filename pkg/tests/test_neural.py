import pytest
import torch

from speaker_profiler.neural import (
    DTYPE,
    AdditiveAttention,
    BiGRU,
    EncoderConfig,
    MultiHeadAttention,
    TransformerEncoder,
    init_parameters,
    load_checkpoint,
    load_state_arrays,
    mean_pool,
    save_checkpoint,
    state_dict_arrays,
)
from oracles import assert_grads_close, finite_difference_grad

torch.set_num_threads(1)


def test_encoder_config_validation():
    EncoderConfig(vocab_size=10)  # defaults are valid
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=0)
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=30, num_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        EncoderConfig(max_sequence_length=0)


def test_encoder_config_json_roundtrip():
    cfg = EncoderConfig(vocab_size=99, embed_dim=16, num_heads=4, seed=7)
    assert EncoderConfig.from_json(cfg.to_json()) == cfg


def test_init_parameters_deterministic():
    a = AdditiveAttention(8, 8)
    b = AdditiveAttention(8, 8)
    init_parameters(a, seed=3)
    init_parameters(b, seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    init_parameters(b, seed=4)
    assert any(
        not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters())
    )


# -- additive attention -------------------------------------------------------

def test_additive_attention_weights_sum_to_one():
    attn = AdditiveAttention(6, 6)
    init_parameters(attn, seed=0)
    query = torch.randn(6, dtype=DTYPE)
    keys = torch.randn(5, 6, dtype=DTYPE)
    _, weights = attn(query, keys, keys)
    weights = weights.detach()
    assert float(weights.sum()) == pytest.approx(1.0, abs=1e-12)
    assert bool((weights > 0).all())


def test_additive_attention_masked_positions_get_zero_weight():
    attn = AdditiveAttention(6, 6)
    init_parameters(attn, seed=0)
    query = torch.randn(6, dtype=DTYPE)
    keys = torch.randn(4, 6, dtype=DTYPE)
    mask = [True, False, True, False]
    _, weights = attn(query, keys, keys, mask=mask)
    weights = weights.detach()
    assert float(weights[1]) == 0.0 and float(weights[3]) == 0.0
    assert float(weights.sum()) == pytest.approx(1.0, abs=1e-12)


def test_additive_attention_all_masked_is_an_error():
    attn = AdditiveAttention(4, 4)
    init_parameters(attn, seed=0)
    query = torch.randn(4, dtype=DTYPE)
    keys = torch.randn(3, 4, dtype=DTYPE)
    with pytest.raises(ValueError, match="unmasked"):
        attn(query, keys, keys, mask=[False, False, False])


def test_additive_attention_gradient_check():
    torch.manual_seed(1)
    attn = AdditiveAttention(4, 4)
    init_parameters(attn, seed=1)
    query = torch.randn(4, dtype=DTYPE)
    keys = torch.randn(3, 4, dtype=DTYPE)
    target = torch.randn(4, dtype=DTYPE)

    def loss_fn():
        context, _ = attn(query, keys, keys)
        return ((context - target) ** 2).sum()

    for name, param in attn.named_parameters():
        attn.zero_grad()
        loss_fn().backward()
        numeric = finite_difference_grad(loss_fn, param.data)
        assert_grads_close(param.grad, numeric)


# -- BiGRU --------------------------------------------------------------------

def brute_gru_direction(seq, w_ih, w_hh, b_ih, b_hh):
    """Manual GRU recurrence (reset/update/new gate row blocks)."""
    hidden = w_hh.shape[1]
    h = torch.zeros(hidden, dtype=DTYPE)
    outs = []
    for x in seq:
        gi = w_ih @ x + b_ih
        gh = w_hh @ h + b_hh
        r = torch.sigmoid(gi[:hidden] + gh[:hidden])
        z = torch.sigmoid(gi[hidden:2 * hidden] + gh[hidden:2 * hidden])
        n = torch.tanh(gi[2 * hidden:] + r * gh[2 * hidden:])
        h = (1 - z) * n + z * h
        outs.append(h)
    return torch.stack(outs)


def test_bigru_matches_manual_recurrence():
    torch.manual_seed(5)
    model = BiGRU(input_dim=3, hidden_dim=4)
    init_parameters(model, seed=5)
    seq = torch.randn(6, 3, dtype=DTYPE)
    states, summary = model(seq)

    g = model.gru
    fwd = brute_gru_direction(seq, g.weight_ih_l0, g.weight_hh_l0,
                              g.bias_ih_l0, g.bias_hh_l0)
    bwd = brute_gru_direction(
        list(reversed(seq)), g.weight_ih_l0_reverse, g.weight_hh_l0_reverse,
        g.bias_ih_l0_reverse, g.bias_hh_l0_reverse,
    ).flip(0)
    expected = torch.cat([fwd, bwd], dim=1)
    assert torch.allclose(states, expected, atol=1e-12)
    assert torch.allclose(summary, torch.cat([fwd[-1], bwd[0]]), atol=1e-12)


def test_bigru_shapes_and_empty_rejection():
    model = BiGRU(input_dim=5, hidden_dim=6)
    seq = torch.randn(7, 5, dtype=DTYPE)
    states, summary = model(seq)
    assert states.shape == (7, 12)
    assert summary.shape == (12,)
    with pytest.raises(ValueError):
        model(torch.zeros(0, 5, dtype=DTYPE))


# -- multi-head attention ------------------------------------------------------

def test_causal_mask_blocks_future_positions():
    torch.manual_seed(9)
    attn = MultiHeadAttention(dim=8, num_heads=2)
    init_parameters(attn, seed=9)
    x = torch.randn(5, 8, dtype=DTYPE)
    base = attn(x, x, causal=True)
    perturbed = x.clone()
    perturbed[4] += 10.0
    after = attn(perturbed, perturbed, causal=True)
    assert torch.allclose(base[:4], after[:4], atol=1e-12)
    assert not torch.allclose(base[4], after[4])


def test_cross_attention_query_key_lengths_independent():
    attn = MultiHeadAttention(dim=8, num_heads=2)
    init_parameters(attn, seed=2)
    queries = torch.randn(3, 8, dtype=DTYPE)
    memory = torch.randn(11, 8, dtype=DTYPE)
    out = attn(queries, memory)
    assert out.shape == (3, 8)


def test_multihead_attention_gradient_check():
    torch.manual_seed(4)
    attn = MultiHeadAttention(dim=4, num_heads=2)
    init_parameters(attn, seed=4)
    x = torch.randn(3, 4, dtype=DTYPE)
    target = torch.randn(3, 4, dtype=DTYPE)

    def loss_fn():
        return ((attn(x, x) - target) ** 2).sum()

    for name, param in attn.named_parameters():
        attn.zero_grad()
        loss_fn().backward()
        numeric = finite_difference_grad(loss_fn, param.data)
        assert_grads_close(param.grad, numeric)


# -- transformer encoder --------------------------------------------------------

def test_encoder_permutation_equivariance_without_positions():
    torch.manual_seed(8)
    enc = TransformerEncoder(dim=8, num_heads=2, num_layers=2, max_len=16,
                             use_positional=False)
    init_parameters(enc, seed=8)
    x = torch.randn(6, 8, dtype=DTYPE)
    perm = torch.randperm(6)
    assert torch.allclose(enc(x)[perm], enc(x[perm]), atol=1e-12)


def test_encoder_positions_break_equivariance():
    torch.manual_seed(8)
    enc = TransformerEncoder(dim=8, num_heads=2, num_layers=1, max_len=16,
                             use_positional=True)
    init_parameters(enc, seed=8)
    x = torch.randn(4, 8, dtype=DTYPE)
    perm = torch.tensor([3, 2, 1, 0])
    assert not torch.allclose(enc(x)[perm], enc(x[perm]))


def test_encoder_masked_rows_zeroed_and_ignored():
    enc = TransformerEncoder(dim=8, num_heads=2, num_layers=1, max_len=16,
                             use_positional=False)
    init_parameters(enc, seed=1)
    x = torch.randn(5, 8, dtype=DTYPE)
    mask = torch.tensor([True, True, False, True, False])
    out = enc(x, mask=mask)
    assert torch.equal(out[2], torch.zeros(8, dtype=DTYPE))
    # changing a masked input row cannot affect unmasked outputs
    altered = x.clone()
    altered[2] += 100.0
    out2 = enc(altered, mask=mask)
    assert torch.allclose(out[mask], out2[mask], atol=1e-12)


def test_encoder_length_limit():
    enc = TransformerEncoder(dim=4, num_heads=2, num_layers=1, max_len=3)
    with pytest.raises(ValueError, match="exceeds"):
        enc(torch.randn(4, 4, dtype=DTYPE))


def test_encoder_gradient_check_small():
    torch.manual_seed(6)
    enc = TransformerEncoder(dim=4, num_heads=2, num_layers=1, max_len=8,
                             use_positional=True)
    init_parameters(enc, seed=6)
    x = torch.randn(3, 4, dtype=DTYPE)
    target = torch.randn(3, 4, dtype=DTYPE)

    def loss_fn():
        return ((enc(x) - target) ** 2).sum()

    checked = 0
    for name, param in enc.named_parameters():
        enc.zero_grad()
        loss_fn().backward()
        numeric = finite_difference_grad(loss_fn, param.data)
        assert_grads_close(param.grad, numeric)
        checked += 1
    assert checked > 5


def test_mean_pool_with_mask():
    states = torch.tensor([[2.0, 0.0], [4.0, 6.0], [100.0, 100.0]], dtype=DTYPE)
    pooled = mean_pool(states, mask=[True, True, False])
    assert torch.allclose(pooled, torch.tensor([3.0, 3.0], dtype=DTYPE))
    assert torch.allclose(mean_pool(states[:2]), pooled)


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_roundtrip_preserves_state(tmp_path):
    model = MultiHeadAttention(dim=8, num_heads=2)
    init_parameters(model, seed=12)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, state_dict_arrays(model), meta={"kind": "test"})
    arrays, meta = load_checkpoint(path)
    assert meta == {"kind": "test"}
    clone = MultiHeadAttention(dim=8, num_heads=2)
    load_state_arrays(clone, arrays)
    x = torch.randn(4, 8, dtype=DTYPE)
    assert torch.equal(model(x, x), clone(x, x))


def test_checkpoint_bytes_identical_across_saves(tmp_path):
    model = BiGRU(input_dim=4, hidden_dim=4)
    init_parameters(model, seed=21)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, state_dict_arrays(model), meta={"kind": "test"})
    save_checkpoint(p2, state_dict_arrays(model), meta={"kind": "test"})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)
