import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmdistill.config import DonorConfig, ModelConfig, RunConfig
from cmdistill.errors import ConfigError, DataError, DimensionError
from cmdistill.nn import attend
from cmdistill.numcore import Rng, Tensor, ops
from cmdistill.qformer import (DonorDecoder, decoder_io, init_from_decoder, pretrain_donor, qformer_forward,
                               transcription_accuracy)
from cmdistill.toylm import BOS, EOS

F64 = np.float64


def donor(width=8, layers=2, seed=0, dtype=F64):
    return DonorDecoder(20, width, layers, 2, 6, Rng(seed), dtype)


def adapter(n_queries=3, layers=2, lm_width=12, scratch=False, seed=1):
    return init_from_decoder(donor(layers=layers), n_queries, lm_width, Rng(seed), scratch=scratch)


# -- init_from_decoder --------------------------------------------------------------

def test_cross_attention_keys_copied_bitwise():
    d = donor()
    a = init_from_decoder(d, 4, 12, Rng(1))
    assert np.array_equal(a.layers[0].cross_attn.w_k.weight.data, d.layers[0].cross_attn.w_k.weight.data)
    assert a.layers[0].cross_attn.w_k.weight is not d.layers[0].cross_attn.w_k.weight


def test_every_decoder_layer_weight_copied():
    d = donor()
    a = init_from_decoder(d, 4, 12, Rng(1))
    ad = dict(a.named_parameters())
    for name, p in d.named_parameters():
        if name.startswith("layers.") or name.startswith("ln_f."):
            np.testing.assert_array_equal(ad[name].data, p.data)
    assert not any(n.startswith(("tok_emb", "head")) for n in ad)


def test_fresh_queries_have_small_scale():
    a = init_from_decoder(DonorDecoder(20, 32, 1, 4, 6, Rng(0)), 64, 12, Rng(1))
    assert a.queries.shape == (64, 32)
    assert 0.015 < a.queries.data.std() < 0.025


def test_single_query_gives_one_token_of_lm_width():
    a = adapter(n_queries=1)
    assert a(Tensor(np.ones((5, 8)))).shape == (1, 12)


def test_scratch_init_shares_no_donor_weights():
    d = donor()
    a = init_from_decoder(d, 3, 12, Rng(1), scratch=True)
    ad = dict(a.named_parameters())
    for name, p in d.named_parameters():
        if name.startswith("layers.") and "ln_" not in name and "bias" not in name:
            assert not np.any(ad[name].data == p.data), name


def test_width_mismatch_and_zero_queries_are_config_errors():
    with pytest.raises(ConfigError):
        init_from_decoder(donor(), 3, 12, Rng(0), width=16)
    with pytest.raises(ConfigError):
        init_from_decoder(donor(), 0, 12, Rng(0))


# -- forward ------------------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(t=st.integers(1, 9), q=st.integers(1, 5))
def test_output_shape_for_any_audio_length(t, q):
    a = adapter(n_queries=q)
    assert a(Tensor(np.zeros((t, 8)))).shape == (q, 12)
    assert a(Tensor(np.zeros((2, t, 8)))).shape == (2, q, 12)


def test_width_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        adapter()(Tensor(np.zeros((4, 6))))


def test_forward_matches_hand_composition():
    a = adapter(n_queries=3, layers=2)
    audio = Rng(5).normal((4, 8), dtype=F64)
    x = a.queries.data.copy()
    mask = np.tril(np.ones((3, 3), bool))

    def ln(v, layer_norm):
        mu = v.mean(axis=-1, keepdims=True)
        var = v.var(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + layer_norm.eps) * layer_norm.gain.data + layer_norm.bias.data

    def ffn(v, f):
        h = v @ f.fc1.weight.data + f.fc1.bias.data
        h = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h ** 3)))
        return h @ f.fc2.weight.data + f.fc2.bias.data

    for layer in a.layers:
        h = ln(x, layer.ln_self)
        x = x + attend(layer.self_attn, Tensor(h), Tensor(h), mask).data
        h = ln(x, layer.ln_cross)
        x = x + attend(layer.cross_attn, Tensor(h), Tensor(audio)).data
        x = x + ffn(ln(x, layer.ln_ffn), layer.ffn)
    expected = ln(x, a.ln_f) @ a.proj.weight.data + a.proj.bias.data
    np.testing.assert_allclose(qformer_forward(a, Tensor(audio)).data, expected, atol=1e-10)


def test_queries_are_causal():
    a = adapter(n_queries=4)
    audio = Tensor(Rng(2).normal((5, 8), dtype=F64))
    base = a(audio).data
    for j in range(4):
        saved = a.queries.data.copy()
        a.queries.data[j] += Rng(j).normal((8,), dtype=F64)
        moved = np.abs(a(audio).data - base).max(axis=1) > 1e-12
        a.queries.data[:] = saved
        assert not moved[:j].any()
        assert moved[j:].all()


def test_every_output_row_sees_every_audio_frame():
    a = adapter(n_queries=3)
    audio = Rng(3).normal((5, 8), dtype=F64)
    for i in range(3):
        t = Tensor(audio, requires_grad=True)
        out = a(t)
        ops.sum(out[i]).backward()
        assert np.all(np.abs(t.grad).sum(axis=1) > 0)


def test_query_causality_jacobian_blocks_vanish():
    a = adapter(n_queries=4)
    audio = Tensor(Rng(4).normal((5, 8), dtype=F64))
    for i in range(4):
        a.zero_grad()
        ops.sum(a(audio)[i]).backward()
        g = a.queries.grad
        assert np.all(g[i + 1:] == 0)
        assert np.abs(g[i]).sum() > 0


# -- donor ------------------------------------------------------------------------------

def test_decoder_io_shifts_and_masks():
    inp, tgt, mask = decoder_io([[12, 13], [14]], 4)
    np.testing.assert_array_equal(inp, [[BOS, 12, 13, EOS], [BOS, 14, EOS, EOS]])
    np.testing.assert_array_equal(tgt, [[12, 13, EOS, EOS], [14, EOS, EOS, EOS]])
    np.testing.assert_array_equal(mask, [[1, 1, 1, 0], [1, 1, 0, 0]])
    with pytest.raises(DataError):
        decoder_io([[1, 2, 3, 4]], 4)


def test_donor_empty_dataset_is_data_error():
    feats = np.zeros((0, 10, 16), np.float32)
    with pytest.raises(DataError):
        pretrain_donor(feats, [], feats, [], ModelConfig(), DonorConfig(steps=1), Rng(0))


def tiny_donor_run(seed):
    rng = Rng(0)
    feats = rng.normal((8, 10, 16)).astype(np.float32)
    tr = [[12 + i % 5, 13] for i in range(8)]
    model = ModelConfig(audio_width=8, heads=2, encoder_layers=1, decoder_layers=1)
    cfg = DonorConfig(steps=5, batch_size=4, eval_every=5, min_accuracy=0.0)
    return pretrain_donor(feats, tr, feats, tr, model, cfg, Rng(seed))


def test_donor_pretraining_is_deterministic():
    e1, d1, m1 = tiny_donor_run(3)
    e2, d2, m2 = tiny_donor_run(3)
    assert m1 == m2
    for (n, p), (_, q) in zip(d1.named_parameters(), d2.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=n)
    for (n, p), (_, q) in zip(e1.named_parameters(), e2.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=n)


def test_donor_below_minimum_raises_training_error():
    from cmdistill.errors import TrainingError
    rng = Rng(0)
    feats = rng.normal((4, 10, 16)).astype(np.float32)
    tr = [[12, 13]] * 4
    model = ModelConfig(audio_width=8, heads=2, encoder_layers=1, decoder_layers=1)
    with pytest.raises(TrainingError, match="accuracy"):
        pretrain_donor(feats, tr, feats, tr, model, DonorConfig(steps=1, min_accuracy=1.01, eval_every=1), Rng(0))


@pytest.mark.slow
def test_zero_noise_donor_reaches_target_on_200_held_out():
    from cmdistill.pipeline import make_world
    cfg = RunConfig()
    cfg.audio.noise = 0.0
    cfg.data.n_dev, cfg.data.n_test = 200, 0
    world = make_world(cfg)
    train, dev = world.speech_set("train"), world.speech_set("dev")
    enc, dec, metrics = pretrain_donor(train.feats, train.transcripts, dev.feats, dev.transcripts,
                                       cfg.model, cfg.donor, Rng(0))
    assert metrics["held_out_accuracy"] >= 0.95
    assert transcription_accuracy(enc, dec, dev.feats, dev.transcripts) == metrics["held_out_accuracy"]
