import numpy as np
import pytest

from smad import autograd as ag
from smad.model import (
    VARIANTS,
    ModelConfig,
    SpeechTransformer,
    count_parameters,
    desk_preset,
    paper_preset,
)
from smad.nn import ConfigError, downsampled_length

from helpers import numerical_grad, rel_err

SOS = 6  # tiny_cfg: vocab 9 -> symbols 1..5, SOS 6, EOS 7, PAD 8


def _variant_cfg(tiny_cfg, variant):
    return tiny_cfg.for_variant(variant)


def _feats(rng, t=19, b=1, d=20):
    return rng.normal(size=(b, t, d))


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_shapes(tiny_cfg, variant, rng):
    model = SpeechTransformer(_variant_cfg(tiny_cfg, variant))
    enc = model.encode(_feats(rng, 19, 2))
    assert enc.h.shape == (2, downsampled_length(19), 16)
    dec = model.decode_training(enc, np.array([[SOS, 1, 2], [SOS, 3, 3]]))
    assert dec.logits.shape == (2, 3, 9)
    assert model.ctc_log_probs(enc, dec).shape == (2, enc.n, 6)


@pytest.mark.parametrize("variant", VARIANTS)
def test_closed_form_parameter_count(tiny_cfg, variant):
    cfg = _variant_cfg(tiny_cfg, variant)
    assert count_parameters(cfg) == SpeechTransformer(cfg).num_parameters()


@pytest.mark.parametrize("tie", [False, True])
@pytest.mark.parametrize("placement", ["none", "ctc1"])
def test_parameter_count_options(tiny_cfg, tie, placement):
    cfg = ModelConfig(**{**tiny_cfg.to_dict(), "tie_embeddings": tie, "ctc_placement": placement,
                         "lambda_ctc": 0.0 if placement == "none" else 0.3})
    assert count_parameters(cfg) == SpeechTransformer(cfg).num_parameters()


def test_parameter_count_is_stable(tiny_cfg):
    assert SpeechTransformer(tiny_cfg).num_parameters() == SpeechTransformer(tiny_cfg).num_parameters()


def test_presets():
    desk = desk_preset()
    assert (desk.d_model, desk.d_ff, desk.n_heads, desk.n_enc_layers, desk.n_dec_layers) == (64, 256, 4, 4, 3)
    big = paper_preset()
    assert (big.d_model, big.d_ff, big.n_heads, big.n_enc_layers, big.n_dec_layers) == (256, 2048, 4, 12, 6)
    assert big.for_variant("no_encoder").n_dec_layers == 18


def test_for_variant_rules(tiny_cfg):
    ne = tiny_cfg.for_variant("no_encoder")
    assert (ne.n_enc_layers, ne.n_dec_layers) == (0, 4)
    assert tiny_cfg.for_variant("no_das").ctc_placement == "ctc1"
    assert tiny_cfg.for_variant("transformer_baseline").ctc_placement == "ctc1"
    assert tiny_cfg.for_variant("no_mixed_attention").ctc_placement == "ctc2"


@pytest.mark.parametrize(
    "kwargs",
    [
        {"variant": "bogus"},
        {"ctc_placement": "ctc3"},
        {"lambda_ctc": 1.5},
        {"n_heads": 3},
        {"variant": "no_encoder", "n_enc_layers": 2},
        {"variant": "no_das", "ctc_placement": "ctc2"},
        {"ctc_placement": "none", "lambda_ctc": 0.3},
        {"n_dec_layers": 0},
    ],
)
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_same_seed_same_forward(tiny_cfg, rng):
    x = _feats(rng)
    outs = []
    for _ in range(2):
        m = SpeechTransformer(tiny_cfg)
        outs.append(m.decode_training(m.encode(x), [[SOS, 1, 2]]).logits.data)
    assert outs[0].tobytes() == outs[1].tobytes()


def test_forward_is_pure(tiny_cfg, rng):
    m = SpeechTransformer(tiny_cfg)
    x = _feats(rng)
    a = m.decode_training(m.encode(x), [[SOS, 1]]).logits.data.copy()
    b = m.decode_training(m.encode(x), [[SOS, 1]]).logits.data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("variant", VARIANTS)
def test_decoder_causality_random_draws(tiny_cfg, variant):
    """Logits at position i never depend on targets after i (100 model/input draws per criterion)."""
    draws = 100 if variant == "t_smad" else 10
    for k in range(draws):
        r = np.random.default_rng(k)
        cfg = ModelConfig(**{**_variant_cfg(tiny_cfg, variant).to_dict(), "seed": k})
        m = SpeechTransformer(cfg)
        enc = m.encode(r.normal(size=(1, int(r.integers(8, 24)), 20)))
        length = int(r.integers(2, 7))
        ys = np.concatenate([[SOS], r.integers(1, 6, size=length - 1)])[None]
        cut = int(r.integers(0, length - 1))
        ys2 = ys.copy()
        ys2[0, cut + 1 :] = r.integers(1, 6, size=length - cut - 1)
        a = m.decode_training(enc, ys).logits.data
        b = m.decode_training(enc, ys2).logits.data
        np.testing.assert_array_equal(a[0, : cut + 1], b[0, : cut + 1])


@pytest.mark.parametrize("variant", VARIANTS)
def test_incremental_matches_full_pass(tiny_cfg, variant, rng):
    m = SpeechTransformer(_variant_cfg(tiny_cfg, variant))
    enc = m.encode(_feats(rng, 23))
    ys = np.array([[SOS, 3, 1, 5, 2]])
    full = m.decode_training(enc, ys).logits.data[0]
    cache = m.start_cache(enc, SOS)
    for t in range(1, ys.shape[1] + 1):
        logits, cache = m.decode_incremental(ys[:, :t], cache)
        np.testing.assert_allclose(logits[0], full[t - 1], rtol=0, atol=1e-10)


def test_incremental_rejects_mismatched_cache(tiny_cfg, rng):
    m = SpeechTransformer(tiny_cfg)
    cache = m.start_cache(m.encode(_feats(rng)), SOS)
    with pytest.raises(ValueError):
        m.decode_incremental(np.array([[SOS, 1]]), cache)


def test_cache_select_reorders_rows(tiny_cfg, rng):
    m = SpeechTransformer(tiny_cfg)
    enc_feats = _feats(rng)
    enc = m.encode(enc_feats)
    cache = m.start_cache(enc, SOS)
    _, cache = m.decode_incremental(np.array([[SOS]]), cache)
    cache = cache.select([0, 0])
    logits, _ = m.decode_incremental(np.array([[SOS, 1], [SOS, 4]]), cache)
    enc2 = m.encode(np.repeat(enc_feats, 2, axis=0))
    full = m.decode_training(enc2, np.array([[SOS, 1], [SOS, 4]])).logits.data[:, -1]
    np.testing.assert_allclose(logits, full, rtol=0, atol=1e-10)


@pytest.mark.parametrize("variant", VARIANTS)
def test_padding_invariance(tiny_cfg, variant, rng):
    """A padded batch row gives the same outputs as the utterance on its own."""
    m = SpeechTransformer(_variant_cfg(tiny_cfg, variant))
    short, long_ = rng.normal(size=(13, 20)), rng.normal(size=(27, 20))
    batch = np.zeros((2, 27, 20))
    batch[0, :13], batch[1] = short, long_
    ys = np.array([[SOS, 2, 4], [SOS, 1, 1]])
    enc_b = m.encode(batch, [13, 27])
    dec_b = m.decode_training(enc_b, ys)
    enc_1 = m.encode(short[None])
    dec_1 = m.decode_training(enc_1, ys[:1])
    n = enc_1.n
    assert enc_b.lengths[0] == n
    np.testing.assert_allclose(enc_b.h.data[0, :n], enc_1.h.data[0], atol=1e-10)
    np.testing.assert_allclose(dec_b.logits.data[0], dec_1.logits.data[0], atol=1e-10)
    lp_b, lp_1 = m.ctc_log_probs(enc_b, dec_b).data, m.ctc_log_probs(enc_1, dec_1).data
    np.testing.assert_allclose(lp_b[0, :n], lp_1[0], atol=1e-10)


def test_acoustic_stream_ignores_targets(tiny_cfg, rng):
    m = SpeechTransformer(tiny_cfg)
    enc = m.encode(_feats(rng))
    a = m.decode_training(enc, [[SOS, 1, 2]]).acoustic_final.data
    b = m.decode_training(enc, [[SOS, 5, 5]]).acoustic_final.data
    assert a.tobytes() == b.tobytes()


def test_no_das_feeds_encoder_output_to_every_layer(tiny_cfg, rng):
    m = SpeechTransformer(tiny_cfg.for_variant("no_das"))
    enc = m.encode(_feats(rng))
    for s in m.acoustic_streams(enc):
        assert s.data.tobytes() == enc.h.data.tobytes()


def test_no_encoder_uses_frontend_output(tiny_cfg, rng):
    m = SpeechTransformer(tiny_cfg.for_variant("no_encoder"))
    assert m.encoder == []
    enc = m.encode(_feats(rng))
    assert enc.h.shape[-1] == tiny_cfg.d_model


def test_tied_embeddings_share_the_matrix(tiny_cfg, rng):
    cfg = ModelConfig(**{**tiny_cfg.to_dict(), "tie_embeddings": True})
    m = SpeechTransformer(cfg)
    enc = m.encode(_feats(rng))
    dec = m.decode_training(enc, [[SOS, 1]])
    t_final = dec.logits.data - m.out_bias.data
    assert t_final.shape == (1, 2, 9)
    names = {n for n, _ in m.named_parameters()}
    assert not any(n.startswith("out.") for n in names)


def test_describe_lists_total(tiny_cfg):
    m = SpeechTransformer(tiny_cfg)
    text = m.describe()
    assert text.splitlines()[-1].split()[-1] == str(m.num_parameters())


def test_end_to_end_gradient(tiny_cfg, rng):
    """Multi-objective loss gradient against central differences on sampled entries."""
    from smad.losses import attention_loss, ctc_loss, multi_objective_loss

    m = SpeechTransformer(tiny_cfg)
    feats = _feats(rng, 17)
    ys_in, ys_out = np.array([[SOS, 1, 3]]), np.array([[1, 3, 7]])

    def loss_value():
        enc = m.encode(feats)
        dec = m.decode_training(enc, ys_in)
        att = attention_loss(dec.logits, ys_out, 0.1)
        ctc = ctc_loss(m.ctc_log_probs(enc, dec), [np.array([1, 3])])
        return multi_objective_loss(ctc, att, 0.3).loss

    m.zero_grad()
    ag.backward(loss_value())
    sample = np.random.default_rng(5)
    worst = 0.0
    for name, p in m.named_parameters():
        idx = [tuple(sample.integers(0, s) for s in p.shape) for _ in range(2)]
        with ag.no_grad():
            num = numerical_grad(lambda: loss_value().item(), p.data, 1e-6, idx)
        for i, v in num.items():
            an = 0.0 if p.grad is None else p.grad[i]
            if max(abs(v), abs(an)) > 1e-7:
                worst = max(worst, rel_err(v, an))
    assert worst <= 1e-4, worst
