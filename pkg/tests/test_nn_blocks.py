import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import accentconv.autodiff as ad
from accentconv.autodiff import Tensor, grad_check
from accentconv.nn import (
    PAPER,
    TOY,
    AttentivePoolingDecoder,
    BatchNorm1d,
    Condition,
    ConformerBlock,
    FFTStack,
    JasperStack,
    Linear,
    MultiHeadAttention,
    SincConv,
    SincFrontEnd,
    Subsample4,
    Upsample4,
    XVectorStack,
    get_preset,
)

pytestmark = pytest.mark.usefixtures("f64")

TOL = 1e-4
# relu-heavy stacks have thousands of kinks; a smaller step keeps a sampled
# pre-activation from straddling one
BLOCK_EPS = 1e-6


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def check(block, x, rng, n_params=6):
    """grad_check of a random projection of ``block(x)`` w.r.t. x and sampled parameters."""
    block.eval()
    proj = rng.normal(size=block(x).shape)
    return grad_check(lambda v: ad.sum_(block(v) * proj), x, eps=BLOCK_EPS, wrt=block.parameters(),
                      max_elements=n_params)


# --------------------------------------------------------------------- presets


def test_paper_preset_carries_published_sizes():
    assert (PAPER.stp_dim, PAPER.conformer_layers) == (512, 12)
    assert (PAPER.sts_dim, PAPER.sts_inner) == (384, 1536)
    assert (PAPER.accent_dim, PAPER.speaker_dim, PAPER.n_tokens) == (192, 512, 129)


def test_toy_preset_scaling_and_overrides():
    assert TOY.stp_dim * 8 == PAPER.stp_dim and TOY.sts_dim * 8 == PAPER.sts_dim
    assert TOY.conformer_layers == PAPER.conformer_layers // 6
    assert (TOY.accent_dim, TOY.speaker_dim, TOY.n_mels) == (192, 512, 80)
    assert get_preset("toy", n_accents=4).n_accents == 4
    with pytest.raises(ValueError):
        get_preset("huge")


# ---------------------------------------------------------------------- Jasper


def test_jasper_shape_and_zero_input(rng):
    stack = JasperStack(TOY, rng).eval()
    out = stack(Tensor(np.zeros((1, 80, 20))))
    assert out.shape == (1, TOY.jasper_widths[-1], 20)
    assert np.all(np.isfinite(out.data))
    assert np.array_equal(out.data, stack(Tensor(np.zeros((1, 80, 20)))).data)
    with pytest.raises(ValueError):
        stack(Tensor(np.zeros((1, 40, 20))))


def test_jasper_grad_check(rng):
    stack = JasperStack(TOY, rng)
    assert check(stack, t64(rng.normal(size=(1, 80, 6))), rng) < TOL


def test_batchnorm_training_mode_grad_and_running_stats(rng):
    bn = BatchNorm1d(3).train()
    x = t64(rng.normal(loc=2.0, size=(4, 3, 5)))
    proj = rng.normal(size=x.shape)
    assert grad_check(lambda v: ad.sum_(bn(v) * proj), x, wrt=bn.parameters()) < TOL
    assert np.all(bn.running_mean > 0)
    bn.eval()
    a = bn(x).data
    assert np.array_equal(a, bn(x).data)


# ----------------------------------------------------------- attention pooling


def _pool_oracle(dec, h):
    """Attentive statistics in plain numpy, straight from the weights."""

    def conv1x1(layer, z):
        return np.einsum("oc,bct->bot", layer.weight.data[:, :, 0], z) + layer.bias.data[None, :, None]

    mean = h.mean(axis=2, keepdims=True)
    std = np.sqrt(((h - mean) ** 2).mean(axis=2, keepdims=True) + 1e-12) - 1e-6
    ctx = np.concatenate([h, np.broadcast_to(mean, h.shape), np.broadcast_to(std, h.shape)], axis=1)
    scores = conv1x1(dec.attn_out, np.tanh(conv1x1(dec.attn_in, ctx)))
    w = np.exp(scores - scores.max(axis=2, keepdims=True))
    w /= w.sum(axis=2, keepdims=True)
    mu = (w * h).sum(axis=2)
    sigma = np.sqrt((w * (h - mu[:, :, None]) ** 2).sum(axis=2) + 1e-12) - 1e-6
    return w, mu, sigma


def test_pooling_constant_features_and_single_frame(rng):
    dec = AttentivePoolingDecoder(8, 4, 192, 40, rng).eval()
    const = np.repeat(rng.normal(size=(2, 8, 1)), 7, axis=2)
    for h in (const, rng.normal(size=(2, 8, 1))):
        mu, sigma = dec.pool(Tensor(h))
        np.testing.assert_allclose(mu.data, h[:, :, 0], atol=1e-12)
        np.testing.assert_allclose(sigma.data, 0.0, atol=1e-9)
    emb, logits = dec(Tensor(const))
    assert emb.shape == (2, 192) and logits.shape == (2, 40)
    with pytest.raises(ValueError):
        dec.pool(Tensor(np.zeros((1, 8, 0))))


def test_pooling_frame_duplication_matches_recomputation(rng):
    dec = AttentivePoolingDecoder(6, 5, 192, 3, rng).eval()
    h = rng.normal(size=(1, 6, 5))
    dup = np.concatenate([h, h[:, :, 2:3]], axis=2)
    for feats in (h, dup):
        w, mu, sigma = _pool_oracle(dec, feats)
        np.testing.assert_allclose(dec.attention_weights(Tensor(feats)).data, w, rtol=1e-10)
        got_mu, got_sigma = dec.pool(Tensor(feats))
        np.testing.assert_allclose(got_mu.data, mu, rtol=1e-10)
        np.testing.assert_allclose(got_sigma.data, sigma, rtol=1e-10, atol=1e-12)
    w_dup = _pool_oracle(dec, dup)[0]
    # the copy and its source share a score, so they share a weight
    np.testing.assert_allclose(w_dup[:, :, 2], w_dup[:, :, 5], rtol=1e-12)


def test_pooling_decoder_batch_of_one_trains_like_it_infers(rng):
    dec = AttentivePoolingDecoder(6, 4, 12, 3, rng)
    h = Tensor(rng.normal(size=(1, 6, 9)))
    emb_train = dec.train()(h)[0].data
    emb_eval = dec.eval()(h)[0].data
    np.testing.assert_array_equal(emb_train, emb_eval)
    assert np.std(emb_eval) > 0


def test_pooling_decoder_grad_check(rng):
    dec = AttentivePoolingDecoder(6, 4, 12, 3, rng)
    dec.eval()
    x = t64(rng.normal(size=(2, 6, 4)))
    proj = rng.normal(size=(2, 3))
    err = grad_check(lambda v: ad.sum_(dec(v)[1] * proj), x, wrt=dec.parameters(), max_elements=6)
    assert err < TOL


# ------------------------------------------------------------------- SincNet


def test_sinc_band_containing_tone_dominates_by_20db():
    sinc = SincConv(4, 251, 16000)
    sinc.set_bands([200, 800, 1800, 3500], [500, 1200, 2600, 5000])
    t = np.arange(16000) / 16000
    tone = np.sin(2 * np.pi * 1000 * t)
    out = sinc(Tensor(tone[None, None, :])).data[0, :, 500:-500]
    energy_db = 10 * np.log10((out**2).mean(axis=1))
    assert np.all(energy_db[1] - np.delete(energy_db, 1) >= 20)


def test_sinc_bandwidth_floor_survives_clamping():
    sinc = SincConv(3, 101, 16000)
    sinc.low_hz.data[:] = np.array([[-5000.0], [7900.0], [100.0]])
    sinc.band_hz.data[:] = np.array([[-3.0], [500.0], [0.0]])
    low, high = sinc.cutoffs()
    assert np.all(low.data >= sinc.min_low_hz) and np.all(high.data <= 8000)
    assert np.all(high.data - low.data >= sinc.min_band_hz - 1e-9)


@pytest.mark.parametrize("n", [400, 401, 16000, 12345])
def test_sinc_front_end_length(n, rng):
    fe = SincFrontEnd(TOY, rng)
    out = fe(Tensor(rng.normal(size=(1, n)) * 0.1))
    assert out.shape == (1, TOY.sinc_channels, (n - 400) // 160 + 1)
    with pytest.raises(ValueError):
        fe(Tensor(np.zeros((1, 399))))


def test_sinc_grad_check(rng):
    sinc = SincConv(2, 21, 16000)
    x = t64(rng.normal(size=(1, 1, 30)))
    proj = rng.normal(size=(1, 2, 30))
    assert grad_check(lambda v: ad.sum_(sinc(v) * proj), x, wrt=sinc.parameters(), eps=1e-4) < TOL


# ------------------------------------------------------------------- x-vector


def test_xvector_constant_input_std_half_is_zero(rng):
    stack = XVectorStack(10, TOY, rng).eval()
    feats = np.repeat(rng.normal(size=(2, 10, 1)), 30, axis=2)
    stats = stack.stats(Tensor(feats)).data
    np.testing.assert_allclose(stats[:, TOY.xvector_stats:], 0.0, atol=1e-9)
    assert stack(Tensor(feats)).shape == (2, 512)


def test_xvector_receptive_field(rng):
    stack = XVectorStack(4, TOY, rng).eval()
    assert XVectorStack.receptive_field == 15
    stack(Tensor(rng.normal(size=(1, 4, 15))))
    with pytest.raises(ValueError):
        stack(Tensor(rng.normal(size=(1, 4, 14))))


def test_xvector_grad_check(rng):
    preset = get_preset("toy", xvector_hidden=6, xvector_stats=8, speaker_dim=5)
    stack = XVectorStack(3, preset, rng)
    assert check(stack, t64(rng.normal(size=(2, 3, 17))), rng) < TOL


# ------------------------------------------------------------------- attention


def test_self_only_mask_reduces_attention_to_per_frame_map(rng):
    mha = MultiHeadAttention(8, 2, rng)
    x = rng.normal(size=(1, 5, 8))
    out = mha(Tensor(x), mask=np.eye(5, dtype=bool)).data
    w, b = mha.qkv.weight.data, mha.qkv.bias.data
    v = x @ w[:, 16:] + b[16:]
    expected = v @ mha.out.weight.data + mha.out.bias.data
    np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-12)


def test_conformer_grad_check(rng):
    block = ConformerBlock(8, 2, 2, 3, rng)
    assert check(block, t64(rng.normal(size=(2, 5, 8))), rng) < TOL


def test_fft_stack_identity_and_grad_check(rng):
    x = Tensor(rng.normal(size=(1, 4, 8)))
    assert FFTStack(0, 8, 2, 16, 3, rng)(x) is x
    stack = FFTStack(2, 8, 2, 16, 3, rng)
    assert check(stack, t64(rng.normal(size=(2, 5, 8))), rng) < TOL
    with pytest.raises(ValueError):
        stack(Tensor(np.zeros((1, 4, 6))))


# ------------------------------------------------------------------ time scale


@pytest.mark.parametrize("t,expected", [(16, 4), (17, 5), (1, 1)])
def test_subsample4_examples(t, expected, rng):
    assert Subsample4(4, 6, rng)(Tensor(np.zeros((1, t, 4)))).shape == (1, expected, 6)


def test_up_and_sub_grad_check(rng):
    assert check(Upsample4(3, 4, rng), t64(rng.normal(size=(2, 3, 3))), rng) < TOL
    assert check(Subsample4(3, 4, rng), t64(rng.normal(size=(2, 9, 3))), rng) < TOL


@settings(max_examples=20, deadline=None)
@given(t=st.integers(1, 64))
def test_time_length_laws(t):
    r = np.random.default_rng(t)
    x = Tensor(r.normal(size=(1, t, 8)))
    assert JasperStack(get_preset("toy", n_mels=8, jasper_widths=(4, 4, 4)), r).eval()(
        ad.swapaxes(x, 1, 2)
    ).shape == (1, 4, t)
    assert ConformerBlock(8, 2, 2, 3, r).eval()(x).shape == x.shape
    assert FFTStack(1, 8, 2, 16, 3, r).eval()(x).shape == x.shape
    sub = Subsample4(8, 8, r)(x)
    assert sub.shape[1] == math.ceil(t / 4)
    assert Upsample4(8, 8, r)(x).shape[1] == 4 * t
    assert Upsample4(8, 8, r)(sub).shape[1] == 4 * math.ceil(t / 4) >= t


# ---------------------------------------------------------------- conditioning


def test_condition_zero_embedding_adds_bias_only(rng):
    cond = Condition(6, 4, rng)
    x = rng.normal(size=(1, 3, 4))
    out = cond(Tensor(x), Tensor(np.zeros(6))).data
    np.testing.assert_allclose(out, x + cond.proj.bias.data, rtol=1e-12)


def test_condition_distinct_embeddings_and_permutation(rng):
    cond = Condition(6, 4, rng)
    x = rng.normal(size=(1, 5, 4))
    a = cond(Tensor(x), Tensor(rng.normal(size=6))).data
    b = cond(Tensor(x), Tensor(rng.normal(size=6))).data
    assert np.all(np.any(a != b, axis=-1))
    e = Tensor(rng.normal(size=(1, 6)))
    perm = rng.permutation(5)
    np.testing.assert_array_equal(cond(Tensor(x[:, perm]), e).data, cond(Tensor(x), e).data[:, perm])
    with pytest.raises(ValueError):
        cond(Tensor(x), Tensor(np.ones(5)))


def test_condition_grad_check(rng):
    cond = Condition(5, 3, rng)
    e = t64(rng.normal(size=(2, 5)))
    x = rng.normal(size=(2, 4, 3))
    proj = rng.normal(size=x.shape)
    assert grad_check(lambda v: ad.sum_(cond(Tensor(x), v) * proj), e, wrt=cond.parameters()) < TOL


def test_linear_shape_error(rng):
    with pytest.raises(ValueError):
        Linear(3, 2, rng)(Tensor(np.ones((2, 4))))


def test_blocks_deterministic_in_eval_and_dropout_in_train(rng):
    block = ConformerBlock(8, 2, 2, 3, rng)
    x = Tensor(rng.normal(size=(1, 6, 8)))
    block.eval()
    assert np.array_equal(block(x).data, block(x).data)
    block.train()
    assert not np.array_equal(block(x).data, block(x).data)
