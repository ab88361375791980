import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmf_fewshot.encoder import (
    EmptySupportError,
    EncoderConfig,
    EncoderConfigError,
    attention_vector,
    cmf_layer,
    encode_mean,
    fuse_salient,
    init_encoder,
)
from cmf_fewshot.numerics import Graph

PLAIN = EncoderConfig(channels=(8, 8, 16), variant="plain")
CMF = EncoderConfig(channels=(8, 8, 16), variant="cmf")


def ref_conv(x, w, b, pad):
    """Shift-and-add convolution, independent of the im2col path."""
    n, c, h, wd = x.shape
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, w.shape[0], h + 2 * pad - k + 1, wd + 2 * pad - k + 1))
    for dy in range(k):
        for dx in range(k):
            patch = xp[:, :, dy : dy + out.shape[2], dx : dx + out.shape[3]]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, dy, dx])
    return out + b[None, :, None, None]


def ref_pool(x):
    n, c, h, w = x.shape
    return x[:, :, : h // 2 * 2, : w // 2 * 2].reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def ref_encode(images, p, config):
    h = images.astype(np.float64)
    for i in range(len(config.channels)):
        fused = None
        if i in config.attention_layers():
            pooled = h.max(axis=(2, 3))
            hid = np.maximum(pooled @ p[f"attn{i}/fc1/w"].T + p[f"attn{i}/fc1/b"], 0)
            fused = (hid @ p[f"attn{i}/fc2/w"].T + p[f"attn{i}/fc2/b"]).mean(axis=0)
        h = ref_conv(h, p[f"conv{i}/w"], p[f"conv{i}/b"], config.kernel // 2)
        if fused is not None:
            h = h * fused[None, :, None, None]
        h = ref_pool(np.maximum(h, 0))
    return h.max(axis=(2, 3)).mean(axis=0)


def perturbed(config, seed):
    """Encoder weights with every tensor randomised (including zero-init ones)."""
    rng = np.random.default_rng(seed)
    return {k: (v + 0.2 * rng.normal(size=v.shape)).astype(np.float32) for k, v in init_encoder(config, seed).items()}


@pytest.fixture(scope="module")
def support():
    return np.random.default_rng(7).uniform(size=(6, 1, 16, 16)).astype(np.float32)


# attention ------------------------------------------------------------------


def test_attention_on_constant_maps_matches_hand_evaluation():
    rng = np.random.default_rng(0)
    consts = rng.normal(size=(3, 8))
    fmap = np.broadcast_to(consts[:, :, None, None], (3, 8, 5, 5)).astype(np.float32)
    w1, b1 = rng.normal(size=(2, 8)), rng.normal(size=2)
    w2, b2 = rng.normal(size=(8, 2)), rng.normal(size=8)
    out = attention_vector(fmap, w1, b1, w2, b2)
    expected = np.maximum(consts @ w1.T + b1, 0) @ w2.T + b2
    assert out.shape == (3, 8)
    assert np.max(np.abs(out - expected)) < 1e-6


def test_identical_samples_give_identical_attention_rows():
    rng = np.random.default_rng(1)
    one = rng.normal(size=(1, 8, 4, 4))
    fmap = np.concatenate([one, one]).astype(np.float32)
    out = attention_vector(fmap, rng.normal(size=(2, 8)), np.zeros(2), rng.normal(size=(8, 2)), np.ones(8))
    assert np.array_equal(out[0], out[1])


def test_attention_rejects_wrong_channel_count():
    with pytest.raises(EncoderConfigError):
        attention_vector(np.ones((2, 6, 3, 3)), np.ones((2, 8)), np.zeros(2), np.ones((8, 2)), np.zeros(8))


# fusion -----------------------------------------------------------------------


def test_fuse_single_row_is_identity():
    row = np.array([[0.5, -1.0, 2.0]], np.float32)
    np.testing.assert_array_equal(fuse_salient(row), row[0])


def test_fuse_is_the_row_mean():
    np.testing.assert_allclose(fuse_salient(np.array([[1.0, 2.0], [3.0, 4.0]])), [2.0, 3.0], atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_fuse_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    sf = rng.normal(size=(int(rng.integers(1, 12)), 8)).astype(np.float32)
    assert np.max(np.abs(fuse_salient(sf) - fuse_salient(sf[rng.permutation(len(sf))]))) < 1e-6


def test_fuse_rejects_empty_support():
    with pytest.raises(EmptySupportError):
        fuse_salient(np.zeros((0, 4)))


# cmf layer ---------------------------------------------------------------------


def test_cmf_layer_with_unit_weights_is_plain_conv():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
    k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    g = Graph("float32")
    plain = g.conv2d(g.input("x", x), g.input("k", k), pad=1).value
    np.testing.assert_array_equal(cmf_layer(x, k, np.ones(4, np.float32)), plain)


def test_cmf_layer_with_zero_weights_is_zero():
    rng = np.random.default_rng(3)
    out = cmf_layer(rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), np.zeros(4))
    assert not out.any()


def _kernel_side(x, k, fused, dtype):
    g = Graph(dtype)
    return g.conv2d(g.input("x", x), g.input("k", fused[:, None, None, None] * k), pad=1).value


@pytest.mark.parametrize("dtype,tol", [("float32", 1e-6), ("float64", 1e-12)])
def test_scaling_kernels_equals_scaling_outputs(dtype, tol):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        n, ci, co, hw = (int(v) for v in rng.integers([1, 1, 1, 3], [4, 5, 9, 9]))
        x = rng.uniform(size=(n, ci, hw, hw)).astype(dtype)
        k = (0.3 * rng.normal(size=(co, ci, 3, 3))).astype(dtype)
        fused = rng.uniform(0.2, 2.0, size=co).astype(dtype)
        diff = np.abs(_kernel_side(x, k, fused, dtype) - cmf_layer(x, k, fused, dtype=dtype))
        worst = max(worst, float(diff.max()))
    assert worst < tol


# encode_mean ----------------------------------------------------------------------


def test_variants_share_conv_init_and_attention_is_kaiming():
    p_plain = init_encoder(PLAIN, seed=0)
    p_cmf = init_encoder(CMF, seed=0)
    assert all(np.array_equal(p_plain[k], p_cmf[k]) for k in p_plain)
    for k, v in p_cmf.items():
        if k.startswith("attn") and k.endswith("/w"):
            assert np.abs(v).max() <= np.sqrt(6.0 / v.shape[1]) and v.std() > 0
        elif k.endswith("/b"):
            assert not v.any()


def test_cmf_attention_shapes():
    p = init_encoder(CMF, seed=0)
    assert p["attn1/fc1/w"].shape == (2, 8)
    assert p["attn1/fc2/w"].shape == (8, 2)
    assert p["attn2/fc1/w"].shape == (2, 8)
    assert p["attn2/fc2/w"].shape == (16, 2)
    assert "attn0/fc1/w" not in p


def test_single_sample_prior_is_its_pooled_embedding(support):
    p = init_encoder(PLAIN, seed=1)
    prior = encode_mean(support[:1], p, PLAIN, dtype="float64").values
    np.testing.assert_allclose(prior, ref_encode(support[:1], p, PLAIN), atol=1e-9)


@pytest.mark.parametrize("config", [PLAIN, CMF], ids=["plain", "cmf"])
def test_encode_mean_matches_per_sample_oracle(support, config):
    p = perturbed(config, seed=2)
    got = encode_mean(support, p, config).values
    if config.variant == "plain":
        expected = np.mean([ref_encode(support[i : i + 1], p, config) for i in range(len(support))], axis=0)
    else:
        expected = ref_encode(support, p, config)
    assert np.max(np.abs(got - expected)) < 1e-5 * max(1.0, np.abs(expected).max())


@pytest.mark.parametrize("config", [PLAIN, CMF], ids=["plain", "cmf"])
def test_encode_mean_is_permutation_invariant(support, config):
    p = perturbed(config, seed=3)
    rng = np.random.default_rng(0)
    base = encode_mean(support, p, config).values
    worst = max(float(np.abs(encode_mean(support[rng.permutation(6)], p, config).values - base).max()) for _ in range(100))
    assert worst < 1e-6


def test_noise_support_is_admissible():
    noise = np.random.default_rng(5).uniform(size=(10, 1, 16, 16)).astype(np.float32)
    prior = encode_mean(noise, perturbed(CMF, 4), CMF).values
    assert prior.shape == (16,) and np.isfinite(prior).all()


def test_empty_support_is_rejected():
    with pytest.raises(EmptySupportError):
        encode_mean(np.zeros((0, 1, 16, 16), np.float32), init_encoder(PLAIN), PLAIN)


def test_sigmoid_gate_bounds_fused_weights(support):
    gated = EncoderConfig(channels=(8, 8, 16), variant="cmf", attention_gate="sigmoid")
    p = perturbed(gated, 5)
    g = Graph("float64")
    from cmf_fewshot.encoder import encoder_graph

    encoder_graph(g, g.input("x", support), {k: g.const(v) for k, v in p.items()}, gated)
    fused = [n.value for n in g.nodes if n.name and n.name.startswith("encoder/fused")]
    assert len(fused) == 2 and all(((f > 0) & (f < 1)).all() for f in fused)


def test_config_validation():
    with pytest.raises(EncoderConfigError):
        EncoderConfig(variant="dense")
    with pytest.raises(EncoderConfigError):
        EncoderConfig(channels=(6, 6, 8), variant="cmf")
