import numpy as np
import pytest

from oatdar import autodiff as ad
from oatdar.autodiff import Tensor
from oatdar.models import (CIPAutoencoder, CIPEncoder, ConditionalDenoiser,
                           DenoiserConfig, FDUNet, FDUNetConfig,
                           TimeEmbedding, cip_encode, denoise_predict,
                           fd_unet_forward, time_embed)

TINY_DENOISER = DenoiserConfig(scales=(8, 16), resblocks_per_scale=1,
                               attention_heads=4, cond_dim=16, cond_tokens=4,
                               time_embed_dim=8, norm_groups=4, seed=0)
TINY_FDUNET = FDUNetConfig(scales=(4, 8), growth=4, layers_per_block=2, seed=0)


def model_grad_check(model, build_loss, n_coords=20, h=1e-4, tol=1e-3,
                     seed=0):
    """Analytic gradient vs central finite differences on randomly sampled
    parameter coordinates (float64 models only)."""
    params = model.parameters()
    model.zero_grad()
    loss = build_loss()
    loss.backward()
    grads = {k: (t.grad.copy() if t.grad is not None else
                 np.zeros_like(t.data)) for k, t in params.items()}
    rng = np.random.default_rng(seed)
    names = sorted(params)
    checked = 0
    while checked < n_coords:
        name = names[int(rng.integers(len(names)))]
        t = params[name]
        idx = int(rng.integers(t.data.size))
        orig = t.data.ravel()[idx]
        t.data.ravel()[idx] = orig + h
        lp = float(build_loss().data)
        t.data.ravel()[idx] = orig - h
        lm = float(build_loss().data)
        t.data.ravel()[idx] = orig
        fd = (lp - lm) / (2.0 * h)
        ana = grads[name].ravel()[idx]
        rel = abs(ana - fd) / max(abs(ana), abs(fd), 1e-6)
        assert rel <= tol, f"{name}[{idx}]: ana={ana} fd={fd} rel={rel}"
        checked += 1


# ---------------------------------------------------------------------------
# time embedding
# ---------------------------------------------------------------------------


def test_time_embed_zero():
    cfg = TimeEmbedding(dim=16)
    e = time_embed(0, cfg)
    assert np.array_equal(e[:8], np.zeros(8))
    assert np.array_equal(e[8:], np.ones(8))


def test_time_embed_bounded_and_shaped():
    cfg = TimeEmbedding(dim=64)
    for t in (1, 57, 999):
        e = time_embed(t, cfg)
        assert e.shape == (64,)
        assert np.all(np.abs(e) <= 1.0)
    batch = time_embed(np.arange(5), cfg)
    assert batch.shape == (5, 64)


def test_time_embed_distinct_over_thousand_steps():
    cfg = TimeEmbedding(dim=64)
    emb = time_embed(np.arange(1, 1001), cfg)
    # min pairwise distance strictly positive
    d2 = np.sum((emb[None] - emb[:, None]) ** 2, axis=-1)
    d2 += np.eye(1000) * 1e9
    assert d2.min() > 0


def test_time_embed_validation():
    with pytest.raises(ValueError):
        TimeEmbedding(dim=7)
    with pytest.raises(ValueError):
        time_embed(-1, TimeEmbedding(dim=8))


# ---------------------------------------------------------------------------
# conditioning encoder
# ---------------------------------------------------------------------------


def test_cip_paper_scale_dims():
    enc = CIPEncoder((4096, 3072, 2048, 1024), np.random.default_rng(0))
    out = cip_encode(enc, np.random.default_rng(1).random(4096))
    assert out.shape == (1024,)


def test_cip_desk_scale_dims():
    enc = CIPEncoder((256, 192, 128, 64), np.random.default_rng(0))
    out = cip_encode(enc, np.zeros(256))
    assert out.shape == (64,)


def test_cip_zero_weights_zero_output():
    enc = CIPEncoder((16, 8, 4), np.random.default_rng(0))
    for _, t in enc.named_parameters():
        t.data[...] = 0.0
    out = cip_encode(enc, np.random.default_rng(2).random(16))
    assert not np.any(out)


def test_cip_rejects_nonmonotone_dims():
    with pytest.raises(ValueError):
        CIPEncoder((16, 16, 8), np.random.default_rng(0))
    with pytest.raises(ValueError):
        CIPEncoder((16,), np.random.default_rng(0))


def test_cip_rejects_wrong_patch_length():
    enc = CIPEncoder((16, 8, 4), np.random.default_rng(0))
    with pytest.raises(ValueError):
        cip_encode(enc, np.zeros(17))


def test_cip_autoencoder_gradients():
    ae = CIPAutoencoder((36, 24, 12), seed=3, dtype=np.float64)
    rng = np.random.default_rng(4)
    x = rng.random((4, 36))

    def loss():
        rec = ae(Tensor(x))
        d = ad.sub(rec, Tensor(x))
        return ad.mean_(ad.mul(d, d))

    model_grad_check(ae, loss, n_coords=20)


# ---------------------------------------------------------------------------
# conditional denoiser
# ---------------------------------------------------------------------------


def test_denoiser_output_shape_and_determinism():
    model = ConditionalDenoiser(TINY_DENOISER)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 8, 8)).astype(np.float32)
    cond = rng.standard_normal((3, 16)).astype(np.float32)
    t = np.array([1, 7, 13])
    a = denoise_predict(model, x, cond, t)
    b = denoise_predict(model, x, cond, t)
    assert a.shape == (3, 8, 8)
    assert np.array_equal(a, b)


def test_denoiser_single_patch_interface():
    model = ConditionalDenoiser(TINY_DENOISER)
    rng = np.random.default_rng(6)
    out = denoise_predict(model, rng.standard_normal((8, 8)),
                          rng.standard_normal(16), 5)
    assert out.shape == (8, 8)


def test_denoiser_conditioning_sensitivity():
    model = ConditionalDenoiser(TINY_DENOISER)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 8, 8)).astype(np.float32)
    c1 = rng.standard_normal((1, 16)).astype(np.float32)
    c2 = c1 + rng.standard_normal((1, 16)).astype(np.float32)
    a = denoise_predict(model, x, c1, 3)
    b = denoise_predict(model, x, c2, 3)
    assert np.linalg.norm(a - b) > 0


def test_denoiser_time_sensitivity_shared_params():
    model = ConditionalDenoiser(TINY_DENOISER)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 8, 8)).astype(np.float32)
    c = rng.standard_normal((1, 16)).astype(np.float32)
    before = {k: t.data.copy() for k, t in model.parameters().items()}
    a = denoise_predict(model, x, c, 1)
    b = denoise_predict(model, x, c, 16)
    # the step index changes the output through the embedding alone
    assert np.linalg.norm(a - b) > 0
    for k, t in model.parameters().items():
        assert np.array_equal(before[k], t.data)


def test_denoiser_rejects_bad_cond_dim():
    model = ConditionalDenoiser(TINY_DENOISER)
    with pytest.raises(ValueError):
        denoise_predict(model, np.zeros((8, 8)), np.zeros(7), 1)


def test_denoiser_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(scales=(6, 12), attention_heads=4, cond_dim=16,
                       cond_tokens=4)
    with pytest.raises(ValueError):
        DenoiserConfig(scales=(8, 16), attention_heads=4, cond_dim=15,
                       cond_tokens=4)


def test_denoiser_gradients():
    model = ConditionalDenoiser(TINY_DENOISER, dtype=np.float64)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 1, 8, 8))
    cond = rng.standard_normal((2, 16))
    eps = rng.standard_normal((2, 1, 8, 8))
    t = np.array([3, 11])

    def loss():
        pred = model(Tensor(x), Tensor(cond), t)
        d = ad.sub(pred, Tensor(eps))
        return ad.mean_(ad.mul(d, d))

    model_grad_check(model, loss, n_coords=20)


# ---------------------------------------------------------------------------
# enhancement net
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("size", [32, 16])
def test_fdunet_preserves_shape(size):
    model = FDUNet(TINY_FDUNET)
    rng = np.random.default_rng(10)
    img = rng.random((size, size)).astype(np.float32)
    out = fd_unet_forward(model, img)
    assert out.shape == (size, size)
    assert np.all(np.isfinite(out))


def test_fdunet_deterministic_inference():
    model = FDUNet(TINY_FDUNET)
    rng = np.random.default_rng(11)
    batch = rng.random((3, 16, 16)).astype(np.float32)
    a = fd_unet_forward(model, batch)
    b = fd_unet_forward(model, batch)
    assert np.array_equal(a, b)


def test_fdunet_gradients():
    model = FDUNet(TINY_FDUNET, dtype=np.float64)
    rng = np.random.default_rng(12)
    x = rng.random((2, 1, 16, 16))
    y = rng.random((2, 1, 16, 16))

    def loss():
        pred = model(Tensor(x))
        d = ad.sub(pred, Tensor(y))
        return ad.mean_(ad.mul(d, d))

    model_grad_check(model, loss, n_coords=20)
