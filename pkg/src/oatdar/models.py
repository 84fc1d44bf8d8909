"""The three trainable blocks: initial-reconstruction enhancer, conditioning
encoder, and the conditional noise-prediction UNet.

All models are plain compositions of the layers module, built determin-
istically from a seed, with a single parameter set shared across timesteps
(the step index enters the denoiser only through its sinusoidal embedding).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (Conv2d, CrossAttentionBlock, GroupNorm, Linear, Module,
                     ModuleList, ResBlock)

# ---------------------------------------------------------------------------
# sinusoidal time embedding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeEmbedding:
    dim: int = 64
    max_period: float = 10000.0

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ValueError("embedding dim must be even and >= 2")


def time_embed(t, cfg: TimeEmbedding) -> np.ndarray:
    """Embed integer steps as [sin(t w_i)..., cos(t w_i)...] with
    w_i = max_period**(-2i/dim). Accepts a scalar or a 1-D batch."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("timesteps must be >= 0")
    half = cfg.dim // 2
    freqs = cfg.max_period ** (-2.0 * np.arange(half) / cfg.dim)
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# ---------------------------------------------------------------------------
# conditioning encoder (kept from an autoencoder after pretraining)
# ---------------------------------------------------------------------------


class CIPEncoder(Module):
    """Strictly narrowing MLP with rectified-linear hidden activations."""

    def __init__(self, layer_dims, rng, dtype=np.float32):
        super().__init__()
        dims = tuple(int(d) for d in layer_dims)
        if len(dims) < 2 or any(a <= b for a, b in zip(dims, dims[1:])):
            raise ValueError(f"layer_dims must strictly decrease, got {dims}")
        self.layer_dims = dims
        self.layers = ModuleList(
            Linear(a, b, rng, dtype=dtype) for a, b in zip(dims, dims[1:]))

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def __call__(self, x):
        for lin in self.layers:
            x = ad.relu(lin(x))
        return x


class CIPAutoencoder(Module):
    """Mirror-image decoder used only during pretraining; the encoder is the
    deliverable."""

    def __init__(self, layer_dims, seed=0, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.encoder = CIPEncoder(layer_dims, rng, dtype=dtype)
        dims = self.encoder.layer_dims[::-1]
        decoder = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            decoder.append(Linear(a, b, rng, dtype=dtype))
        self.decoder = ModuleList(decoder)

    def __call__(self, x):
        z = self.encoder(x)
        for i, lin in enumerate(self.decoder):
            z = lin(z)
            if i < len(self.decoder) - 1:
                z = ad.relu(z)
        return z


def cip_encode(encoder: CIPEncoder, patch: np.ndarray) -> np.ndarray:
    """Encode one flattened patch (or a batch) to its conditioning vector."""
    x = np.asarray(patch)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.shape[1] != encoder.layer_dims[0]:
        raise ValueError(f"patch length {x.shape[1]} != encoder input "
                         f"{encoder.layer_dims[0]}")
    out = encoder(Tensor(x.astype(np.float32))).data
    return out[0] if single else out


# ---------------------------------------------------------------------------
# conditional noise-prediction UNet
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    scales: tuple = (128, 256, 512, 1024)
    resblocks_per_scale: int = 2
    attention_heads: int = 4
    cond_dim: int = 1024
    cond_tokens: int = 16
    time_embed_dim: int = 64
    norm_groups: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.cond_dim % self.cond_tokens:
            raise ValueError("cond_dim must split evenly into cond_tokens")
        for c in self.scales:
            if c % self.attention_heads:
                raise ValueError(f"channel width {c} not divisible by "
                                 f"{self.attention_heads} heads")

    @property
    def token_dim(self) -> int:
        return self.cond_dim // self.cond_tokens

    def to_dict(self) -> dict:
        return {"scales": list(self.scales),
                "resblocks_per_scale": self.resblocks_per_scale,
                "attention_heads": self.attention_heads,
                "cond_dim": self.cond_dim, "cond_tokens": self.cond_tokens,
                "time_embed_dim": self.time_embed_dim,
                "norm_groups": self.norm_groups, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["scales"] = tuple(d["scales"])
        return cls(**d)


class ConditionalDenoiser(Module):
    """UNet predicting the corrupting noise of a patch, conditioned at every
    scale of both paths through cross-attention over the encoded initial
    reconstruction, with the timestep injected through resblock biases."""

    def __init__(self, cfg: DenoiserConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        self.time_cfg = TimeEmbedding(dim=cfg.time_embed_dim)
        rng = np.random.default_rng(cfg.seed)
        ch = cfg.scales
        td = cfg.time_embed_dim
        self.time_mlp1 = Linear(td, td, rng, dtype=dtype)
        self.time_mlp2 = Linear(td, td, rng, dtype=dtype)
        self.conv_in = Conv2d(1, ch[0], 3, rng, dtype=dtype)

        def res(a, b):
            return ResBlock(a, b, td, rng, groups=cfg.norm_groups, dtype=dtype)

        def attn(c):
            return CrossAttentionBlock(c, cfg.token_dim, cfg.attention_heads,
                                       rng, dtype=dtype)

        self.down_res = ModuleList()
        self.down_attn = ModuleList()
        prev = ch[0]
        for c in ch:
            stage = ModuleList()
            for r in range(cfg.resblocks_per_scale):
                stage.append(res(prev if r == 0 else c, c))
            prev = c
            self.down_res.append(stage)
            self.down_attn.append(attn(c))
        self.mid_res1 = res(ch[-1], ch[-1])
        self.mid_attn = attn(ch[-1])
        self.mid_res2 = res(ch[-1], ch[-1])
        self.up_res = ModuleList()
        self.up_attn = ModuleList()
        for i in reversed(range(len(ch) - 1)):
            stage = ModuleList()
            for r in range(cfg.resblocks_per_scale):
                stage.append(res(ch[i + 1] + ch[i] if r == 0 else ch[i], ch[i]))
            self.up_res.append(stage)
            self.up_attn.append(attn(ch[i]))
        self.norm_out = GroupNorm(ch[0], cfg.norm_groups, dtype=dtype)
        self.conv_out = Conv2d(ch[0], 1, 3, rng, dtype=dtype)
        self._up_mats = {}

    def _upsample(self, x):
        n, c, h, w = x.data.shape
        key = (h, w, x.data.dtype)
        if key not in self._up_mats:
            self._up_mats[key] = ad.upsample2_matrices(h, w, dtype=x.data.dtype)
        uh, uw = self._up_mats[key]
        return ad.upsample2_bilinear(x, uh, uw)

    def _cond_tokens(self, cond):
        cond = ad.as_tensor(cond)
        n = cond.data.shape[0]
        if cond.data.shape[1] != self.cfg.cond_dim:
            raise ValueError(f"conditioning dim {cond.data.shape[1]} != "
                             f"{self.cfg.cond_dim}")
        return ad.reshape(cond, (n, self.cfg.cond_tokens, self.cfg.token_dim))

    def __call__(self, x, cond, t_batch):
        """x: (N, 1, H, W) Tensor/array; cond: (N, cond_dim); t: (N,) ints."""
        x = ad.as_tensor(x)
        n = x.data.shape[0]
        temb_np = time_embed(np.asarray(t_batch), self.time_cfg)
        temb = self.time_mlp2(ad.silu(self.time_mlp1(
            Tensor(temb_np.astype(self.dtype)))))
        cond_tokens = self._cond_tokens(cond)

        h = self.conv_in(x)
        skips = []
        n_scales = len(self.cfg.scales)
        for i in range(n_scales):
            for block in self.down_res[i]:
                h = block(h, temb)
            h = self.down_attn[i](h, cond_tokens)
            skips.append(h)
            if i < n_scales - 1:
                h = ad.avg_pool2(h)
        h = self.mid_res1(h, temb)
        h = self.mid_attn(h, cond_tokens)
        h = self.mid_res2(h, temb)
        for j, i in enumerate(reversed(range(n_scales - 1))):
            h = self._upsample(h)
            h = ad.concat([h, skips[i]], axis=1)
            for block in self.up_res[j]:
                h = block(h, temb)
            h = self.up_attn[j](h, cond_tokens)
        return self.conv_out(ad.silu(self.norm_out(h)))


def denoise_predict(model: ConditionalDenoiser, x_t, cond, t) -> np.ndarray:
    """Inference-mode noise prediction for arrays (batch or single patch)."""
    x = np.asarray(x_t)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    cond = np.asarray(cond)
    if cond.ndim == 1:
        cond = cond[None]
    t_batch = np.atleast_1d(np.asarray(t))
    if t_batch.size == 1 and x.shape[0] > 1:
        t_batch = np.full(x.shape[0], int(t_batch[0]))
    out = model(Tensor(x.astype(model.dtype)),
                Tensor(cond.astype(model.dtype)), t_batch).data
    out = out[:, 0]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# dense-skip enhancement UNet for the initial reconstruction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FDUNetConfig:
    scales: tuple = (16, 32, 64)
    growth: int = 16
    layers_per_block: int = 4
    seed: int = 0

    def to_dict(self) -> dict:
        return {"scales": list(self.scales), "growth": self.growth,
                "layers_per_block": self.layers_per_block, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["scales"] = tuple(d["scales"])
        return cls(**d)


class DenseBlock(Module):
    """Each layer convolves the concatenation of everything before it."""

    def __init__(self, c_in, growth, layers, rng, dtype=np.float32):
        super().__init__()
        self.convs = ModuleList()
        c = c_in
        for _ in range(layers):
            self.convs.append(Conv2d(c, growth, 3, rng, dtype=dtype))
            c += growth
        self.out_channels = c

    def __call__(self, x):
        feats = x
        for conv in self.convs:
            y = ad.relu(conv(feats))
            feats = ad.concat([feats, y], axis=1)
        return feats


class FDUNet(Module):
    """Multi-scale dense-block UNet: max-pool down, bilinear up, dense skip
    connections inside every block, 1x1 transitions, 1x1 output head."""

    def __init__(self, cfg: FDUNetConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        ch = cfg.scales
        self.conv_in = Conv2d(1, ch[0], 3, rng, dtype=dtype)
        self.enc_blocks = ModuleList()
        self.enc_trans = ModuleList()
        prev = ch[0]
        for c in ch:
            db = DenseBlock(prev, cfg.growth, cfg.layers_per_block, rng,
                            dtype=dtype)
            self.enc_blocks.append(db)
            self.enc_trans.append(Conv2d(db.out_channels, c, 1, rng,
                                         dtype=dtype))
            prev = c
        self.dec_blocks = ModuleList()
        self.dec_trans = ModuleList()
        for i in reversed(range(len(ch) - 1)):
            c_in = ch[i + 1] + ch[i]
            db = DenseBlock(c_in, cfg.growth, cfg.layers_per_block, rng,
                            dtype=dtype)
            self.dec_blocks.append(db)
            self.dec_trans.append(Conv2d(db.out_channels, ch[i], 1, rng,
                                         dtype=dtype))
        self.head = Conv2d(ch[0], 1, 1, rng, dtype=dtype)
        self._up_mats = {}

    def _upsample(self, x):
        n, c, h, w = x.data.shape
        key = (h, w, x.data.dtype)
        if key not in self._up_mats:
            self._up_mats[key] = ad.upsample2_matrices(h, w, dtype=x.data.dtype)
        uh, uw = self._up_mats[key]
        return ad.upsample2_bilinear(x, uh, uw)

    def __call__(self, x):
        x = ad.as_tensor(x)
        h = ad.relu(self.conv_in(x))
        skips = []
        n_scales = len(self.cfg.scales)
        for i in range(n_scales):
            h = ad.relu(self.enc_trans[i](self.enc_blocks[i](h)))
            skips.append(h)
            if i < n_scales - 1:
                h = ad.max_pool2(h)
        for j, i in enumerate(reversed(range(n_scales - 1))):
            h = self._upsample(h)
            h = ad.concat([h, skips[i]], axis=1)
            h = ad.relu(self.dec_trans[j](self.dec_blocks[j](h)))
        return self.head(h)


def fd_unet_forward(model: FDUNet, image: np.ndarray) -> np.ndarray:
    """Inference-mode enhancement of one image (or an NHW batch)."""
    x = np.asarray(image)
    single = x.ndim == 2
    if single:
        x = x[None]
    out = model(Tensor(x[:, None].astype(model.dtype))).data[:, 0]
    if not np.all(np.isfinite(out)):
        raise ValueError("enhancer produced non-finite values")
    return out[0] if single else out
