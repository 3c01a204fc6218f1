"""Two-level UNet noise predictor with branch-routed attention.

The lowest level carries one attention block: mask-biased self-attention
followed by cross-attention to the condition tokens. Every Q/K/V projection in
that block goes through the active branch's low-rank adapter.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from . import tensor as T
from .attention import SpatialBias, TokenMask, attention_logits, attend, latent_token_mask, pool_mask, sma_bias
from .conditioning import MorphologyEncoder
from .config import ModelConfig
from .lora import BranchRouter, apply_projection
from .nn import Conv2d, GroupNorm, Linear, Module, init_normal, timestep_embedding
from .rng import DRng
from .tensor import Tensor


class LatentCodec:
    """Space-to-depth rearrangement standing in for a learned autoencoder.

    Latent channel ``c * p * p + i * p + j`` holds pixel ``(p*y + i, p*x + j)`` of
    image channel ``c``.
    """

    def __init__(self, patch: int = 2, mode: str = "patchify"):
        if mode not in ("patchify", "identity"):
            raise ValueError(f"unknown codec mode {mode!r}")
        self.patch = patch if mode == "patchify" else 1
        self.mode = mode

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        p = self.patch
        *lead, C, H, W = x.shape
        if H % p or W % p:
            raise ValueError(f"image extent {H}x{W} not divisible by patch {p}")
        y = x.reshape(*lead, C, H // p, p, W // p, p)
        n = len(lead)
        y = y.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3)
        return np.ascontiguousarray(y.reshape(*lead, C * p * p, H // p, W // p))

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
        p = self.patch
        *lead, Cz, h, w = z.shape
        if Cz % (p * p):
            raise ValueError("latent channels not divisible by patch area")
        C = Cz // (p * p)
        n = len(lead)
        y = z.reshape(*lead, C, p, p, h, w)
        y = y.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2)
        return np.ascontiguousarray(y.reshape(*lead, C, h * p, w * p))


def encode_latent(x, patch: int = 2) -> np.ndarray:
    return LatentCodec(patch).encode(x)


def decode_latent(z, patch: int = 2) -> np.ndarray:
    return LatentCodec(patch).decode(z)


class OffsetEncoder(Module):
    """Bias-free 3x3 conv from the pooled union mask to latent channels, zero-initialised."""

    def __init__(self, latent_channels: int, rng: DRng):
        self.conv = Conv2d(1, latent_channels, rng, bias=False, zero=True)

    def __call__(self, mask) -> Tensor:
        m = T.as_tensor(mask)
        if m.ndim == 2:
            m = T.reshape(m, (1, 1) + m.shape)
        elif m.ndim == 3:
            m = T.reshape(m, (m.shape[0], 1) + m.shape[1:])
        return self.conv(m)


def morph_band(mask, width: int = 1) -> np.ndarray:
    """``dilate(mask, w) - erode(mask, w)`` with a 3x3 structuring element.

    Outside the image counts as unchanged, so a full mask has an empty band.
    """
    m = np.asarray(mask) > 0.5
    if width == 0:
        return np.zeros(m.shape)
    st = np.ones((3,) * m.ndim) if m.ndim == 2 else _plane_structure(m.ndim)
    dil = ndimage.binary_dilation(m, st, iterations=width)
    ero = ndimage.binary_erosion(m, st, iterations=width, border_value=1)
    return (dil & ~ero).astype(np.float64)


def _plane_structure(ndim: int) -> np.ndarray:
    st = np.zeros((3,) * ndim, dtype=bool)
    st[(1,) * (ndim - 2) + (slice(None), slice(None))] = True
    return st


def box_blur(x) -> Tensor:
    """3x3 mean over the in-image neighbours of each cell (per channel)."""
    x = T.as_tensor(x)
    B, C, H, W = x.shape
    ones = np.ones((1, 1, 3, 3))
    counts = ndimage.convolve(np.ones((H, W)), np.ones((3, 3)), mode="constant")
    summed = T.conv2d(T.reshape(x, (B * C, 1, H, W)), ones, pad=1)
    return T.reshape(summed, (B, C, H, W)) * (1.0 / counts)


def boundary_smoothing(features, mask, width: int = 1, enabled: bool = True) -> Tensor:
    """Replace features inside the mask's boundary band by their 3x3 box blur."""
    features = T.as_tensor(features)
    if not enabled:
        return features
    m = np.asarray(mask, dtype=np.float64)
    squeeze = features.ndim == 3
    if squeeze:
        features = T.reshape(features, (1,) + features.shape)
        m = m[None]
    band = morph_band(m, width)[:, None]
    out = features * (1.0 - band) + box_blur(features) * band
    return T.reshape(out, out.shape[1:]) if squeeze else out


def layer_exchange(fg, bg, gamma: float = 0.1, enabled: bool = True):
    """Each side becomes ``(1 - gamma) * own + gamma * other``."""
    fg, bg = T.as_tensor(fg), T.as_tensor(bg)
    if fg.shape != bg.shape:
        raise ValueError(f"layer exchange extent mismatch {fg.shape} vs {bg.shape}")
    if not enabled:
        return fg, bg
    return fg * (1.0 - gamma) + bg * gamma, bg * (1.0 - gamma) + fg * gamma


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int, groups: int, rng: DRng):
        self.norm1 = GroupNorm(groups, c_in)
        self.conv1 = Conv2d(c_in, c_out, rng.spawn("conv1"))
        self.temb = Linear(temb_dim, c_out, rng.spawn("temb"))
        self.norm2 = GroupNorm(groups, c_out)
        self.conv2 = Conv2d(c_out, c_out, rng.spawn("conv2"))
        self.skip = Conv2d(c_in, c_out, rng.spawn("skip"), k=1) if c_in != c_out else None

    def __call__(self, x, temb) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        e = self.temb(temb)
        h = h + T.reshape(e, e.shape + (1, 1))
        h = self.conv2(T.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class AttentionBlock(Module):
    """Self-attention (optionally mask-biased) then cross-attention to the condition."""

    def __init__(self, channels: int, d_cond: int, heads: int, groups: int, rng: DRng, use_sma: bool):
        self.heads = heads
        self.norm1 = GroupNorm(groups, channels)
        self.norm2 = GroupNorm(groups, channels)
        std = 1.0 / math.sqrt(channels)
        self.w = {
            "self.Q": init_normal(rng.spawn("self.Q"), (channels, channels), std),
            "self.K": init_normal(rng.spawn("self.K"), (channels, channels), std),
            "self.V": init_normal(rng.spawn("self.V"), (channels, channels), std),
            "cross.Q": init_normal(rng.spawn("cross.Q"), (channels, channels), std),
            "cross.K": init_normal(rng.spawn("cross.K"), (channels, d_cond), 1.0 / math.sqrt(d_cond)),
            "cross.V": init_normal(rng.spawn("cross.V"), (channels, d_cond), 1.0 / math.sqrt(d_cond)),
        }
        self.out_self = Linear(channels, channels, rng.spawn("out_self"))
        self.out_cross = Linear(channels, channels, rng.spawn("out_cross"))
        self.bias = SpatialBias() if use_sma else None

    def sites(self, prefix: str) -> dict:
        return {f"{prefix}.{name}": tuple(w.shape) for name, w in self.w.items()}

    def _split(self, x):
        B, n, C = x.shape
        return T.transpose(T.reshape(x, (B, n, self.heads, C // self.heads)), (0, 2, 1, 3))

    def _merge(self, x):
        B, H, n, dh = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, n, H * dh))

    def _proj(self, x, site, adapters, prefix):
        adapter = adapters.get(f"{prefix}.{site}") if adapters is not None else None
        return apply_projection(x, self.w[site], adapter)

    def __call__(self, h, cond, token_mask: TokenMask | None, adapters, prefix: str) -> Tensor:
        B, C, H, W = h.shape
        x = T.transpose(T.reshape(self.norm1(h), (B, C, H * W)), (0, 2, 1))
        q = self._split(self._proj(x, "self.Q", adapters, prefix))
        k = self._split(self._proj(x, "self.K", adapters, prefix))
        v = self._split(self._proj(x, "self.V", adapters, prefix))
        logits = attention_logits(q, k)
        if self.bias is not None:
            logits = logits + sma_bias(TokenMask(token_mask.m[:, None, :]), self.bias)
        a = self.out_self(self._merge(attend(logits, v)))
        h = h + T.reshape(T.transpose(a, (0, 2, 1)), (B, C, H, W))

        x = T.transpose(T.reshape(self.norm2(h), (B, C, H * W)), (0, 2, 1))
        q = self._split(self._proj(x, "cross.Q", adapters, prefix))
        k = self._split(self._proj(cond, "cross.K", adapters, prefix))
        v = self._split(self._proj(cond, "cross.V", adapters, prefix))
        a = self.out_cross(self._merge(attend(attention_logits(q, k), v)))
        return h + T.reshape(T.transpose(a, (0, 2, 1)), (B, C, H, W))


class Denoiser(Module):
    """Epsilon predictor shared by all branches."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = DRng(cfg.seed).spawn("denoiser")
        w0, w1 = cfg.widths
        Cl = cfg.latent_channels
        self.codec = LatentCodec(cfg.patch, cfg.codec)
        self.temb1 = Linear(w0, cfg.temb_dim, rng.spawn("temb1"))
        self.temb2 = Linear(cfg.temb_dim, cfg.temb_dim, rng.spawn("temb2"))
        self.conv_in = Conv2d(Cl, w0, rng.spawn("conv_in"))
        self.down_block = ResBlock(w0, w0, cfg.temb_dim, cfg.groups, rng.spawn("down_block"))
        self.downsample = Conv2d(w0, w1, rng.spawn("downsample"), stride=2)
        self.mid1 = ResBlock(w1, w1, cfg.temb_dim, cfg.groups, rng.spawn("mid1"))
        self.attn = AttentionBlock(w1, cfg.d_cond, cfg.heads, cfg.groups, rng.spawn("attn"), cfg.use_sma)
        self.mid2 = ResBlock(w1, w1, cfg.temb_dim, cfg.groups, rng.spawn("mid2"))
        self.upsample = Conv2d(w1, w0, rng.spawn("upsample"))
        self.up_block = ResBlock(2 * w0, w0, cfg.temb_dim, cfg.groups, rng.spawn("up_block"))
        self.norm_out = GroupNorm(cfg.groups, w0)
        self.conv_out = Conv2d(w0, Cl, rng.spawn("conv_out"))
        self.offsets = OffsetEncoder(Cl, rng.spawn("offsets")) if cfg.use_offsets else None
        self.router = (BranchRouter.build(self.attn.sites("attn"), cfg.lora_rank, cfg.lora_alpha,
                                          rng.spawn("router"))
                       if cfg.use_lora else None)

    # -- geometry ----------------------------------------------------------
    @property
    def latent_shape(self):
        s = self.cfg.latent_size
        return (self.cfg.latent_channels, s, s)

    @property
    def attn_size(self) -> int:
        return self.cfg.latent_size // 2

    def token_mask(self, mask) -> TokenMask:
        """Pixel (or latent) mask(s) ``[..., H, W]`` -> batch TokenMask at attention resolution."""
        if isinstance(mask, TokenMask):
            return mask if mask.m.ndim == 2 else TokenMask(mask.m[None])
        m = np.asarray(mask, dtype=np.float64)
        if m.ndim == 2:
            m = m[None]
        return latent_token_mask(m, self.attn_size, self.attn_size)

    def attn_grid(self, mask) -> np.ndarray:
        tm = self.token_mask(mask)
        return tm.m.reshape(-1, self.attn_size, self.attn_size)

    # -- pieces ------------------------------------------------------------
    def inject_spatial_offsets(self, z0, union_mask) -> Tensor:
        """``z0 + E(union)``; the mask is average-pooled to the latent extent."""
        z0 = T.as_tensor(z0)
        if self.offsets is None:
            return z0
        m = np.asarray(union_mask, dtype=np.float64)
        s = z0.shape[-1]
        if m.shape[-1] != s:
            m = pool_mask(m, s, s, threshold=False)
        if m.shape[-2:] != z0.shape[-2:]:
            raise ValueError(f"union mask extent {m.shape[-2:]} does not match latent {z0.shape[-2:]}")
        off = self.offsets(m)
        if z0.ndim == 3:
            off = T.reshape(off, off.shape[1:])
        return z0 + off

    def _temb(self, t):
        e = timestep_embedding(t, self.cfg.widths[0])
        return self.temb2(T.silu(self.temb1(e)))

    def _down(self, z, t):
        temb = self._temb(t)
        h0 = self.down_block(self.conv_in(z), temb)
        h = self.mid1(self.downsample(h0), temb)
        return h, h0, temb

    def _attend(self, h, cond, branch, tmask):
        if branch not in ("fg", "bg"):
            raise ValueError(f"unknown branch {branch!r}")
        adapters = self.router.adapters(branch) if self.router is not None else None
        return self.attn(h, cond, tmask, adapters, "attn")

    def _up(self, h, h0, temb):
        h = self.mid2(h, temb)
        h = self.upsample(T.upsample2x(h))
        h = self.up_block(T.concat([h, h0], axis=1), temb)
        return self.conv_out(T.silu(self.norm_out(h)))

    @staticmethod
    def _batch(z, t, cond):
        z = T.as_tensor(z)
        single = z.ndim == 3
        if single:
            z = T.reshape(z, (1,) + z.shape)
        t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (z.shape[0],))
        cond = T.as_tensor(getattr(cond, "tokens", cond))
        if cond.ndim == 2:
            cond = T.reshape(cond, (1,) + cond.shape)
        return z, t, cond, single

    def predict_noise(self, z_t, t, cond, branch: str, mask) -> Tensor:
        """Predict the noise in ``z_t``. Accepts ``C x h x w`` or batched ``B x C x h x w``.

        ``mask`` is the branch's region mask: the target instance for ``fg``,
        the union for ``bg``.
        """
        z, t, cond, single = self._batch(z_t, t, cond)
        if z.shape[1:] != self.latent_shape:
            raise ValueError(f"latent shape {z.shape[1:]} differs from configured {self.latent_shape}")
        tmask = self.token_mask(mask)
        h, h0, temb = self._down(z, t)
        h = self._attend(h, cond, branch, tmask)
        if self.cfg.boundary_smoothing:
            h = boundary_smoothing(h, self.attn_grid(tmask), self.cfg.smoothing_width)
        out = self._up(h, h0, temb)
        return T.reshape(out, out.shape[1:]) if single else out

    def predict_noise_exchange(self, z_fg, z_bg, t_fg, t_bg, cond_fg, cond_bg, mask_fg, mask_bg,
                               groups=None):
        """Joint forward of a foreground batch and a background batch with layer exchange
        after the attention block. ``groups[i]`` names the background element that
        foreground element ``i`` belongs to; background elements receive the mean of
        their foreground partners."""
        zf, tf, cf, _ = self._batch(z_fg, t_fg, cond_fg)
        zb, tb, cb, _ = self._batch(z_bg, t_bg, cond_bg)
        groups = np.zeros(zf.shape[0], dtype=np.int64) if groups is None else np.asarray(groups)
        mf, mb = self.token_mask(mask_fg), self.token_mask(mask_bg)
        hf, hf0, ef = self._down(zf, tf)
        hb, hb0, eb = self._down(zb, tb)
        hf = self._attend(hf, cf, "fg", mf)
        hb = self._attend(hb, cb, "bg", mb)
        if self.cfg.layer_exchange:
            gather = np.zeros((zf.shape[0], zb.shape[0]))
            gather[np.arange(zf.shape[0]), groups] = 1.0
            spread = gather.T / np.maximum(gather.sum(axis=0), 1.0)[:, None]
            bg_for_fg = _mix_batch(gather, hb)
            fg_for_bg = _mix_batch(spread, hf)
            hf, _ = layer_exchange(hf, bg_for_fg, self.cfg.exchange_gamma)
            hb, _ = layer_exchange(hb, fg_for_bg, self.cfg.exchange_gamma)
        if self.cfg.boundary_smoothing:
            hf = boundary_smoothing(hf, self.attn_grid(mf), self.cfg.smoothing_width)
            hb = boundary_smoothing(hb, self.attn_grid(mb), self.cfg.smoothing_width)
        return self._up(hf, hf0, ef), self._up(hb, hb0, eb)


def _mix_batch(weights: np.ndarray, h) -> Tensor:
    """``out[i] = sum_j weights[i, j] * h[j]`` over the batch axis."""
    B, C, H, W = h.shape
    flat = T.reshape(h, (B, C * H * W))
    return T.reshape(T.matmul(weights, flat), (weights.shape[0], C, H, W))


class MildModel(Module):
    """Denoiser plus conditioning encoders: everything a checkpoint persists."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.denoiser = Denoiser(cfg)
        self.encoder = MorphologyEncoder(cfg.image_size, cfg.latent_size, cfg.d_cond,
                                         DRng(cfg.seed).spawn("encoder"), cfg.encoder_hidden,
                                         cfg.use_pose, cfg.use_parsing)

    def fg_only_parameters(self) -> list:
        params = list(self.encoder.fg_only_parameters())
        if self.denoiser.router is not None:
            for adapter in self.denoiser.router.fg_adapters.values():
                params.extend([adapter.A, adapter.B, adapter.alpha])
        return params
