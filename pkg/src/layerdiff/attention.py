"""Self-attention with a learnable 2x2 foreground/background logit bias."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Tensor


class SpatialBias(Module):
    """``alpha_st[s, t]`` is added to logits where query is in region s, key in t."""

    def __init__(self, init=None):
        self.alpha_st = T.parameter(np.zeros((2, 2)) if init is None else init)


class TokenMask:
    """Binary per-token region labels (0 background, 1 foreground)."""

    def __init__(self, m):
        m = np.asarray(m)
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("token mask values must be 0 or 1")
        self.m = m.astype(np.int64)

    def __len__(self):
        return self.m.shape[-1]

    def onehot(self) -> np.ndarray:
        """``... x n x 2`` region indicator."""
        return np.stack([1 - self.m, self.m], axis=-1).astype(np.float64)


def attention_logits(Q, K) -> Tensor:
    Q, K = T.as_tensor(Q), T.as_tensor(K)
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError(f"query/key width mismatch {Q.shape[-1]} vs {K.shape[-1]}")
    return T.matmul(Q, T.transpose(K, _swap_last(K.ndim))) * (1.0 / math.sqrt(Q.shape[-1]))


def _swap_last(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def sma_bias(mask, bias: SpatialBias) -> Tensor:
    """Bias matrix with entry ``(i, j) = alpha[m_i, m_j]``.

    Built as ``E alpha E^T`` with ``E`` the one-hot region matrix, so each entry
    is exactly one alpha value and ``d/d alpha`` falls out of the matmul rule.
    """
    if not isinstance(mask, TokenMask):
        mask = TokenMask(mask)
    E = mask.onehot()
    return T.matmul(T.matmul(E, bias.alpha_st), np.swapaxes(E, -1, -2))


def attend(logits, V) -> Tensor:
    return T.matmul(T.softmax(logits, axis=-1), V)


def vanilla_attention(Q, K, V) -> Tensor:
    return attend(attention_logits(Q, K), V)


def sma_attention(Q, K, V, mask, bias: SpatialBias) -> Tensor:
    """``softmax(QK^T/sqrt(d) + sma_bias) V``.

    Leading batch/head axes are allowed; ``mask`` must broadcast against the
    logits' leading axes (a ``B x n`` mask is expanded over heads by the caller).
    """
    return attend(attention_logits(Q, K) + sma_bias(mask, bias), V)


def latent_token_mask(mask_image, latent_h: int, latent_w: int) -> TokenMask:
    """Average-pool a pixel mask onto a ``latent_h x latent_w`` grid, then threshold
    at 0.5 (ties count as foreground). Returns a flattened row-major TokenMask."""
    m = np.asarray(mask_image.data if isinstance(mask_image, Tensor) else mask_image, dtype=np.float64)
    return TokenMask(pool_mask(m, latent_h, latent_w).reshape(m.shape[:-2] + (-1,)))


def pool_mask(m, out_h: int, out_w: int, threshold: bool = True) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    H, W = m.shape[-2:]
    if H % out_h or W % out_w:
        raise ValueError(f"mask extent {H}x{W} not divisible by {out_h}x{out_w}")
    fh, fw = H // out_h, W // out_w
    pooled = m.reshape(m.shape[:-2] + (out_h, fh, out_w, fw)).mean(axis=(-3, -1))
    if not threshold:
        return pooled
    return (pooled >= 0.5).astype(np.int64)
