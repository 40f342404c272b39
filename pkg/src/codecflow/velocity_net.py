"""U-shaped Conformer velocity field ``v(state, cond, t)``.

The network runs at a constant frame rate: an encoder stack whose block
outputs are kept, then a decoder stack where block ``j`` first adds the
output of encoder block ``L - j + 1`` (outermost pairs with outermost).
Time and frame position enter once, as sinusoidal encodings added after the
input projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from codecflow.errors import ConfigurationError, UsageError
from codecflow.numerics import Conv1d, LayerNorm, Linear, Module, Tensor, ops, same_padding

TIME_SCALE = 1000.0
MAX_PERIOD = 10000.0


@dataclass
class UConformerConfig:
    latent_dim: int = 32
    cond_dim: int = 32
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    enc_layers: int = 3
    dec_layers: int = 3
    conv_kernel: int = 7

    def validate(self) -> None:
        if self.model_dim % self.heads:
            raise ConfigurationError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.model_dim % 2:
            raise ConfigurationError("model_dim must be even for sinusoidal encodings")
        if self.enc_layers != self.dec_layers:
            raise ConfigurationError("enc_layers must equal dec_layers (skips pair one to one)")
        if self.conv_kernel % 2 == 0:
            raise ConfigurationError("conv_kernel must be odd for same padding")


def sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved ``[sin, cos]`` pairs, frequencies ``MAX_PERIOD ** (-2i / dim)``."""
    positions = np.asarray(positions, dtype=np.float64)
    freqs = MAX_PERIOD ** (-np.arange(dim // 2) * 2.0 / dim)
    angles = positions[..., None] * freqs
    out = np.empty(positions.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def time_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of flow time ``t`` in [0, 1] (scalar or per item)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise UsageError(f"flow time must lie in [0, 1], got {t}")
    return sinusoid(t * TIME_SCALE, dim)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    return sinusoid(np.arange(length), dim)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.up = Linear(dim, hidden, rng)
        self.down = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(ops.swish(self.up(self.norm(x))))


class SelfAttention(Module):
    """Unmasked multi-head self-attention over ``[B, T, M]``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.norm = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, m = x.shape
        return ops.transpose(ops.reshape(x, (b, t, self.heads, m // self.heads)), (0, 2, 1, 3))

    def forward(self, x: Tensor, return_weights: bool = False):
        b, t, m = x.shape
        h = self.norm(x)
        q, k, v = self._split(self.q(h)), self._split(self.k(h)), self._split(self.v(h))
        scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(m // self.heads))
        weights = ops.softmax(scores, axis=-1)
        ctx = ops.reshape(ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3)), (b, t, m))
        out = self.out(ctx)
        return (out, weights.data) if return_weights else out


class ConvModule(Module):
    """Pointwise + GLU, depthwise conv, norm, swish, pointwise (``[B, T, M]``)."""

    def __init__(self, dim: int, kernel: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.pointwise_in = Linear(dim, 2 * dim, rng)
        self.depthwise = Conv1d(dim, dim, kernel, rng, padding=same_padding(kernel), depthwise=True)
        self.mid_norm = LayerNorm(dim)
        self.pointwise_out = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = ops.glu(self.pointwise_in(self.norm(x)), axis=-1)
        h = ops.transpose(self.depthwise(ops.transpose(h, (0, 2, 1))), (0, 2, 1))
        return self.pointwise_out(ops.swish(self.mid_norm(h)))


class ConformerBlock(Module):
    def __init__(self, cfg: UConformerConfig, rng: np.random.Generator):
        self.ff1 = FeedForward(cfg.model_dim, cfg.ffn_dim, rng)
        self.attn = SelfAttention(cfg.model_dim, cfg.heads, rng)
        self.conv = ConvModule(cfg.model_dim, cfg.conv_kernel, rng)
        self.ff2 = FeedForward(cfg.model_dim, cfg.ffn_dim, rng)
        self.norm = LayerNorm(cfg.model_dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn(x)
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.norm(x)


class UConformer(Module):
    def __init__(self, cfg: UConformerConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.proj_in = Linear(cfg.latent_dim + cfg.cond_dim, cfg.model_dim, rng)
        self.encoder = [ConformerBlock(cfg, rng) for _ in range(cfg.enc_layers)]
        self.decoder = [ConformerBlock(cfg, rng) for _ in range(cfg.dec_layers)]
        self.proj_out = Linear(cfg.model_dim, cfg.latent_dim, rng)

    def forward(self, state, cond, t, skips: bool = True) -> Tensor:
        """Velocity ``[B, D, T]`` for ``state[B, D, T]``, ``cond[B, C, T]``, time ``t``.

        ``skips=False`` drops the encoder-to-decoder connections (test hook).
        """
        state, cond = ops.as_tensor(state), ops.as_tensor(cond)
        cfg = self.cfg
        if state.ndim != 3 or state.shape[1] != cfg.latent_dim:
            raise UsageError(f"state must be [B, {cfg.latent_dim}, T], got {state.shape}")
        if cond.ndim != 3 or cond.shape[1] != cfg.cond_dim:
            raise UsageError(f"cond must be [B, {cfg.cond_dim}, T], got {cond.shape}")
        if state.shape[0] != cond.shape[0] or state.shape[2] != cond.shape[2]:
            raise UsageError(f"state {state.shape} and cond {cond.shape} disagree on B or T")
        b, _, n = state.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        x = ops.transpose(ops.concat([state, cond], axis=1), (0, 2, 1))
        enc = time_embed(t, cfg.model_dim)[:, None, :] + positional_encoding(n, cfg.model_dim)[None]
        h = self.proj_in(x) + Tensor(enc.astype(x.dtype))
        cache = []
        for block in self.encoder:
            h = block(h)
            cache.append(h)
        for j, block in enumerate(self.decoder):
            if skips:
                h = h + cache[-1 - j]
            h = block(h)
        return ops.transpose(self.proj_out(h), (0, 2, 1))
