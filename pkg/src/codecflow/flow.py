"""Conditional flow matching from LR codec latents to HR codec latents.

The model regresses the constant velocity ``z1 - z0`` of the straight path
``(1 - t) z0 + t z1`` between a Gaussian sample ``z0`` and a normalised HR
latent ``z1``, conditioned on the LR latent and voicing labels.  Sampling
integrates the learned field with forward Euler, mixing conditional and
null-conditioned predictions (classifier-free guidance).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from codecflow.errors import ConfigurationError, NumericDivergenceError, UsageError
from codecflow.latents import LatentEmbedding
from codecflow.numerics import Conv1d, Embedding, Module, Tensor, ops, parameter, same_padding
from codecflow.velocity_net import UConformer, UConformerConfig

STD_FLOOR = 1e-5
N_LABELS = 3


@dataclass
class FlowConfig:
    latent_dim: int = 32
    cond_dim: int = 32
    label_dim: int = 16
    steps: int = 25
    guidance: float = 1.5
    p_drop: float = 0.1
    net: UConformerConfig = field(default_factory=UConformerConfig)

    def validate(self) -> None:
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigurationError(f"p_drop must lie in [0, 1), got {self.p_drop}")
        if self.guidance < 0:
            raise ConfigurationError(f"guidance must be >= 0, got {self.guidance}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.net.latent_dim != self.latent_dim or self.net.cond_dim != self.cond_dim:
            raise ConfigurationError("velocity net dims must match latent_dim / cond_dim")


# ---------------------------------------------------------------- normalisation


class RunningStats:
    """Per-channel mean/variance merged batch by batch (parallel-variance update)."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, z: np.ndarray) -> None:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 3 or z.shape[1] != self.mean.size:
            raise ConfigurationError(f"expected [B, {self.mean.size}, T] latents, got {z.shape}")
        flat = z.transpose(1, 0, 2).reshape(z.shape[1], -1)
        n = flat.shape[1]
        if n == 0:
            return
        mean = flat.mean(axis=1)
        m2 = ((flat - mean[:, None]) ** 2).sum(axis=1)
        total = self.count + n
        delta = mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + m2 + delta**2 * (self.count * n / total)
        self.count = total

    def std(self) -> np.ndarray:
        if self.count == 0:
            raise UsageError("no samples accumulated")
        return np.maximum(np.sqrt(self.m2 / self.count), STD_FLOOR)


@dataclass
class NormStats:
    lr_mean: np.ndarray
    lr_std: np.ndarray
    hr_mean: np.ndarray
    hr_std: np.ndarray

    def __post_init__(self):
        for name in ("lr_mean", "lr_std", "hr_mean", "hr_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.lr_std = np.maximum(self.lr_std, STD_FLOOR)
        self.hr_std = np.maximum(self.hr_std, STD_FLOOR)

    @property
    def dim(self) -> int:
        return self.lr_mean.size

    @classmethod
    def identity(cls, dim: int) -> NormStats:
        return cls(np.zeros(dim), np.ones(dim), np.zeros(dim), np.ones(dim))

    @classmethod
    def from_running(cls, lr: RunningStats, hr: RunningStats) -> NormStats:
        return cls(lr.mean, lr.std(), hr.mean, hr.std())


def _channel(v: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(v.reshape(1, -1, 1).astype(like.dtype))


def normalize(z, mean: np.ndarray, std: np.ndarray):
    """Per-channel ``(z - mean) / std`` for ``z[B, D, T]`` (array or tensor)."""
    if isinstance(z, Tensor):
        _check_dim(z.shape, mean)
        return (z - _channel(mean, z)) / _channel(std, z)
    z = np.asarray(z)
    _check_dim(z.shape, mean)
    return ((z - mean[None, :, None]) / std[None, :, None]).astype(z.dtype)


def denormalize(z, mean: np.ndarray, std: np.ndarray):
    if isinstance(z, Tensor):
        _check_dim(z.shape, mean)
        return z * _channel(std, z) + _channel(mean, z)
    z = np.asarray(z)
    _check_dim(z.shape, mean)
    return (z * std[None, :, None] + mean[None, :, None]).astype(z.dtype)


def _check_dim(shape, mean) -> None:
    if len(shape) != 3 or shape[1] != np.size(mean):
        raise ConfigurationError(f"stats have {np.size(mean)} channels, latent has shape {shape}")


# ---------------------------------------------------------------- model


class FlowModel(Module):
    """Condition fusion, learnable null condition and the velocity network."""

    def __init__(self, cfg: FlowConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.label_table = Embedding(N_LABELS, cfg.label_dim, rng)
        self.fuse = Conv1d(cfg.latent_dim + cfg.label_dim, cfg.cond_dim, 3, rng, padding=same_padding(3))
        self.null_condition = parameter(rng.normal(0.0, 0.1, size=cfg.cond_dim))
        self.net = UConformer(cfg.net, rng)
        self.stats: NormStats | None = None

    def require_stats(self) -> NormStats:
        if self.stats is None:
            raise ConfigurationError("flow model has no normalisation statistics")
        return self.stats

    def velocity(self, state, cond, t) -> Tensor:
        return self.net(state, cond, t)

    def null_cond(self, batch: int, length: int) -> Tensor:
        zeros = Tensor(np.zeros((batch, self.cfg.cond_dim, length)))
        return zeros + ops.reshape(self.null_condition, (1, -1, 1))


def fuse_condition(model: FlowModel, z_l, s) -> Tensor:
    """``[B, C, T]`` condition from raw LR latents and voicing labels.

    ``z_l`` is normalised with the LR statistics, concatenated with the
    label embeddings and mixed by a kernel-3 convolution.
    """
    z_l = ops.as_tensor(z_l.values if isinstance(z_l, LatentEmbedding) else z_l)
    s = np.asarray(s)
    if s.ndim == 1:
        s = s[None]
    if z_l.ndim != 3:
        raise UsageError(f"z_l must be [B, D, T], got {z_l.shape}")
    if s.shape != (z_l.shape[0], z_l.shape[2]):
        raise UsageError(f"labels shape {s.shape} does not match latent [B, T] = {(z_l.shape[0], z_l.shape[2])}")
    if s.size and (s.min() < 0 or s.max() >= N_LABELS or not np.issubdtype(s.dtype, np.integer)):
        raise UsageError("voicing labels must be integers in {0, 1, 2}")
    stats = model.require_stats()
    zn = normalize(z_l, stats.lr_mean, stats.lr_std)
    labels = ops.transpose(model.label_table(s), (0, 2, 1))
    return model.fuse(ops.concat([zn, labels], axis=1))


def transport_path(z0, z1, t):
    """Point ``(1 - t) z0 + t z1`` on the straight path and its velocity ``z1 - z0``.

    ``t`` is a scalar or one value per batch item.
    """
    z0, z1 = ops.as_tensor(z0), ops.as_tensor(z1)
    if z0.shape != z1.shape:
        raise UsageError(f"z0 {z0.shape} and z1 {z1.shape} differ in shape")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise UsageError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (z0.ndim - 1))
    tt = Tensor(t.astype(z0.dtype))
    return (1.0 - tt) * z0 + tt * z1, z1 - z0


def drop_condition(cond: Tensor, null: Tensor, mask: np.ndarray) -> Tensor:
    """Swap whole items of ``cond`` for the null condition where ``mask`` is 1."""
    m = Tensor(np.asarray(mask, dtype=cond.dtype).reshape(-1, 1, 1))
    return cond * (1.0 - m) + null * m


def cfm_loss(model, z1, cond, rng: np.random.Generator, p_drop: float | None = None, z0=None, t=None, drop=None) -> Tensor:
    """Mean squared error between the predicted and the path velocity.

    ``t ~ U(0, 1)`` per item, ``z0 ~ N(0, I)`` and a per-item condition drop
    with probability ``p_drop``.  Any of ``z0``, ``t`` and ``drop`` can be
    supplied to pin the random draws.
    """
    z1, cond = ops.as_tensor(z1), ops.as_tensor(cond)
    b = z1.shape[0]
    if p_drop is None:
        p_drop = model.cfg.p_drop
    if t is None:
        t = rng.uniform(0.0, 1.0, size=b)
    if z0 is None:
        z0 = rng.standard_normal(z1.shape).astype(z1.dtype)
    if drop is None:
        drop = rng.uniform(size=b) < p_drop
    # always mixed in, so the null condition gets a (possibly zero) gradient
    cond = drop_condition(cond, model.null_cond(b, cond.shape[2]), np.asarray(drop, dtype=bool))
    psi, target = transport_path(z0, z1, t)
    diff = model.velocity(psi, cond, t) - target
    return (diff * diff).mean()


def cfg_velocity(state, cond, t, alpha: float, model) -> Tensor:
    """``v_uncond + alpha * (v_cond - v_uncond)``; one forward at alpha 0 or 1."""
    if alpha < 0:
        raise UsageError(f"guidance scale must be >= 0, got {alpha}")
    state, cond = ops.as_tensor(state), ops.as_tensor(cond)
    b, _, n = cond.shape
    if alpha == 1.0:
        return model.velocity(state, cond, t)
    null = model.null_cond(b, n)
    if alpha == 0.0:
        return model.velocity(state, null, t)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    both = model.velocity(ops.concat([state, state], axis=0), ops.concat([cond, null], axis=0), np.concatenate([t, t]))
    v_cond, v_uncond = both[:b], both[b:]
    return v_uncond + alpha * (v_cond - v_uncond)


def euler_solve(z0, cond, steps: int, alpha: float, model) -> Tensor:
    """Forward Euler from ``t = 0`` to ``t = 1`` on ``steps`` uniform steps."""
    if steps < 1:
        raise UsageError(f"steps must be >= 1, got {steps}")
    z = ops.as_tensor(z0)
    h = 1.0 / steps
    for k in range(steps):
        z = z + h * cfg_velocity(z, cond, k * h, alpha, model)
        if not np.all(np.isfinite(z.data)):
            raise NumericDivergenceError(f"Euler state became non-finite at step {k}", step=k)
    return z


def convert(
    model: FlowModel,
    z_l,
    s,
    steps: int | None = None,
    alpha: float | None = None,
    seed: int = 0,
) -> Tensor:
    """Raw HR latent predicted from raw LR latent ``z_l`` and labels ``s``.

    The base sample is drawn from ``default_rng(seed)`` in normalised HR
    space; the result is mapped back with the HR statistics.
    """
    stats = model.require_stats()
    steps = model.cfg.steps if steps is None else steps
    alpha = model.cfg.guidance if alpha is None else alpha
    z_l = ops.as_tensor(z_l.values if isinstance(z_l, LatentEmbedding) else z_l)
    cond = fuse_condition(model, z_l, s)
    z0 = np.random.default_rng(seed).standard_normal(z_l.shape).astype(z_l.dtype)
    z = euler_solve(z0, cond, steps, alpha, model)
    return denormalize(z, stats.hr_mean, stats.hr_std)
