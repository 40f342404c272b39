"""Residual vector quantization with margin and monotonic-decay regularizers.

Each stage projects the running residual into a small code space, picks the
nearest codebook entry (squared Euclidean distance between L2-normalised
vectors by default), projects the entry back and subtracts it from the
residual.  Gradients reach the input through a straight-through estimator.

Two structural penalties sit on top of the usual codebook/commitment terms:

* margin: ``mean(max(0, margin - (d2 - d1)))`` over rows and stages, where
  ``d1``/``d2`` are the nearest and second-nearest distances;
* mono:   ``mean_i max(0, E_i - decay_ratio * E_{i-1})`` where ``E_i`` is the
  mean squared error of the reconstruction after ``i`` stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from codecflow import kernels
from codecflow.errors import ConfigurationError
from codecflow.numerics import Linear, Module, Tensor, no_grad, ops, parameter

NORM_EPS = 1e-8


@dataclass
class QuantizerConfig:
    latent_dim: int = 32
    n_stages: int = 4
    codebook_size: int = 256
    code_dim: int = 8
    commitment: float = 0.25
    codebook_weight: float = 1.0
    margin: float = 0.1
    decay_ratio: float = 0.9
    lambda_margin: float = 0.25
    lambda_mono: float = 0.25
    normalize: bool = True
    identity_projection: bool = False
    # route margin/mono gradients into the encoder as well as the quantizer
    regularize_encoder: bool = False
    dead_code_steps: int = 100

    def validate(self) -> None:
        if self.n_stages < 1:
            raise ConfigurationError("n_stages must be >= 1")
        if self.codebook_size < 2:
            raise ConfigurationError("codebook_size must be >= 2 (second-nearest entry)")
        if not 0.0 < self.decay_ratio < 1.0:
            raise ConfigurationError(f"decay_ratio must lie in (0, 1), got {self.decay_ratio}")
        if self.margin <= 0:
            raise ConfigurationError(f"margin must be positive, got {self.margin}")
        if self.identity_projection and self.code_dim != self.latent_dim:
            raise ConfigurationError("identity projection needs code_dim == latent_dim")


class Codebook(Module):
    def __init__(self, cfg: QuantizerConfig, rng: np.random.Generator):
        self.entries = parameter(rng.normal(0.0, 1.0, size=(cfg.codebook_size, cfg.code_dim)))
        if cfg.identity_projection:
            self.proj_in = self.proj_out = None
        else:
            self.proj_in = Linear(cfg.latent_dim, cfg.code_dim, rng)
            self.proj_out = Linear(cfg.code_dim, cfg.latent_dim, rng)

    def project_in(self, rows: Tensor) -> Tensor:
        return rows if self.proj_in is None else self.proj_in(rows)

    def project_out(self, codes: Tensor) -> Tensor:
        return codes if self.proj_out is None else self.proj_out(codes)


class QuantizerStack(Module):
    def __init__(self, cfg: QuantizerConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.codebooks = [Codebook(cfg, rng) for _ in range(cfg.n_stages)]
        self.usage = np.zeros((cfg.n_stages, cfg.codebook_size), dtype=np.int64)
        self.usage_steps = 0


@dataclass
class QuantizationResult:
    quantized: Tensor  # [B, D, T]
    codes: np.ndarray  # [n_stages, B, T]
    d1: list  # per stage, [B, T]
    d2: list
    stage_energies: list  # per stage, scalar tensors
    codebook_losses: list = field(default_factory=list)
    commitment_losses: list = field(default_factory=list)
    projected: list = field(default_factory=list)  # per stage, [N, code_dim] pre-quantization

    def energies(self) -> np.ndarray:
        return np.array([float(e.data) for e in self.stage_energies])


def _unit(x: Tensor) -> Tensor:
    return x / (ops.l2_norm(x, axis=-1) + NORM_EPS)


def _to_rows(z: Tensor) -> Tensor:
    b, d, t = z.shape
    return ops.reshape(ops.transpose(z, (0, 2, 1)), (b * t, d))


def _from_rows(rows: Tensor, b: int, t: int) -> Tensor:
    return ops.transpose(ops.reshape(rows, (b, t, rows.shape[-1])), (0, 2, 1))


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """``[N, K]`` squared Euclidean distances between rows of ``a`` and ``b``."""
    diff = ops.reshape(a, (a.shape[0], 1, a.shape[1])) - ops.reshape(b, (1,) + b.shape)
    return (diff * diff).sum(axis=-1)


def quantize(
    z: Tensor,
    stack: QuantizerStack,
    track_distances: bool = True,
    straight_through_identity: bool = False,
) -> QuantizationResult:
    """Residual quantization of ``z[B, D, T]``.

    ``track_distances=False`` keeps ``d1``/``d2`` as plain arrays (no graph),
    which is all inference and frozen-quantizer training need.
    ``straight_through_identity`` replaces the codebook lookup with the
    identity map; it exists to test the straight-through gradient.
    """
    cfg = stack.cfg
    z = ops.as_tensor(z)
    if z.ndim != 3 or z.shape[1] != cfg.latent_dim:
        raise ConfigurationError(f"quantize: expected [B, {cfg.latent_dim}, T], got {z.shape}")
    if not np.all(np.isfinite(z.data)):
        raise ConfigurationError("quantize: input contains non-finite values")
    b, _, t = z.shape
    rows = _to_rows(z)
    residual = rows
    total = None
    codes, d1s, d2s, energies, cb_losses, commit_losses, projected = [], [], [], [], [], [], []
    for cb in stack.codebooks:
        e = cb.project_in(residual)
        en = _unit(e) if cfg.normalize else e
        cn = _unit(cb.entries) if cfg.normalize else cb.entries
        if track_distances:
            dist = pairwise_sq_dist(en, cn)
            first, second = kernels.top2(dist.data)
            d1 = ops.take_along(dist, first[:, None], axis=1)
            d2 = ops.take_along(dist, second[:, None], axis=1)
            d1s.append(ops.reshape(d1, (b, t)))
            d2s.append(ops.reshape(d2, (b, t)))
        else:
            with no_grad():
                dist = pairwise_sq_dist(ops.detach(en), ops.detach(cn)).data
            first, second = kernels.top2(dist)
            rows_idx = np.arange(dist.shape[0])
            d1s.append(dist[rows_idx, first].reshape(b, t))
            d2s.append(dist[rows_idx, second].reshape(b, t))
        code = ops.take(cb.entries, first)
        st = e if straight_through_identity else e + ops.detach(code - e)
        out = cb.project_out(st)
        total = out if total is None else total + out
        residual = residual - out
        err = rows - total
        energies.append((err * err).mean())
        cb_losses.append(((ops.detach(e) - code) ** 2).mean())
        commit_losses.append(((e - ops.detach(code)) ** 2).mean())
        codes.append(first.reshape(b, t))
        projected.append(e)
    return QuantizationResult(
        quantized=_from_rows(total, b, t),
        codes=np.stack(codes),
        d1=d1s,
        d2=d2s,
        stage_energies=energies,
        codebook_losses=cb_losses,
        commitment_losses=commit_losses,
        projected=projected,
    )


def margin_loss(d1, d2, margin: float) -> Tensor:
    """Mean hinge ``max(0, margin - (d2 - d1))``; lists are stacked per stage."""
    if isinstance(d1, (list, tuple)):
        d1 = ops.concat([ops.reshape(ops.as_tensor(d), (-1,)) for d in d1])
        d2 = ops.concat([ops.reshape(ops.as_tensor(d), (-1,)) for d in d2])
    gap = ops.as_tensor(d2) - ops.as_tensor(d1)
    return ops.relu(margin - gap).mean()


def mono_loss(stage_energies, decay_ratio: float) -> Tensor:
    """Mean over stages ``i >= 2`` of ``max(0, E_i - decay_ratio * E_{i-1})``."""
    energies = [ops.as_tensor(e) for e in stage_energies]
    if len(energies) < 2:
        return Tensor(0.0)
    terms = [ops.relu(energies[i] - decay_ratio * energies[i - 1]) for i in range(1, len(energies))]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def scrvq_loss(result: QuantizationResult, z: Tensor, stack: QuantizerStack) -> dict[str, Tensor]:
    """Codebook + commitment terms plus weighted margin and mono penalties.

    Unless ``regularize_encoder`` is set, the penalties are computed from a
    pass over ``detach(z)`` so they only move codebooks and projections.
    """
    cfg = stack.cfg
    codebook = _stack_sum(result.codebook_losses)
    commitment = _stack_sum(result.commitment_losses)
    rvq = cfg.codebook_weight * codebook + cfg.commitment * commitment
    if cfg.lambda_margin == 0 and cfg.lambda_mono == 0:
        zero = Tensor(0.0)
        return {"total": rvq, "rvq": rvq, "codebook": codebook, "commitment": commitment, "margin": zero, "mono": zero}
    if cfg.regularize_encoder:
        reg = result
    else:
        reg = quantize(ops.detach(ops.as_tensor(z)), stack, track_distances=True)
    margin = margin_loss(reg.d1, reg.d2, cfg.margin)
    mono = mono_loss(reg.stage_energies, cfg.decay_ratio)
    total = rvq + cfg.lambda_margin * margin + cfg.lambda_mono * mono
    return {"total": total, "rvq": rvq, "codebook": codebook, "commitment": commitment, "margin": margin, "mono": mono}


def _stack_sum(terms: list) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


# ---------------------------------------------------------------- codebook upkeep


def init_from_data(stack: QuantizerStack, z: np.ndarray, rng: np.random.Generator) -> None:
    """Seed each stage's entries with projected residual rows of ``z``."""
    with no_grad():
        rows = _to_rows(Tensor(z))
        residual = rows
        for cb in stack.codebooks:
            e = cb.project_in(residual).data
            pick = rng.choice(e.shape[0], size=cb.entries.shape[0], replace=e.shape[0] < cb.entries.shape[0])
            cb.entries.data = (e[pick] + 1e-3 * rng.normal(size=cb.entries.shape)).astype(cb.entries.dtype)
            en = _unit(cb.project_in(residual))
            dist = pairwise_sq_dist(en, _unit(cb.entries)).data
            first = dist.argmin(axis=1)
            residual = residual - cb.project_out(ops.take(cb.entries, first))


def record_usage(stack: QuantizerStack, result: QuantizationResult) -> None:
    for i, codes in enumerate(result.codes):
        stack.usage[i] += np.bincount(codes.reshape(-1), minlength=stack.cfg.codebook_size)
    stack.usage_steps += 1


def reseed_dead_codes(stack: QuantizerStack, result: QuantizationResult, rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Re-seed entries unused over the usage window with random projected rows.

    Does nothing until ``dead_code_steps`` batches were recorded, then resets
    the window.  Returns the replaced entry indices per stage, so a caller
    can clear optimizer state that belonged to the old entries.
    """
    if stack.usage_steps < stack.cfg.dead_code_steps:
        return {}
    replaced = {}
    for i, cb in enumerate(stack.codebooks):
        dead = np.flatnonzero(stack.usage[i] == 0)
        if dead.size:
            e = result.projected[i].data
            pick = rng.integers(0, e.shape[0], size=dead.size)
            cb.entries.data[dead] = e[pick] + 1e-3 * rng.normal(size=(dead.size, e.shape[1]))
            replaced[i] = dead
    stack.usage[:] = 0
    stack.usage_steps = 0
    return replaced


def codebook_stats(stack: QuantizerStack, z: np.ndarray) -> dict:
    """Per-stage utilisation, residual-energy profile and mean (d2 - d1)."""
    with no_grad():
        res = quantize(Tensor(z), stack, track_distances=False)
    k = stack.cfg.codebook_size
    return {
        "utilization": [float(np.unique(c).size / k) for c in res.codes],
        "energies": res.energies().tolist(),
        "mean_gap": [float(np.mean(b - a)) for a, b in zip(res.d1, res.d2)],
    }
