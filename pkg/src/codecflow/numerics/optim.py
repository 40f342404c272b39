"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from codecflow.errors import UsageError
from codecflow.numerics.tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """AdamW over a fixed, named parameter set.

    Moments live in :attr:`state` keyed by parameter name so they can be
    checkpointed next to the parameters themselves.
    """

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params: dict[str, Tensor] = dict(named_params)
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
        for name, p in self.params.items():
            self.state.exp_avg[name] = np.zeros_like(p.data)
            self.state.exp_avg_sq[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise UsageError(f"parameter {name!r} has no gradient")
        st = self.state
        st.step += 1
        b1, b2 = st.betas
        bc1 = 1.0 - b1**st.step
        bc2 = 1.0 - b2**st.step
        for name, p in self.params.items():
            g = p.grad.astype(p.dtype, copy=False)
            m = st.exp_avg[name]
            v = st.exp_avg_sq[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if st.weight_decay:
                p.data = p.data * (1.0 - st.lr * st.weight_decay)
            p.data = p.data - st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)

    def reset_rows(self, name: str, rows) -> None:
        """Zero both moments of ``rows`` of one parameter (after re-initialising them)."""
        self.state.exp_avg[name][rows] = 0
        self.state.exp_avg_sq[name][rows] = 0

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"m.{name}"] = self.state.exp_avg[name]
            out[f"v.{name}"] = self.state.exp_avg_sq[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step: int) -> None:
        for name, p in self.params.items():
            self.state.exp_avg[name] = np.array(tensors[f"m.{name}"], dtype=p.dtype)
            self.state.exp_avg_sq[name] = np.array(tensors[f"v.{name}"], dtype=p.dtype)
        self.state.step = int(step)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale grads in place so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params)))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total
