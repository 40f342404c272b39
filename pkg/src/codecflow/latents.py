"""Container for codec latents moving between modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from codecflow.errors import UsageError


@dataclass
class LatentEmbedding:
    values: np.ndarray  # [B, D, T]
    hop: int
    source_rate: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise UsageError(f"latent values must be [B, D, T], got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise UsageError("latent values contain non-finite entries")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape
