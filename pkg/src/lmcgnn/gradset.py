"""Named parameter-block gradients with the small arithmetic the trainers
and the estimator tests need (accumulation, scaling, norms, comparisons)."""
from __future__ import annotations

import numpy as np


class GradSet:
    """Ordered mapping block-name -> float64 array."""

    def __init__(self, blocks: dict):
        self.blocks = {k: np.asarray(v, dtype=np.float64) for k, v in blocks.items()}

    def __getitem__(self, key):
        return self.blocks[key]

    def __iter__(self):
        return iter(self.blocks.items())

    def keys(self):
        return self.blocks.keys()

    @classmethod
    def zeros_like(cls, other: "GradSet") -> "GradSet":
        return cls({k: np.zeros_like(v) for k, v in other.blocks.items()})

    def copy(self) -> "GradSet":
        return GradSet({k: v.copy() for k, v in self.blocks.items()})

    def add_scaled(self, other: "GradSet", scale: float) -> "GradSet":
        for k in self.blocks:
            self.blocks[k] += scale * other.blocks[k]
        return self

    def scale(self, s: float) -> "GradSet":
        for k in self.blocks:
            self.blocks[k] *= s
        return self

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.blocks.values()])

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self.blocks.values())))

    def max_abs_diff(self, other: "GradSet") -> dict:
        """Per-block infinity norm of the difference."""
        return {k: float(np.max(np.abs(v - other.blocks[k]))) if v.size else 0.0
                for k, v in self.blocks.items()}

    def rel_err(self, exact: "GradSet") -> float:
        """Flattened 2-norm relative error against `exact`."""
        diff = self.copy().add_scaled(exact, -1.0).norm()
        denom = exact.norm()
        if denom == 0.0:
            return 0.0 if diff == 0.0 else float("inf")
        return diff / denom
