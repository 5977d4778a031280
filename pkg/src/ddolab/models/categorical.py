from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import grad as G
from .base import Model, register


@dataclass(frozen=True)
class CategoricalDistribution:
    """An explicit probability vector over K states."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probs must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probs must be nonnegative and sum to 1 (sum={p.sum()!r})")
        object.__setattr__(self, "probs", p)

    @property
    def K(self) -> int:
        return self.probs.size

    @classmethod
    def normalized(cls, weights) -> "CategoricalDistribution":
        w = np.asarray(weights, dtype=np.float64)
        return cls(w / w.sum())

    @classmethod
    def random(cls, rng: np.random.Generator, K: int, floor: float = 0.0) -> "CategoricalDistribution":
        """Dirichlet(1) draw, optionally mixed so every entry is at least ``floor``."""
        p = rng.dirichlet(np.ones(K))
        if floor > 0:
            p = floor + (1.0 - K * floor) * p
        return cls(p / p.sum())

    def full_support(self) -> bool:
        return bool(np.all(self.probs > 0))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.choice(self.K, size=n, p=self.probs)


@register
class CategoricalModel(Model):
    """Full-capacity softmax parameterization over K states."""

    kind = "categorical"

    def __init__(self, logits):
        super().__init__()
        self.params["logits"] = np.array(logits, dtype=np.float64)

    @property
    def K(self) -> int:
        return self.params["logits"].shape[-1]

    def config(self) -> dict:
        return {"K": self.K}

    @classmethod
    def from_config(cls, cfg: dict) -> "CategoricalModel":
        return cls(np.zeros(int(cfg["K"])))

    @classmethod
    def from_distribution(cls, dist: CategoricalDistribution) -> "CategoricalModel":
        return cls(np.log(dist.probs))

    def log_probs(self, P=None) -> G.Tensor:
        return G.log_softmax(self._p(P)["logits"])

    def log_prob(self, x, P=None) -> G.Tensor:
        x = np.asarray(x)
        if np.any(x < 0) or np.any(x >= self.K):
            raise IndexError(f"state index out of range [0, {self.K})")
        return G.pick(self.log_probs(P), x)

    def distribution(self) -> CategoricalDistribution:
        lp = self.log_probs().data
        p = np.exp(lp)
        return CategoricalDistribution(p / p.sum())

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.distribution().sample(rng, n)


def categorical_log_prob(model: CategoricalModel, x: int, P=None) -> G.Tensor:
    return model.log_prob(x, P)
