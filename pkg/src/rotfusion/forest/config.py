from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .._rng import check_seed

N_COVARIATES = 13


@dataclass(frozen=True)
class ForestConfig:
    """Hyperparameters shared by the centering forests and the effect trees."""

    n_trees: int = 500
    min_leaf: int = 5
    mtry: int = math.ceil(math.sqrt(N_COVARIATES))
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ValueError("subsample_fraction must be in (0, 1]")
        if not 0.0 < self.honesty_fraction < 1.0:
            raise ValueError("honesty_fraction must be in (0, 1)")
        check_seed(self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ForestConfig":
        return cls(**{k: type(getattr(cls(), k))(v) for k, v in d.items()
                      if k in cls.__dataclass_fields__})
