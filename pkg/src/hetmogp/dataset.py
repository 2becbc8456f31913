from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .likelihoods import Likelihood


@dataclass
class HeterogeneousDataset:
    """Per-output inputs ``X[d]`` (N_d x p) and observations ``Y[d]`` (N_d,).

    Outputs may have different numbers of observations, including zero.
    """

    likelihoods: list[Likelihood]
    X: list[np.ndarray]
    Y: list[np.ndarray]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.likelihoods) == len(self.X) == len(self.Y)):
            raise ValueError("likelihoods, X and Y must have one entry per output")
        if not self.names:
            self.names = [f"y{d + 1}" for d in range(len(self.likelihoods))]
        dims = set()
        X, Y = [], []
        for d, (lik, x, y) in enumerate(zip(self.likelihoods, self.X, self.Y)):
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            y = np.asarray(y)
            if y.ndim != 1 or y.shape[0] != x.shape[0]:
                raise ValueError(f"output {d}: {x.shape[0]} inputs but y has shape {y.shape}")
            if not np.all(np.isfinite(x)):
                raise ValueError(f"output {d}: non-finite inputs")
            lik.check_y(y)
            if lik.value_kind in ("binary", "count"):
                y = y.astype(np.int64)
            else:
                y = y.astype(float)
            X.append(x)
            Y.append(y)
            dims.add(x.shape[1])
        if len(dims) > 1:
            raise ValueError(f"outputs disagree on input dimension: {sorted(dims)}")
        self.X, self.Y = X, Y

    @property
    def num_outputs(self) -> int:
        return len(self.likelihoods)

    @property
    def input_dim(self) -> int:
        return self.X[0].shape[1] if self.X else 0

    @property
    def sizes(self) -> list[int]:
        return [x.shape[0] for x in self.X]

    def subset(self, indices) -> "HeterogeneousDataset":
        """Dataset restricted to ``indices[d]`` rows of each output."""
        return HeterogeneousDataset(
            list(self.likelihoods),
            [x[np.asarray(i, dtype=int)] for x, i in zip(self.X, indices)],
            [y[np.asarray(i, dtype=int)] for y, i in zip(self.Y, indices)],
            list(self.names),
        )

    def output(self, d: int) -> "HeterogeneousDataset":
        """Single-output dataset for output ``d``."""
        return HeterogeneousDataset([self.likelihoods[d]], [self.X[d]], [self.Y[d]], [self.names[d]])
