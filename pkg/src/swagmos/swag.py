"""SWA-Gaussian posterior collection, sampling and Bayesian model averaging.

The Gaussian approximation uses the SWA mean, a diagonal second-moment
term and a low-rank deviation matrix ``D`` whose columns are
``theta_i - mean_i`` at collection time::

    Sigma = 1/2 diag(sq_mean - mean^2) + D D^T / (2 (rank - 1))

A draw is ``mean + sqrt(var) * z1 / sqrt(2) + D z2 / sqrt(2 (rank - 1))``
with ``z1`` drawn before ``z2`` from the same counter-based stream.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import model as mdl
from .errors import InsufficiencyError, ShapeError
from .model import ModelSpec, ParamVector
from .numkit import RngState, standard_normal

MODES = ("diag", "diag+lowrank", "mean-only")


class SwagPosterior:
    """Running SWAG moments. Mutated in place by :meth:`update` (single writer)."""

    def __init__(self, layout, rank_max: int = 20):
        if rank_max < 1:
            raise ValueError("rank_max must be >= 1")
        self.layout = tuple(layout)
        size = sum(int(np.prod(s)) for _, s in self.layout)
        self.rank_max = rank_max
        self.n_collected = 0
        self._mean = np.zeros(size)
        self._sq_mean = np.zeros(size)
        self._dev: deque[np.ndarray] = deque(maxlen=rank_max)

    @property
    def size(self) -> int:
        return self._mean.size

    @property
    def mean(self) -> ParamVector:
        return ParamVector(self._mean.copy(), self.layout)

    @property
    def sq_mean(self) -> np.ndarray:
        return self._sq_mean.copy()

    @property
    def rank(self) -> int:
        return len(self._dev)

    @property
    def deviations(self) -> np.ndarray:
        """Deviation columns, oldest first, shape (size, rank)."""
        if not self._dev:
            return np.zeros((self.size, 0))
        return np.stack(self._dev, axis=1)

    def update(self, snapshot: ParamVector) -> SwagPosterior:
        if tuple(snapshot.layout) != self.layout:
            raise ShapeError("snapshot layout does not match the posterior")
        theta = snapshot.values
        n = self.n_collected + 1
        self._mean = (self._mean * (n - 1) + theta) / n
        self._sq_mean = (self._sq_mean * (n - 1) + theta * theta) / n
        self._dev.append(theta - self._mean)
        self.n_collected = n
        return self

    def copy(self) -> SwagPosterior:
        other = SwagPosterior(self.layout, self.rank_max)
        other.n_collected = self.n_collected
        other._mean = self._mean.copy()
        other._sq_mean = self._sq_mean.copy()
        other._dev = deque((c.copy() for c in self._dev), maxlen=self.rank_max)
        return other

    @classmethod
    def from_arrays(cls, layout, mean, sq_mean, deviations, n_collected: int, rank_max: int) -> SwagPosterior:
        post = cls(layout, rank_max)
        mean = np.asarray(mean, dtype=np.float64)
        sq_mean = np.asarray(sq_mean, dtype=np.float64)
        deviations = np.asarray(deviations, dtype=np.float64).reshape(post.size, -1)
        if mean.shape != (post.size,) or sq_mean.shape != (post.size,):
            raise ShapeError("posterior moments do not match the layout")
        if deviations.shape[1] > rank_max:
            raise ShapeError("more deviation columns than rank_max")
        post._mean, post._sq_mean = mean.copy(), sq_mean.copy()
        post._dev.extend(deviations[:, j].copy() for j in range(deviations.shape[1]))
        post.n_collected = int(n_collected)
        return post


def swa_update(posterior: SwagPosterior, snapshot: ParamVector) -> SwagPosterior:
    return posterior.update(snapshot)


def diagonal_variance(posterior: SwagPosterior) -> np.ndarray:
    if posterior.n_collected < 2:
        raise InsufficiencyError(f"variance needs >= 2 snapshots, have {posterior.n_collected}")
    return np.maximum(posterior._sq_mean - posterior._mean ** 2, 0.0)


def implied_covariance(posterior: SwagPosterior, mode: str = "diag+lowrank") -> np.ndarray:
    """Covariance that :func:`sample_params` draws from (dense; small models only)."""
    if mode == "mean-only":
        return np.zeros((posterior.size, posterior.size))
    cov = np.diag(0.5 * diagonal_variance(posterior))
    if mode == "diag+lowrank" and posterior.rank >= 2:
        d = posterior.deviations
        cov += d @ d.T / (2.0 * (posterior.rank - 1))
    return cov


def sample_params(posterior: SwagPosterior, rng: RngState, mode: str = "diag+lowrank") -> tuple[ParamVector, RngState]:
    """One draw from the SWAG Gaussian; returns the sample and the advanced RNG."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "mean-only":
        return posterior.mean, rng
    var = diagonal_variance(posterior)
    z1, rng = standard_normal(rng, posterior.size)
    theta = posterior._mean + np.sqrt(var) * z1 / np.sqrt(2.0)
    # a single deviation column carries no spread around the mean estimate
    if mode == "diag+lowrank" and posterior.rank >= 2:
        z2, rng = standard_normal(rng, posterior.rank)
        theta = theta + posterior.deviations @ z2 / np.sqrt(2.0 * (posterior.rank - 1))
    return ParamVector(theta, posterior.layout), rng


@dataclass(frozen=True)
class BmaConfig:
    n_samples: int = 10
    seed: int = 0
    mode: str = "diag+lowrank"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


def bma_predict_batch(spec: ModelSpec, posterior: SwagPosterior, x, cfg: BmaConfig) -> tuple[np.ndarray, np.ndarray]:
    """Average the scores of ``cfg.n_samples`` sampled heads.

    Returns ``(mean scores (n,), per-sample scores (K, n))``. The same K
    parameter draws are shared by every input row.
    """
    rng = RngState(cfg.seed)
    samples = []
    for _ in range(cfg.n_samples):
        theta, rng = sample_params(posterior, rng, cfg.mode)
        samples.append(mdl.predict(spec, theta, x))
    samples = np.stack(samples)
    # shifted mean: identical samples average to exactly that value
    ref = samples[0]
    return ref + (samples - ref).mean(axis=0), samples


def bma_predict(spec: ModelSpec, posterior: SwagPosterior, x, cfg: BmaConfig) -> tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("bma_predict takes a single feature vector; use bma_predict_batch")
    mean, samples = bma_predict_batch(spec, posterior, x, cfg)
    return float(mean[0]), samples[:, 0]
