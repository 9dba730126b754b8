"""SGD with momentum, cosine learning-rate schedule and gradient accumulation.

One optimizer step consumes ``accumulation_steps`` micro-batches of
``batch_size`` records; their mean gradients are averaged and applied as::

    v <- momentum * v + g
    theta <- theta - lr(t) * v

Micro-batches come from a per-epoch shuffle seeded by the config; the last
incomplete micro-batch of an epoch is dropped.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as mdl
from .dataio import Dataset
from .errors import DegeneracyError, DivergenceError, EmptinessError, InsufficiencyError
from .metrics import MetricReport, evaluate
from .model import Loss, ModelSpec, ParamVector
from .swag import SwagPosterior

log = logging.getLogger(__name__)

SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 30000
    lr: float = 0.001
    lr_min: float = 0.0
    momentum: float = 0.9
    schedule: str = "cosine"
    period: int = 100
    batch_size: int = 8
    accumulation_steps: int = 1
    seed: int = 0
    loss: str = "l1"
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.lr_min <= self.lr:
            raise ValueError("lr_min must lie in [0, lr]")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.period < 1 or self.batch_size < 1 or self.accumulation_steps < 1:
            raise ValueError("period, batch_size and accumulation_steps must be >= 1")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        Loss.parse(self.loss)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SwagCollectConfig:
    """When to snapshot parameters into the SWAG posterior during training.

    ``collect_every`` counts optimizer steps; ``None`` means once per epoch.
    """

    collect_every: int | None = None
    rank_max: int = 20


@dataclass
class Checkpoint:
    params: ParamVector
    iteration: int
    dev_metrics: MetricReport | None = None
    posterior: SwagPosterior | None = field(default=None, repr=False)
    train_loss: float | None = None


def cosine_lr(t: int, lr_max: float, lr_min: float, period: int) -> float:
    """Cyclic cosine annealing: ``lr_max`` at t=0, ``lr_min`` at t=period, back at 2*period."""
    phase = (t % (2 * period)) / period
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * phase))


def learning_rate(cfg: TrainConfig, t: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    return cosine_lr(t, cfg.lr, cfg.lr_min, cfg.period)


def effective_batch(micro_grads: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of equal-size micro-batch mean gradients (= union-batch mean gradient)."""
    if not micro_grads:
        raise EmptinessError("no micro-batch gradients to accumulate")
    return np.mean(np.stack([np.asarray(g, dtype=np.float64) for g in micro_grads]), axis=0)


class BatchStream:
    """Endless stream of micro-batch index arrays, reshuffled every epoch."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise EmptinessError("cannot draw batches from an empty dataset")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.per_epoch = n // self.batch_size
        self._rng = np.random.default_rng(seed)
        self._order = None
        self._pos = self.per_epoch
        self.epoch = -1

    def next(self) -> np.ndarray:
        if self._pos >= self.per_epoch:
            self._order = self._rng.permutation(self.n)
            self._pos = 0
            self.epoch += 1
        b = self.batch_size
        idx = self._order[self._pos * b : (self._pos + 1) * b]
        self._pos += 1
        return idx


def dev_report(spec: ModelSpec, params: ParamVector, dev: Dataset | None) -> MetricReport | None:
    if dev is None:
        return None
    labeled = dev.labeled()
    if len(labeled) < 2:
        return None
    pred = dict(zip(labeled.ids, mdl.predict(spec, params, labeled.features()).tolist()))
    try:
        return evaluate(pred, labeled)
    except DegeneracyError as exc:
        log.debug("dev metrics unavailable: %s", exc)
        return None


def train(
    spec: ModelSpec,
    data: Dataset,
    dev: Dataset | None,
    cfg: TrainConfig,
    init: ParamVector | None = None,
    collect: SwagCollectConfig | None = None,
) -> list[Checkpoint]:
    """Run SGD and return checkpoints every ``cfg.checkpoint_interval`` steps.

    The final iteration is always checkpointed. With ``collect`` set, parameter
    snapshots feed a SWAG posterior and each checkpoint carries a copy of it.
    """
    data = data.labeled()
    if len(data) == 0:
        raise EmptinessError(f"no labeled records in {data.name!r}")
    x, y = data.features(), data.labels()
    kind = Loss.parse(cfg.loss)
    params = init if init is not None else mdl.init_params(spec, cfg.seed)
    theta = params.values.copy()
    velocity = np.zeros_like(theta)
    stream = BatchStream(len(data), cfg.batch_size, cfg.seed)
    steps_per_epoch = max(1, stream.per_epoch // cfg.accumulation_steps)

    posterior = None
    collect_every = None
    if collect is not None:
        posterior = SwagPosterior(params.layout, collect.rank_max)
        collect_every = collect.collect_every or steps_per_epoch

    def snapshot(t: int, loss_value: float | None) -> Checkpoint:
        p = params.with_values(theta.copy())
        return Checkpoint(
            p, t, dev_report(spec, p, dev),
            posterior.copy() if posterior is not None else None,
            loss_value,
        )

    checkpoints: list[Checkpoint] = []
    if cfg.iterations == 0:
        return [snapshot(0, None)]

    for t in range(cfg.iterations):
        lr = learning_rate(cfg, t)
        micro, losses = [], []
        for _ in range(cfg.accumulation_steps):
            idx = stream.next()
            value, g = mdl.value_and_grad(spec, params.with_values(theta), x[idx], y[idx], kind)
            if not math.isfinite(value) or not isinstance(g, ParamVector):
                raise DivergenceError(f"non-finite loss at step {t} (lr={lr:g})")
            micro.append(g.values)
            losses.append(value)
        g = micro[0] if len(micro) == 1 else effective_batch(micro)
        velocity = cfg.momentum * velocity + g
        theta = theta - lr * velocity
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"parameters became non-finite at step {t} (lr={lr:g})")
        step = t + 1
        if posterior is not None and step % collect_every == 0:
            posterior.update(params.with_values(theta))
        if step % cfg.checkpoint_interval == 0 or step == cfg.iterations:
            checkpoints.append(snapshot(step, float(np.mean(losses))))
    return checkpoints


def select_checkpoint(
    spec: ModelSpec,
    checkpoints: Sequence[Checkpoint],
    posteriors: Sequence[SwagPosterior],
    dev: Dataset,
    min_samples: int = 5,
) -> int:
    """Index of the checkpoint whose SWAG mean has the best dev system-level SRCC.

    Only checkpoints whose posterior holds ``>= min_samples`` snapshots are
    eligible; ties go to the earliest index.
    """
    if len(checkpoints) != len(posteriors):
        raise ValueError("checkpoints and posteriors must be aligned")
    eligible = [i for i, p in enumerate(posteriors) if p is not None and p.n_collected >= min_samples]
    if not eligible:
        raise InsufficiencyError(f"no SWAG posterior has collected {min_samples} samples yet")
    if len(eligible) == 1:
        return eligible[0]
    best, best_score = eligible[0], -math.inf
    for i in eligible:
        try:
            score = system_srcc(spec, posteriors[i].mean, dev)
        except DegeneracyError:
            score = -math.inf
        if score > best_score:
            best, best_score = i, score
    return best


def system_srcc(spec: ModelSpec, params: ParamVector, dev: Dataset) -> float:
    labeled = dev.labeled()
    pred = mdl.predict(spec, params, labeled.features())
    report = evaluate(dict(zip(labeled.ids, pred.tolist())), labeled)
    return report.system["srcc"]

