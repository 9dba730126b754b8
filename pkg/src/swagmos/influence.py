"""Influence functions restricted to the output layer.

For a trained head the output-layer Hessian ``H`` of the mean training loss
is formed exactly, damped by ``lambda * I`` and used in dense solves::

    s_test            = (H + lambda I)^-1 grad L(z_test)
    I_up,loss(z, t)   = -s_test . grad L(z)
    I_up,params(z)    = -(H + lambda I)^-1 grad L(z)

Harmfulness of a training point is ``+I_up,loss`` averaged over the chosen
test points: positive means upweighting the point raises test loss.
Reports carry both ``i_up_loss`` and ``neg_i_up_loss`` columns.

Curvature defaults to MSE on the head's scores even when training used L1,
whose second derivative vanishes almost everywhere. Gradients use the
training loss.
"""
from __future__ import annotations

import logging
from collections.abc import MutableMapping
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .dataio import Dataset
from .errors import CurvatureError, DecompositionError, SelectionError, ShapeError
from .model import Loss, ModelSpec, ParamVector
from .numkit import cholesky, solve_damped

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InfluenceConfig:
    damping: float = 0.01
    curvature: str = "mse"
    grad_loss: str = "l1"
    worst_k: int | None = 5
    test_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if Loss.parse(self.curvature).kind == "l1":
            raise ValueError("curvature loss must be twice differentiable (mse or huber)")
        Loss.parse(self.grad_loss)
        if self.test_ids is not None:
            object.__setattr__(self, "test_ids", tuple(self.test_ids))

    def to_dict(self) -> dict:
        return {
            "damping": self.damping,
            "curvature": str(Loss.parse(self.curvature)),
            "grad_loss": str(Loss.parse(self.grad_loss)),
            "worst_k": self.worst_k,
            "test_ids": list(self.test_ids) if self.test_ids is not None else None,
            "scope": "last-layer",
        }


@dataclass(frozen=True)
class StestVector:
    values: np.ndarray
    test_id: str


def last_layer_hessian(spec: ModelSpec, params: ParamVector, data: Dataset, cfg: InfluenceConfig) -> np.ndarray:
    """Exact Hessian of the mean curvature loss with respect to the output layer.

    Returns the undamped matrix; ``H + damping * I`` is checked to be
    positive definite.
    """
    data = data.labeled()
    if len(data) == 0:
        raise SelectionError("hessian needs at least one labeled record")
    phi, z = mdl.last_layer_inputs(spec, params, data.features())
    s, ds, dds = mdl.output_map(spec, z)
    d1, d2 = Loss.parse(cfg.curvature).derivs(s, data.labels())
    weight = d2 * ds * ds + d1 * dds
    h = (phi * weight[:, None]).T @ phi / len(data)
    h = 0.5 * (h + h.T)
    try:
        cholesky(h + cfg.damping * np.eye(len(h)))
    except DecompositionError as exc:
        raise CurvatureError(
            f"output-layer Hessian is not positive definite with damping {cfg.damping:g} ({exc}); "
            "increase --damping"
        ) from None
    return h


def compute_s_test(h: np.ndarray, grad_test: np.ndarray, damping: float, test_id: str = "") -> StestVector:
    return StestVector(solve_damped(h, grad_test, damping), test_id)


def influence_up_loss(s_test: StestVector | np.ndarray, grad_train: np.ndarray) -> float:
    s = s_test.values if isinstance(s_test, StestVector) else np.asarray(s_test, dtype=np.float64)
    g = np.asarray(grad_train, dtype=np.float64)
    if s.shape != g.shape:
        raise ShapeError(f"s_test has shape {s.shape}, gradient {g.shape}")
    return -float(np.dot(s, g))


def influence_on_params(h: np.ndarray, grad_train: np.ndarray, damping: float) -> np.ndarray:
    return -solve_damped(h, grad_train, damping)


@dataclass
class InfluenceReport:
    test_ids: list[str]
    train_ids: list[str]
    scores: np.ndarray  # (n_train, n_test) of I_up,loss
    config: dict = field(default_factory=dict)

    @property
    def harmfulness(self) -> np.ndarray:
        return self.scores.mean(axis=1)

    @property
    def ranking(self) -> list[str]:
        order = np.argsort(-self.harmfulness, kind="stable")
        return [self.train_ids[i] for i in order]

    @property
    def ranking_neg(self) -> list[str]:
        """Descending ``neg_i_up_loss``: the "most positive -I" ordering."""
        order = np.argsort(self.harmfulness, kind="stable")
        return [self.train_ids[i] for i in order]

    def top(self, k: int) -> list[str]:
        return self.ranking[:k]

    def to_dict(self) -> dict:
        harm = self.harmfulness
        return {
            "sign_convention": {
                "i_up_loss": "d L(z_test) / d epsilon when upweighting z; positive = harmful",
                "neg_i_up_loss": "negated i_up_loss; positive = helpful",
                "ranking": "descending i_up_loss (most harmful first)",
                "ranking_neg": "descending neg_i_up_loss",
            },
            "test_ids": list(self.test_ids),
            "per_point": [
                {
                    "utterance_id": uid,
                    "i_up_loss": float(harm[i]),
                    "neg_i_up_loss": float(-harm[i]),
                    "per_test_i_up_loss": [float(v) for v in self.scores[i]],
                }
                for i, uid in enumerate(self.train_ids)
            ],
            "ranking": self.ranking,
            "ranking_neg": self.ranking_neg,
            "config": dict(self.config),
        }


def per_point_loss(spec: ModelSpec, params: ParamVector, d: Dataset, kind: Loss | str) -> np.ndarray:
    return Loss.parse(kind).value(mdl.predict(spec, params, d.features()), d.labels())


def select_test_points(
    spec: ModelSpec, params: ParamVector, candidates: Dataset, cfg: InfluenceConfig
) -> list[int]:
    """Indices into ``candidates``: the explicit id list, else the worst-k by loss."""
    if cfg.test_ids is not None:
        if not cfg.test_ids:
            raise SelectionError("explicit test id list is empty")
        unknown = [u for u in cfg.test_ids if u not in candidates]
        if unknown:
            raise SelectionError(f"test ids not found in {candidates.name!r}: {unknown[:10]}")
        return [candidates.index_of(u) for u in cfg.test_ids]
    k = cfg.worst_k
    if k is None or k < 1:
        raise SelectionError("worst_k must be >= 1")
    if k > len(candidates):
        raise SelectionError(f"worst_k={k} exceeds the {len(candidates)} candidate records")
    losses = per_point_loss(spec, params, candidates, cfg.grad_loss)
    return np.argsort(-losses, kind="stable")[:k].tolist()


def debug_rank(
    spec: ModelSpec,
    params: ParamVector,
    train: Dataset,
    cfg: InfluenceConfig,
    test: Dataset | None = None,
    s_test_cache: MutableMapping[str, StestVector] | None = None,
) -> InfluenceReport:
    """Score every training point against the selected test points.

    Test points come from ``test`` (default: the training set itself). Each
    ``s_test`` is solved once and stored in ``s_test_cache`` when given; cached
    vectors are reused verbatim.
    """
    train = train.labeled()
    candidates = (test if test is not None else train).labeled()
    chosen = select_test_points(spec, params, candidates, cfg)
    test_ids = [candidates[i].utterance_id for i in chosen]

    h = last_layer_hessian(spec, params, train, cfg)
    g_train = mdl.last_layer_grads(spec, params, train.features(), train.labels(), cfg.grad_loss)
    sub = candidates.subset(chosen)
    g_test = mdl.last_layer_grads(spec, params, sub.features(), sub.labels(), cfg.grad_loss)

    cache = s_test_cache if s_test_cache is not None else {}
    s_cols = []
    for uid, g in zip(test_ids, g_test):
        if uid not in cache:
            cache[uid] = compute_s_test(h, g, cfg.damping, uid)
        s_cols.append(cache[uid].values)
    s = np.stack(s_cols, axis=1)  # (p, n_test)
    scores = -(g_train @ s)
    config = cfg.to_dict()
    config["test_source"] = candidates.name
    return InfluenceReport(test_ids, train.ids, scores, config)
