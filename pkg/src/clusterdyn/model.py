"""Finite discrete causal-model primitives.

A model is the pair (Q_L, Q_Y): a covariate law over K levels and an outcome
kernel ``q_y[a, l, y]`` over M outcome values with numeric scores. Treatment
is binary throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyCoarseLevel, NegativeProbability, NonStochastic

TOL = 1e-12


@dataclass(frozen=True)
class DiscreteModel:
    q_l: np.ndarray  # (K,)
    q_y: np.ndarray  # (2, K, M)
    scores: np.ndarray  # (M,)

    @property
    def levels(self) -> int:
        return self.q_l.shape[0]

    @property
    def outcomes(self) -> int:
        return self.scores.shape[0]

    def mean_outcome(self) -> np.ndarray:
        """E[Y | a, l] as a (2, K) array."""
        return self.q_y @ self.scores


@dataclass(frozen=True)
class Coarsening:
    mapping: np.ndarray  # level index -> coarse index

    @property
    def size(self) -> int:
        return int(self.mapping.max()) + 1

    @classmethod
    def identity(cls, levels: int) -> "Coarsening":
        return cls(np.arange(levels))

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        object.__setattr__(self, "mapping", m)
        if m.ndim != 1 or m.size == 0 or m.min() < 0:
            raise ValueError("coarsening must be a non-empty vector of non-negative indices")
        if set(m.tolist()) != set(range(int(m.max()) + 1)):
            raise ValueError("coarsening is not surjective onto 0..|V|-1")


@dataclass(frozen=True)
class CoarseModel:
    """A model pushed forward through a coarsening V = c(L)."""

    model: DiscreteModel  # Q_V and Q*_Y(y | a, v)
    q_l_given_v: np.ndarray  # (K,), Q_{L|v}(l) at v = c(l)
    coarsening: Coarsening


def make_model(q_l: Sequence[float], q_y, scores: Optional[Sequence[float]] = None) -> DiscreteModel:
    """Build a model from raw tables and validate it."""
    q_y = np.array(q_y, dtype=float)
    if scores is None:
        scores = np.arange(q_y.shape[-1], dtype=float)
    return validate_model(DiscreteModel(np.array(q_l, dtype=float), q_y, np.array(scores, dtype=float)))


def validate_model(model: DiscreteModel) -> DiscreteModel:
    q_l, q_y, scores = model.q_l, model.q_y, model.scores
    if q_l.ndim != 1 or q_l.size == 0:
        raise NonStochastic("q_l must be a non-empty vector")
    k = q_l.size
    if q_y.ndim != 3 or q_y.shape[0] != 2 or q_y.shape[1] != k:
        raise NonStochastic(f"q_y must have shape (2, {k}, M), got {q_y.shape}")
    if scores.shape != (q_y.shape[2],):
        raise NonStochastic("scores must have one entry per outcome value")
    if not (np.all(np.isfinite(q_l)) and np.all(np.isfinite(q_y)) and np.all(np.isfinite(scores))):
        raise NonStochastic("tables contain non-finite entries")
    if (q_l < 0).any() or (q_y < 0).any():
        raise NegativeProbability("negative probability in q_l or q_y")
    if abs(q_l.sum() - 1.0) > TOL:
        raise NonStochastic(f"q_l sums to {q_l.sum()!r}")
    rows = q_y.sum(axis=2)
    bad = np.argwhere(np.abs(rows - 1.0) > TOL)
    if bad.size:
        a, l = bad[0]
        raise NonStochastic(f"q_y[{a}][{l}] sums to {rows[a, l]!r}")
    return model


def cate(model: DiscreteModel, coarsening: Optional[Coarsening] = None) -> np.ndarray:
    """Delta(l) = E[Y|1,l] - E[Y|0,l], on V when a coarsening is given."""
    if coarsening is not None:
        model = coarsen_model(model, coarsening).model
    m = model.mean_outcome()
    return m[1] - m[0]


def coarsen_model(model: DiscreteModel, c: Coarsening) -> CoarseModel:
    mapping = c.mapping
    if mapping.size != model.levels:
        raise ValueError(f"coarsening covers {mapping.size} levels, model has {model.levels}")
    nv = c.size
    q_v = np.bincount(mapping, weights=model.q_l, minlength=nv)
    empty = np.flatnonzero(q_v <= 0)
    if empty.size:
        raise EmptyCoarseLevel(f"coarse levels with zero mass: {empty.tolist()}")
    q_l_given_v = model.q_l / q_v[mapping]
    q_y = np.zeros((2, nv, model.outcomes))
    for l, v in enumerate(mapping):
        q_y[:, v, :] += model.q_y[:, l, :] * q_l_given_v[l]
    coarse = DiscreteModel(q_v, q_y, model.scores.copy())
    return CoarseModel(coarse, q_l_given_v, c)
