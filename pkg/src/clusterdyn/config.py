"""JSON run configuration. Unknown keys are rejected at every level."""

from __future__ import annotations

import json
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .model import Coarsening, DiscreteModel, make_model
from .regimes import RegimeSpec, optimal_regime
from .simulator import Bernoulli, MixedFlip, RegimeBased, SubCluster


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelBlock(_Strict):
    q_l: list[float]
    q_y: list[list[list[float]]]  # [a][l][y]
    scores: Optional[list[float]] = None


class RegimeBlock(_Strict):
    type: Literal["rank_preserving", "mixture", "optimal", "optimal_gated"]
    # rank_preserving
    rank: Optional[list[float]] = Field(default=None, alias="lambda")
    # mixture
    ranks: Optional[list[list[float]]] = Field(default=None, alias="lambdas")
    weights: Optional[list[float]] = None
    kappa: Optional[int] = None
    kappa_star: Optional[float] = None
    gate: bool = False


class RegimeMechanism(_Strict):
    type: Literal["regime"]
    regime: RegimeBlock


class BernoulliMechanism(_Strict):
    type: Literal["bernoulli"]
    p: list[float]


class MixedFlipMechanism(_Strict):
    type: Literal["mixed_flip"]
    rank: list[float] = Field(alias="lambda")
    rank_star: list[float] = Field(alias="lambda_star")
    kappa_star: float = 0.5


class SubClusterMechanism(_Strict):
    type: Literal["sub_cluster"]
    max_size: int
    rank: list[float] = Field(alias="lambda")
    size_probs: Optional[list[float]] = None
    kappa_probs: Optional[list[list[float]]] = None


MechanismBlock = Union[RegimeMechanism, BernoulliMechanism, MixedFlipMechanism, SubClusterMechanism]


class RunConfig(_Strict):
    model: ModelBlock
    coarsening: Optional[list[int]] = None
    regime: Optional[RegimeBlock] = None
    mechanism: Optional[MechanismBlock] = Field(default=None, discriminator="type")
    n: Optional[int] = None
    n_star: Optional[int] = None
    seed: int = 0
    budget: Optional[int] = None
    alpha: float = 0.05
    burn_in: Optional[int] = None
    reps: int = 1
    data: Optional[str] = None


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        raw = json.load(fh)
    return RunConfig.model_validate(raw)


def build_model(cfg: RunConfig) -> DiscreteModel:
    return make_model(cfg.model.q_l, cfg.model.q_y, cfg.model.scores)


def build_coarsening(cfg: RunConfig) -> Optional[Coarsening]:
    return Coarsening(np.array(cfg.coarsening)) if cfg.coarsening is not None else None


def build_regime(
    block: RegimeBlock,
    model: DiscreteModel,
    coarsening: Optional[Coarsening],
    kappa: Optional[int] = None,
    kappa_star: Optional[float] = None,
) -> RegimeSpec:
    if kappa is None and kappa_star is None:
        kappa, kappa_star = block.kappa, block.kappa_star
    if block.type in ("optimal", "optimal_gated"):
        return optimal_regime(model, coarsening, kappa, kappa_star, gated=block.type == "optimal_gated")
    if block.type == "rank_preserving":
        if block.rank is None:
            raise ValueError("rank_preserving regime needs 'lambda'")
        return RegimeSpec.rank_preserving(
            block.rank, kappa=kappa, kappa_star=kappa_star, gate=block.gate, coarsening=coarsening
        )
    if block.ranks is None or block.weights is None:
        raise ValueError("mixture regime needs 'lambdas' and 'weights'")
    return RegimeSpec.mixture(
        block.ranks, block.weights, kappa=kappa, kappa_star=kappa_star, gate=block.gate, coarsening=coarsening
    )


def build_mechanism(cfg: RunConfig, model: DiscreteModel, coarsening: Optional[Coarsening]):
    mech = cfg.mechanism
    if mech is None:
        raise ValueError("config has no 'mechanism' block")
    if isinstance(mech, RegimeMechanism):
        return RegimeBased(build_regime(mech.regime, model, coarsening))
    if isinstance(mech, BernoulliMechanism):
        return Bernoulli(np.array(mech.p))
    if isinstance(mech, MixedFlipMechanism):
        return MixedFlip(np.array(mech.rank), np.array(mech.rank_star), mech.kappa_star)
    if mech.size_probs is None and mech.kappa_probs is None:
        return SubCluster.uniform(mech.max_size, np.array(mech.rank))
    if mech.size_probs is None or mech.kappa_probs is None:
        raise ValueError("sub_cluster needs both size_probs and kappa_probs, or neither")
    return SubCluster(mech.max_size, tuple(mech.size_probs), tuple(mech.kappa_probs), np.array(mech.rank))
