"""Factual and counterfactual cluster simulation, plus the brute-force oracle.

Every cluster is generated as L_i iid from Q_L, then a treatment vector from
an assignment mechanism that reads the whole covariate vector and its own
randomizer, then Y_i independently from Q_Y(. | A_i, L_i).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations, product
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import LimitExceeded
from .gformula import (
    CustomFunctional,
    IndicatorAtLeast,
    MeanOutcome,
    OutcomeCountDistribution,
    TreatedCountDistribution,
)
from .model import DiscreteModel
from .regimes import RegimeSpec, sample_allocation


# -- mechanisms -------------------------------------------------------------


@dataclass(frozen=True)
class RegimeBased:
    spec: RegimeSpec


@dataclass(frozen=True)
class Bernoulli:
    p: np.ndarray  # treatment probability per level

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if (p < 0).any() or (p > 1).any():
            raise ValueError("Bernoulli probabilities must lie in [0, 1]")
        object.__setattr__(self, "p", p)


@dataclass(frozen=True)
class MixedFlip:
    """Per cluster, rank by ``lam`` or ``lam_star`` with probability 1/2 and treat kappa_n.

    kappa_n defaults to floor(n / 2).
    """

    lam: np.ndarray
    lam_star: np.ndarray
    kappa_star: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float))
        object.__setattr__(self, "lam_star", np.asarray(self.lam_star, dtype=float))


@dataclass(frozen=True)
class SubCluster:
    """Allocation run independently within blocks of at most ``max_size`` individuals.

    ``size_probs[s-1]`` is the probability of a block of size s and
    ``kappa_probs[s-1]`` is the law of the block budget on 0..s.
    """

    max_size: int
    size_probs: tuple
    kappa_probs: tuple
    lam: np.ndarray

    def __post_init__(self):
        sp = np.asarray(self.size_probs, dtype=float)
        if sp.shape != (self.max_size,) or (sp < 0).any() or abs(sp.sum() - 1) > 1e-12:
            raise ValueError("size law must be a pmf on 1..max_size")
        kp = tuple(np.asarray(k, dtype=float) for k in self.kappa_probs)
        if len(kp) != self.max_size:
            raise ValueError("need one budget law per block size")
        for s, k in enumerate(kp, start=1):
            if k.shape != (s + 1,) or (k < 0).any() or abs(k.sum() - 1) > 1e-12:
                raise ValueError(f"budget law for block size {s} must be a pmf on 0..{s}")
        object.__setattr__(self, "size_probs", sp)
        object.__setattr__(self, "kappa_probs", kp)
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float))

    @classmethod
    def uniform(cls, max_size: int, lam) -> "SubCluster":
        """Uniform block sizes and uniform block budgets."""
        return cls(
            max_size,
            tuple(np.full(max_size, 1.0 / max_size)),
            tuple(np.full(s + 1, 1.0 / (s + 1)) for s in range(1, max_size + 1)),
            lam,
        )


Mechanism = RegimeBased | Bernoulli | MixedFlip | SubCluster


@dataclass
class ClusterData:
    L: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    W: Optional[np.ndarray] = None
    seed: Optional[tuple] = field(default=None, compare=False)

    @property
    def n(self) -> int:
        return int(self.L.size)


# -- simulation -------------------------------------------------------------


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def child_seed(seed: int, rep: int) -> np.random.SeedSequence:
    """Counter-based child stream for replication ``rep``."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(rep,))


def _rank_and_treat(lam_i: np.ndarray, kappa: int, rng: np.random.Generator) -> np.ndarray:
    order = np.lexsort((rng.permutation(lam_i.size), -lam_i))
    a = np.zeros(lam_i.size, dtype=np.int64)
    a[order[:kappa]] = 1
    return a


def _assign(mechanism, L: np.ndarray, rng: np.random.Generator):
    n = L.size
    if isinstance(mechanism, RegimeBased):
        return sample_allocation(L, mechanism.spec, rng), None
    if isinstance(mechanism, Bernoulli):
        return (rng.random(n) < mechanism.p[L]).astype(np.int64), None
    if isinstance(mechanism, MixedFlip):
        lam = mechanism.lam if rng.random() < 0.5 else mechanism.lam_star
        kappa = math.floor(n * mechanism.kappa_star + 1e-9)
        return _rank_and_treat(lam[L], kappa, rng), None
    if isinstance(mechanism, SubCluster):
        sizes = []
        covered = 0
        while covered < n:
            s = int(rng.choice(mechanism.max_size, p=mechanism.size_probs)) + 1
            s = min(s, n - covered)
            sizes.append(s)
            covered += s
        A = np.zeros(n, dtype=np.int64)
        W = np.zeros(n, dtype=np.int64)
        start = 0
        for b, s in enumerate(sizes):
            kappa = int(rng.choice(s + 1, p=mechanism.kappa_probs[s - 1]))
            block = slice(start, start + s)
            A[block] = _rank_and_treat(mechanism.lam[L[block]], kappa, rng)
            W[block] = b
            start += s
        return A, W
    raise TypeError(f"unknown mechanism {mechanism!r}")


def _draw_outcomes(model: DiscreteModel, L: np.ndarray, A: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(model.q_y[A, L], axis=1)
    u = rng.random(L.size)
    return np.minimum((u[:, None] >= cdf).sum(axis=1), model.outcomes - 1).astype(np.int64)


def simulate_cluster(model: DiscreteModel, mechanism, n: int, seed) -> ClusterData:
    if n < 1:
        raise ValueError("cluster size must be positive")
    ss = _seed_sequence(seed)
    streams = [np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (j,)) for j in range(3)]
    rng_l, rng_a, rng_y = (np.random.default_rng(s) for s in streams)
    L = rng_l.choice(model.levels, size=n, p=model.q_l).astype(np.int64)
    A, W = _assign(mechanism, L, rng_a)
    Y = _draw_outcomes(model, L, A, rng_y)
    return ClusterData(L, A, Y, W, seed=(ss.entropy, tuple(ss.spawn_key)))


def simulate_counterfactual(model: DiscreteModel, target: RegimeSpec, n: int, seed) -> ClusterData:
    """Cluster generated under the target regime; outcomes depend on own treatment only."""
    return simulate_cluster(model, RegimeBased(target), n, seed)


def replicate(
    model: DiscreteModel,
    mechanism,
    n: int,
    reps: int,
    seed: int,
    sink: Optional[Callable[[int, ClusterData], None]] = None,
    threads: int = 1,
) -> list:
    """Simulate ``reps`` clusters with child streams child(seed, r).

    Results are returned in rep order; ``sink`` (if given) is called with
    (rep, data) as each finishes, in no particular order.
    """

    def one(r):
        data = simulate_cluster(model, mechanism, n, child_seed(seed, r))
        if sink is not None:
            sink(r, data)
        return data

    if threads <= 1:
        return [one(r) for r in range(reps)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(reps)))


# -- oracle -----------------------------------------------------------------


@dataclass(frozen=True)
class OracleLimits:
    n: int = 5
    levels: int = 3
    outcomes: int = 3


def _allocations(lam_i: np.ndarray, kappa: int, gate: bool):
    """All equally likely treated sets under rank-and-treat with uniform tie-breaks."""
    n = lam_i.size
    chosen: list = []
    subsets = None
    for r in sorted(set(lam_i.tolist()), reverse=True):
        room = kappa - len(chosen)
        if room == 0:
            break
        members = [i for i in range(n) if lam_i[i] == r]
        if len(members) <= room:
            chosen += members
        else:
            subsets = [chosen + list(c) for c in combinations(members, room)]
            break
    if subsets is None:
        subsets = [chosen]
    for s in subsets:
        a = np.zeros(n, dtype=np.int64)
        for i in s:
            if not gate or lam_i[i] > 0:
                a[i] = 1
        yield a, 1.0 / len(subsets)


def exact_oracle(model: DiscreteModel, target: RegimeSpec, n: int, h=MeanOutcome(), limits: OracleLimits = OracleLimits()):
    """Exact E[h] under the target regime by enumerating covariates, tie-breaks and outcomes."""
    if n > limits.n or model.levels > limits.levels or model.outcomes > limits.outcomes:
        raise LimitExceeded(
            f"oracle limited to n<={limits.n}, K<={limits.levels}, M<={limits.outcomes}; "
            f"got n={n}, K={model.levels}, M={model.outcomes}"
        )
    if target.coarsening is not None:
        lams = [r[target.coarsening.mapping] for r in target.ranks]
    else:
        lams = list(target.ranks)
    kappa = target.kappa_for(n)
    dist = isinstance(h, (TreatedCountDistribution, OutcomeCountDistribution))
    total = np.zeros(n + 1) if dist else 0.0
    for lvec in product(range(model.levels), repeat=n):
        L = np.array(lvec, dtype=np.int64)
        pl = float(np.prod(model.q_l[L]))
        if pl == 0:
            continue
        for lam, w in zip(lams, target.weights):
            if w == 0:
                continue
            for A, pa in _allocations(lam[L], kappa, target.gate):
                for yvec in product(range(model.outcomes), repeat=n):
                    Y = np.array(yvec, dtype=np.int64)
                    py = float(np.prod(model.q_y[A, L, Y]))
                    if py == 0:
                        continue
                    total = total + pl * w * pa * py * _evaluate(h, model, L, A, Y)
    return total if dist else float(total)


def _evaluate(h, model: DiscreteModel, L, A, Y):
    n = L.size
    if isinstance(h, MeanOutcome):
        return float(model.scores[Y].mean())
    if isinstance(h, TreatedCountDistribution):
        out = np.zeros(n + 1)
        out[int(A.sum())] = 1.0
        return out
    if isinstance(h, OutcomeCountDistribution):
        out = np.zeros(n + 1)
        out[int((Y == h.y).sum())] = 1.0
        return out
    if isinstance(h, IndicatorAtLeast):
        return float((Y == h.y).sum() >= h.x)
    if isinstance(h, CustomFunctional):
        o = np.zeros(model.q_y.shape, dtype=np.int64)
        np.add.at(o, (A, L, Y), 1)
        return float(h.fn(o))
    raise TypeError(f"unknown functional {h!r}")
