"""Cluster regimes: rank thresholds, intervention densities, optimal regimes.

A rank-preserving regime sorts the cluster by a rank function Lambda on the
covariate levels (or on a coarsening V = c(L)), breaks ties uniformly at
random and treats the top kappa individuals. Individuals in the last rank
group reached (the omega group) are treated with the probability that
exhausts the budget exactly.

Coarsened regimes are handled by lifting Lambda to the fine levels,
Lambda_L(l) = Lambda_V(c(l)). Members of one coarse level are then tied, and
tied individuals are exchangeable under uniform tie-breaking, so the lifted
regime induces the same law on (L, A) as the regime that reads V only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .combinatorics import composition_array, conditional_covariate_composition_pmf
from .errors import IncompatibleComposition, InfeasibleTarget, SizeMismatch, ZeroMassLevel
from .model import Coarsening, DiscreteModel, cate

EPS = 1e-12


@dataclass(frozen=True)
class RegimeSpec:
    """A single rank function or a mixture of them, plus the resource constraint.

    Exactly one of ``kappa`` (treated count) and ``kappa_star`` (treated
    proportion, kappa_n = floor(n * kappa_star)) is set. Rank vectors live on
    the coarse levels when ``coarsening`` is given.
    """

    ranks: tuple
    weights: tuple = (1.0,)
    kappa: Optional[int] = None
    kappa_star: Optional[float] = None
    gate: bool = False
    coarsening: Optional[Coarsening] = None

    def __post_init__(self):
        ranks = tuple(np.asarray(r, dtype=float) for r in self.ranks)
        object.__setattr__(self, "ranks", ranks)
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if not ranks:
            raise ValueError("regime needs at least one rank function")
        if len(ranks) != len(self.weights):
            raise ValueError("one weight per rank function")
        if any(r.shape != ranks[0].shape or r.ndim != 1 for r in ranks):
            raise ValueError("rank functions must share one level set")
        if any(not np.all(np.isfinite(r)) for r in ranks):
            raise ValueError("rank values must be finite")
        w = np.array(self.weights)
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if (self.kappa is None) == (self.kappa_star is None):
            raise ValueError("set exactly one of kappa and kappa_star")
        if self.kappa is not None and self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.kappa_star is not None and not 0.0 <= self.kappa_star <= 1.0:
            raise ValueError("kappa_star must lie in [0, 1]")
        if self.coarsening is not None and self.coarsening.size != ranks[0].size:
            raise ValueError("rank functions must be indexed by the coarse levels")

    @classmethod
    def rank_preserving(cls, lam: Sequence[float], **kw) -> "RegimeSpec":
        return cls(ranks=(lam,), weights=(1.0,), **kw)

    @classmethod
    def mixture(cls, lams: Sequence[Sequence[float]], weights: Sequence[float], **kw) -> "RegimeSpec":
        return cls(ranks=tuple(lams), weights=tuple(weights), **kw)

    @property
    def is_mixture(self) -> bool:
        return len(self.ranks) > 1

    def kappa_for(self, n: int) -> int:
        if self.kappa is not None:
            if self.kappa > n:
                raise SizeMismatch(f"kappa={self.kappa} exceeds cluster size {n}")
            return self.kappa
        # guard against n * kappa_star landing just below an integer
        return min(n, math.floor(n * self.kappa_star + 1e-9))

    def with_kappa(self, kappa: Optional[int] = None, kappa_star: Optional[float] = None) -> "RegimeSpec":
        return RegimeSpec(self.ranks, self.weights, kappa, kappa_star, self.gate, self.coarsening)

    def lifted(self, levels: int) -> "RegimeSpec":
        """The equivalent regime whose rank functions are indexed by fine levels."""
        if self.coarsening is None:
            if self.ranks[0].size != levels:
                raise SizeMismatch(f"rank function has {self.ranks[0].size} entries, model has {levels} levels")
            return self
        mapping = self.coarsening.mapping
        if mapping.size != levels:
            raise SizeMismatch(f"coarsening covers {mapping.size} levels, model has {levels}")
        return RegimeSpec(
            tuple(r[mapping] for r in self.ranks), self.weights, self.kappa, self.kappa_star, self.gate, None
        )


@dataclass(frozen=True)
class ThresholdResult:
    """omega is +inf when nobody is treated (kappa = 0)."""

    omega: float
    s_at: int
    s_above: int

    @property
    def none_treated(self) -> bool:
        return math.isinf(self.omega)


@dataclass(frozen=True)
class LargeClusterDensity:
    threshold: float  # omega_0, or eta_0 = max(omega_0, 0) when gated; nan for mixtures
    q: np.ndarray = field(repr=False)


def omega_threshold(counts, lam, kappa: int) -> ThresholdResult:
    counts = np.asarray(counts, dtype=np.int64)
    lam = np.asarray(lam, dtype=float)
    if counts.shape != lam.shape:
        raise SizeMismatch(f"composition has {counts.size} cells, rank function has {lam.size}")
    n = int(counts.sum())
    if not 0 <= kappa <= n:
        raise SizeMismatch(f"kappa={kappa} outside 0..{n}")
    if kappa == 0:
        return ThresholdResult(math.inf, 0, 0)
    present = sorted({float(lam[l]) for l in np.flatnonzero(counts > 0)}, reverse=True)
    above = 0
    for r in present:
        at = above + int(counts[lam == r].sum())
        if at >= kappa:
            return ThresholdResult(r, at, above)
        above = at
    raise AssertionError("unreachable: kappa <= n")


def _density_rows(comps: np.ndarray, lam: np.ndarray, kappa: int, gate: bool) -> np.ndarray:
    """Conditional treatment probability per level for each composition row."""
    comps = np.atleast_2d(comps)
    rows, k = comps.shape
    if kappa == 0:
        return np.zeros((rows, k))
    values = np.unique(lam)[::-1]
    group = np.searchsorted(-values, -lam)  # group index per level, 0 = highest rank
    ind = np.zeros((k, values.size))
    ind[np.arange(k), group] = 1.0
    at_group = comps @ ind
    cum = np.cumsum(at_group, axis=1)
    star = np.argmax(cum >= kappa, axis=1)
    s_at = cum[np.arange(rows), star]
    s_above = s_at - at_group[np.arange(rows), star]
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = (kappa - s_above) / (s_at - s_above)
    g = group[None, :]
    st = star[:, None]
    q = np.where(g < st, 1.0, np.where(g == st, ratio[:, None], 0.0))
    if gate:
        omega = values[star]
        positive = (lam > 0).astype(float)
        q = np.where((omega > 0)[:, None], q, positive[None, :])
    return q


def _component_density(counts, lam, kappa, gate) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != lam.shape:
        raise SizeMismatch(f"composition has {counts.size} cells, rank function has {lam.size}")
    n = int(counts.sum())
    if not 0 <= kappa <= n:
        raise SizeMismatch(f"kappa={kappa} outside 0..{n}")
    return _density_rows(counts[None, :], lam, kappa, gate)[0]


def conditional_intervention_density(counts, spec: RegimeSpec) -> np.ndarray:
    """q*(1 | l) given the covariate composition, for every level."""
    counts = np.asarray(counts, dtype=np.int64)
    spec = spec.lifted(counts.size)
    kappa = spec.kappa_for(int(counts.sum()))
    q = np.zeros(counts.size)
    for lam, w in zip(spec.ranks, spec.weights):
        if w > 0:
            q += w * _component_density(counts, lam, kappa, spec.gate)
    return q


def mixture_conditional_density(counts, spec: RegimeSpec) -> np.ndarray:
    return conditional_intervention_density(counts, spec)


@lru_cache(maxsize=64)
def _cached_compositions(n: int, k: int) -> np.ndarray:
    arr = composition_array(n, k)
    arr.setflags(write=False)
    return arr


def marginal_intervention_density(
    model: DiscreteModel, spec: RegimeSpec, n: int, level: Optional[int] = None
):
    """Individual-level q*_i(1 | l) in a cluster of size n.

    Sums the composition-conditional density against the law of the other
    n-1 individuals' composition. Returns all levels when ``level`` is None.
    """
    if n < 1:
        raise SizeMismatch("cluster size must be positive")
    if level is not None and model.q_l[level] <= 0:
        raise ZeroMassLevel(f"level {level} has zero probability")
    kappa = spec.kappa_for(n)
    if spec.coarsening is not None:
        mapping = spec.coarsening.mapping
        q_in = np.bincount(mapping, weights=model.q_l, minlength=spec.coarsening.size)
        lams = spec.ranks
    else:
        mapping = None
        q_in = model.q_l
        lams = spec.lifted(model.levels).ranks
    comps = _cached_compositions(n, q_in.size)
    dens = np.zeros((comps.shape[0], q_in.size))
    for lam, w in zip(lams, spec.weights):
        if w > 0:
            dens += w * _density_rows(comps, lam, kappa, spec.gate)
    out = np.empty(q_in.size)
    for v in range(q_in.size):
        weights = conditional_covariate_composition_pmf(comps, v, q_in)
        out[v] = min(1.0, max(0.0, float(weights @ dens[:, v])))
    if mapping is not None:
        out = out[mapping]
    return out if level is None else float(out[level])


def _bounded_compositions(total: int, caps: Sequence[int]):
    """Vectors t with 0 <= t_j <= caps_j and sum total."""
    if not caps:
        if total == 0:
            yield ()
        return
    head, rest = caps[0], caps[1:]
    room = sum(rest)
    for t in range(max(0, total - room), min(head, total) + 1):
        for tail in _bounded_compositions(total - t, rest):
            yield (t,) + tail


def _component_support(counts: np.ndarray, lam: np.ndarray, kappa: int, gate: bool) -> dict:
    if kappa == 0:
        return {tuple([0] * counts.size): 1.0}
    th = omega_threshold(counts, lam, kappa)
    if gate and th.omega <= 0:
        return {tuple(np.where(lam > 0, counts, 0).tolist()): 1.0}
    base = np.where(lam > th.omega, counts, 0)
    grp = [l for l in range(counts.size) if lam[l] == th.omega and counts[l] > 0]
    need = kappa - th.s_above
    denom = math.comb(th.s_at - th.s_above, need)
    out = {}
    for t in _bounded_compositions(need, [int(counts[l]) for l in grp]):
        b1 = base.copy()
        num = 1
        for l, tl in zip(grp, t):
            b1[l] = tl
            num *= math.comb(int(counts[l]), tl)
        out[tuple(b1.tolist())] = num / denom
    return out


def compositional_support(counts, spec: RegimeSpec) -> dict:
    """Map treated-count vectors b(1, .) to their probability given the composition.

    Only compositions with positive probability are listed.
    """
    counts = np.asarray(counts, dtype=np.int64)
    spec = spec.lifted(counts.size)
    kappa = spec.kappa_for(int(counts.sum()))
    out: dict = {}
    for lam, w in zip(spec.ranks, spec.weights):
        if w <= 0:
            continue
        for b1, p in _component_support(counts, lam, kappa, spec.gate).items():
            out[b1] = out.get(b1, 0.0) + w * p
    return out


def compositional_intervention_density(b, counts, spec: RegimeSpec) -> float:
    """Probability of the joint table ``b[a, l]`` given the covariate composition."""
    b = np.asarray(b, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    if b.shape != (2, counts.size) or (b < 0).any() or not np.array_equal(b.sum(axis=0), counts):
        raise IncompatibleComposition("joint table margins do not match the covariate composition")
    return compositional_support(counts, spec).get(tuple(b[1].tolist()), 0.0)


def _large_component(q_in: np.ndarray, lam: np.ndarray, kappa_star: float, gate: bool):
    values = sorted({float(lam[l]) for l in np.flatnonzero(q_in > 0)}, reverse=True)
    omega = -math.inf
    above = 0.0
    for r in values:
        if above > kappa_star + EPS:
            break
        omega = r
        above += float(q_in[lam == r].sum())
    else:
        if above <= kappa_star + EPS:
            # the whole population fits in the budget
            omega = -math.inf
    if math.isinf(omega):
        q = np.ones(lam.size)
    else:
        above_omega = float(q_in[lam > omega].sum())
        ratio = min(1.0, max(0.0, (kappa_star - above_omega) / float(q_in[lam == omega].sum())))
        q = np.where(lam > omega, 1.0, np.where(lam == omega, ratio, 0.0))
    if gate:
        if omega <= 0:
            q = (lam > 0).astype(float)
        return max(omega, 0.0), q
    return omega, q


def large_cluster_density(model: DiscreteModel, spec: RegimeSpec) -> LargeClusterDensity:
    """Limit of q*_i(1 | l) as n grows with kappa_n = floor(n * kappa_star)."""
    if spec.kappa_star is None:
        raise ValueError("large-cluster density needs kappa_star")
    if spec.coarsening is not None:
        mapping = spec.coarsening.mapping
        q_in = np.bincount(mapping, weights=model.q_l, minlength=spec.coarsening.size)
    else:
        mapping = None
        q_in = model.q_l
        spec = spec.lifted(model.levels)
    q = np.zeros(q_in.size)
    threshold = math.nan
    for lam, w in zip(spec.ranks, spec.weights):
        th, qc = _large_component(q_in, lam, spec.kappa_star, spec.gate)
        q += w * qc
        if not spec.is_mixture:
            threshold = th
    if mapping is not None:
        q = q[mapping]
    return LargeClusterDensity(threshold, q)


def large_cluster_threshold(q_in, lam, kappa_star: float) -> float:
    """omega_0 = inf{c : P(Lambda > c) <= kappa_star} for a law on levels."""
    return _large_component(np.asarray(q_in, float), np.asarray(lam, float), kappa_star, False)[0]


def optimal_regime(
    model: DiscreteModel,
    coarsening: Optional[Coarsening] = None,
    kappa: Optional[int] = None,
    kappa_star: Optional[float] = None,
    gated: bool = False,
) -> RegimeSpec:
    """The rank-preserving regime that ranks by the conditional average effect."""
    delta = cate(model, coarsening)
    return RegimeSpec.rank_preserving(
        delta, kappa=kappa, kappa_star=kappa_star, gate=gated, coarsening=coarsening
    )


def decompose_fractional_allocation(counts, p, tol: float = 1e-9) -> list:
    """Write the per-level treated means counts*p as a mixture of integer allocations.

    Greedy vertex peeling: each vertex rounds the m largest remaining
    fractional parts up (ties to the lowest level index) and takes the
    largest weight that keeps every residual in range.
    """
    counts = np.asarray(counts, dtype=np.int64)
    p = np.asarray(p, dtype=float)
    if counts.shape != p.shape:
        raise InfeasibleTarget("composition and density have different lengths")
    if (p < -tol).any() or (p > 1 + tol).any():
        raise InfeasibleTarget("treatment probabilities must lie in [0, 1]")
    x = counts * np.clip(p, 0.0, 1.0)
    total = x.sum()
    kappa = round(total)
    if abs(total - kappa) > tol:
        raise InfeasibleTarget(f"expected treated count {total!r} is not an integer")
    # snap only float noise so the expectation identity stays exact
    snap = 64 * np.finfo(float).eps * max(1, int(counts.sum()))
    floor = np.floor(x + snap).astype(np.int64)
    frac = np.clip(x - floor, 0.0, None)
    frac[frac < snap] = 0.0
    m = kappa - int(floor.sum())
    if m < 0 or m > int((frac > 0).sum()):
        raise InfeasibleTarget("fractional parts are inconsistent with the treated count")
    if m == 0:
        return [(tuple(floor.tolist()), 1.0)]
    out = []
    remaining = 1.0
    resid = frac.copy()
    k = counts.size
    for _ in range(k + 1):
        order = sorted(range(k), key=lambda l: (-resid[l], l))
        chosen, rest = order[:m], order[m:]
        step = min(resid[chosen].min(), remaining - (resid[rest].max() if rest else 0.0))
        step = max(step, 0.0)
        last = remaining - step <= snap
        if last:
            step = remaining
        vertex = floor.copy()
        vertex[chosen] += 1
        if step > 0:
            out.append((tuple(vertex.tolist()), step))
        remaining -= step
        resid[chosen] -= step
        resid[resid < snap] = 0.0
        if last:
            break
    total_w = sum(w for _, w in out)
    return [(t, float(w / total_w)) for t, w in out]


def sample_allocation(levels, spec: RegimeSpec, rng: np.random.Generator, n_levels: Optional[int] = None) -> np.ndarray:
    """Rank-and-treat: draw a component, sort by rank with random tie-breaks, treat the top kappa."""
    levels = np.asarray(levels, dtype=np.int64)
    n = levels.size
    if spec.coarsening is not None:
        lams = [r[spec.coarsening.mapping] for r in spec.ranks]
    else:
        lams = list(spec.ranks)
    kappa = spec.kappa_for(n)
    mix_rng, tie_rng = rng.spawn(2)
    comp = 0
    if spec.is_mixture:
        comp = int(mix_rng.choice(len(lams), p=np.array(spec.weights)))
    lam = lams[comp][levels]
    jitter = tie_rng.permutation(n)
    order = np.lexsort((jitter, -lam))
    treated = order[:kappa]
    if spec.gate:
        treated = treated[lam[treated] > 0]
    a = np.zeros(n, dtype=np.int64)
    a[treated] = 1
    return a


def treated_mass(counts, q) -> float:
    return float(np.dot(np.asarray(counts, dtype=float), q))


__all__ = [
    "RegimeSpec",
    "ThresholdResult",
    "LargeClusterDensity",
    "omega_threshold",
    "conditional_intervention_density",
    "mixture_conditional_density",
    "marginal_intervention_density",
    "compositional_intervention_density",
    "compositional_support",
    "large_cluster_density",
    "large_cluster_threshold",
    "optimal_regime",
    "decompose_fractional_allocation",
    "sample_allocation",
]
