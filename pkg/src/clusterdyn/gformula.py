"""Identification functionals: individual, compositional, reduced and large-cluster g-formulae."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional, Sequence

import numpy as np

from .combinatorics import (
    composition_array,
    count_compositions,
    covariate_composition_pmf,
    enumerate_compositions,
)
from .errors import BudgetExceeded
from .model import Coarsening, DiscreteModel, coarsen_model
from .regimes import (
    RegimeSpec,
    compositional_support,
    large_cluster_density,
    marginal_intervention_density,
)

DEFAULT_BUDGET = 5_000_000
N_SHARDS = 16


def enumeration_budget(budget: Optional[int] = None) -> int:
    if budget is not None:
        return int(budget)
    env = os.environ.get("CLUSTERDYN_BUDGET")
    return int(env) if env else DEFAULT_BUDGET


# -- functionals ------------------------------------------------------------


@dataclass(frozen=True)
class MeanOutcome:
    """Cluster-average outcome score."""


@dataclass(frozen=True)
class TreatedCountDistribution:
    """pmf of the number treated, over 0..n."""


@dataclass(frozen=True)
class OutcomeCountDistribution:
    """pmf of the number of individuals with outcome index ``y``, over 0..n."""

    y: int = 1


@dataclass(frozen=True)
class IndicatorAtLeast:
    """Probability that at least ``x`` individuals have outcome index ``y``."""

    y: int
    x: int


@dataclass(frozen=True)
class CustomFunctional:
    """Arbitrary real function of the outcome table.

    For the compositional g-formula the table is indexed ``o[a, l, y]``;
    for the reduced g-formula it is ``w[v, y]``.
    """

    fn: Callable[[np.ndarray], float]


Functional = MeanOutcome | TreatedCountDistribution | OutcomeCountDistribution | IndicatorAtLeast | CustomFunctional


def is_distribution(h) -> bool:
    return isinstance(h, (TreatedCountDistribution, OutcomeCountDistribution))


@dataclass
class GFormulaReport:
    value: float | np.ndarray
    n: int
    kappa: Optional[int] = None
    kappa_star: Optional[float] = None
    terms: int = 0
    pruned: int = 0
    meta: dict = field(default_factory=dict)


# -- helpers ----------------------------------------------------------------


def _binom_pmf(size: int, p: float) -> np.ndarray:
    k = np.arange(size + 1)
    logc = np.array([math.lgamma(size + 1) - math.lgamma(j + 1) - math.lgamma(size - j + 1) for j in k])
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(k > 0, k * np.log(p) if p > 0 else -np.inf, 0.0)
        logq = np.where(size - k > 0, (size - k) * np.log1p(-p) if p < 1 else -np.inf, 0.0)
    return np.exp(logc + logp + logq)


def _count_pmf(b: np.ndarray, q_y: np.ndarray, y: int) -> np.ndarray:
    """pmf of the number of outcomes equal to y, convolving per-cell binomials."""
    pmf = np.ones(1)
    for a in range(b.shape[0]):
        for l in range(b.shape[1]):
            if b[a, l] > 0:
                pmf = np.convolve(pmf, _binom_pmf(int(b[a, l]), float(q_y[a, l, y])))
    return pmf


def _cell_outcomes(size: int, probs: np.ndarray):
    """(counts, prob) over outcome compositions of one cell."""
    out = []
    logn = math.lgamma(size + 1)
    for o in enumerate_compositions(size, probs.size):
        lp = logn
        zero = False
        for c, p in zip(o, probs):
            if c:
                if p <= 0:
                    zero = True
                    break
                lp += c * math.log(p) - math.lgamma(c + 1)
        out.append((o, 0.0 if zero else math.exp(lp)))
    return out


def _fixed_tree_sum(parts: Sequence):
    """Pairwise reduction in a fixed order so results do not depend on scheduling."""
    parts = list(parts)
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _shards(total: int, shards: int = N_SHARDS):
    size = max(1, -(-total // shards))
    return [(s, min(total, s + size)) for s in range(0, total, size)]


def _run_shards(fn, ranges, threads: int):
    if threads <= 1 or len(ranges) <= 1:
        return [fn(r) for r in ranges]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, ranges))


# -- individual-level -------------------------------------------------------


def individual_gformula_expectation(model: DiscreteModel, spec: RegimeSpec, n: int, h=None) -> float:
    """Sum over (y, a, l) of h(y, a, l) Q_Y(y|a,l) q*_i(a|l) Q_L(l).

    ``h`` is a callable (y_index, a, l) -> real or an array indexed
    [a, l, y]; by default the outcome score.
    """
    q1 = marginal_intervention_density(model, spec, n)
    qa = np.stack([1.0 - q1, q1])
    if h is None:
        table = np.broadcast_to(model.scores, model.q_y.shape)
    elif callable(h):
        table = np.array(
            [[[h(y, a, l) for y in range(model.outcomes)] for l in range(model.levels)] for a in range(2)],
            dtype=float,
        )
    else:
        table = np.asarray(h, dtype=float)
    return float(np.sum(table * model.q_y * qa[:, :, None] * model.q_l[None, :, None]))


# -- compositional ----------------------------------------------------------


def _inner(h, b: np.ndarray, model: DiscreteModel, n: int, cell_cache: dict):
    if isinstance(h, MeanOutcome):
        return float(np.sum(b * model.mean_outcome())) / n
    if isinstance(h, TreatedCountDistribution):
        out = np.zeros(n + 1)
        out[int(b[1].sum())] = 1.0
        return out
    if isinstance(h, OutcomeCountDistribution):
        pmf = _count_pmf(b, model.q_y, h.y)
        out = np.zeros(n + 1)
        out[: pmf.size] = pmf
        return out
    if isinstance(h, IndicatorAtLeast):
        pmf = _count_pmf(b, model.q_y, h.y)
        return float(pmf[h.x:].sum()) if h.x > 0 else 1.0
    if isinstance(h, CustomFunctional):
        cells = [(a, l) for a in range(2) for l in range(model.levels)]
        options = []
        for a, l in cells:
            key = (a, l, int(b[a, l]))
            if key not in cell_cache:
                cell_cache[key] = _cell_outcomes(int(b[a, l]), model.q_y[a, l])
            options.append(cell_cache[key])
        total = 0.0
        o = np.zeros(model.q_y.shape, dtype=np.int64)
        for combo in product(*options):
            p = 1.0
            for (a, l), (counts, pc) in zip(cells, combo):
                o[a, l] = counts
                p *= pc
            if p > 0:
                total += p * float(h.fn(o.copy()))
        return total
    raise TypeError(f"unknown functional {h!r}")


def _inner_terms(h, b: np.ndarray, m: int) -> int:
    if isinstance(h, CustomFunctional):
        return math.prod(math.comb(int(x) + m - 1, m - 1) for x in b.ravel())
    return 1


def compositional_gformula_expectation(
    model: DiscreteModel,
    spec: RegimeSpec,
    n: int,
    h=MeanOutcome(),
    budget: Optional[int] = None,
    threads: int = 1,
) -> GFormulaReport:
    """Expectation of h(O) under the compositional g-formula.

    Sums over covariate compositions, then over joint compositions with
    positive regime probability, then over outcomes. Named functionals use
    closed-form inner sums; a custom functional enumerates outcome tables.
    """
    budget = enumeration_budget(budget)
    k = model.levels
    n_l = count_compositions(n, k)
    if n_l > budget:
        raise BudgetExceeded(n_l, budget, lower_bound=True)
    comps = composition_array(n, k)
    kappa = spec.kappa_for(n)
    pl = covariate_composition_pmf(comps, model.q_l)
    supports = []
    terms = pruned = 0
    for row, p in zip(comps, pl):
        sup = compositional_support(row, spec)
        supports.append(sup)
        for b1 in sup:
            b = np.stack([row - np.array(b1), np.array(b1)])
            t = _inner_terms(h, b, model.outcomes)
            terms += t
            if p <= 0:
                pruned += t
    if terms > budget:
        raise BudgetExceeded(terms, budget)

    def shard(rng):
        cache: dict = {}
        acc = np.zeros(n + 1) if is_distribution(h) else 0.0
        for idx in range(*rng):
            if pl[idx] <= 0:
                continue
            row = comps[idx]
            for b1, pb in supports[idx].items():
                b = np.stack([row - np.array(b1), np.array(b1)])
                acc = acc + pl[idx] * pb * _inner(h, b, model, n, cache)
        return acc

    parts = _run_shards(shard, _shards(len(comps)), threads)
    value = _fixed_tree_sum(parts)
    if not is_distribution(h):
        value = float(value)
    return GFormulaReport(value, n, kappa=kappa, kappa_star=spec.kappa_star, terms=terms, pruned=pruned)


# -- reduced compositional --------------------------------------------------


def _coarse_cell_law(u1: int, u0: int, q1: np.ndarray, q0: np.ndarray) -> dict:
    """Law of the outcome counts at one coarse level given u1 treated and u0 untreated."""
    law: dict = {}
    for o1, p1 in _cell_outcomes(u1, q1):
        if p1 <= 0:
            continue
        for o0, p0 in _cell_outcomes(u0, q0):
            if p0 <= 0:
                continue
            key = tuple(x + y for x, y in zip(o1, o0))
            law[key] = law.get(key, 0.0) + p1 * p0
    return law


def reduced_compositional_expectation(
    model: DiscreteModel,
    coarsening: Coarsening,
    spec: RegimeSpec,
    n: int,
    h=MeanOutcome(),
    budget: Optional[int] = None,
) -> GFormulaReport:
    """Compositional g-formula over the coarse table w[v, y].

    ``spec`` ranks the coarse levels. The report's ``terms`` is the number
    of outcome tables w with positive probability.
    """
    if isinstance(h, TreatedCountDistribution):
        raise ValueError("the treated count is not a function of the reduced outcome table")
    budget = enumeration_budget(budget)
    cm = coarsen_model(model, coarsening).model
    nv, m = cm.levels, cm.outcomes
    n_v = count_compositions(n, nv)
    if n_v > budget:
        raise BudgetExceeded(n_v, budget, lower_bound=True)
    v_spec = RegimeSpec(spec.ranks, spec.weights, spec.kappa, spec.kappa_star, spec.gate, None)
    comps = composition_array(n, nv)
    pv = covariate_composition_pmf(comps, cm.q_l)
    per_cell = math.comb
    plan = []
    upper = 0
    for row, p in zip(comps, pv):
        if p <= 0:
            continue
        sup = compositional_support(row, v_spec)
        plan.append((row, p, sup))
        upper += len(sup) * math.prod(per_cell(int(x) + m - 1, m - 1) for x in row)
    if upper > budget:
        raise BudgetExceeded(upper, budget)

    law: dict = {}
    for row, p, sup in plan:
        for u1, pu in sup.items():
            cells = [
                _coarse_cell_law(int(u1[v]), int(row[v] - u1[v]), cm.q_y[1, v], cm.q_y[0, v]).items()
                for v in range(nv)
            ]
            for combo in product(*cells):
                pw = p * pu
                key = []
                for w_v, pc in combo:
                    pw *= pc
                    key.extend(w_v)
                if pw > 0:
                    key = tuple(key)
                    law[key] = law.get(key, 0.0) + pw

    keys = sorted(law)
    w = np.array(keys, dtype=np.int64).reshape(len(keys), nv, m)
    probs = np.array([law[k_] for k_ in keys])
    positive = int((probs > 0).sum())
    if isinstance(h, MeanOutcome):
        value = float(probs @ ((w @ cm.scores).sum(axis=1) / n))
    elif isinstance(h, OutcomeCountDistribution):
        value = np.bincount(w[:, :, h.y].sum(axis=1), weights=probs, minlength=n + 1)
    elif isinstance(h, IndicatorAtLeast):
        value = float(probs[w[:, :, h.y].sum(axis=1) >= h.x].sum())
    elif isinstance(h, CustomFunctional):
        value = float(sum(p * float(h.fn(t)) for p, t in zip(probs, w)))
    else:
        raise TypeError(f"unknown functional {h!r}")
    return GFormulaReport(
        value, n, kappa=spec.kappa_for(n), kappa_star=spec.kappa_star, terms=positive, pruned=upper - positive
    )


# -- large-cluster ----------------------------------------------------------


def large_cluster_value(model: DiscreteModel, spec: RegimeSpec) -> float:
    """Sum over (y, a, l) of y Q_Y(y|a,l) q*_0(a|l) Q_L(l)."""
    q1 = large_cluster_density(model, spec).q
    m = model.mean_outcome()
    return float(np.sum(model.q_l * ((1.0 - q1) * m[0] + q1 * m[1])))


def value_curve(model: DiscreteModel, spec: RegimeSpec, grid: Sequence[float]) -> list:
    """Large-cluster value at each kappa_star in ``grid``."""
    out = []
    for ks in grid:
        s = spec.with_kappa(kappa_star=float(ks))
        dens = large_cluster_density(model, s)
        out.append(
            GFormulaReport(large_cluster_value(model, s), n=0, kappa_star=float(ks), meta={"threshold": dens.threshold})
        )
    return out
