"""Estimation from a single realized cluster.

Nuisances are tabular empirical laws. Cells with no observations are kept
undefined (nan) and never imputed; any estimator that needs such a cell
raises ``PositivityViolated`` naming it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from .errors import EmptyData, InsufficientBurnIn, PositivityViolated
from .gformula import MeanOutcome, compositional_gformula_expectation
from .model import Coarsening, DiscreteModel
from .regimes import RegimeSpec, _large_component, large_cluster_density, marginal_intervention_density
from .simulator import ClusterData


@dataclass(frozen=True)
class OptimalTarget:
    """The large-cluster optimal regime, learned from the data."""

    kappa_star: float
    gated: bool = True
    coarsening: Optional[Coarsening] = None


@dataclass(frozen=True)
class TabularLaw:
    """Observed-data law on (L, A, Y): Q_L, propensity q(a|l), Q_Y(y|a,l).

    Undefined entries are nan.
    """

    q_l: np.ndarray  # (K,)
    prop: np.ndarray  # (2, K)
    q_y: np.ndarray  # (2, K, M)
    scores: np.ndarray  # (M,)

    @property
    def levels(self) -> int:
        return self.q_l.size

    def mean_outcome(self) -> np.ndarray:
        return self.q_y @ self.scores

    @classmethod
    def from_model(cls, model: DiscreteModel, prop1) -> "TabularLaw":
        prop1 = np.asarray(prop1, dtype=float)
        return cls(model.q_l, np.stack([1.0 - prop1, prop1]), model.q_y, model.scores)


@dataclass(frozen=True)
class EmpiricalLaw:
    n: int
    counts_l: np.ndarray  # (K,)
    counts_b: np.ndarray  # (2, K)
    counts_o: np.ndarray  # (2, K, M)
    scores: np.ndarray

    @property
    def q_l_hat(self) -> np.ndarray:
        return self.counts_l / self.n

    @property
    def q_hat(self) -> np.ndarray:
        """q~(a|l) as (2, K); nan where the level is unobserved."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts_l > 0, self.counts_b / np.maximum(self.counts_l, 1), np.nan)

    @property
    def q_y_hat(self) -> np.ndarray:
        """Q~_Y(y|a,l) as (2, K, M); nan rows where the (a, l) cell is empty."""
        b = self.counts_b[:, :, None]
        return np.where(b > 0, self.counts_o / np.maximum(b, 1), np.nan)

    @property
    def undefined_cells(self) -> list:
        return [(int(a), int(l)) for a, l in np.argwhere(self.counts_b == 0)]

    def law(self) -> TabularLaw:
        return TabularLaw(self.q_l_hat, self.q_hat, self.q_y_hat, self.scores)

    def as_model(self) -> DiscreteModel:
        """Plug-in model; undefined outcome rows are filled uniformly and must not be used."""
        q_y = self.q_y_hat
        q_y = np.where(np.isnan(q_y), 1.0 / q_y.shape[2], q_y)
        return DiscreteModel(self.q_l_hat, q_y, self.scores)


@dataclass
class EstimateReport:
    method: str
    point: float
    se: Optional[float] = None
    ci: Optional[tuple] = None
    diagnostics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        lo, hi = self.ci if self.ci is not None else (None, None)
        return {"method": self.method, "point": self.point, "se": self.se, "ci_lo": lo, "ci_hi": hi,
                "diagnostics": self.diagnostics}


def z_quantile(alpha: float) -> float:
    return float(norm.ppf(1.0 - alpha / 2.0))


def fit_empirical(data: ClusterData, levels: int, outcomes: int = 2, scores=None) -> EmpiricalLaw:
    n = int(data.L.size)
    if n == 0:
        raise EmptyData("cluster has no observations")
    scores = np.arange(outcomes, dtype=float) if scores is None else np.asarray(scores, dtype=float)
    counts_o = np.zeros((2, levels, outcomes), dtype=np.int64)
    np.add.at(counts_o, (data.A, data.L, data.Y), 1)
    counts_b = counts_o.sum(axis=2)
    return EmpiricalLaw(n, counts_b.sum(axis=0), counts_b, counts_o, scores)


# -- target densities -------------------------------------------------------


def _needed_cells(q_l: np.ndarray, q1: np.ndarray, defined: np.ndarray) -> list:
    qa = np.stack([1.0 - q1, q1])
    need = (qa > 0) & (q_l[None, :] > 0) & ~defined
    return [(int(a), int(l)) for a, l in np.argwhere(need)]


def empirical_cate_and_eta(emp: EmpiricalLaw, coarsening: Optional[Coarsening], kappa_star: float, gated: bool = True):
    """Empirical CATE on V, the clamped threshold eta~_0 and the learned rule g~ over L."""
    k = emp.counts_l.size
    mapping = coarsening.mapping if coarsening is not None else np.arange(k)
    nv = int(mapping.max()) + 1
    q_l = emp.q_l_hat
    q_v = np.bincount(mapping, weights=q_l, minlength=nv)
    m = emp.q_y_hat @ emp.scores  # (2, K)
    missing = [(a, l) for a in range(2) for l in range(k) if q_l[l] > 0 and emp.counts_b[a, l] == 0]
    if missing:
        raise PositivityViolated(missing, "conditional average effect needs both arms")
    delta_v = np.full(nv, np.nan)
    for v in range(nv):
        if q_v[v] > 0:
            members = (mapping == v) & (q_l > 0)
            w = q_l[members] / q_v[v]
            delta_v[v] = float(w @ (m[1, members] - m[0, members]))
    # unobserved coarse levels carry no mass and are never treated
    threshold, q_v1 = _large_component(q_v, np.nan_to_num(delta_v, nan=0.0), kappa_star, gated)
    q_v1 = np.where(q_v > 0, q_v1, 0.0)
    return delta_v, threshold, q_v1[mapping]


def _target_density(emp: EmpiricalLaw, spec, n_star: Optional[int]):
    """Plug-in treatment probability per level, eta for the EIF, and diagnostics."""
    model = emp.as_model()
    if isinstance(spec, OptimalTarget):
        if n_star is not None:
            raise ValueError("the learned optimal regime is a large-cluster target")
        delta, eta, q1 = empirical_cate_and_eta(emp, spec.coarsening, spec.kappa_star, spec.gated)
        return q1, eta, {"eta": eta, "cate": delta.tolist(), "kappa_star": spec.kappa_star}
    if n_star is not None:
        q1 = marginal_intervention_density(model, spec, n_star)
        return q1, 0.0, {"n_star": n_star, "kappa": spec.kappa_for(n_star)}
    dens = large_cluster_density(model, spec)
    return dens.q, 0.0, {"threshold": dens.threshold, "kappa_star": spec.kappa_star}


def _plugin_value(q_l: np.ndarray, q1: np.ndarray, m: np.ndarray) -> float:
    w = q_l[None, :] * np.stack([1.0 - q1, q1])
    return float(np.sum(np.where(w > 0, w * np.nan_to_num(m), 0.0)))


def _check(emp: EmpiricalLaw, q1: np.ndarray, context: str):
    cells = _needed_cells(emp.q_l_hat, q1, emp.counts_b > 0)
    if cells:
        raise PositivityViolated(cells, context)


# -- estimators -------------------------------------------------------------


def plugin_estimate(emp: EmpiricalLaw, spec, n_star: Optional[int] = None, functional=MeanOutcome()) -> EstimateReport:
    """Substitute the empirical law into the target's identifying functional."""
    q1, _, diag = _target_density(emp, spec, n_star)
    _check(emp, q1, "plug-in")
    diag["undefined_cells"] = emp.undefined_cells
    if n_star is not None and not isinstance(functional, MeanOutcome):
        rep = compositional_gformula_expectation(emp.as_model(), spec, n_star, functional)
        value = rep.value
        point = value.tolist() if isinstance(value, np.ndarray) else float(value)
        return EstimateReport("plugin", point, diagnostics=diag)
    return EstimateReport("plugin", _plugin_value(emp.q_l_hat, q1, emp.q_y_hat @ emp.scores), diagnostics=diag)


def ipw_estimate(data: ClusterData, emp: EmpiricalLaw, spec, n_star: Optional[int] = None) -> EstimateReport:
    """(1/n) sum Y_i q~*(A_i|L_i) / q~_n(A_i|L_i)."""
    q1, _, diag = _target_density(emp, spec, n_star)
    _check(emp, q1, "ipw")
    qa = np.stack([1.0 - q1, q1])
    weights = qa[data.A, data.L] / emp.q_hat[data.A, data.L]
    point = float(np.mean(emp.scores[data.Y] * weights))
    diag["undefined_cells"] = emp.undefined_cells
    return EstimateReport("ipw", point, diagnostics=diag)


def eif_phi(law: TabularLaw, g1, eta: float, kappa_star: float, l, a, y, centered: bool = True):
    """Phi0 = Phi1 + Phi2 at observations (l, a, y-index) for the stochastic rule g1(l) = P(treat | l).

    Phi1 is the augmented-IPW residual plus the centered outcome regression;
    Phi2 = -eta (g1(l) - kappa_star). With ``centered=False`` the plug-in
    value is added back (the online estimator's uncentered term).
    """
    g1 = np.asarray(g1, dtype=float)
    l = np.asarray(l)
    a = np.asarray(a)
    y = np.asarray(y)
    m = law.mean_outcome()
    ga = np.stack([1.0 - g1, g1])
    need = (ga > 0) & ~(law.prop > 0) & (law.q_l[None, :] > 0)
    if need.any():
        raise PositivityViolated(np.argwhere(need).tolist(), "influence function")
    g_obs = ga[a, l]
    q_obs = law.prop[a, l]
    with np.errstate(invalid="ignore", divide="ignore"):
        resid = np.where(g_obs > 0, g_obs / q_obs * (law.scores[y] - m[a, l]), 0.0)
    m_g = np.where(ga > 0, ga * np.nan_to_num(m), 0.0).sum(axis=0)  # (K,)
    psi = float(np.sum(np.where(law.q_l > 0, law.q_l * m_g, 0.0)))
    phi = resid + m_g[l] - eta * (g1[l] - kappa_star)
    return phi if not centered else phi - psi


def eif_psi(law: TabularLaw, g1) -> float:
    g1 = np.asarray(g1, dtype=float)
    ga = np.stack([1.0 - g1, g1])
    m_g = np.where(ga > 0, ga * np.nan_to_num(law.mean_outcome()), 0.0).sum(axis=0)
    return float(np.sum(np.where(law.q_l > 0, law.q_l * m_g, 0.0)))


def _large_kappa(spec) -> float:
    ks = spec.kappa_star
    if ks is None:
        raise ValueError("one-step and online estimators target large-cluster parameters (kappa_star)")
    return ks


def one_step_estimate(
    data: ClusterData,
    emp: EmpiricalLaw,
    spec,
    alpha: float = 0.05,
    eta: Optional[float] = None,
) -> EstimateReport:
    """Plug-in plus the empirical mean of the influence function, with a Wald interval.

    For a fixed regime eta defaults to 0; for the learned optimal regime it
    is the estimated clamped threshold.
    """
    ks = _large_kappa(spec)
    q1, eta_hat, diag = _target_density(emp, spec, None)
    _check(emp, q1, "one-step")
    eta = eta_hat if eta is None else eta
    law = emp.law()
    plug = _plugin_value(emp.q_l_hat, q1, law.mean_outcome())
    phi = eif_phi(law, q1, eta, ks, data.L, data.A, data.Y)
    point = plug + float(phi.mean())
    sigma2 = float(np.mean(phi**2))
    se = math.sqrt(sigma2 / data.n)
    z = z_quantile(alpha)
    diag.update({"plugin": plug, "sigma2": sigma2, "eta_used": eta, "undefined_cells": emp.undefined_cells})
    return EstimateReport("onestep", point, se, (point - z * se, point + z * se), diag)


def online_estimate(
    data: ClusterData,
    levels: int,
    outcomes: int,
    spec,
    alpha: float = 0.05,
    burn_in: int = 500,
    batch: int = 1,
    scores=None,
    eta: Optional[float] = None,
    sigma_floor: float = 1e-6,
) -> EstimateReport:
    """Sequential estimator: step j uses nuisances fit on observations before j.

    Each term is standardized by the influence-function scale estimated on
    the training prefix; the interval half-width is z / (Gamma_n sqrt(n - burn_in)).
    ``batch`` refits nuisances every ``batch`` steps instead of every step.
    """
    ks = _large_kappa(spec)
    n = data.n
    if burn_in < 1:
        raise InsufficientBurnIn(burn_in, detail="at least one training observation is required")
    if burn_in >= n:
        raise InsufficientBurnIn(burn_in, detail=f"no observations left to evaluate (n={n})")
    if batch < 1:
        raise ValueError("batch size must be positive")
    scores = np.arange(outcomes, dtype=float) if scores is None else np.asarray(scores, dtype=float)
    counts_o = np.zeros((2, levels, outcomes), dtype=np.int64)
    np.add.at(counts_o, (data.A[:burn_in], data.L[:burn_in], data.Y[:burn_in]), 1)
    a_idx, l_idx, y_idx = np.indices((2, levels, outcomes))
    terms = np.empty(n - burn_in)
    inv_sigma = np.empty(n - burn_in)
    state = None
    for step, j in enumerate(range(burn_in, n)):
        if state is None or step % batch == 0:
            counts_b = counts_o.sum(axis=2)
            emp = EmpiricalLaw(j, counts_b.sum(axis=0), counts_b, counts_o.copy(), scores)
            try:
                q1, eta_hat, _ = _target_density(emp, spec, None)
                law = emp.law()
                use_eta = eta_hat if eta is None else eta
                phi_grid = eif_phi(law, q1, use_eta, ks, l_idx, a_idx, y_idx)
            except PositivityViolated as exc:
                raise InsufficientBurnIn(burn_in, exc.cells, detail=f"at step {j + 1}") from exc
            psi = eif_psi(law, q1)
            second = float(np.sum(counts_o * np.nan_to_num(phi_grid) ** 2)) / j
            sigma = max(math.sqrt(second), sigma_floor)
            state = (phi_grid, psi, sigma)
        phi_grid, psi, sigma = state
        value = phi_grid[data.A[j], data.L[j], data.Y[j]]
        if not np.isfinite(value):
            raise InsufficientBurnIn(burn_in, [(data.A[j], data.L[j])], detail=f"at step {j + 1}")
        terms[step] = value + psi
        inv_sigma[step] = 1.0 / sigma
        counts_o[data.A[j], data.L[j], data.Y[j]] += 1
    gamma = float(inv_sigma.mean())
    point = float(np.mean(inv_sigma * terms)) / gamma
    half = z_quantile(alpha) / (gamma * math.sqrt(n - burn_in))
    diag = {"gamma": gamma, "burn_in": burn_in, "batch": batch, "kappa_star": ks}
    return EstimateReport("online", point, 1.0 / (gamma * math.sqrt(n - burn_in)), (point - half, point + half), diag)
