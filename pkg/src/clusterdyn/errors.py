"""Exception types raised by the engine.

Each carries enough context to be actionable from the CLI, which maps them
onto exit codes.
"""

from __future__ import annotations


class ClusterDynError(Exception):
    """Base class for all package errors."""


class ModelError(ClusterDynError, ValueError):
    pass


class NonStochastic(ModelError):
    pass


class NegativeProbability(ModelError):
    pass


class EmptyCoarseLevel(ModelError):
    pass


class Overflow(ClusterDynError, OverflowError):
    pass


class IncompatibleComposition(ClusterDynError, ValueError):
    pass


class SizeMismatch(ClusterDynError, ValueError):
    pass


class ZeroMassLevel(ClusterDynError, ValueError):
    pass


class InfeasibleTarget(ClusterDynError, ValueError):
    pass


class BudgetExceeded(ClusterDynError):
    def __init__(self, terms: int, budget: int, lower_bound: bool = False):
        self.terms = terms
        self.budget = budget
        self.lower_bound = lower_bound
        qual = "at least " if lower_bound else ""
        super().__init__(f"enumeration needs {qual}{terms} terms, budget is {budget}")


class LimitExceeded(ClusterDynError, ValueError):
    pass


class EmptyData(ClusterDynError, ValueError):
    pass


class PositivityViolated(ClusterDynError):
    def __init__(self, cells, context: str = ""):
        self.cells = sorted(set(tuple(int(x) for x in c) for c in cells))
        msg = "no observations in required (a, l) cells: " + ", ".join(
            f"(a={a}, l={l})" for a, l in self.cells
        )
        if context:
            msg = f"{context}: {msg}"
        super().__init__(msg)


class InsufficientBurnIn(ClusterDynError, ValueError):
    def __init__(self, burn_in: int, cells=(), detail: str = ""):
        self.burn_in = burn_in
        self.cells = sorted(set(tuple(int(x) for x in c) for c in cells))
        msg = f"burn-in of {burn_in} observations is insufficient"
        if self.cells:
            msg += ": undefined cells " + ", ".join(f"(a={a}, l={l})" for a, l in self.cells)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
