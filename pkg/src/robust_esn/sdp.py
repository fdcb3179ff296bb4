"""Minimal conic-program interface used by the LMI synthesis.

A backend declares matrix variables, accepts affine semidefinite
constraints, and optimizes a linear objective.  ``CvxpyBackend`` is the
default implementation; anything with the same methods plugs in.
"""

from __future__ import annotations

import abc
import logging
import warnings

import numpy as np

log = logging.getLogger(__name__)

OK_STATUSES = ("optimal", "optimal_inaccurate")


class ConicBackend(abc.ABC):
    """One conic problem.  Create a fresh instance per solve."""

    @abc.abstractmethod
    def symmetric(self, n: int):
        ...

    @abc.abstractmethod
    def matrix(self, rows: int, cols: int):
        ...

    @abc.abstractmethod
    def scalar(self):
        ...

    @abc.abstractmethod
    def bmat(self, blocks):
        """Block matrix from a nested list of expressions / arrays."""

    @abc.abstractmethod
    def add_psd(self, expr):
        """Constrain the symmetric part of ``expr`` to be positive semidefinite."""

    @abc.abstractmethod
    def add_le(self, expr, bound: float):
        ...

    @abc.abstractmethod
    def minimize(self, expr):
        ...

    @abc.abstractmethod
    def maximize(self, expr):
        ...

    @abc.abstractmethod
    def solve(self) -> str:
        """Run the solver and return a status string (see ``OK_STATUSES``)."""

    @abc.abstractmethod
    def value(self, var) -> np.ndarray:
        ...


class CvxpyBackend(ConicBackend):
    """CVXPY front end; Clarabel by default, optional fallback solver."""

    def __init__(self, solver: str = "CLARABEL", fallback: str | None = None, **solver_opts):
        import cvxpy as cp

        self._cp = cp
        self.solver = solver
        self.fallback = fallback
        self.solver_opts = solver_opts
        self._constraints = []
        self._objective = None

    def symmetric(self, n):
        return self._cp.Variable((n, n), symmetric=True)

    def matrix(self, rows, cols):
        return self._cp.Variable((rows, cols))

    def scalar(self):
        return self._cp.Variable()

    def bmat(self, blocks):
        return self._cp.bmat(blocks)

    def add_psd(self, expr):
        self._constraints.append((expr + expr.T) / 2 >> 0)

    def add_le(self, expr, bound):
        self._constraints.append(expr <= bound)

    def minimize(self, expr):
        self._objective = self._cp.Minimize(expr)

    def maximize(self, expr):
        self._objective = self._cp.Maximize(expr)

    def solve(self):
        cp = self._cp
        prob = cp.Problem(self._objective or cp.Minimize(0), self._constraints)
        for name in (self.solver, self.fallback):
            if name is None:
                continue
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    prob.solve(solver=name, **(self.solver_opts if name == self.solver else {}))
            except cp.error.SolverError as e:
                log.debug("%s failed: %s", name, e)
                continue
            if prob.status in OK_STATUSES or prob.status in ("infeasible", "unbounded"):
                return prob.status
        return prob.status or "error"

    def value(self, var):
        v = var.value
        return None if v is None else np.asarray(v, dtype=float)
