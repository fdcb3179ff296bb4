"""Robust ISS state-feedback synthesis by semidefinite programming.

The controller ``u1 = (K0 + K1 Pi(x)) x`` and the invariant ellipsoid
``R = {x : x^T Q^-1 x <= 1}`` are obtained from LMIs in
``(Q, G, M0, M1, L)`` evaluated at the vertices of ``X x Theta``:

* containment: ``[[1, h^T Q], [Q h, Q]] > 0`` for every face ``h`` of ``X``;
* one-step decrease: the 5x5 block matrix below plus the annihilator
  multiplier term ``L Omega(x) + Omega(x)^T L^T`` is negative definite.

Strict inequalities are enforced with an explicit margin.  Minimizing the
bound ``lambda >= lambda_max(Q)`` is done by bisection on ``lambda``, each
step solving a max-margin feasibility problem; a cap is accepted only when
the backend's margin and an independent eigenvalue re-check both clear the
strictness threshold.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .polymodel import MonomialBasis, PolyQuasiLpvModel, StateDomain, build_annihilator, enumerate_vertices, eval_pi
from .sdp import OK_STATUSES, ConicBackend, CvxpyBackend

log = logging.getLogger(__name__)

__all__ = [
    "SynthesisError",
    "Infeasible",
    "AllInfeasible",
    "BackendFailure",
    "SynthesisProblem",
    "SynthesisSolution",
    "IssCertificateReport",
    "PolynomialGain",
    "Ellipsoid",
    "assemble_containment_lmis",
    "assemble_synthesis_lmi",
    "constraint_margins",
    "solve_synthesis",
    "line_search_mu",
    "recover_gains",
    "reachable_ellipsoid",
    "verify_iss_decrease",
    "default_mu_grid",
]


class SynthesisError(RuntimeError):
    pass


class Infeasible(SynthesisError):
    def __init__(self, mu: float, detail: str = ""):
        self.mu = mu
        super().__init__(f"LMIs infeasible for mu={mu:g}" + (f" ({detail})" if detail else ""))


class AllInfeasible(SynthesisError):
    def __init__(self, grid):
        self.grid = list(grid)
        super().__init__(f"no feasible mu on grid {self.grid}")


class BackendFailure(SynthesisError):
    def __init__(self, status: str, mu: float | None = None):
        self.status = status
        self.mu = mu
        super().__init__(f"SDP backend failed with status {status!r}" + (f" at mu={mu:g}" if mu is not None else ""))


def default_mu_grid() -> list[float]:
    return [round(0.05 * i, 2) for i in range(1, 20)]


# ---------------------------------------------------------------------------
# LMI assembly (works on numpy arrays or backend expressions)
# ---------------------------------------------------------------------------

def assemble_containment_lmis(Q, X: StateDomain, bmat=np.block) -> list:
    """``[[1, h^T Q], [Q h, Q]]`` for each face ``h`` of ``X``."""
    out = []
    for h in X.half_planes:
        h = h.reshape(-1, 1)
        out.append(bmat([[np.ones((1, 1)), h.T @ Q], [Q @ h, Q]]))
    return out


def _omega_big(ann, x, n_x: int, n_mx: int, n_w: int) -> np.ndarray:
    O0, O1 = ann(x)
    Z = np.zeros
    r0 = np.hstack([O0, O1, Z((n_mx, n_w)), Z((n_mx, n_x)), Z((n_mx, n_mx))])
    r1 = np.hstack([Z((n_mx, n_x)), Z((n_mx, n_mx)), Z((n_mx, n_w)), O0, O1])
    return np.vstack([r0, r1])


def assemble_synthesis_lmi(model: PolyQuasiLpvModel, x, theta, mu: float, Q, G, M0, M1, L,
                           bmat=np.block, annihilator=None):
    """Decrease LMI at one vertex ``(x, theta)``; must be negative definite.

    Block order is ``(x, Pi(x) x, w, x+, Pi(x) x+)``.  For a plant without
    lifting (``n_m = 0``) the two lifted block rows and ``L`` drop out.
    """
    n, nu, nw = model.n_x, model.n_u, model.n_w
    nmx = model.basis.n_m * n
    A0, A1 = model.A0(theta), model.A1(theta)
    Bu, Bw = model.Bu(theta), model.Bw(theta)
    Z = np.zeros
    B11 = (1 - mu) * (Q - G - G.T)
    B41 = A0 @ G + Bu @ M0
    B33 = -mu * np.eye(nw)
    if nmx == 0:
        return bmat([
            [B11, Z((n, nw)), B41.T],
            [Z((nw, n)), B33, Bw.T],
            [B41, Bw, -Q],
        ])
    B42 = Bu @ M1
    B51 = A1 @ G
    M = bmat([
        [B11, Z((n, nmx)), Z((n, nw)), B41.T, B51.T],
        [Z((nmx, n)), Z((nmx, nmx)), Z((nmx, nw)), B42.T, Z((nmx, nmx))],
        [Z((nw, n)), Z((nw, nmx)), B33, Bw.T, Z((nw, nmx))],
        [B41, B42, Bw, -Q, Z((n, nmx))],
        [B51, Z((nmx, nmx)), Z((nmx, nw)), Z((nmx, n)), Z((nmx, nmx))],
    ])
    ann = annihilator or build_annihilator(model.basis)
    Om = _omega_big(ann, x, n, nmx, nw)
    return M + L @ Om + Om.T @ L.T


def _lmi_size(model: PolyQuasiLpvModel) -> tuple[int, int]:
    nmx = model.basis.n_m * model.n_x
    return 2 * model.n_x + 2 * nmx + model.n_w, 2 * nmx


# ---------------------------------------------------------------------------
# Problem / solution types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthesisProblem:
    """One synthesis at fixed ``mu``.

    ``thetas`` overrides the model's Theta vertex list (e.g. a single fixed
    value); ``None`` uses all vertices.
    """

    model: PolyQuasiLpvModel
    mu: float
    strictness_eps: float = 1e-7
    minimize_lambda: bool = True
    thetas: np.ndarray | None = None
    lambda_rtol: float = 1e-3
    backend: Callable[[], ConicBackend] = CvxpyBackend

    def __post_init__(self):
        if not 0 < self.mu < 1:
            raise ValueError(f"mu must lie in (0, 1), got {self.mu}")
        if self.strictness_eps <= 0:
            raise ValueError("strictness_eps must be positive")
        if self.thetas is not None:
            th = np.asarray(self.thetas, dtype=float)
            th = th.reshape(-1, self.model.n_theta)
            object.__setattr__(self, "thetas", th)

    @property
    def theta_set(self) -> np.ndarray:
        return self.model.theta_vertices if self.thetas is None else self.thetas

    def vertices(self):
        return enumerate_vertices(self.model.X, self.theta_set)


class PolynomialGain:
    """State feedback ``u1 = K(x) x`` with ``K(x) = K0 + K1 Pi(x)``."""

    def __init__(self, K0, K1, basis: MonomialBasis):
        self.K0 = np.atleast_2d(np.asarray(K0, dtype=float))
        self.K1 = np.asarray(K1, dtype=float).reshape(self.K0.shape[0], -1)
        self.basis = basis

    def matrix(self, x) -> np.ndarray:
        if self.basis.n_m == 0:
            return self.K0
        return self.K0 + self.K1 @ eval_pi(self.basis, x)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.matrix(x) @ x

    def scaled(self, factor: float) -> "PolynomialGain":
        return PolynomialGain(factor * self.K0, factor * self.K1, self.basis)


def recover_gains(M0, M1, G, basis: MonomialBasis) -> tuple[np.ndarray, np.ndarray, PolynomialGain]:
    """``K0 = M0 G^-1`` and ``K1 = M1 Ga^-1`` with ``Ga = diag(G, ..., G)``."""
    G = np.asarray(G, dtype=float)
    if np.linalg.cond(G) > 1e14:
        raise np.linalg.LinAlgError("G is numerically singular")
    M0 = np.atleast_2d(np.asarray(M0, dtype=float))
    K0 = np.linalg.solve(G.T, M0.T).T
    nm = basis.n_m
    if nm:
        Ga = np.kron(np.eye(nm), G)
        K1 = np.linalg.solve(Ga.T, np.asarray(M1, dtype=float).T).T
    else:
        K1 = np.zeros((M0.shape[0], 0))
    return K0, K1, PolynomialGain(K0, K1, basis)


@dataclass(frozen=True)
class Ellipsoid:
    """``{x : x^T P x <= 1}`` with ``P = Q^-1``."""

    P: np.ndarray
    Q: np.ndarray

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.P, x)

    def contains(self, x) -> bool | np.ndarray:
        return self.value(x) <= 1.0


def reachable_ellipsoid(Q) -> Ellipsoid:
    Q = np.asarray(Q, dtype=float)
    Q = (Q + Q.T) / 2
    if np.linalg.eigvalsh(Q)[0] <= 0:
        raise ValueError("Q must be positive definite")
    P = np.linalg.inv(Q)
    return Ellipsoid((P + P.T) / 2, Q)


@dataclass
class SynthesisSolution:
    Q: np.ndarray
    G: np.ndarray
    M0: np.ndarray
    M1: np.ndarray
    L: np.ndarray
    lambda_: float
    mu: float
    K0: np.ndarray
    K1: np.ndarray
    basis: MonomialBasis
    thetas: np.ndarray
    solver_status: str = "optimal"
    margin: float = float("nan")
    strictness_eps: float = 1e-7
    mu_curve: dict | None = None

    @property
    def P(self) -> np.ndarray:
        return reachable_ellipsoid(self.Q).P

    @property
    def ellipsoid(self) -> Ellipsoid:
        return reachable_ellipsoid(self.Q)

    def gain(self) -> PolynomialGain:
        return PolynomialGain(self.K0, self.K1, self.basis)

    def to_dict(self) -> dict:
        arr = lambda a: np.asarray(a, dtype=float).tolist()
        return {
            "mu": self.mu,
            "lambda": self.lambda_,
            "Q": arr(self.Q), "G": arr(self.G), "M0": arr(self.M0), "M1": arr(self.M1),
            "L": arr(self.L), "K0": arr(self.K0), "K1": arr(self.K1), "P": arr(self.P),
            "basis": {"n_x": self.basis.n_x, "q": self.basis.q, "active_vars": list(self.basis.active_vars)},
            "thetas": arr(self.thetas),
            "solver_status": self.solver_status,
            "margin": self.margin,
            "strictness_eps": self.strictness_eps,
            "mu_curve": None if self.mu_curve is None else {f"{k:.6g}": v for k, v in self.mu_curve.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisSolution":
        b = d["basis"]
        basis = MonomialBasis(int(b["n_x"]), int(b["q"]), tuple(b["active_vars"]))
        curve = d.get("mu_curve")
        return cls(
            Q=np.array(d["Q"]), G=np.array(d["G"]), M0=np.atleast_2d(np.array(d["M0"])),
            M1=np.array(d["M1"]), L=np.array(d["L"]), lambda_=float(d["lambda"]), mu=float(d["mu"]),
            K0=np.atleast_2d(np.array(d["K0"])), K1=np.array(d["K1"]), basis=basis,
            thetas=np.array(d["thetas"]), solver_status=d.get("solver_status", ""),
            margin=float(d.get("margin", float("nan"))), strictness_eps=float(d.get("strictness_eps", 1e-7)),
            mu_curve=None if curve is None else {float(k): v for k, v in curve.items()},
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SynthesisSolution":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Post-hoc verification of the LMIs
# ---------------------------------------------------------------------------

@dataclass
class ConstraintMargins:
    containment: list[float]  # min eigenvalue of each containment LMI
    decrease: list[float]     # -max eigenvalue of each vertex decrease LMI
    q_min_eig: float
    g_margin: float           # min eigenvalue of G + G^T - Q
    lambda_gap: float         # lambda - lambda_max(Q)

    @property
    def min_decrease(self) -> float:
        return min(self.decrease)

    @property
    def min_containment(self) -> float:
        return min(self.containment) if self.containment else math.inf

    def ok(self, eps: float) -> bool:
        return (self.min_decrease >= eps and self.min_containment >= 0 and self.q_min_eig > 0
                and self.g_margin > 0 and self.lambda_gap >= -1e-7)


def constraint_margins(model: PolyQuasiLpvModel, Q, G, M0, M1, L, mu: float, thetas, lambda_=None) -> ConstraintMargins:
    """Eigenvalue re-check of every LMI at the given numeric values."""
    ann = build_annihilator(model.basis)
    sym = lambda A: (A + A.T) / 2
    cont = [np.linalg.eigvalsh(sym(C))[0] for C in assemble_containment_lmis(Q, model.X)]
    dec = []
    for x, th in enumerate_vertices(model.X, thetas):
        T = assemble_synthesis_lmi(model, x, th, mu, Q, G, M0, M1, L, annihilator=ann)
        dec.append(-np.linalg.eigvalsh(sym(T))[-1])
    qe = np.linalg.eigvalsh(sym(Q))
    lam = qe[-1] if lambda_ is None else lambda_
    return ConstraintMargins(cont, dec, float(qe[0]), float(np.linalg.eigvalsh(G + G.T - Q)[0]),
                             float(lam - qe[-1]))


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------

@dataclass
class _Attempt:
    status: str
    margin: float
    values: dict | None = None


def _max_margin(problem: SynthesisProblem, cap: float | None) -> _Attempt:
    """Maximize the common margin ``t`` of all LMIs, optionally with ``Q <= cap I``."""
    model = problem.model
    n, nu = model.n_x, model.n_u
    nmx = model.basis.n_m * n
    size, n_om = _lmi_size(model)
    be = problem.backend()
    Q = be.symmetric(n)
    G = be.matrix(n, n)
    M0 = be.matrix(nu, n)
    M1 = be.matrix(nu, nmx) if nmx else np.zeros((nu, 0))
    L = be.matrix(size, n_om) if nmx else np.zeros((size, 0))
    t = be.scalar()
    if cap is not None:
        be.add_psd(cap * np.eye(n) - Q)
    for C in assemble_containment_lmis(Q, model.X, bmat=be.bmat):
        be.add_psd(C - t * np.eye(n + 1))
    ann = build_annihilator(model.basis)
    for x, th in problem.vertices():
        T = assemble_synthesis_lmi(model, x, th, problem.mu, Q, G, M0, M1, L, bmat=be.bmat, annihilator=ann)
        be.add_psd(-T - t * np.eye(size))
    be.add_le(t, 1.0)
    be.maximize(t)
    status = be.solve()
    tv = be.value(t)
    if status not in OK_STATUSES or tv is None:
        return _Attempt(status, -math.inf)
    vals = {
        "Q": be.value(Q), "G": be.value(G), "M0": be.value(M0),
        "M1": be.value(M1) if nmx else np.zeros((nu, 0)),
        "L": be.value(L) if nmx else np.zeros((size, 0)),
    }
    vals["Q"] = (vals["Q"] + vals["Q"].T) / 2
    return _Attempt(status, float(tv), vals)


def _accept(problem: SynthesisProblem, att: _Attempt, cap: float | None) -> ConstraintMargins | None:
    """Accept an attempt only if the solver margin and the eigen re-check clear the threshold."""
    eps = problem.strictness_eps
    if att.values is None or att.margin < 2 * eps:
        return None
    v = att.values
    m = constraint_margins(problem.model, v["Q"], v["G"], v["M0"], v["M1"], v["L"], problem.mu,
                           problem.theta_set, lambda_=cap)
    return m if m.ok(eps) else None


def _to_solution(problem: SynthesisProblem, att: _Attempt, lam: float, margins: ConstraintMargins) -> SynthesisSolution:
    v = att.values
    K0, K1, _ = recover_gains(v["M0"], v["M1"], v["G"], problem.model.basis)
    return SynthesisSolution(
        Q=v["Q"], G=v["G"], M0=v["M0"], M1=v["M1"], L=v["L"], lambda_=float(lam), mu=problem.mu,
        K0=K0, K1=K1, basis=problem.model.basis, thetas=problem.theta_set.copy(),
        solver_status=att.status,
        margin=float(min(margins.min_decrease, margins.min_containment)),
        strictness_eps=problem.strictness_eps,
    )


def solve_synthesis(problem: SynthesisProblem) -> SynthesisSolution:
    """Solve the synthesis LMIs at ``problem.mu``.

    Raises
    ------
    Infeasible
        No solution clears the strictness margin at this ``mu``.
    BackendFailure
        The backend broke down on the initial feasibility problem.
    """
    first = _max_margin(problem, None)
    if first.values is None:
        if first.status.startswith("infeasible") or first.status.startswith("unbounded"):
            raise Infeasible(problem.mu, first.status)
        raise BackendFailure(first.status, problem.mu)
    margins = _accept(problem, first, None)
    if margins is None:
        raise Infeasible(problem.mu, f"best margin {first.margin:.3g}")
    hi = float(np.linalg.eigvalsh(first.values["Q"])[-1])
    best = (first, hi, margins)
    if not problem.minimize_lambda:
        return _to_solution(problem, *best)

    # Bisection on the lambda cap.
    lo = 0.0
    hi *= 1.0 + 1e-9
    att = _max_margin(problem, hi)
    m = _accept(problem, att, hi)
    if m is not None:
        best = (att, hi, m)
    n_solves = 2
    while hi - lo > problem.lambda_rtol * hi:
        mid = 0.5 * (lo + hi)
        att = _max_margin(problem, mid)
        n_solves += 1
        m = _accept(problem, att, mid)
        if m is not None:
            hi, best = mid, (att, mid, m)
        else:
            lo = mid
    log.info("mu=%.4g lambda=%.6g (%d solves)", problem.mu, best[1], n_solves)
    return _to_solution(problem, *best)


def line_search_mu(template: SynthesisProblem, grid: Sequence[float] | None = None,
                   refine: bool = False) -> SynthesisSolution:
    """Minimize ``lambda`` over ``mu``; the per-``mu`` curve is kept in ``mu_curve``.

    With ``refine=True`` a bounded scalar search polishes ``mu`` between the
    grid neighbours of the best point.
    """
    grid = default_mu_grid() if grid is None else list(grid)
    if not grid:
        raise ValueError("mu grid must be nonempty")
    if any(not 0 < g < 1 for g in grid):
        raise ValueError("mu grid values must lie in (0, 1)")
    curve: dict[float, float | None] = {}
    sols: dict[float, SynthesisSolution] = {}

    def attempt(mu):
        try:
            s = solve_synthesis(replace(template, mu=float(mu)))
        except SynthesisError as e:
            log.info("mu=%.4g: %s", mu, e)
            curve[float(mu)] = None
            return math.inf
        curve[float(mu)] = s.lambda_
        sols[float(mu)] = s
        return s.lambda_

    for mu in grid:
        attempt(mu)
    if not sols:
        raise AllInfeasible(grid)
    best_mu = min(sols, key=lambda k: sols[k].lambda_)
    if refine and len(grid) > 1:
        from scipy.optimize import minimize_scalar

        g = sorted(grid)
        i = g.index(best_mu)
        a = g[max(i - 1, 0)]
        b = g[min(i + 1, len(g) - 1)]
        if b > a:
            minimize_scalar(attempt, bounds=(a, b), method="bounded", options={"xatol": 1e-3, "maxiter": 12})
            best_mu = min(sols, key=lambda k: sols[k].lambda_)
    best = sols[best_mu]
    best.mu_curve = dict(sorted(curve.items()))
    return best


# ---------------------------------------------------------------------------
# Sampling certificate
# ---------------------------------------------------------------------------

@dataclass
class IssCertificateReport:
    decrease_violations: int
    max_residual: float
    samples: int
    containment_ok: list[bool] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.decrease_violations == 0 and all(self.containment_ok)

    def to_dict(self) -> dict:
        return {"decrease_violations": self.decrease_violations, "max_residual": self.max_residual,
                "samples": self.samples, "containment_ok": list(self.containment_ok), "passed": self.passed}


def _uniform_ball(rng, n_samples: int, dim: int) -> np.ndarray:
    z = rng.standard_normal((n_samples, dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return z * rng.random((n_samples, 1)) ** (1.0 / dim)


def verify_iss_decrease(solution: SynthesisSolution, model: PolyQuasiLpvModel, n_samples: int = 10_000,
                        rng_seed: int = 0, thetas=None, gain: PolynomialGain | None = None,
                        tol: float = 1e-9) -> IssCertificateReport:
    """Sample one-step checks of ``V(x+) - V(x) <= mu (w^T w - V(x)) + tol``.

    ``x`` is uniform in the ellipsoid, ``w`` uniform in the unit ball, and
    ``theta`` cycles through the Theta vertices and their midpoint unless
    ``thetas`` is given.  ``gain`` overrides the solution's controller, which
    is how negative controls are run.
    """
    rng = np.random.default_rng(rng_seed)
    ell = solution.ellipsoid
    P, Q = ell.P, ell.Q
    if thetas is None:
        tv = model.theta_vertices
        thetas = np.vstack([tv, tv.mean(axis=0, keepdims=True)])
    thetas = np.asarray(thetas, dtype=float).reshape(-1, model.n_theta)
    gain = gain or solution.gain()
    mu = solution.mu
    Lc = np.linalg.cholesky(Q)
    xs = _uniform_ball(rng, n_samples, model.n_x) @ Lc.T
    ws = _uniform_ball(rng, n_samples, model.n_w)
    violations, worst = 0, -math.inf
    for i in range(n_samples):
        x, w = xs[i], ws[i]
        th = thetas[i % len(thetas)]
        x_next = (model.A(x, th) + model.Bu(th) @ gain.matrix(x)) @ x + model.Bw(th) @ w
        V = x @ P @ x
        r = x_next @ P @ x_next - V - mu * (w @ w - V)
        worst = max(worst, r)
        violations += bool(r > tol)
    cont = [bool(1.0 - h @ Q @ h > 0) for h in model.X.half_planes]
    return IssCertificateReport(violations, float(worst), n_samples, cont)
