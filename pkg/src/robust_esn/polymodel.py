"""Uncertain polynomial discrete-time plants in lifted quasi-LPV form.

A plant ``x+ = A(x, theta) x + Bu(theta) u + Bd(theta) d`` is stored as

    A(x, theta) = A0(theta) + Pi(x)^T A1(theta)

where ``Pi(x)`` stacks every monomial of degree 1..q (in the active state
variables) Kronecker-expanded with the identity.  The module also builds an
affine annihilator ``Omega0(x) + Omega1(x) Pi(x) = 0`` whose ``Omega1`` has a
constant determinant.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linprog

__all__ = [
    "PlantFormatError",
    "MonomialBasis",
    "AffineMatrix",
    "StateDomain",
    "PolyQuasiLpvModel",
    "Annihilator",
    "PolyTerm",
    "eval_pi",
    "build_annihilator",
    "decompose_dynamics",
    "build_bw",
    "enumerate_vertices",
    "van_der_pol_model",
    "load_plant",
    "plant_from_dict",
]


class PlantFormatError(ValueError):
    """Raised for malformed plant descriptions or inconsistent dimensions."""


# ---------------------------------------------------------------------------
# Monomial basis and lifting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonomialBasis:
    """All monomials of degree 1..q in ``active_vars``, graded lexicographic.

    ``blocks[l - 1]`` holds the exponent vectors (length ``n_x``) of the
    degree-``l`` monomials.  Within a block, monomials are ordered
    lexicographically with lower variable indices first, e.g. for two
    variables and degree 2: ``x1^2, x1 x2, x2^2``.
    """

    n_x: int
    q: int
    active_vars: tuple[int, ...]
    blocks: tuple[tuple[tuple[int, ...], ...], ...] = field(init=False)

    def __post_init__(self):
        if self.n_x < 1:
            raise PlantFormatError("n_x must be positive")
        if self.q < 0:
            raise PlantFormatError("q must be non-negative")
        active = tuple(sorted(set(int(i) for i in self.active_vars)))
        if any(i < 0 or i >= self.n_x for i in active):
            raise PlantFormatError(f"active_vars {active} out of range for n_x={self.n_x}")
        if self.q > 0 and not active:
            raise PlantFormatError("a lifting of degree q > 0 needs at least one active variable")
        object.__setattr__(self, "active_vars", active)
        blocks = []
        for deg in range(1, self.q + 1):
            block = []
            for combo in itertools.combinations_with_replacement(active, deg):
                e = [0] * self.n_x
                for i in combo:
                    e[i] += 1
                block.append(tuple(e))
            blocks.append(tuple(block))
        object.__setattr__(self, "blocks", tuple(blocks))

    @property
    def monomials(self) -> list[tuple[int, ...]]:
        """Flat list of exponent vectors in lifting order."""
        return [e for block in self.blocks for e in block]

    @property
    def block_sizes(self) -> list[int]:
        return [len(b) for b in self.blocks]

    @property
    def n_m(self) -> int:
        return sum(self.block_sizes)

    def index(self, exponents: Sequence[int]) -> int:
        """Position of a monomial in the flat ordering."""
        key = tuple(int(e) for e in exponents)
        try:
            return self.monomials.index(key)
        except ValueError:
            raise PlantFormatError(f"monomial {key} is not in the basis") from None

    def eval_monomials(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_x,):
            raise ValueError(f"expected state of shape ({self.n_x},), got {x.shape}")
        if self.n_m == 0:
            return np.zeros(0)
        E = np.array(self.monomials, dtype=int)
        return np.prod(x[None, :] ** E, axis=1)


def eval_pi(basis: MonomialBasis, x) -> np.ndarray:
    """Lifted matrix ``Pi(x)`` of shape ``(n_m * n_x, n_x)``.

    Block ``p`` (rows ``p*n_x .. (p+1)*n_x``) equals ``m_p(x) * I``.
    """
    m = basis.eval_monomials(x)
    return np.kron(m[:, None], np.eye(basis.n_x))


# ---------------------------------------------------------------------------
# Annihilator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Annihilator:
    """Affine pair ``Omega0(x) = sum_i x_i O0[i]``, ``Omega1(x) = O1c + sum_i x_i O1[i]``."""

    O0: np.ndarray   # (n_x, n_m*n_x, n_x)
    O1c: np.ndarray  # (n_m*n_x, n_m*n_x)
    O1: np.ndarray   # (n_x, n_m*n_x, n_m*n_x)

    def omega0(self, x) -> np.ndarray:
        return np.tensordot(np.asarray(x, dtype=float), self.O0, axes=1)

    def omega1(self, x) -> np.ndarray:
        return self.O1c + np.tensordot(np.asarray(x, dtype=float), self.O1, axes=1)

    def __call__(self, x) -> tuple[np.ndarray, np.ndarray]:
        return self.omega0(x), self.omega1(x)


def build_annihilator(basis: MonomialBasis) -> Annihilator:
    """Block-bidiagonal annihilator of ``Pi(x)``.

    Each block row ``p`` encodes ``m_p(x) = x_j * m_parent(x)`` where ``x_j``
    is the lowest-index variable dividing ``m_p``.  Degree-one monomials use
    ``Omega0`` directly.  ``Omega1`` is block lower triangular with ``-I`` on
    its diagonal, so ``det Omega1(x) = (-1)^(n_m * n_x)`` for every ``x``.
    """
    n, nm = basis.n_x, basis.n_m
    I = np.eye(n)
    O0 = np.zeros((n, nm * n, n))
    O1c = -np.eye(nm * n)
    O1 = np.zeros((n, nm * n, nm * n))
    for p, e in enumerate(basis.monomials):
        rows = slice(p * n, (p + 1) * n)
        j = next(i for i, ei in enumerate(e) if ei > 0)
        if sum(e) == 1:
            O0[j, rows, :] = I
        else:
            parent = list(e)
            parent[j] -= 1
            c = basis.index(parent)
            O1[j, rows, c * n:(c + 1) * n] = I
    return Annihilator(O0, O1c, O1)


# ---------------------------------------------------------------------------
# Affine-in-theta matrices, domains and the model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineMatrix:
    """``M(theta) = const + sum_j theta_j * coeffs[j]``."""

    const: np.ndarray
    coeffs: np.ndarray  # (n_theta, rows, cols)

    @classmethod
    def constant(cls, M, n_theta: int) -> "AffineMatrix":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return cls(M, np.zeros((n_theta,) + M.shape))

    @property
    def shape(self) -> tuple[int, int]:
        return self.const.shape

    @property
    def n_theta(self) -> int:
        return self.coeffs.shape[0]

    def __call__(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.n_theta,):
            raise ValueError(f"expected theta of shape ({self.n_theta},), got {theta.shape}")
        return self.const + np.tensordot(theta, self.coeffs, axes=1)

    def is_zero(self) -> bool:
        return not (np.any(self.const) or np.any(self.coeffs))


@dataclass(frozen=True)
class StateDomain:
    """Polyhedral state set ``{x : h_i^T x <= 1}``."""

    half_planes: np.ndarray  # (n_h, n_x)
    active_vars: tuple[int, ...]

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.half_planes, dtype=float))
        object.__setattr__(self, "half_planes", H)
        object.__setattr__(self, "active_vars", tuple(int(i) for i in self.active_vars))

    @property
    def n_x(self) -> int:
        return self.half_planes.shape[1]

    def contains(self, x) -> bool:
        return bool(np.all(self.half_planes @ np.asarray(x, dtype=float) <= 1.0))

    def active_bounds(self) -> np.ndarray:
        """``(n_active, 2)`` lower/upper bounds of each active variable over the set."""
        H = self.half_planes
        b = np.ones(H.shape[0])
        out = []
        for i in self.active_vars:
            c = np.zeros(self.n_x)
            c[i] = 1.0
            bounds = []
            for sign in (1.0, -1.0):
                res = linprog(sign * c, A_ub=H, b_ub=b, bounds=[(None, None)] * self.n_x,
                              method="highs")
                if res.status != 0:
                    raise PlantFormatError(f"active variable x{i + 1} is unbounded over the state set")
                bounds.append(sign * res.fun)
            out.append(bounds)
        return np.array(out).reshape(len(self.active_vars), 2)

    @property
    def vertex_grid(self) -> np.ndarray:
        """Box vertices over the active variables (rows), inactive coordinates omitted."""
        bnds = self.active_bounds()
        return np.array(list(itertools.product(*[tuple(b) for b in bnds])), dtype=float)


@dataclass(frozen=True)
class PolyQuasiLpvModel:
    """Lifted plant ``x+ = (A0 + Pi^T A1) x + Bu (u1 + u2) + Bd d``, ``y = C x``."""

    A0: AffineMatrix
    A1: AffineMatrix
    Bu: AffineMatrix
    Bd: AffineMatrix
    C: np.ndarray
    basis: MonomialBasis
    X: StateDomain
    theta_vertices: np.ndarray  # (n_vertices, n_theta)
    eta_u: float = 1.0
    eta_d: float = 1.0

    def __post_init__(self):
        tv = np.atleast_2d(np.asarray(self.theta_vertices, dtype=float))
        object.__setattr__(self, "theta_vertices", tv)
        object.__setattr__(self, "C", np.atleast_2d(np.asarray(self.C, dtype=float)))
        n, nm = self.basis.n_x, self.basis.n_m
        if tv.size == 0:
            raise PlantFormatError("theta vertex list must be nonempty")
        checks = [
            (self.A0.shape == (n, n), f"A0 must be {n}x{n}"),
            (self.A1.shape == (nm * n, n), f"A1 must be {nm * n}x{n}"),
            (self.Bu.shape[0] == n, "Bu row count must equal n_x"),
            (self.Bd.shape[0] == n, "Bd row count must equal n_x"),
            (self.C.shape[1] == n, "C column count must equal n_x"),
            (self.X.n_x == n, "state domain dimension must equal n_x"),
            (all(m.n_theta == tv.shape[1] for m in (self.A0, self.A1, self.Bu, self.Bd)),
             "theta dimension mismatch"),
        ]
        for ok, msg in checks:
            if not ok:
                raise PlantFormatError(msg)
        if self.eta_u <= 0 or self.eta_d <= 0:
            raise PlantFormatError("eta_u and eta_d must be positive")

    @property
    def n_x(self) -> int:
        return self.basis.n_x

    @property
    def n_u(self) -> int:
        return self.Bu.shape[1]

    @property
    def n_d(self) -> int:
        return self.Bd.shape[1]

    @property
    def n_w(self) -> int:
        return self.n_u + self.n_d

    @property
    def n_theta(self) -> int:
        return self.theta_vertices.shape[1]

    def A(self, x, theta) -> np.ndarray:
        return self.A0(theta) + eval_pi(self.basis, x).T @ self.A1(theta)

    def Bw(self, theta) -> np.ndarray:
        return build_bw(self.Bu, self.Bd, self.eta_u, self.eta_d, theta)

    def step(self, x, theta, u, d) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        d = np.atleast_1d(np.asarray(d, dtype=float))
        return self.A(x, theta) @ x + self.Bu(theta) @ u + self.Bd(theta) @ d


def build_bw(Bu, Bd, eta_u: float, eta_d: float, theta=None) -> np.ndarray:
    """``Bw(theta) = [eta_u Bu(theta), eta_d Bd(theta)]``."""
    if eta_u <= 0 or eta_d <= 0:
        raise ValueError("eta_u and eta_d must be positive")
    Bu_ = Bu(theta) if isinstance(Bu, AffineMatrix) else np.atleast_2d(np.asarray(Bu, dtype=float))
    Bd_ = Bd(theta) if isinstance(Bd, AffineMatrix) else np.atleast_2d(np.asarray(Bd, dtype=float))
    if Bu_.shape[0] != Bd_.shape[0]:
        raise ValueError("Bu and Bd must have the same number of rows")
    return np.hstack([eta_u * Bu_, eta_d * Bd_])


def enumerate_vertices(X: StateDomain, theta_vertices) -> list[tuple[np.ndarray, np.ndarray]]:
    """Vertices of ``box(X over active vars) x Theta``; inactive coordinates are 0."""
    tv = np.atleast_2d(np.asarray(theta_vertices, dtype=float))
    grid = X.vertex_grid if X.active_vars else np.zeros((1, 0))
    out = []
    for g in grid:
        x = np.zeros(X.n_x)
        x[list(X.active_vars)] = g
        for th in tv:
            out.append((x.copy(), th.copy()))
    return out


# ---------------------------------------------------------------------------
# Polynomial -> lifted decomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolyTerm:
    """One term ``coeff * x^exponents * (theta_j or 1)`` of entry ``A[row, col]``."""

    row: int
    col: int
    exponents: tuple[int, ...]
    coeff: float
    theta_index: int | None = None


def _as_term(t) -> PolyTerm:
    if isinstance(t, PolyTerm):
        return t
    ti = t.get("theta_index")
    if isinstance(ti, (list, tuple)):
        if len(ti) > 1:
            raise PlantFormatError("entries must be affine in theta (at most one theta factor per term)")
        ti = ti[0] if ti else None
    return PolyTerm(int(t["row"]), int(t["col"]), tuple(int(e) for e in t["exponents"]),
                    float(t["coeff"]), None if ti is None else int(ti))


def decompose_dynamics(terms: Iterable, basis: MonomialBasis, n_theta: int) -> tuple[AffineMatrix, AffineMatrix]:
    """Split polynomial entries of ``A(x, theta)`` into ``(A0, A1)``.

    The coefficient of monomial ``m_p`` in entry ``(r, c)`` lands in
    ``A1[p * n_x + r, c]``, so that ``Pi(x)^T A1`` reproduces it.
    """
    n, nm = basis.n_x, basis.n_m
    A0 = np.zeros((n_theta + 1, n, n))
    A1 = np.zeros((n_theta + 1, nm * n, n))
    for raw in terms:
        t = _as_term(raw)
        if len(t.exponents) != n:
            raise PlantFormatError(f"exponent vector {t.exponents} must have length {n}")
        if not (0 <= t.row < n and 0 <= t.col < n):
            raise PlantFormatError(f"entry ({t.row}, {t.col}) out of range")
        if any(e < 0 for e in t.exponents):
            raise PlantFormatError("negative exponents are not polynomial")
        slot = 0 if t.theta_index is None else t.theta_index + 1
        if not 0 <= slot <= n_theta:
            raise PlantFormatError(f"theta_index {t.theta_index} out of range")
        deg = sum(t.exponents)
        if deg == 0:
            A0[slot, t.row, t.col] += t.coeff
        else:
            if deg > basis.q:
                raise PlantFormatError(f"monomial {t.exponents} exceeds basis degree q={basis.q}")
            p = basis.index(t.exponents)
            A1[slot, p * n + t.row, t.col] += t.coeff
    return AffineMatrix(A0[0], A0[1:]), AffineMatrix(A1[0], A1[1:])


# ---------------------------------------------------------------------------
# Built-in plant and file loading
# ---------------------------------------------------------------------------

def van_der_pol_model(Ts: float = 0.1, theta_bounds=(0.5, 0.9), x1_bound: float = 2.0,
                      eta_u: float = 1.0, eta_d: float = 1.0) -> PolyQuasiLpvModel:
    """Euler discretization of the Van der Pol oscillator with an output integrator.

    ``A(x, theta)`` has ``(2, 2)`` entry ``1 + Ts*theta - Ts*theta*x1^2``; only
    ``x1`` enters the lifting.
    """
    terms = [
        PolyTerm(0, 0, (0, 0, 0), 1.0),
        PolyTerm(0, 1, (0, 0, 0), Ts),
        PolyTerm(1, 0, (0, 0, 0), -Ts),
        PolyTerm(1, 1, (0, 0, 0), 1.0),
        PolyTerm(1, 1, (0, 0, 0), Ts, theta_index=0),
        PolyTerm(1, 1, (2, 0, 0), -Ts, theta_index=0),
        PolyTerm(2, 0, (0, 0, 0), Ts),
        PolyTerm(2, 2, (0, 0, 0), 1.0),
    ]
    basis = MonomialBasis(3, 2, (0,))
    A0, A1 = decompose_dynamics(terms, basis, 1)
    B = np.array([[0.0], [Ts], [0.0]])
    X = StateDomain(np.array([[1.0 / x1_bound, 0, 0], [-1.0 / x1_bound, 0, 0]]), (0,))
    return PolyQuasiLpvModel(
        A0=A0, A1=A1,
        Bu=AffineMatrix.constant(B, 1), Bd=AffineMatrix.constant(B, 1),
        C=np.array([[1.0, 0.0, 0.0]]),
        basis=basis, X=X,
        theta_vertices=np.array([[theta_bounds[0]], [theta_bounds[1]]]),
        eta_u=eta_u, eta_d=eta_d,
    )


def _affine_from_json(obj, n_theta: int, name: str) -> AffineMatrix:
    if isinstance(obj, dict):
        const = np.atleast_2d(np.asarray(obj["const"], dtype=float))
        coeffs = obj.get("theta", [])
        coeffs = np.array([np.atleast_2d(np.asarray(c, dtype=float)) for c in coeffs]).reshape(
            (len(coeffs),) + const.shape)
        if coeffs.shape[0] == 0:
            coeffs = np.zeros((n_theta,) + const.shape)
        if coeffs.shape[0] != n_theta:
            raise PlantFormatError(f"{name}: expected {n_theta} theta coefficient matrices")
        return AffineMatrix(const, coeffs)
    M = np.asarray(obj, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    return AffineMatrix.constant(M, n_theta)


def plant_from_dict(d: dict) -> PolyQuasiLpvModel:
    """Build a model from a JSON-compatible plant description."""
    try:
        n_x = int(d["n_x"])
        q = int(d["q"])
        active = tuple(int(i) for i in d["active_vars"])
        tv = np.asarray(d["theta_vertices"], dtype=float)
        if tv.ndim == 1:  # scalar theta: one value per vertex
            tv = tv[:, None]
        n_theta = tv.shape[1]
        basis = MonomialBasis(n_x, q, active)
        A0, A1 = decompose_dynamics(d["A"], basis, n_theta)
        return PolyQuasiLpvModel(
            A0=A0, A1=A1,
            Bu=_affine_from_json(d["Bu"], n_theta, "Bu"),
            Bd=_affine_from_json(d["Bd"], n_theta, "Bd"),
            C=np.atleast_2d(np.asarray(d["C"], dtype=float)),
            basis=basis,
            X=StateDomain(np.asarray(d["X"], dtype=float), active),
            theta_vertices=tv,
            eta_u=float(d.get("eta_u", 1.0)), eta_d=float(d.get("eta_d", 1.0)),
        )
    except KeyError as e:
        raise PlantFormatError(f"missing field {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, PlantFormatError):
            raise
        raise PlantFormatError(str(e)) from None


def load_plant(path) -> PolyQuasiLpvModel:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise PlantFormatError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    return plant_from_dict(d)
