"""Echo State Network inverse-model controller.

The reservoir follows the leaky-integrator update

    xi+ = (1 - gamma) xi + gamma tanh(W_RR xi + W_vR v + W_bias)
    sigma = W_Rsigma xi

and only the readout ``W_Rsigma`` is trained (ridge regression).  The
inverse model learns ``u2[k - delta]`` from output/input history; at control
time the same embedding is shifted forward by ``delta`` with the future
output replaced by the reference.
"""

from __future__ import annotations

import csv
import json
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "EsnConfig",
    "EsnModel",
    "EmbeddingSpec",
    "InverseController",
    "init_reservoir",
    "step",
    "run_collect",
    "ridge_train",
    "build_inverse_dataset",
    "inverse_input",
    "inverse_control",
    "saturate_u2",
    "train_inverse_model",
    "save_dataset",
]


@dataclass(frozen=True)
class EsnConfig:
    n: int = 200
    n_upsilon: int = 4
    gamma: float = 0.6
    rho_R: float = 0.5
    rho_upsilon: float = 1.0
    rho_bias: float = 0.1
    density: float = 0.9
    seed: int = 42
    lambda_ridge: float = 1e-6

    def __post_init__(self):
        if self.n < 1 or self.n_upsilon < 1:
            raise ValueError("reservoir size and input dimension must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 < self.rho_R < 1:
            raise ValueError("rho_R must lie in (0, 1)")
        if not 0 < self.density <= 1:
            raise ValueError("density must lie in (0, 1]")
        if self.lambda_ridge < 0:
            raise ValueError("lambda_ridge must be non-negative")


@dataclass
class EsnModel:
    W_RR: np.ndarray
    W_vR: np.ndarray
    W_bias: np.ndarray
    W_Rsigma: np.ndarray
    config: EsnConfig
    # affine input normalization v_scaled = (v - input_offset) / input_scale
    input_offset: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.W_RR.shape[0]

    def normalize(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.input_offset is None:
            return v
        return (v - self.input_offset) / self.input_scale

    def readout(self, xi) -> np.ndarray:
        return self.W_Rsigma @ xi

    def to_dict(self) -> dict:
        arr = lambda a: None if a is None else np.asarray(a, dtype=float).tolist()
        return {
            "config": asdict(self.config),
            "W_RR": arr(self.W_RR), "W_vR": arr(self.W_vR), "W_bias": arr(self.W_bias),
            "W_Rsigma": arr(self.W_Rsigma),
            "input_offset": arr(self.input_offset), "input_scale": arr(self.input_scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EsnModel":
        opt = lambda k: None if d.get(k) is None else np.array(d[k], dtype=float)
        return cls(np.array(d["W_RR"]), np.array(d["W_vR"]), np.array(d["W_bias"]),
                   np.atleast_2d(np.array(d["W_Rsigma"])), EsnConfig(**d["config"]),
                   opt("input_offset"), opt("input_scale"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "EsnModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_reservoir(config: EsnConfig, n_sigma: int = 1) -> EsnModel:
    """Random reservoir with ``||W_RR||_2 = rho_R`` and a zero readout.

    A Bernoulli(density) mask is drawn first, then standard normal weights.
    The reservoir is rescaled by its largest singular value, which bounds
    the spectral radius by ``rho_R`` as well.
    """
    rng = np.random.default_rng(config.seed)
    n = config.n
    mask = rng.random((n, n)) < config.density
    W = rng.standard_normal((n, n)) * mask
    smax = np.linalg.norm(W, 2)
    W_RR = (config.rho_R / smax) * W
    W_vR = config.rho_upsilon * rng.standard_normal((n, config.n_upsilon))
    W_bias = config.rho_bias * rng.standard_normal(n)
    return EsnModel(W_RR, W_vR, W_bias, np.zeros((n_sigma, n)), config)


def step(model: EsnModel, xi, upsilon, gamma: float | None = None) -> np.ndarray:
    """One leaky-integrator reservoir update (``upsilon`` already normalized)."""
    xi = np.asarray(xi, dtype=float)
    upsilon = np.asarray(upsilon, dtype=float)
    if xi.shape != (model.n,) or upsilon.shape != (model.W_vR.shape[1],):
        raise ValueError(f"dimension mismatch: xi {xi.shape}, upsilon {upsilon.shape}")
    g = model.config.gamma if gamma is None else gamma
    return (1.0 - g) * xi + g * np.tanh(model.W_RR @ xi + model.W_vR @ upsilon + model.W_bias)


def run_collect(model: EsnModel, upsilon_sequence, washout: int = 0, xi0=None) -> np.ndarray:
    """Drive the reservoir from ``xi0`` (zero by default); rows are post-washout states.

    Row ``i`` is the state after consuming input ``washout + i``.
    """
    U = np.atleast_2d(np.asarray(upsilon_sequence, dtype=float))
    if U.shape[0] <= washout:
        raise ValueError(f"sequence of length {U.shape[0]} is not longer than washout {washout}")
    xi = np.zeros(model.n) if xi0 is None else np.array(xi0, dtype=float)
    out = np.empty((U.shape[0], model.n))
    for k, v in enumerate(U):
        xi = step(model, xi, v)
        out[k] = xi
    return out[washout:]


def ridge_train(Xi, Sigma, lambda_ridge: float) -> np.ndarray:
    """Solve ``(Xi^T Xi + lambda I) W = Xi^T Sigma``.

    ``Sigma`` may be a vector (returns a vector) or have one column per
    output channel (returns ``(n_features, n_outputs)``).
    """
    Xi = np.asarray(Xi, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    if Xi.shape[0] != Sigma.shape[0]:
        raise ValueError("Xi and Sigma must have the same number of rows")
    if lambda_ridge < 0:
        raise ValueError("lambda_ridge must be non-negative")
    A = Xi.T @ Xi + lambda_ridge * np.eye(Xi.shape[1])
    if lambda_ridge == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
        raise np.linalg.LinAlgError("normal matrix is singular; use lambda_ridge > 0")
    return np.linalg.solve(A, Xi.T @ Sigma)


@dataclass(frozen=True)
class EmbeddingSpec:
    """Delay embedding of ``(y, u1, u2)`` history.

    ``layout`` lists ``(signal, lag)`` slots relative to the reference time
    ``k`` of a training row: the current output, ``m`` lagged outputs, ``m``
    lagged ``u1`` and ``m`` lagged ``u2`` (shifted by one extra ``delta``).
    """

    m: int = 1
    delta: int = 2
    n_y: int = 1
    n_u: int = 1
    layout: tuple[tuple[str, int], ...] = field(init=False)

    def __post_init__(self):
        if self.m < 1 or self.delta < 1:
            raise ValueError("m and delta must be >= 1")
        m, dl = self.m, self.delta
        slots = [("y", j * dl) for j in range(m + 1)]
        slots += [("u1", j * dl) for j in range(1, m + 1)]
        slots += [("u2", (j + 1) * dl) for j in range(1, m + 1)]
        object.__setattr__(self, "layout", tuple(slots))

    @property
    def horizon(self) -> int:
        """Deepest lag used by a training row."""
        return (self.m + 1) * self.delta

    @property
    def n_upsilon(self) -> int:
        return (self.m + 1) * self.n_y + 2 * self.m * self.n_u


def _embed(spec: EmbeddingSpec, get: Callable[[str, int], np.ndarray], k: int) -> np.ndarray:
    return np.concatenate([np.atleast_1d(get(sig, k - lag)) for sig, lag in spec.layout])


def _trace_signals(trace) -> dict[str, np.ndarray]:
    if isinstance(trace, dict):
        return {s: np.asarray(trace[s], dtype=float) for s in ("y", "u1", "u2")}
    return {s: np.asarray(getattr(trace, s), dtype=float) for s in ("y", "u1", "u2")}


def build_inverse_dataset(trace, spec: EmbeddingSpec) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``[y[k], y[k-d]..y[k-md], u1[k-d]..u1[k-md], u2[k-2d]..u2[k-(m+1)d]]``, target ``u2[k-d]``."""
    sig = _trace_signals(trace)
    N = len(sig["y"])
    if N < spec.horizon + 1:
        raise ValueError(f"trace of length {N} shorter than embedding horizon {spec.horizon + 1}")
    get = lambda s, i: sig[s][i]
    ks = range(spec.horizon, N)
    U = np.array([_embed(spec, get, k) for k in ks])
    S = np.array([sig["u2"][k - spec.delta] for k in ks])
    return U, S


def inverse_input(spec: EmbeddingSpec, y_hist: Sequence, u1_hist: Sequence, u2_hist: Sequence,
                  r_future=0.0) -> np.ndarray:
    """Control-time ESN input at the current sample ``k``.

    ``y_hist`` and ``u1_hist`` end with the values at ``k``; ``u2_hist`` ends
    at ``k - 1``.  The training layout is evaluated at ``k + delta`` with the
    output there replaced by ``r_future``; missing history is zero.
    """
    k = len(y_hist) - 1
    hist = {"y": y_hist, "u1": u1_hist, "u2": u2_hist}

    def get(s, i):
        if s == "y" and i == k + spec.delta:
            return r_future
        h = hist[s]
        return h[i] if 0 <= i < len(h) else 0.0

    return _embed(spec, get, k + spec.delta)


def saturate_u2(u2_raw, eta_u: float):
    """Smooth saturation into ``{|u2| <= 1 / (sqrt(2) eta_u)}``."""
    if eta_u <= 0:
        raise ValueError("eta_u must be positive")
    s = np.sqrt(2.0) * eta_u
    return np.tanh(s * np.asarray(u2_raw, dtype=float)) / s


def inverse_control(model: EsnModel, spec: EmbeddingSpec, xi, y_hist, u1_hist, u2_hist,
                    r_future=0.0) -> tuple[np.ndarray, np.ndarray]:
    """One control step: returns ``(u2_raw, xi_next)``."""
    v = model.normalize(inverse_input(spec, y_hist, u1_hist, u2_hist, r_future))
    xi_next = step(model, xi, v)
    return model.readout(xi_next), xi_next


class InverseController:
    """Stateful wrapper owning the reservoir state and signal history of one run."""

    def __init__(self, model: EsnModel, spec: EmbeddingSpec, eta_u: float = 1.0):
        self.model = model
        self.spec = spec
        self.eta_u = eta_u
        self.reset()

    def reset(self) -> None:
        self.xi = np.zeros(self.model.n)
        self.y: list[float] = []
        self.u1: list[float] = []
        self.u2: list[float] = []

    def __call__(self, y, u1, r_future=0.0) -> float:
        """Record ``y[k]``, ``u1[k]`` and return the saturated ``u2[k]``."""
        self.y.append(float(np.squeeze(y)))
        self.u1.append(float(np.squeeze(u1)))
        raw, self.xi = inverse_control(self.model, self.spec, self.xi, self.y, self.u1, self.u2, r_future)
        u2 = float(saturate_u2(raw[0], self.eta_u))
        self.u2.append(u2)
        return u2


def train_inverse_model(trace, spec: EmbeddingSpec, config: EsnConfig, washout: int = 100,
                        normalize: bool = True) -> EsnModel:
    """Build the inverse-model dataset from a trace, drive the reservoir, ridge-train the readout."""
    U, S = build_inverse_dataset(trace, spec)
    if config.n_upsilon != U.shape[1]:
        config = EsnConfig(**{**asdict(config), "n_upsilon": U.shape[1]})
    model = init_reservoir(config)
    if normalize:
        off = U.mean(axis=0)
        sc = U.std(axis=0)
        sc[sc == 0] = 1.0
        model.input_offset, model.input_scale = off, sc
    Xi = run_collect(model, model.normalize(U), washout=washout)
    W = ridge_train(Xi, S[washout:], config.lambda_ridge)
    model.W_Rsigma = np.atleast_2d(W)
    return model


def save_dataset(path, Upsilon, Sigma) -> None:
    Upsilon = np.atleast_2d(Upsilon)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"v{i}" for i in range(Upsilon.shape[1])] + ["sigma"])
        for row, s in zip(Upsilon, np.atleast_1d(Sigma)):
            w.writerow([repr(float(v)) for v in row] + [repr(float(s))])
