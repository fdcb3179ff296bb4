"""Sampled-data closed-loop simulation of the two-loop control law."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy import signal as _signal

from .polymodel import PolyQuasiLpvModel

__all__ = [
    "DivergenceError",
    "VanDerPolPlant",
    "DiscreteModelPlant",
    "Sinusoid",
    "FilteredNoise",
    "Zero",
    "SampledSignal",
    "SimTrace",
    "ContainmentReport",
    "vdp_derivative",
    "rk4_step",
    "integrate_zoh",
    "simulate",
    "rms",
    "improvement_factor",
    "check_containment",
    "gen_disturbance",
    "gen_training_signals",
    "paper_disturbance",
]

TRACE_COLUMNS = ("t", "x1", "x2", "x3", "y", "u1", "u2", "u", "d")


class DivergenceError(RuntimeError):
    """Non-finite state; ``trace`` holds the samples logged before the blow-up."""

    def __init__(self, k: int, trace: "SimTrace | None" = None):
        self.k = k
        self.trace = trace
        super().__init__(f"state became non-finite at sample {k}")


# ---------------------------------------------------------------------------
# Plants
# ---------------------------------------------------------------------------

def vdp_derivative(x, theta: float, u: float, d: float) -> np.ndarray:
    x1, x2, x3 = x
    return np.array([x2, -x1 + theta * (1.0 - x1 * x1) * x2 + u + d, x1])


def rk4_step(f: Callable, x, t: float, h: float) -> np.ndarray:
    k1 = f(x, t)
    k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = f(x + h * k3, t + h)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_zoh(rhs: Callable, x, u, d_signal: Callable[[float], float], t0: float, Ts: float,
                  substeps: int = 10) -> np.ndarray:
    """Advance ``dx/dt = rhs(x, u, d(t))`` over one period with ``u`` held constant.

    Classic RK4 with ``substeps`` equal internal steps.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    h = Ts / substeps
    f = lambda xx, tt: rhs(xx, u, d_signal(tt))
    x = np.asarray(x, dtype=float)
    for i in range(substeps):
        x = rk4_step(f, x, t0 + i * h, h)
    return x


@dataclass
class VanDerPolPlant:
    """Continuous Van der Pol oscillator with an integrator on ``x1``."""

    theta: float = 0.75
    theta_bounds: tuple[float, float] = (0.5, 0.9)
    substeps: int = 10
    n_x: int = 3

    def __post_init__(self):
        lo, hi = self.theta_bounds
        if not lo <= self.theta <= hi:
            raise ValueError(f"theta={self.theta} outside [{lo}, {hi}]")

    def derivative(self, x, u, d):
        return vdp_derivative(x, self.theta, u, d)

    def output(self, x) -> float:
        return float(x[0])

    def advance(self, x, u, d_signal, t0, Ts):
        return integrate_zoh(self.derivative, x, u, d_signal, t0, Ts, self.substeps)


@dataclass
class DiscreteModelPlant:
    """Steps the lifted discrete-time model directly (``d`` sampled at ``t0``)."""

    model: PolyQuasiLpvModel
    theta: np.ndarray

    @property
    def n_x(self) -> int:
        return self.model.n_x

    def output(self, x) -> float:
        return float((self.model.C @ x)[0])

    def advance(self, x, u, d_signal, t0, Ts):
        return self.model.step(x, self.theta, u, d_signal(t0))


# ---------------------------------------------------------------------------
# Disturbances
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sinusoid:
    """``amplitude * sum_i sin(w_i t)`` with ``frequencies`` in rad/s."""

    amplitude: float
    frequencies: tuple[float, ...] = (1.0,)

    def __call__(self, t: float) -> float:
        return self.amplitude * sum(math.sin(w * t) for w in self.frequencies)


@dataclass(frozen=True)
class FilteredNoise:
    """First-order low-passed white noise rescaled so ``max |d| = amplitude_bound``."""

    cutoff_hz: float
    amplitude_bound: float
    seed: int = 0

    def samples(self, n: int, Ts: float, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = np.random.default_rng(self.seed) if rng is None else rng
        white = rng.standard_normal(n)
        a = math.exp(-2.0 * math.pi * self.cutoff_hz * Ts)
        y = _signal.lfilter([1.0 - a], [1.0, -a], white)
        peak = np.max(np.abs(y))
        if peak == 0:
            return y
        # clip guards against a one-ulp overshoot from the rescaling
        return np.clip(y * (self.amplitude_bound / peak), -self.amplitude_bound, self.amplitude_bound)


@dataclass(frozen=True)
class Zero:
    def __call__(self, t: float) -> float:
        return 0.0


DisturbanceSpec = Union[Sinusoid, FilteredNoise, Zero]


class SampledSignal:
    """Piecewise-constant signal from per-sample values (held over each period)."""

    def __init__(self, values, Ts: float):
        self.values = np.asarray(values, dtype=float)
        self.Ts = Ts

    def __call__(self, t: float) -> float:
        k = int(math.floor(t / self.Ts + 1e-9))
        return float(self.values[min(max(k, 0), len(self.values) - 1)])


def gen_disturbance(spec: DisturbanceSpec, n: int, Ts: float) -> Callable[[float], float]:
    """Continuous-time disturbance callable for ``n`` samples of period ``Ts``."""
    if isinstance(spec, FilteredNoise):
        return SampledSignal(spec.samples(n, Ts), Ts)
    return spec


def gen_training_signals(spec_u2: FilteredNoise, spec_d: FilteredNoise, length: int, Ts: float,
                         seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Excitation ``u2`` and disturbance ``d`` sequences.

    With ``seed`` given, the two channels draw from independent child
    streams of that seed; otherwise each spec uses its own seed.
    """
    if seed is None:
        return spec_u2.samples(length, Ts), spec_d.samples(length, Ts)
    ss_u, ss_d = np.random.SeedSequence(seed).spawn(2)
    return (spec_u2.samples(length, Ts, np.random.default_rng(ss_u)),
            spec_d.samples(length, Ts, np.random.default_rng(ss_d)))


def paper_disturbance() -> Sinusoid:
    return Sinusoid(0.25 * math.sqrt(2.0), (1.0, 2.0))


# ---------------------------------------------------------------------------
# Traces and simulation
# ---------------------------------------------------------------------------

@dataclass
class SimTrace:
    Ts: float
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    u: np.ndarray
    d: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for k in range(len(self)):
            vals = (self.t[k], *self.x[k], self.y[k], self.u1[k], self.u2[k], self.u[k], self.d[k])
            w.writerow([repr(float(v)) for v in vals])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path, Ts: float | None = None) -> "SimTrace":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        col = {name: body[:, i] for i, name in enumerate(header)}
        xs = np.column_stack([col[c] for c in header if c.startswith("x")])
        t = col["t"]
        if Ts is None:
            Ts = float(t[1] - t[0]) if len(t) > 1 else float("nan")
        return cls(Ts, t, xs, col["y"], col["u1"], col["u2"], col["u"], col["d"])


def simulate(plant, gain: Callable, esn_controller=None, disturbance: DisturbanceSpec | Callable = Zero(),
             x0=None, duration: float | None = None, Ts: float = 0.1, n_steps: int | None = None,
             u2_sequence=None, metadata: dict | None = None) -> SimTrace:
    """Closed loop ``u = u1 + u2`` with ``u1 = K(x) x`` and ZOH actuation.

    ``u2`` comes from ``esn_controller(y, u1)`` when given, else from
    ``u2_sequence`` (exogenous excitation), else zero.  Row ``k`` logs the
    state at ``k Ts`` and the inputs held over ``[k Ts, (k+1) Ts)``.
    """
    if n_steps is None:
        if duration is None or duration <= 0:
            raise ValueError("duration must be positive")
        n_steps = int(round(duration / Ts))
    x = np.zeros(plant.n_x) if x0 is None else np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    d_fun = gen_disturbance(disturbance, n_steps, Ts) if isinstance(disturbance, FilteredNoise) else disturbance
    if esn_controller is not None and hasattr(esn_controller, "reset"):
        esn_controller.reset()
    t = np.arange(n_steps) * Ts
    X = np.zeros((n_steps, plant.n_x))
    cols = {c: np.zeros(n_steps) for c in ("y", "u1", "u2", "u", "d")}

    def trace(upto):
        return SimTrace(Ts, t[:upto], X[:upto], *(cols[c][:upto] for c in ("y", "u1", "u2", "u", "d")),
                        metadata=dict(metadata or {}))

    for k in range(n_steps):
        y = plant.output(x)
        u1 = float(np.squeeze(gain(x)))
        if esn_controller is not None:
            u2 = float(esn_controller(y, u1))
        elif u2_sequence is not None:
            u2 = float(u2_sequence[k])
        else:
            u2 = 0.0
        u = u1 + u2
        X[k] = x
        cols["y"][k], cols["u1"][k], cols["u2"][k], cols["u"][k] = y, u1, u2, u
        cols["d"][k] = d_fun(t[k])
        with np.errstate(over="ignore", invalid="ignore"):
            x = plant.advance(x, u, d_fun, t[k], Ts)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k, trace(k + 1))
    return trace(n_steps)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def rms(samples) -> float:
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        raise ValueError("rms of an empty signal")
    return float(np.sqrt(np.mean(s * s)))


def improvement_factor(rms_combined: float, rms_robust: float) -> float:
    """Percent RMS reduction of the combined law relative to the robust law."""
    if rms_robust <= 0:
        raise ValueError("rms_robust must be positive")
    return 100.0 * (1.0 - rms_combined / rms_robust)


@dataclass
class ContainmentReport:
    max_value: float
    violations: int
    samples: int

    def to_dict(self) -> dict:
        return {"max_value": self.max_value, "violations": self.violations, "samples": self.samples}


def check_containment(trace: SimTrace, P) -> ContainmentReport:
    """Evaluate ``x^T P x`` at every sample; a violation is a value above 1."""
    P = np.asarray(P, dtype=float)
    v = np.einsum("ki,ij,kj->k", trace.x, P, trace.x)
    return ContainmentReport(float(v.max()) if v.size else 0.0, int(np.sum(v > 1.0)), int(v.size))
