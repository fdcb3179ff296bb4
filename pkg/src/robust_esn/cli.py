"""Command-line pipeline: synth -> collect -> train -> simulate -> compare (+ tune).

Every command reads a JSON run configuration (defaults reproduce the Van
der Pol study) and writes its artifacts into ``--out``.  Downstream commands
pick up upstream artifacts from the same directory unless a path is given.

Exit codes: 0 success, 2 invalid input, 3 infeasible synthesis, 4 numerical
failure (solver breakdown, divergence, singular regression).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import esn as esn_mod
from . import lmi, sim
from .polymodel import PlantFormatError, PolyQuasiLpvModel, load_plant, van_der_pol_model

log = logging.getLogger("robust_esn")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 2, 3, 4

SOLUTION_FILE = "solution.json"
CERTIFICATE_FILE = "certificate.json"
COLLECT_FILE = "collect_trace.csv"
MODEL_FILE = "model.json"
DATASET_FILE = "dataset.csv"
ROBUST_FILE = "trace_robust.csv"
COMBINED_FILE = "trace_combined.csv"
METRICS_FILE = "metrics.json"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class EsnSection:
    n: int = 200
    gamma: float = 0.6
    rho_R: float = 0.5
    rho_upsilon: float = 1.0
    rho_bias: float = 0.1
    density: float = 0.9
    lambda_ridge: float = 1e-6
    seed: int = 42
    washout: int = 100


@dataclass
class EmbeddingSection:
    m: int = 1
    delta: int = 2


@dataclass
class CollectSection:
    length: int = 5000
    cutoff_hz: float = 0.5
    seed: int = 1


@dataclass
class RunConfig:
    plant: str = "builtin:vdp"
    Ts: float = 0.1
    theta_bounds: list = field(default_factory=lambda: [0.5, 0.9])
    x1_bound: float = 2.0
    eta_u: float = 1.0
    eta_d: float = 1.0
    # a number fixes theta for synthesis; "vertices" uses the whole Theta box
    theta_synthesis: object = "vertices"
    theta_sim: float = 0.75
    mu_grid: list = field(default_factory=lmi.default_mu_grid)
    strictness_eps: float = 1e-7
    iss_samples: int = 10_000
    esn: EsnSection = field(default_factory=EsnSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    collect: CollectSection = field(default_factory=CollectSection)
    disturbance: dict = field(default_factory=lambda: {
        "type": "sinusoid", "amplitude": 0.25 * math.sqrt(2.0), "frequencies": [1.0, 2.0]})
    x0: list = field(default_factory=lambda: [-0.0225, 0.252, 0.005])
    duration: float = 60.0
    substeps: int = 10
    tune_m: list = field(default_factory=lambda: [1, 2, 3])
    tune_delta: list = field(default_factory=lambda: [1, 2, 3, 4, 5])

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        sections = {"esn": EsnSection, "embedding": EmbeddingSection, "collect": CollectSection}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in sections:
                sec = sections[k]
                bad = set(v) - {f.name for f in fields(sec)}
                if bad:
                    raise ConfigError(f"unknown keys in {k!r}: {sorted(bad)}")
                v = sec(**v)
            kw[k] = v
        cfg = cls(**kw)
        if base_dir is not None and not cfg.plant.startswith("builtin:"):
            p = Path(cfg.plant)
            if not p.is_absolute():
                cfg.plant = str(base_dir / p)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None
        return cls.from_dict(d, path.parent)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.plant == "builtin:vdp" or Path(self.plant).exists(), f"plant file not found: {self.plant}")
        need(self.Ts > 0, "Ts must be positive")
        lo, hi = self.theta_bounds
        need(lo <= hi, "theta_bounds must be ordered")
        if self.theta_synthesis != "vertices":
            need(isinstance(self.theta_synthesis, (int, float)), "theta_synthesis must be a number or 'vertices'")
            need(lo <= self.theta_synthesis <= hi, "theta_synthesis outside theta_bounds")
        need(lo <= self.theta_sim <= hi, "theta_sim outside theta_bounds")
        need(len(self.mu_grid) > 0 and all(0 < m < 1 for m in self.mu_grid), "mu_grid values must lie in (0, 1)")
        need(self.strictness_eps > 0, "strictness_eps must be positive")
        need(self.iss_samples >= 1, "iss_samples must be >= 1")
        need(self.eta_u > 0 and self.eta_d > 0, "eta_u and eta_d must be positive")
        need(self.duration > 0, "duration must be positive")
        need(self.substeps >= 1, "substeps must be >= 1")
        need(self.collect.length >= 1 and self.collect.cutoff_hz > 0, "invalid collect section")
        need(self.esn.washout >= 0, "washout must be non-negative")
        need(all(np.isfinite(self.x0)), "x0 must be finite")
        try:
            self.esn_config(self.embedding_spec())
        except ValueError as e:
            raise ConfigError(str(e)) from None
        self.disturbance_spec()

    # -- derived objects ---------------------------------------------------

    def model(self) -> PolyQuasiLpvModel:
        if self.plant == "builtin:vdp":
            return van_der_pol_model(self.Ts, tuple(self.theta_bounds), self.x1_bound, self.eta_u, self.eta_d)
        return load_plant(self.plant)

    def plant_sim(self, model: PolyQuasiLpvModel | None = None):
        if self.plant == "builtin:vdp":
            return sim.VanDerPolPlant(self.theta_sim, tuple(self.theta_bounds), self.substeps)
        model = model or self.model()
        return sim.DiscreteModelPlant(model, np.full(model.n_theta, self.theta_sim))

    def synthesis_problem(self, model: PolyQuasiLpvModel) -> lmi.SynthesisProblem:
        thetas = None if self.theta_synthesis == "vertices" else [float(self.theta_synthesis)] * model.n_theta
        return lmi.SynthesisProblem(model, self.mu_grid[0], self.strictness_eps, thetas=thetas)

    def embedding_spec(self) -> esn_mod.EmbeddingSpec:
        return esn_mod.EmbeddingSpec(self.embedding.m, self.embedding.delta)

    def esn_config(self, spec: esn_mod.EmbeddingSpec) -> esn_mod.EsnConfig:
        e = self.esn
        return esn_mod.EsnConfig(n=e.n, n_upsilon=spec.n_upsilon, gamma=e.gamma, rho_R=e.rho_R,
                                 rho_upsilon=e.rho_upsilon, rho_bias=e.rho_bias, density=e.density,
                                 seed=e.seed, lambda_ridge=e.lambda_ridge)

    def disturbance_spec(self):
        d = dict(self.disturbance)
        kind = d.pop("type", None)
        try:
            if kind == "sinusoid":
                spec = sim.Sinusoid(float(d["amplitude"]), tuple(float(f) for f in d["frequencies"]))
            elif kind == "filtered_noise":
                spec = sim.FilteredNoise(float(d["cutoff_hz"]), float(d["amplitude_bound"]), int(d.get("seed", 0)))
            elif kind == "zero":
                spec = sim.Zero()
            else:
                raise ConfigError(f"unknown disturbance type {kind!r}")
        except KeyError as e:
            raise ConfigError(f"disturbance: missing field {e.args[0]!r}") from None
        bound = self.d_bound
        if isinstance(spec, sim.FilteredNoise) and spec.amplitude_bound > bound:
            raise ConfigError(f"disturbance amplitude_bound exceeds {bound:.6g}")
        if isinstance(spec, sim.Sinusoid):
            t = np.linspace(0.0, self.duration, int(self.duration / self.Ts) * self.substeps + 1)
            peak = max(abs(spec(ti)) for ti in t)
            if peak > bound + 1e-12:
                raise ConfigError(f"sinusoidal disturbance peak {peak:.6g} exceeds {bound:.6g}")
        return spec

    @property
    def u2_bound(self) -> float:
        return 1.0 / (math.sqrt(2.0) * self.eta_u)

    @property
    def d_bound(self) -> float:
        return 1.0 / (math.sqrt(2.0) * self.eta_d)


def preset_path(name: str = "vdp_paper") -> Path:
    return Path(str(resources.files("robust_esn") / "presets" / f"{name}.json"))


def load_config(path=None) -> RunConfig:
    """Defaults when ``path`` is None; ``preset:NAME`` selects a packaged preset."""
    if path is None:
        return RunConfig()
    if str(path).startswith("preset:"):
        path = preset_path(str(path)[len("preset:"):])
    return RunConfig.load(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {what}: {path} (run the upstream command first)")
    return path


def cmd_synth(cfg: RunConfig, out: Path) -> lmi.SynthesisSolution:
    """Line search over ``mu``, then the sampling certificate."""
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.model()
    sol = lmi.line_search_mu(cfg.synthesis_problem(model), cfg.mu_grid)
    cert = lmi.verify_iss_decrease(sol, model, n_samples=cfg.iss_samples)
    sol.save(out / SOLUTION_FILE)
    _write_json(out / CERTIFICATE_FILE, cert.to_dict())
    if sol.lambda_ > 1e3:
        log.warning("reachable set is very large (lambda=%.3g)", sol.lambda_)
    log.info("mu=%.3g lambda=%.6g violations=%d", sol.mu, sol.lambda_, cert.decrease_violations)
    return sol


def cmd_collect(cfg: RunConfig, solution: lmi.SynthesisSolution, out: Path) -> sim.SimTrace:
    """Closed loop under ``u1`` with filtered-noise ``u2`` excitation and disturbance."""
    out.mkdir(parents=True, exist_ok=True)
    c = cfg.collect
    n = c.length
    spec_u = sim.FilteredNoise(c.cutoff_hz, cfg.u2_bound)
    spec_d = sim.FilteredNoise(c.cutoff_hz, cfg.d_bound)
    u2, d = sim.gen_training_signals(spec_u, spec_d, n, cfg.Ts, seed=c.seed)
    trace = sim.simulate(cfg.plant_sim(), solution.gain(), disturbance=sim.SampledSignal(d, cfg.Ts),
                         x0=np.zeros(len(cfg.x0)), Ts=cfg.Ts, n_steps=n, u2_sequence=u2,
                         metadata={"kind": "collect", "seed": c.seed})
    trace.to_csv(out / COLLECT_FILE)
    return trace


def cmd_train(cfg: RunConfig, trace: sim.SimTrace, out: Path,
              spec: esn_mod.EmbeddingSpec | None = None) -> esn_mod.EsnModel:
    out.mkdir(parents=True, exist_ok=True)
    spec = spec or cfg.embedding_spec()
    if len(trace) < spec.horizon + 1 + cfg.esn.washout:
        raise ConfigError(f"trace of {len(trace)} samples too short for embedding horizon "
                          f"{spec.horizon} plus washout {cfg.esn.washout}")
    model = esn_mod.train_inverse_model(trace, spec, cfg.esn_config(spec), washout=cfg.esn.washout)
    model.save(out / MODEL_FILE)
    U, S = esn_mod.build_inverse_dataset(trace, spec)
    esn_mod.save_dataset(out / DATASET_FILE, U, S)
    return model


def _run(cfg: RunConfig, solution: lmi.SynthesisSolution, controller, kind: str) -> sim.SimTrace:
    return sim.simulate(cfg.plant_sim(), solution.gain(), esn_controller=controller,
                        disturbance=cfg.disturbance_spec(), x0=cfg.x0, duration=cfg.duration, Ts=cfg.Ts,
                        metadata={"kind": kind})


def cmd_simulate(cfg: RunConfig, solution: lmi.SynthesisSolution, model: esn_mod.EsnModel | None,
                 out: Path) -> dict[str, sim.SimTrace]:
    """Robust-only run, plus the combined run when an ESN model is given."""
    out.mkdir(parents=True, exist_ok=True)
    traces = {"robust": _run(cfg, solution, None, "robust")}
    traces["robust"].to_csv(out / ROBUST_FILE)
    if model is not None:
        ctrl = esn_mod.InverseController(model, cfg.embedding_spec(), cfg.eta_u)
        traces["combined"] = _run(cfg, solution, ctrl, "combined")
        traces["combined"].to_csv(out / COMBINED_FILE)
    return traces


def _bound_ok(values, bound: float) -> bool:
    return bool(np.all(np.abs(values) <= bound + 1e-12))


def cmd_compare(robust: sim.SimTrace, combined: sim.SimTrace, P, out: Path,
                u2_bound: float = 1 / math.sqrt(2.0), d_bound: float = 1 / math.sqrt(2.0)) -> dict:
    """RMS comparison, containment and plot data for a robust/combined pair."""
    out.mkdir(parents=True, exist_ok=True)
    P = np.asarray(P, dtype=float)
    r_rms, c_rms = sim.rms(robust.y), sim.rms(combined.y)
    cont_r, cont_c = sim.check_containment(robust, P), sim.check_containment(combined, P)
    metrics = {
        "rms_robust": r_rms,
        "rms_combined": c_rms,
        "improvement_percent": sim.improvement_factor(c_rms, r_rms),
        "containment_robust": cont_r.to_dict(),
        "containment_combined": cont_c.to_dict(),
        "u2_within_bound": _bound_ok(robust.u2, u2_bound) and _bound_ok(combined.u2, u2_bound),
        "d_within_bound": _bound_ok(robust.d, d_bound) and _bound_ok(combined.d, d_bound),
        "samples": len(robust),
    }
    _write_json(out / METRICS_FILE, metrics)
    _write_plot_data(robust, combined, P, out)
    return metrics


def _write_rows(path: Path, header, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(float(v)) for v in row])


def _write_plot_data(robust: sim.SimTrace, combined: sim.SimTrace, P, out: Path) -> None:
    n = min(len(robust), len(combined))
    vr = np.einsum("ki,ij,kj->k", robust.x[:n], P, robust.x[:n])
    vc = np.einsum("ki,ij,kj->k", combined.x[:n], P, combined.x[:n])
    _write_rows(out / "plot_output.csv",
                ["t", "y_robust", "y_combined", "u1_robust", "u1_combined", "u2_combined", "d"],
                [robust.t[:n], robust.y[:n], combined.y[:n], robust.u1[:n], combined.u1[:n],
                 combined.u2[:n], robust.d[:n]])
    xr, xc = robust.x[:n].T, combined.x[:n].T
    _write_rows(out / "plot_states.csv",
                ["t"] + [f"x{i + 1}_robust" for i in range(len(xr))] + ["V_robust"]
                + [f"x{i + 1}_combined" for i in range(len(xc))] + ["V_combined"],
                [robust.t[:n], *xr, vr, *xc, vc])
    if P.shape[0] == 3:
        # boundary of {x^T P x = 1} on a latitude/longitude grid
        Lc = np.linalg.cholesky(np.linalg.inv(P))
        th, ph = np.meshgrid(np.linspace(0, np.pi, 25), np.linspace(0, 2 * np.pi, 49), indexing="ij")
        s = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)]).reshape(3, -1)
        pts = Lc @ s
        _write_rows(out / "plot_ellipsoid.csv", ["x1", "x2", "x3"], list(pts))


def cmd_tune(cfg: RunConfig, solution: lmi.SynthesisSolution, trace: sim.SimTrace, out: Path) -> dict:
    """Grid search over ``(m, delta)`` scored by closed-loop RMS of ``y``."""
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for m in cfg.tune_m:
        for dl in cfg.tune_delta:
            spec = esn_mod.EmbeddingSpec(int(m), int(dl))
            try:
                model = esn_mod.train_inverse_model(trace, spec, cfg.esn_config(spec), washout=cfg.esn.washout)
                ctrl = esn_mod.InverseController(model, spec, cfg.eta_u)
                score = sim.rms(_run(cfg, solution, ctrl, "tune").y)
            except (sim.DivergenceError, np.linalg.LinAlgError, ValueError) as e:
                log.info("m=%d delta=%d failed: %s", m, dl, e)
                score = float("inf")
            rows.append({"m": int(m), "delta": int(dl), "rms": score})
            log.info("m=%d delta=%d rms=%.6g", m, dl, score)
    best = min(rows, key=lambda r: r["rms"])
    result = {"grid": rows, "best": best}
    _write_json(out / "tune.json", {"grid": [{**r, "rms": r["rms"] if math.isfinite(r["rms"]) else None}
                                             for r in rows], "best": best})
    return result


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg = replace(cfg, esn=replace(cfg.esn, seed=args.seed), collect=replace(cfg.collect, seed=args.seed))
    if args.fixed_theta is not None:
        cfg = replace(cfg, theta_synthesis=args.fixed_theta, theta_sim=args.fixed_theta)
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robust-esn", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON path or preset:NAME); default: built-in defaults")
    common.add_argument("--out", type=Path, default=Path("out"), help="artifact directory")
    common.add_argument("--seed", type=int, help="override ESN and collection seeds")
    common.add_argument("--fixed-theta", type=float, help="synthesize and simulate at this theta")
    common.add_argument("--no-esn", action="store_true", help="robust controller only")
    common.add_argument("--solution", type=Path, help=f"synthesis result (default OUT/{SOLUTION_FILE})")
    common.add_argument("--trace", type=Path, help=f"training trace (default OUT/{COLLECT_FILE})")
    common.add_argument("--model", type=Path, help=f"ESN model (default OUT/{MODEL_FILE})")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="LMI synthesis with mu line search")
    sub.add_parser("collect", parents=[common], help="closed-loop training data collection")
    sub.add_parser("train", parents=[common], help="train the ESN inverse model")
    sub.add_parser("simulate", parents=[common], help="robust-only and combined simulations")
    cmp_ = sub.add_parser("compare", parents=[common], help="metrics and plot data")
    cmp_.add_argument("--robust", type=Path, help=f"default OUT/{ROBUST_FILE}")
    cmp_.add_argument("--combined", type=Path, help=f"default OUT/{COMBINED_FILE}")
    sub.add_parser("tune", parents=[common], help="(m, delta) grid search")
    return p


def _dispatch(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out: Path = args.out
    sol_path = args.solution or out / SOLUTION_FILE
    cmd = args.command
    if cmd == "synth":
        sol = cmd_synth(cfg, out)
        print(f"mu={sol.mu:.4g} lambda={sol.lambda_:.6g}")
        return EXIT_OK
    if cmd == "compare":
        robust = sim.SimTrace.from_csv(_require(args.robust or out / ROBUST_FILE, "robust trace"))
        combined = sim.SimTrace.from_csv(_require(args.combined or out / COMBINED_FILE, "combined trace"))
        P = lmi.SynthesisSolution.load(_require(sol_path, "solution")).P
        m = cmd_compare(robust, combined, P, out, cfg.u2_bound, cfg.d_bound)
        print(json.dumps(m, indent=1, sort_keys=True))
        return EXIT_OK
    sol = lmi.SynthesisSolution.load(_require(sol_path, "solution"))
    if cmd == "collect":
        tr = cmd_collect(cfg, sol, out)
        print(f"collected {len(tr)} samples")
        return EXIT_OK
    trace_path = args.trace or out / COLLECT_FILE
    if cmd == "train":
        cmd_train(cfg, sim.SimTrace.from_csv(_require(trace_path, "training trace")), out)
        print(f"model written to {out / MODEL_FILE}")
        return EXIT_OK
    if cmd == "simulate":
        model = None
        if not args.no_esn:
            model = esn_mod.EsnModel.load(_require(args.model or out / MODEL_FILE, "ESN model"))
        traces = cmd_simulate(cfg, sol, model, out)
        for k, tr in traces.items():
            print(f"{k}: rms(y)={sim.rms(tr.y):.6g}")
        return EXIT_OK
    if cmd == "tune":
        res = cmd_tune(cfg, sol, sim.SimTrace.from_csv(_require(trace_path, "training trace")), out)
        print(f"best m={res['best']['m']} delta={res['best']['delta']} rms={res['best']['rms']:.6g}")
        return EXIT_OK
    raise AssertionError(cmd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, PlantFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (lmi.AllInfeasible, lmi.Infeasible) as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (lmi.BackendFailure, sim.DivergenceError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
