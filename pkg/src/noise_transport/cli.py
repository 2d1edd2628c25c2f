"""Command-line entry point: run | sweep | optimize | invariant | pathways."""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .analysis import DEFAULT_WINDOW, asymptotic_sink, invariant_subspace, pathway_report
from .errors import (
    CapacityError,
    ConfigError,
    NumericalInstability,
    StepTooLarge,
    TransportError,
)
from .model import (
    FmoSystem,
    build_fcn,
    disordered_energies,
    hybrid_transform,
    load_fmo,
    load_network,
    network_from_dict,
)
from .noise import NoiseSpec, build_generators
from .optimize import (
    FreeParameters,
    OptimizationProblem,
    dephasing_sweep,
    energy_robustness,
    optimize_correlated,
    optimize_local,
    robustness_scan,
)
from .propagate import (
    DensityMatrix,
    IntegratorConfig,
    coherence_lifetime,
    evolve,
    final_sink_population,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
PRESETS = ("fcn7", "fcn7_disorder", "fmo", "fmo_optimized", "fmo_correlated", "fmo_modes",
           "fmo_sites12")


def load_preset(name: str) -> dict:
    try:
        text = resources.files("noise_transport.presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _grid(spec) -> np.ndarray:
    if isinstance(spec, dict):
        if "logspace" in spec:
            lo, hi, n = spec["logspace"]
            return np.logspace(lo, hi, int(n))
        if "linspace" in spec:
            lo, hi, n = spec["linspace"]
            return np.linspace(lo, hi, int(n))
        raise ConfigError("grid object needs 'logspace' or 'linspace'")
    return np.asarray(spec, dtype=float)


class Experiment:
    """Resolved run configuration."""

    def __init__(self, cfg: dict, base_dir: Path = Path(".")):
        self.cfg = cfg
        self.base_dir = base_dir
        self.fmo = None
        net = cfg.get("network")
        if not isinstance(net, dict) or len(net) != 1:
            raise ConfigError("'network' must hold exactly one of builtin, file, fcn, inline")
        (kind, val), = net.items()
        noise_defaults = {}
        if kind == "builtin":
            if val != "fmo":
                raise ConfigError(f"unknown builtin network {val!r}")
            self.fmo = load_fmo()
            self.hamiltonian = self.fmo.hamiltonian
            noise_defaults = {"radiative": self.fmo.radiative_rate,
                              "sink": {"site": self.fmo.sink_site, "rate": self.fmo.sink_rate}}
            default_source = self.fmo.source_site
        elif kind == "file":
            path = Path(val)
            if not path.is_absolute():
                path = base_dir / path
            self.hamiltonian = load_network(path)
            doc = json.loads(path.read_text())
            if doc.get("sink"):
                noise_defaults["sink"] = doc["sink"]
            default_source = int(doc.get("source", 1))
        elif kind == "fcn":
            n = int(val["n"])
            energies = val.get("energies")
            if val.get("disorder_seed") is not None:
                lo, hi = val.get("disorder_range", [0.0, 1.0])
                energies = disordered_energies(n, int(val["disorder_seed"]), lo, hi)
            self.hamiltonian = build_fcn(n, float(val.get("j", 1.0)), energies)
            default_source = 1
        elif kind == "inline":
            self.hamiltonian = network_from_dict(val)
            if val.get("sink"):
                noise_defaults["sink"] = val["sink"]
            default_source = int(val.get("source", 1))
        else:
            raise ConfigError(f"unknown network source {kind!r}")
        n = self.hamiltonian.n_sites
        self.noise = NoiseSpec.from_dict(cfg.get("noise", {}), n, noise_defaults)
        init = cfg.get("initial", {"site": default_source})
        if "site" in init:
            self.source = int(init["site"])
            if not 1 <= self.source <= n:
                raise ConfigError(f"initial site {self.source} outside 1..{n}")
            self.psi0 = np.eye(n)[self.source - 1]
        elif "vector" in init:
            self.psi0 = np.asarray(init["vector"], dtype=complex)
            self.source = None
        else:
            raise ConfigError("'initial' needs 'site' or 'vector'")
        integ = dict(cfg.get("integrator", {}))
        default_dt = 0.0005 if self.hamiltonian.units.value == "cm-1" else 0.01
        self.integrator = IntegratorConfig(
            dt=float(integ.get("dt", default_dt)),
            t_final=float(integ.get("t_final", 5.0 if default_dt < 0.01 else 50.0)),
            record_stride=int(integ.get("record_stride", 1)),
            tolerance=float(integ.get("tolerance", 1e-6)),
            positivity_check_stride=int(integ.get("positivity_check_stride", 100)),
            scheme=integ.get("scheme", "auto"),
        )

    @property
    def n_sites(self) -> int:
        return self.hamiltonian.n_sites

    def with_modes_subset(self, sites):
        if self.noise.modes is None:
            raise ConfigError("--modes-subset given but the config attaches no modes")
        from dataclasses import replace
        self.noise = self.noise.with_modes(replace(self.noise.modes, attached_sites=tuple(sites)))

    def generators(self, noise=None):
        return build_generators(self.hamiltonian, noise or self.noise)

    def initial_state(self, noise=None) -> DensityMatrix:
        noise = noise or self.noise
        n_modes = 0 if noise.modes is None else len(noise.modes.sites(self.n_sites))
        return DensityMatrix.from_vector(self.psi0, n_modes)

    def fmo_system(self) -> FmoSystem:
        d = self.noise.dissipation
        if d.sink_site is None:
            raise ConfigError("pathway analysis needs a sink")
        return FmoSystem(self.hamiltonian, d.sink_rate, self.source or 1, d.sink_site,
                         float(d.radiative_rates[0]))


# -- commands -----------------------------------------------------------------

def cmd_run(exp: Experiment, out: Path, name: str, threads: int = 1) -> int:
    obs = exp.cfg.get("observables", {})
    pair = obs.get("hybrid_pair")
    gens = exp.generators()
    transform = hybrid_transform(pair, exp.n_sites) if pair else None
    traj = evolve(exp.initial_state(), gens, exp.integrator, transform=transform, hybrid_pair=pair)
    traj.to_csv(out / f"{name}_trajectory.csv")
    traj.to_json(out / f"{name}_trajectory.json")
    life = coherence_lifetime(traj)
    print(f"{name}: p_sink({exp.integrator.t_final:g}) = {traj.p_sink_final:.6f}")
    print(f"{name}: coherence |rho_12| below 0.01 from t = {life:g} (diagnostic)")
    if traj.mode_excitation_max is not None:
        print(f"{name}: max mode excitation {np.round(traj.mode_excitation_max, 4).tolist()}")
    return EXIT_OK


def cmd_sweep(exp: Experiment, out: Path, name: str, threads: int = 1) -> int:
    sw = exp.cfg.get("sweep")
    if not sw:
        raise ConfigError("config has no 'sweep' block")
    param = sw.get("parameter", "gamma")
    grid = _grid(sw["grid"])
    t = float(sw.get("t", exp.integrator.t_final))
    d = exp.noise.dissipation
    rows = []
    if param == "gamma":
        if d.sink_site is None:
            raise ConfigError("gamma sweep needs a sink")
        rows = dephasing_sweep(exp.hamiltonian, grid, t, sink_site=d.sink_site,
                               sink_rate=d.sink_rate, source_site=exp.source or 1,
                               radiative_rate=float(d.radiative_rates[0]),
                               dt=exp.integrator.dt, threads=threads)
    elif param == "mode_damping":
        if exp.noise.modes is None:
            raise ConfigError("mode_damping sweep needs a 'modes' block")
        from dataclasses import replace
        cfg = IntegratorConfig(exp.integrator.dt, t, tolerance=exp.integrator.tolerance,
                               scheme=exp.integrator.scheme)
        for g in grid:
            noise = exp.noise.with_modes(replace(exp.noise.modes, damping=float(g)))
            p = final_sink_population(exp.initial_state(noise), exp.generators(noise), cfg)
            rows.append((float(g), p))
            print(f"{name}: damping {g:g} -> p_sink({t:g}) = {p:.6f}")
    else:
        raise ConfigError(f"unknown sweep parameter {param!r}")
    path = out / f"{name}_sweep.csv"
    with open(path, "w") as fh:
        fh.write(f"{param},p_sink\n")
        for g, p in rows:
            fh.write(f"{g:.12g},{p:.12g}\n")
    best = max(range(len(rows)), key=lambda i: (rows[i][1], -i))
    print(f"{name}: {len(rows)} points, maximum p_sink {rows[best][1]:.6f} at {param}={rows[best][0]:g}")
    return EXIT_OK


def _problem(exp: Experiment, opt: dict) -> OptimizationProblem:
    d = exp.noise.dissipation
    if d.sink_site is None:
        raise ConfigError("optimization needs a sink")
    warm = opt.get("warm_start")
    return OptimizationProblem(
        hamiltonian=exp.hamiltonian, sink_site=d.sink_site, sink_rate=d.sink_rate,
        source_site=exp.source or 1, radiative_rate=float(d.radiative_rates[0]),
        free=FreeParameters(opt.get("free", "local")),
        sites=tuple(opt["sites"]) if opt.get("sites") else None,
        target_time=float(opt.get("target_time", 5.0)),
        bounds=tuple(opt.get("bounds", (-3.0, 3.0))),
        restarts=int(opt.get("restarts", 16)), budget=int(opt.get("budget", 400)),
        seed=int(exp.cfg.get("seed", 0)), dt=exp.integrator.dt,
        warm_start=tuple(warm) if warm else None,
    )


def cmd_optimize(exp: Experiment, out: Path, name: str, threads: int = 1) -> int:
    opt = exp.cfg.get("optimize")
    if not opt:
        raise ConfigError("config has no 'optimize' block")
    prob = _problem(exp, opt)
    if prob.free is FreeParameters.LOCAL:
        res = optimize_local(prob, threads=threads)
    else:
        res = optimize_correlated(prob, threads=threads)
    doc = res.to_dict()
    if opt.get("robustness", False):
        doc["robustness"] = robustness_scan(prob, res.best_parameters)
        doc["energy_robustness"] = energy_robustness(prob, res.best_parameters)
    with open(out / f"{name}_optimization.json", "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(f"{name}: best p_sink({prob.target_time:g}) = {res.best_objective:.6f} "
          f"(restart {res.best_restart}, {res.evaluations} evaluations)")
    return EXIT_OK


def cmd_invariant(exp: Experiment, out: Path, name: str, threads: int = 1) -> int:
    d = exp.noise.dissipation
    if d.sink_site is None:
        raise ConfigError("invariant analysis needs a sink site")
    h = exp.hamiltonian.matrix
    sub = invariant_subspace(h, d.sink_site)
    psi = exp.psi0 / np.linalg.norm(exp.psi0)
    p_inf = asymptotic_sink(psi, h, d.sink_site)
    doc = {"sink_site": d.sink_site, "dimension": sub.dimension, "asymptotic_sink": p_inf,
           "basis_real": sub.basis.real.tolist(), "basis_imag": sub.basis.imag.tolist()}
    with open(out / f"{name}_invariant.json", "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(f"{name}: invariant subspace dimension {sub.dimension}, asymptotic p_sink {p_inf:.10f}")
    return EXIT_OK


def cmd_pathways(exp: Experiment, out: Path, name: str, threads: int = 1) -> int:
    pw = exp.cfg.get("pathways", {})
    rep = pathway_report(exp.fmo_system(), pair=tuple(pw.get("pair", (1, 2))),
                         window=tuple(pw.get("window", DEFAULT_WINDOW)),
                         dt=exp.integrator.dt)
    rep.to_json(out / f"{name}_pathways.json")
    r = rep.ratios
    print(f"{name}: window {rep.window}, path II / path I = {r['path2_over_path1']:.4f}, "
          f"<-|H|6> zeroed / baseline = {r['minus6_zeroed_over_baseline']:.4f}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "optimize": cmd_optimize,
            "invariant": cmd_invariant, "pathways": cmd_pathways}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noise-transport", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("config", nargs="?", help="JSON run configuration")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--preset", choices=PRESETS, help="bundled configuration (config file overrides it)")
    p.add_argument("--modes-subset", help="comma-separated sites carrying local modes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, base, name = {}, Path("."), args.command
        if args.preset:
            cfg, name = load_preset(args.preset), args.preset
        if args.config:
            path = Path(args.config)
            try:
                user = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            cfg, base, name = _merge(cfg, user), path.parent, path.stem
        if not cfg:
            raise ConfigError("give a config file or --preset")
        exp = Experiment(cfg, base)
        if args.modes_subset:
            exp.with_modes_subset(int(s) for s in args.modes_subset.split(","))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](exp, out, name, threads=max(1, args.threads))
    except (NumericalInstability, StepTooLarge) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (TransportError, ValueError, KeyError, TypeError, OSError) as exc:
        if isinstance(exc, CapacityError):
            print(f"capacity: {exc}", file=sys.stderr)
        else:
            print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
