"""Multi-start simplex search for dephasing rates that maximize p_sink."""
from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .errors import TransportError, ValidationError
from .model import FmoSystem, NetworkHamiltonian
from .noise import DephasingSpec, NoiseSpec, build_generators, check_psd
from .propagate import DensityMatrix, IntegratorConfig, final_sink_population, stable_step

log = logging.getLogger(__name__)


class FreeParameters(enum.Enum):
    LOCAL = "local"
    CORRELATED = "correlated"


@dataclass(frozen=True)
class OptimizationProblem:
    hamiltonian: NetworkHamiltonian
    sink_site: int
    sink_rate: float
    source_site: int = 1
    radiative_rate: float = 0.0
    free: FreeParameters = FreeParameters.LOCAL
    sites: Optional[tuple] = None  # 1-based; None means every site
    target_time: float = 5.0
    bounds: tuple = (-3.0, 3.0)  # log10 of rates
    restarts: int = 16
    budget: int = 400  # objective evaluations per restart
    seed: int = 0
    dt: float = 0.0005
    warm_start: Optional[tuple] = None  # local rates seeding a correlated search

    def __post_init__(self):
        lo, hi = self.bounds
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValidationError("bounds must be finite with lo < hi")
        if not self.target_time > 0:
            raise ValidationError("target_time must be positive")
        object.__setattr__(self, "free", FreeParameters(self.free))
        n = self.hamiltonian.n_sites
        if self.sites is not None:
            sites = tuple(sorted({int(s) for s in self.sites}))
            if not sites or sites[0] < 1 or sites[-1] > n:
                raise ValidationError(f"free sites must lie in 1..{n}")
            object.__setattr__(self, "sites", sites)

    @classmethod
    def from_fmo(cls, fmo: FmoSystem, **kw) -> "OptimizationProblem":
        return cls(fmo.hamiltonian, fmo.sink_site, fmo.sink_rate, fmo.source_site,
                   fmo.radiative_rate, **kw)

    @property
    def n_sites(self) -> int:
        return self.hamiltonian.n_sites

    @property
    def free_sites(self) -> tuple:
        return self.sites if self.sites is not None else tuple(range(1, self.n_sites + 1))

    def noise(self, dephasing: Optional[DephasingSpec]) -> NoiseSpec:
        base = NoiseSpec.noiseless(self.n_sites, self.sink_site, self.sink_rate,
                                   self.radiative_rate)
        return base.with_dephasing(dephasing)

    def evaluate(self, dephasing: Optional[DephasingSpec], hamiltonian=None) -> float:
        """p_sink(target_time) for the given dephasing (no step-halving check)."""
        h = hamiltonian if hamiltonian is not None else self.hamiltonian
        gens = build_generators(h, self.noise(dephasing))
        dt = stable_step(gens, self.dt, self.target_time)
        cfg = IntegratorConfig(dt, self.target_time, check_convergence=False)
        return final_sink_population(DensityMatrix.site(self.n_sites, self.source_site),
                                     gens, cfg)

    def verify(self, dephasing: Optional[DephasingSpec]) -> float:
        """Same objective with the step-halving guard enabled."""
        gens = build_generators(self.hamiltonian, self.noise(dephasing))
        cfg = IntegratorConfig(stable_step(gens, self.dt, self.target_time), self.target_time)
        return final_sink_population(DensityMatrix.site(self.n_sites, self.source_site),
                                     gens, cfg)

    # parameter maps --------------------------------------------------------
    def local_rates(self, x) -> np.ndarray:
        rates = np.zeros(self.n_sites)
        rates[np.array(self.free_sites) - 1] = 10.0 ** np.asarray(x)
        return rates

    def tril_indices(self):
        return np.tril_indices(self.n_sites)

    def correlated_matrix(self, x) -> np.ndarray:
        low = np.zeros((self.n_sites, self.n_sites))
        low[self.tril_indices()] = x
        return low @ low.T

    def dephasing(self, x) -> DephasingSpec:
        if self.free is FreeParameters.LOCAL:
            return DephasingSpec.local(self.local_rates(x))
        return DephasingSpec.correlated(self.correlated_matrix(x))


@dataclass
class OptimizationResult:
    best_parameters: np.ndarray  # rate vector or gamma matrix (per unit time)
    best_objective: float
    traces: list  # per restart: list of (evaluation, best-so-far objective)
    evaluations: int
    seed: int
    budget: int
    restart_best: list = field(default_factory=list)
    best_restart: int = 0
    free: str = "local"
    verified_objective: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "parameters": np.asarray(self.best_parameters).tolist(),
            "objective": self.best_objective,
            "verified_objective": self.verified_objective,
            "free": self.free,
            "restarts": [
                {"index": i, "best": b, "trace": [[int(e), float(v)] for e, v in tr]}
                for i, (b, tr) in enumerate(zip(self.restart_best, self.traces))
            ],
            "best_restart": self.best_restart,
            "evaluations": self.evaluations,
            "seed": self.seed,
            "budget": self.budget,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def _simplex_restart(objective: Callable, x0, bounds, budget: int):
    """One bounded Nelder-Mead run maximizing ``objective``; returns (x, f, trace)."""
    trace = []
    best = [-np.inf, None]

    def neg(x):
        try:
            v = float(objective(x))
        except (TransportError, ArithmeticError, np.linalg.LinAlgError) as exc:
            log.warning("objective failed at %s: %s", np.round(x, 4), exc)
            v = -np.inf
        if v > best[0]:
            best[0], best[1] = v, np.array(x, copy=True)
        trace.append((len(trace) + 1, best[0]))
        return -v if np.isfinite(v) else 1e6

    minimize(neg, x0, method="Nelder-Mead", bounds=bounds,
             options={"maxfev": budget, "xatol": 1e-6, "fatol": 1e-10, "adaptive": True})
    return best[1], best[0], trace


def multistart_maximize(objective: Callable, starts, bounds, budget: int, threads: int = 1):
    """Run the simplex from every start; ties go to the lowest restart index."""
    def one(x0):
        return _simplex_restart(objective, x0, bounds, budget)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(one, starts))
    else:
        runs = [one(x0) for x0 in starts]
    best_i = 0
    for i, (_, f, _) in enumerate(runs):
        if f > runs[best_i][1]:
            best_i = i
    return runs, best_i


def latin_starts(n_dim: int, count: int, lo: float, hi: float, seed: int) -> np.ndarray:
    sampler = qmc.LatinHypercube(d=n_dim, seed=np.random.default_rng(seed))
    return qmc.scale(sampler.random(count), np.full(n_dim, lo), np.full(n_dim, hi))


def optimize_local(problem: OptimizationProblem, threads: int = 1) -> OptimizationResult:
    """Maximize p_sink over free local dephasing rates in log10 space."""
    if problem.free is not FreeParameters.LOCAL:
        raise ValidationError("optimize_local needs free=LOCAL")
    lo, hi = problem.bounds
    d = len(problem.free_sites)
    starts = latin_starts(d, problem.restarts, lo, hi, problem.seed)

    def objective(x):
        return problem.evaluate(problem.dephasing(x))

    runs, bi = multistart_maximize(objective, starts, [(lo, hi)] * d, problem.budget, threads)
    x, f, _ = runs[bi]
    rates = problem.local_rates(x)
    res = OptimizationResult(rates, f, [r[2] for r in runs], sum(len(r[2]) for r in runs),
                             problem.seed, problem.budget, [r[1] for r in runs], bi, "local")
    res.verified_objective = problem.verify(DephasingSpec.local(rates))
    return res


def optimize_correlated(problem: OptimizationProblem, threads: int = 1) -> OptimizationResult:
    """Maximize p_sink over PSD dephasing matrices gamma = L L^T.

    L is lower triangular with linear entries bounded by sqrt(10**hi).
    Restart 0 starts from ``problem.warm_start`` local rates when given
    (L diagonal = sqrt of the rates); the others start from seeded
    Latin-hypercube points around it.
    """
    if problem.free is not FreeParameters.CORRELATED:
        raise ValidationError("optimize_correlated needs free=CORRELATED")
    n = problem.n_sites
    rows, cols = problem.tril_indices()
    d = rows.size
    cap = np.sqrt(10.0 ** problem.bounds[1])
    center = np.zeros(d)
    if problem.warm_start is not None:
        center[rows == cols] = np.sqrt(np.asarray(problem.warm_start, dtype=float))
    spread = latin_starts(d, max(problem.restarts - 1, 0), -1.0, 1.0, problem.seed)
    scale = np.where(rows == cols, np.maximum(np.abs(center), 1.0), 1.0)
    starts = [center] + [np.clip(center + s * scale, -cap, cap) for s in spread]

    def objective(x):
        gamma = problem.correlated_matrix(x)
        check_psd(gamma)
        return problem.evaluate(DephasingSpec.correlated(gamma))

    runs, bi = multistart_maximize(objective, starts, [(-cap, cap)] * d, problem.budget, threads)
    x, f, _ = runs[bi]
    gamma = problem.correlated_matrix(x)
    res = OptimizationResult(gamma, f, [r[2] for r in runs], sum(len(r[2]) for r in runs),
                             problem.seed, problem.budget, [r[1] for r in runs], bi,
                             "correlated")
    res.verified_objective = problem.verify(DephasingSpec.correlated(gamma))
    return res


def dephasing_sweep(hamiltonian: NetworkHamiltonian, gamma_grid: Sequence[float], t_fixed: float,
                    *, sink_site: int, sink_rate: float, source_site: int = 1,
                    radiative_rate: float = 0.0, dt: float = 0.01, threads: int = 1):
    """p_sink(t_fixed) under uniform local dephasing for each grid value."""
    grid = np.asarray(gamma_grid, dtype=float)
    if grid.size == 0 or np.any(np.diff(grid) < 0):
        raise ValidationError("gamma grid must be non-empty and ascending")
    n = hamiltonian.n_sites
    base = NoiseSpec.noiseless(n, sink_site, sink_rate, radiative_rate)
    rho0 = DensityMatrix.site(n, source_site)

    def one(g):
        gens = build_generators(hamiltonian, base.with_dephasing(DephasingSpec.local(np.full(n, g))))
        cfg = IntegratorConfig(stable_step(gens, dt, t_fixed), t_fixed)
        return float(g), final_sink_population(rho0, gens, cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, grid))
    return [one(g) for g in grid]


def robustness_scan(problem: OptimizationProblem, best_parameters, factors=(0.5, 2.0)):
    """Objective after rescaling the optimal rates one at a time and all together.

    Returns rows ``{"target", "factor", "objective", "degradation"}`` where
    target is ``"joint"`` or a 1-based site number.
    """
    p = np.asarray(best_parameters, dtype=float)
    corr = p.ndim == 2

    def spec(q):
        return DephasingSpec.correlated(q) if corr else DephasingSpec.local(q)

    ref = problem.evaluate(spec(p))
    rows = [{"target": "joint", "factor": 1.0, "objective": ref, "degradation": 0.0}]
    n = problem.n_sites
    for f in factors:
        val = problem.evaluate(spec(p * f))
        rows.append({"target": "joint", "factor": float(f), "objective": val,
                     "degradation": ref - val})
        for j in range(n):
            if corr:
                s = np.ones(n)
                s[j] = np.sqrt(f)
                q = p * np.outer(s, s)
            else:
                if p[j] == 0:
                    continue
                q = p.copy()
                q[j] *= f
            val = problem.evaluate(spec(q))
            rows.append({"target": j + 1, "factor": float(f), "objective": val,
                         "degradation": ref - val})
    return rows


def energy_robustness(problem: OptimizationProblem, best_parameters, relative=0.05):
    """Objective with site energies scaled by (1 +/- relative), jointly and per site."""
    p = np.asarray(best_parameters, dtype=float)
    spec = DephasingSpec.correlated(p) if p.ndim == 2 else DephasingSpec.local(p)
    h = problem.hamiltonian
    ref = problem.evaluate(spec)
    rows = []
    for sign in (-1.0, 1.0):
        f = 1.0 + sign * relative
        val = problem.evaluate(spec, h.with_energies(h.energies * f))
        rows.append({"target": "joint", "factor": f, "objective": val, "degradation": ref - val})
        for j in range(h.n_sites):
            if h.energies[j] == 0:
                continue
            e = h.energies.copy()
            e[j] *= f
            val = problem.evaluate(spec, h.with_energies(e))
            rows.append({"target": j + 1, "factor": f, "objective": val,
                         "degradation": ref - val})
    return rows
