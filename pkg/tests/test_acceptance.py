"""Acceptance criteria, one PASS/FAIL line each in the terminal summary.

FMO-based criteria that miss also report the same quantity with the
energy-to-rate factor taken as c instead of 2*pi*c, so that a unit
convention slip can be told apart from a physics miss.
"""
import time
from functools import lru_cache

import numpy as np
import pytest
from conftest import record

from noise_transport.analysis import (
    asymptotic_sink,
    calibrate_sink_rate,
    invariant_subspace,
    pathway_report,
)
from noise_transport.errors import TransportError
from noise_transport.model import (
    FmoSystem,
    NetworkHamiltonian,
    build_fcn,
    disordered_energies,
    hybrid_transform,
    load_fmo,
)
from noise_transport.noise import (
    DephasingSpec,
    LocalModeSpec,
    NoiseSpec,
    apply_correlated_dephasing,
    apply_local_dephasing,
    build_generators,
)
from noise_transport.optimize import (
    FreeParameters,
    OptimizationProblem,
    dephasing_sweep,
    energy_robustness,
    optimize_correlated,
    optimize_local,
    robustness_scan,
)
from noise_transport.propagate import (
    DensityMatrix,
    IntegratorConfig,
    evolve,
    final_sink_population,
    final_state,
)

pytestmark = pytest.mark.slow
TWO_PI = 2 * np.pi


def fcn_gens(n, gamma=0.0, energies=None):
    h = build_fcn(n, 1.0, energies)
    noise = NoiseSpec.noiseless(n, n, 1.0)
    if gamma:
        noise = noise.with_dephasing(DephasingSpec.local(np.full(n, gamma)))
    return h, build_generators(h, noise)


def p_fcn(n, t, gamma=0.0, energies=None, dt=0.01):
    h, g = fcn_gens(n, gamma, energies)
    return final_sink_population(DensityMatrix.site(n, 1), g, IntegratorConfig(dt, t))


@lru_cache(maxsize=None)
def fmo():
    return load_fmo()


@lru_cache(maxsize=None)
def flipped_fmo():
    """Bundled FMO with every energy scaled by 1/(2 pi), i.e. rates from c instead of 2 pi c."""
    f = fmo()
    h = f.hamiltonian
    hf = NetworkHamiltonian.from_matrix(h.matrix / TWO_PI, units=h.units, labels=h.labels)
    return FmoSystem(hf, f.sink_rate, f.source_site, f.sink_site, f.radiative_rate)


def noiseless_p5(f):
    gens = build_generators(f.hamiltonian, NoiseSpec.noiseless(7, f.sink_site, f.sink_rate,
                                                               f.radiative_rate))
    return final_sink_population(DensityMatrix.site(7, f.source_site), gens,
                                 IntegratorConfig(0.0005, 5.0))


@lru_cache(maxsize=None)
def local_optimum(flipped=False, sites=None):
    f = flipped_fmo() if flipped else fmo()
    return optimize_local(OptimizationProblem.from_fmo(f, sites=sites))


@lru_cache(maxsize=None)
def correlated_optimum(flipped=False):
    f = flipped_fmo() if flipped else fmo()
    warm = tuple(local_optimum(flipped).best_parameters)
    prob = OptimizationProblem.from_fmo(f, free=FreeParameters.CORRELATED, warm_start=warm)
    return optimize_correlated(prob)


# -- 1 -----------------------------------------------------------------------

def test_c1_fcn_dark_state_asymptotics():
    rows, ok = [], True
    for n in range(3, 11):
        h, g = fcn_gens(n)
        analytic = asymptotic_sink(np.eye(n)[0], h.matrix, n)
        simulated = final_sink_population(DensityMatrix.site(n, 1), g, IntegratorConfig(0.01, 300.0))
        dim = invariant_subspace(h.matrix, n).dimension
        good = (abs(analytic - 1 / (n - 1)) < 1e-10 and abs(simulated - 1 / (n - 1)) < 1e-3
                and dim == n - 2)
        ok &= good
        rows.append(f"N={n}: sim {simulated:.5f} analytic {analytic:.12f}")
    record("C1 fcn dark-state asymptotics", ok, "; ".join(rows[3:5]) + f"; all N in 3..10 {ok}")
    assert ok, rows


# -- 2 -----------------------------------------------------------------------

def test_c2_dephasing_assisted_transport_on_fcn():
    h, _ = fcn_gens(7)
    p1 = p_fcn(7, 50.0, gamma=1.0)
    sweep = dephasing_sweep(h, np.logspace(-2, 3, 26), 50.0, sink_site=7, sink_rate=1.0)
    vals = np.array([p for _, p in sweep])
    top = int(np.argmax(vals))
    interior = 0 < top < len(vals) - 1 and vals[0] < vals[top] and vals[-1] < vals[top]
    ok = p1 > 0.9 and interior
    record("C2 dephasing-assisted transport on FCN", ok,
           f"p_sink(50; gamma=1) = {p1:.4f}; sweep max {vals[top]:.4f} at gamma={sweep[top][0]:.3g}, "
           f"ends {vals[0]:.4f} / {vals[-1]:.4f}")
    assert ok


# -- 3 -----------------------------------------------------------------------

def test_c3_static_disorder():
    e = disordered_energies(7, 7)
    h, g = fcn_gens(7, energies=e)
    rho0 = DensityMatrix.site(7, 1)
    t, prev = 200.0, None
    while True:
        p_long = final_sink_population(rho0, g, IntegratorConfig(0.01, t, check_convergence=False))
        # long enough once doubling t moves p_sink by < 1e-4
        if prev is not None and abs(p_long - prev) < 1e-4:
            break
        prev, t = p_long, 2 * t
        assert t < 1e7
    p_dis = p_fcn(7, 50.0, energies=e, dt=0.005)
    p_dis_deph = p_fcn(7, 50.0, gamma=1.0, energies=e, dt=0.005)
    p_uniform_deph = p_fcn(7, 50.0, gamma=1.0)
    analytic = asymptotic_sink(np.eye(7)[0], h.matrix, 7)
    ok = (p_long > 0.99 and abs(analytic - 1) < 1e-10
          and p_dis < p_uniform_deph and p_dis_deph > p_dis)
    record("C3 static disorder", ok,
           f"p_sink(t={t:g}) = {p_long:.5f}; p_sink(50): disorder {p_dis:.4f} < "
           f"dephased uniform {p_uniform_deph:.4f}; disorder+gamma=1 {p_dis_deph:.4f}")
    assert ok


# -- 4 -----------------------------------------------------------------------

def test_c4_fmo_noiseless_baseline():
    f = fmo()
    p5 = noiseless_p5(f)
    rate = calibrate_sink_rate(f.hamiltonian, target=0.57, t=5.0, sink_site=f.sink_site,
                               radiative=f.radiative_rate)
    rep = pathway_report(f)
    r = rep.ratios
    ok_cal = abs(p5 - 0.57) <= 0.01
    ok_path = r["path2_over_path1"] < 0.1
    ok_zero = abs((r["minus6_zeroed_over_baseline"] - 1) - 0.50) <= 0.15
    ok = ok_cal and ok_path and ok_zero
    detail = (f"p_sink(5) = {p5:.4f} (sink rate {f.sink_rate} /ps, recalibrated {rate:.4f}); "
              f"path II/I = {r['path2_over_path1']:.4f}; "
              f"<-|H|6>=0 rate ratio = {r['minus6_zeroed_over_baseline']:.4f}")
    if not ok:
        ff = flipped_fmo()
        rf = pathway_report(ff).ratios
        detail += (f" | c-convention: p_sink(5) = {noiseless_p5(ff):.4f}, path II/I = "
                   f"{rf['path2_over_path1']:.4f}, <-|H|6>=0 ratio = "
                   f"{rf['minus6_zeroed_over_baseline']:.4f}")
    record("C4 FMO noiseless baseline", ok, detail)
    assert ok


# -- 5 -----------------------------------------------------------------------

def test_c5_optimized_local_dephasing():
    f = fmo()
    full = local_optimum()
    pair = local_optimum(sites=(1, 2))
    prob = OptimizationProblem.from_fmo(f)
    rows = robustness_scan(prob, full.best_parameters)
    joint = [r for r in rows if r["target"] == "joint" and r["factor"] != 1.0]
    worst = max(r["degradation"] for r in joint)
    e_rows = energy_robustness(prob, full.best_parameters)
    e_worst = max(r["degradation"] for r in e_rows)
    ok_all = full.verified_objective >= 0.90
    ok_pair = abs(pair.verified_objective - 0.85) <= 0.03
    ok_rob = worst < 0.05
    ok = ok_all and ok_pair and ok_rob
    detail = (f"all sites {full.verified_objective:.4f}; sites(1,2) {pair.verified_objective:.4f}; "
              f"joint x2/x0.5 worst drop {worst:.4f}; site energies +-5% worst drop "
              f"{e_worst:.4f} (informational)")
    if not ok:
        detail += (f" | c-convention: all sites {local_optimum(True).verified_objective:.4f}, "
                   f"sites(1,2) {local_optimum(True, (1, 2)).verified_objective:.4f}")
    record("C5 optimized local dephasing", ok, detail)
    assert ok


# -- 6 -----------------------------------------------------------------------

def test_c6_correlated_dephasing():
    loc = local_optimum()
    cor = correlated_optimum()
    ok = cor.verified_objective >= 0.92 and cor.verified_objective > loc.verified_objective
    detail = f"correlated {cor.verified_objective:.5f} vs local {loc.verified_objective:.5f}"
    if not ok:
        detail += (f" | c-convention: correlated {correlated_optimum(True).verified_objective:.5f}"
                   f" vs local {local_optimum(True).verified_objective:.5f}")
    record("C6 correlated dephasing", ok, detail)
    assert ok


# -- 7 -----------------------------------------------------------------------

MODE_DT = 0.004


def mode_run(damping, flipped=False, dt=MODE_DT):
    f = flipped_fmo() if flipped else fmo()
    scale = TWO_PI if flipped else 1.0
    spec = LocalModeSpec(omega_h=180.0 / scale, huang_rhys=0.22, damping=damping,
                         damping_convention="ordinary" if flipped else "angular")
    noise = NoiseSpec.noiseless(7, f.sink_site, f.sink_rate, f.radiative_rate).with_modes(spec)
    gens = build_generators(f.hamiltonian, noise)
    cfg = IntegratorConfig(dt, 5.5, record_stride=2, positivity_check_stride=50)
    return evolve(DensityMatrix.site(7, f.source_site, 7), gens, cfg)


def visible_sign_changes(times, series, degree=3, band=1e-3):
    """Sign changes of the series about a smooth polynomial trend, with a dead band."""
    resid = series - np.polyval(np.polyfit(times, series, degree), times)
    signs = np.sign(resid[np.abs(resid) > band])
    return int(np.count_nonzero(np.diff(signs)))


def test_c7_local_vibrational_modes():
    t0 = time.perf_counter()
    tr = mode_run(1.0)
    elapsed = time.perf_counter() - t0
    p1 = tr.p_sink_final
    far = tr.site_populations[:, 4:7].sum(axis=1).max()
    flips = [visible_sign_changes(tr.times, tr.site_populations[:, j]) for j in (0, 1)]
    p_by_gamma = [p1] + [mode_run(g).p_sink_final for g in (10.0, 100.0)]
    ok = (abs(p1 - 0.95) <= 0.03 and far < 0.05 and min(flips) >= 5
          and all(np.diff(p_by_gamma) >= 0) and elapsed <= 1800)
    detail = (f"p_sink(5.5) = {p1:.4f}; max sites 5-7 = {far:.4f}; sign changes sites 1,2 = "
              f"{flips}; p_sink over Gamma 1/10/100 = {np.round(p_by_gamma, 4).tolist()}; "
              f"full run {elapsed / 60:.1f} min")
    if not ok:
        try:
            trf = mode_run(1.0, flipped=True, dt=0.01)
            detail += (f" | c-convention: p_sink(5.5) = {trf.p_sink_final:.4f}, max sites 5-7 = "
                       f"{trf.site_populations[:, 4:7].sum(axis=1).max():.4f}")
        except TransportError as exc:
            detail += f" | c-convention run failed: {exc}"
    record("C7 local vibrational modes", ok, detail)
    assert ok


# -- 8 -----------------------------------------------------------------------

def test_c8_property_suite(tmp_path):
    f = fmo()
    checks = {}
    rates = np.array([0.3, 5.0, 0.1, 2.0, 1.0, 10.0, 0.7])
    noise = NoiseSpec.noiseless(7, 3, f.sink_rate, f.radiative_rate)
    noise = noise.with_dephasing(DephasingSpec.local(rates))
    gens = build_generators(f.hamiltonian, noise)
    cfg = IntegratorConfig(0.0005, 2.0, record_stride=10)
    rho0 = DensityMatrix.site(7, 1)
    tr = evolve(rho0, gens, cfg)
    checks["trace"] = np.max(np.abs(tr.populations.sum(axis=1) - 1)) < 1e-8
    rho_t = final_state(rho0, gens, cfg).data
    checks["hermiticity"] = np.max(np.abs(rho_t - rho_t.conj().T)) < 1e-9
    checks["min eigenvalue"] = tr.min_eigenvalue >= -1e-7
    checks["dual sink"] = np.max(np.abs(tr.sink_population - tr.sink_integral)) < 10 * cfg.tolerance

    rng = np.random.default_rng(5)
    a = rng.normal(size=(9, 9)) + 1j * rng.normal(size=(9, 9))
    rho = a @ a.conj().T
    rho /= np.trace(rho).real
    diff = apply_correlated_dephasing(rho, np.diag(rates)) - apply_local_dephasing(rho, rates)
    checks["correlated diagonal"] = np.max(np.abs(diff)) < 1e-13

    u = hybrid_transform((1, 2), 7)
    rot = evolve(DensityMatrix.from_vector(u.unitary @ np.eye(7)[0]), gens.transformed(u), cfg)
    checks["hybrid covariance"] = abs(rot.p_sink_final - tr.p_sink_final) < 1e-8

    base = NoiseSpec.noiseless(7, 3, f.sink_rate, f.radiative_rate)
    short = IntegratorConfig(0.0005, 1.0, record_stride=100)
    plain = evolve(rho0, build_generators(f.hamiltonian, base), short)
    ext_noise = base.with_modes(LocalModeSpec(huang_rhys=0.0, damping=5.0, attached_sites=(1, 2, 3)))
    ext = evolve(DensityMatrix.site(7, 1, 3), build_generators(f.hamiltonian, ext_noise), short)
    checks["g=0 modes"] = np.max(np.abs(plain.populations - ext.populations)) < short.tolerance

    tr.to_csv(tmp_path / "a.csv")
    evolve(rho0, gens, cfg).to_csv(tmp_path / "b.csv")
    same = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    prob = OptimizationProblem.from_fmo(f, sites=(1, 2), restarts=2, budget=20)
    r1, r2 = optimize_local(prob), optimize_local(prob)
    checks["determinism"] = (same and r1.best_objective == r2.best_objective
                             and np.array_equal(r1.best_parameters, r2.best_parameters))
    ok = all(checks.values())
    record("C8 property suite", ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}"
                                              for k, v in checks.items()))
    assert ok, checks
