"""Fixed-step RK4 integration of the master equation and trajectory bookkeeping."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    BasisError,
    DimensionMismatch,
    NumericalInstability,
    StepTooLarge,
    ValidationError,
)
from .model import BasisTransform
from .noise import GeneratorSet

log = logging.getLogger(__name__)

HERMITIAN_TOL = 1e-9
TRACE_TOL = 1e-8
POSITIVITY_FLOOR = -1e-7
#: largest state dimension integrated through a dense RK4 propagator matrix
DENSE_PROPAGATOR_MAX_DIM = 32


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    data: np.ndarray
    n_el: int
    n_modes: int = 0

    def __post_init__(self):
        d = np.array(self.data, dtype=complex)
        if d.shape != (self.dim, self.dim):
            raise DimensionMismatch(f"density matrix shape {d.shape} != ({self.dim}, {self.dim})")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def dim(self) -> int:
        return self.n_el * 2 ** self.n_modes

    @property
    def n_sites(self) -> int:
        return self.n_el - 2

    @classmethod
    def site(cls, n_sites: int, site: int, n_modes: int = 0) -> "DensityMatrix":
        """Excitation localized on ``site`` (1-based), modes in their ground state."""
        if not 1 <= site <= n_sites:
            raise ValidationError(f"site {site} outside 1..{n_sites}")
        psi = np.zeros(n_sites)
        psi[site - 1] = 1.0
        return cls.from_vector(psi, n_modes)

    @classmethod
    def from_vector(cls, psi, n_modes: int = 0) -> "DensityMatrix":
        """Pure state from amplitudes over the sites (or the full electronic space)."""
        psi = np.asarray(psi, dtype=complex).reshape(-1)
        nrm = np.linalg.norm(psi)
        if nrm == 0:
            raise ValidationError("zero state vector")
        psi = psi / nrm
        n_el = psi.size + 2
        el = np.zeros(n_el, dtype=complex)
        el[1:-1] = psi
        modes = np.zeros(2 ** n_modes)
        modes[0] = 1.0
        full = np.kron(el, modes)
        return cls(np.outer(full, full.conj()), n_el, n_modes)

    def validate(self) -> None:
        d = self.data
        herm = np.max(np.abs(d - d.conj().T))
        if herm > 1e-10:
            raise ValidationError(f"state not Hermitian (deviation {herm:.3g})")
        tr = np.trace(d).real
        if abs(tr - 1) > 1e-9:
            raise ValidationError(f"state trace {tr!r} != 1")
        lo = np.linalg.eigvalsh(0.5 * (d + d.conj().T)).min()
        if lo < POSITIVITY_FLOOR:
            raise ValidationError(f"state not positive (min eigenvalue {lo:.3g})")

    def electronic_blocks(self) -> np.ndarray:
        m = 2 ** self.n_modes
        return self.data.reshape(self.n_el, m, self.n_el, m)


def reduced_electronic_state(rho: DensityMatrix) -> DensityMatrix:
    """Partial trace over every mode factor."""
    if rho.n_modes == 0:
        raise BasisError("state carries no mode factors")
    red = np.einsum("ambm->ab", rho.electronic_blocks())
    return DensityMatrix(red, rho.n_el, 0)


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    t_final: float
    record_stride: int = 1
    tolerance: float = 1e-6
    positivity_check_stride: int = 100
    check_convergence: bool = True
    #: "rk4" (classical), "interaction" (RK4 in the interaction picture of the
    #: free Hamiltonian) or "auto" (interaction picture for mode-extended runs)
    scheme: str = "auto"

    def __post_init__(self):
        if self.scheme not in ("auto", "rk4", "interaction"):
            raise ValidationError(f"unknown scheme {self.scheme!r}")
        if not self.dt > 0 or not self.t_final > 0:
            raise ValidationError("dt and t_final must be positive")
        if self.record_stride < 1 or self.positivity_check_stride < 1:
            raise ValidationError("strides must be >= 1")

    @property
    def n_steps(self) -> int:
        n = int(round(self.t_final / self.dt))
        if n < 1 or abs(n * self.dt - self.t_final) > 1e-9 * max(1.0, self.t_final):
            raise ValidationError(f"t_final={self.t_final} is not a multiple of dt={self.dt}")
        return n

    def halved(self) -> "IntegratorConfig":
        return IntegratorConfig(self.dt / 2, self.t_final, self.record_stride * 2,
                                self.tolerance, self.positivity_check_stride * 2, False,
                                self.scheme)


@dataclass(eq=False)
class Trajectory:
    times: np.ndarray
    populations: np.ndarray  # (T, n_el): ground, sites 1..N, sink
    sink_integral: np.ndarray
    coherences: dict = field(default_factory=dict)
    hybrid_populations: Optional[np.ndarray] = None
    hybrid_labels: Optional[tuple] = None
    hybrid_pair: Optional[tuple] = None
    mode_populations: Optional[np.ndarray] = None
    dt: float = 0.0
    convergence_delta: Optional[float] = None
    min_eigenvalue: float = 0.0

    @property
    def n_sites(self) -> int:
        return self.populations.shape[1] - 2

    @property
    def site_populations(self) -> np.ndarray:
        return self.populations[:, 1:-1]

    @property
    def ground_population(self) -> np.ndarray:
        return self.populations[:, 0]

    @property
    def sink_population(self) -> np.ndarray:
        return self.populations[:, -1]

    @property
    def p_sink_final(self) -> float:
        return float(self.sink_population[-1])

    @property
    def mode_excitation_max(self) -> Optional[np.ndarray]:
        if self.mode_populations is None:
            return None
        return self.mode_populations.max(axis=0)

    def sink_at(self, t: float) -> float:
        if not self.times[0] - 1e-12 <= t <= self.times[-1] + 1e-12:
            raise ValueError(f"t={t} outside trajectory range")
        return float(np.interp(t, self.times, self.sink_population))

    def coherence(self, i: int = 1, j: int = 2) -> np.ndarray:
        return self.coherences[(i, j)]

    # export --------------------------------------------------------------
    def columns(self) -> dict:
        cols = {"t": self.times}
        for k in range(self.populations.shape[1] - 1):
            cols[f"p{k}"] = self.populations[:, k]
        cols["p_sink"] = self.sink_population
        cols["p_sink_integral"] = self.sink_integral
        c = self.coherences.get((1, 2))
        if c is None:
            c = np.zeros(len(self.times), dtype=complex)
        cols["re_c12"] = c.real
        cols["im_c12"] = c.imag
        if self.hybrid_populations is not None and self.hybrid_pair is not None:
            i, j = self.hybrid_pair
            cols["p_plus"] = self.hybrid_populations[:, i - 1]
            cols["p_minus"] = self.hybrid_populations[:, j - 1]
        return cols

    def to_csv(self, path) -> None:
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(cols))
            for row in zip(*cols.values()):
                w.writerow([f"{float(x):.12g}" for x in row])

    def to_json(self, path) -> None:
        doc = {k: [float(f"{float(x):.12g}") for x in v] for k, v in self.columns().items()}
        doc["dt"] = self.dt
        doc["convergence_delta"] = self.convergence_delta
        if self.mode_populations is not None:
            doc["mode_excitation_max"] = [float(f"{x:.12g}") for x in self.mode_excitation_max]
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")


def sink_population_dual(traj: Trajectory):
    """Direct sink-state readout next to the time-integrated inflow."""
    return traj.sink_population.copy(), traj.sink_integral.copy()


def rhs(rho, generators: GeneratorSet) -> np.ndarray:
    data = rho.data if isinstance(rho, DensityMatrix) else rho
    return generators.apply(data)


# -- integrator back-ends ----------------------------------------------------

def _rk4_polynomial(a: np.ndarray) -> np.ndarray:
    """I + A + A^2/2 + A^3/6 + A^4/24: one classical RK4 step of a linear ODE."""
    eye = np.eye(a.shape[0], dtype=a.dtype)
    a2 = a @ a
    return eye + a + a2 / 2 + (a2 @ a) / 6 + (a2 @ a2) / 24


class _DenseBackend:
    """Small systems: RK4 step applied as an explicit propagator matrix."""

    def __init__(self, gens: GeneratorSet, rho0: np.ndarray, dt: float):
        self.gens = gens
        self.d = gens.dim
        self.sup = gens.superoperator()
        self.step_matrix = _rk4_polynomial(dt * self.sup)
        self.v = np.array(rho0, dtype=complex).reshape(-1)

    def step(self):
        self.v = self.step_matrix @ self.v

    def advance(self, n: int):
        self.v = np.linalg.matrix_power(self.step_matrix, n) @ self.v

    def dense(self) -> np.ndarray:
        return self.v.reshape(self.d, self.d)

    def derivative(self) -> np.ndarray:
        return (self.sup @ self.v).reshape(self.d, self.d)


class _SparseBackend:
    """Generic fallback: RK4 on the dense state using the sparse reference RHS."""

    def __init__(self, gens: GeneratorSet, rho0: np.ndarray, dt: float):
        self.gens = gens
        self.dt = dt
        self.rho = np.array(rho0, dtype=complex)

    def step(self):
        f, h, r = self.gens.apply, self.dt, self.rho
        k1 = f(r)
        k2 = f(r + h / 2 * k1)
        k3 = f(r + h / 2 * k2)
        k4 = f(r + h * k3)
        self.rho = r + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    def dense(self):
        return self.rho

    def derivative(self):
        return self.gens.apply(self.rho)


class _SectorBackend:
    """Structured RK4 for mode-extended generators.

    The state is kept as a list of diagonal blocks, one per electronic
    sector (sets of electronic states linked by the Hamiltonian), each of
    shape ``(s, s, M, M)``.  Blocks between different sectors start at
    zero and no term of the generator can fill them.
    """

    def __init__(self, gens: GeneratorSet, rho0: np.ndarray, dt: float, structure,
                 interaction_picture: bool = False):
        self.gens = gens
        self.dt = dt
        self.interaction_picture = interaction_picture
        n_el, nm = gens.n_el, gens.n_modes
        self.n_el, self.nm, self.M = n_el, nm, gens.mode_dim
        mult, transfers = structure
        r4 = np.asarray(rho0, dtype=complex).reshape(n_el, self.M, n_el, self.M)
        self.sectors = self._find_sectors(gens.hamiltonian, r4)
        self.where = {}
        for s, idx in enumerate(self.sectors):
            for loc, e in enumerate(idx):
                self.where[e] = (s, loc)
        self.blocks = [np.ascontiguousarray(r4[np.ix_(idx, range(self.M), idx, range(self.M))]
                                            .transpose(0, 2, 1, 3)) for idx in self.sectors]
        mb = gens.modes
        bits = (np.arange(self.M)[:, None] >> (nm - 1 - np.arange(nm))[None, :]) & 1
        self.bits = bits  # (M, nm), column q is mode q
        eps = mb.frequency * bits.sum(axis=1) if mb else np.zeros(self.M)
        damp = (mb.damping * bits.sum(axis=1)) if mb else np.zeros(self.M)
        free = -1j * (eps[:, None] - eps[None, :])
        mode_diag = -(damp[:, None] + damp[None, :])
        if not interaction_picture:
            mode_diag = mode_diag + free
        self.left = []
        self.diag = []
        self.half_unitary = []
        for idx in self.sectors:
            a = gens.hamiltonian[np.ix_(idx, idx)]
            self.left.append(np.ascontiguousarray(-1j * a))
            m = mult[np.ix_(idx, idx)]
            self.diag.append(mode_diag[None, None, :, :] - m[:, :, None, None])
            w, v = np.linalg.eigh(a)
            self.half_unitary.append((v * np.exp(-0.5j * dt * w)) @ v.conj().T)
        self.half_phase = np.exp(0.5 * dt * free)
        self.couplings = []
        if mb is not None:
            for q, e in enumerate(mb.attachments):
                if e in self.where:
                    s, loc = self.where[e]
                    self.couplings.append((s, loc, q, -1j * mb.coupling))
        self.damping = mb.damping if mb is not None else 0.0
        self.transfers = [(2 * r, self.where[to], self.where[frm]) for r, to, frm in transfers
                          if to in self.where and frm in self.where]

    @staticmethod
    def _find_sectors(h, r4):
        n = h.shape[0]
        parent = list(range(n))

        def root(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i, j in zip(*np.nonzero(h)):
            parent[root(i)] = root(j)
        groups: dict = {}
        for i in range(n):
            groups.setdefault(root(i), []).append(i)
        sectors = sorted(groups.values())
        label = np.empty(n, dtype=int)
        for s, idx in enumerate(sectors):
            label[idx] = s
        weight = np.abs(r4).sum(axis=(1, 3))
        cross = weight[label[:, None] != label[None, :]]
        if cross.size and cross.max() > 0:
            return [list(range(n))]
        return sectors

    def _mode_view(self, a: np.ndarray, lead: int) -> np.ndarray:
        return a.reshape(a.shape[:lead] + (2,) * self.nm + (2,) * self.nm)

    def rhs(self, blocks):
        out = []
        nm = self.nm
        for s, r in enumerate(blocks):
            sz = r.shape[0]
            if self.interaction_picture:
                o = self.diag[s] * r
            else:
                am = self.left[s]
                o = (am @ r.reshape(sz, -1)).reshape(r.shape)
                o -= np.matmul(am.T, r.reshape(sz, sz, -1)).reshape(r.shape)
                o += self.diag[s] * r
            out.append(o)
        for s, loc, q, c in self.couplings:
            r, o = blocks[s], out[s]
            rv = self._mode_view(r, 2)
            ov = self._mode_view(o, 2)
            # left action on mode index m of row ``loc``
            ov[loc] += c * np.flip(rv[loc], axis=1 + q)
            # right action on mode index n of column ``loc``
            ov[:, loc] -= c * np.flip(rv[:, loc], axis=1 + nm + q)
        if self.damping > 0:
            g2 = 2 * self.damping
            for s, r in enumerate(blocks):
                rv = self._mode_view(r, 2)
                ov = self._mode_view(out[s], 2)
                for q in range(nm):
                    lo = [slice(None)] * (2 + 2 * nm)
                    hi = [slice(None)] * (2 + 2 * nm)
                    lo[2 + q] = lo[2 + nm + q] = 0
                    hi[2 + q] = hi[2 + nm + q] = 1
                    ov[tuple(lo)] += g2 * rv[tuple(hi)]
        for rate, (st, lt), (sf, lf) in self.transfers:
            out[st][lt, lt] += rate * blocks[sf][lf, lf]
        return out

    def free_half_step(self, blocks):
        """Exact evolution over dt/2 under the electronic and mode Hamiltonians."""
        out = []
        for u, r in zip(self.half_unitary, blocks):
            sz = r.shape[0]
            x = (u @ r.reshape(sz, -1)).reshape(r.shape)
            x = np.matmul(u.conj(), x.reshape(sz, sz, -1)).reshape(r.shape)
            x *= self.half_phase
            out.append(x)
        return out

    def _lawson_step(self):
        # integrating-factor RK4: the free part is propagated exactly and the
        # remaining (slow) terms see an ordinary RK4 tableau
        h = self.dt
        e = self.free_half_step
        u = self.blocks
        k1 = self.rhs(u)
        k2 = self.rhs(e([x + (h / 2) * k for x, k in zip(u, k1)]))
        uh = e(u)
        k3 = self.rhs([x + (h / 2) * k for x, k in zip(uh, k2)])
        k4 = self.rhs(e([x + h * k for x, k in zip(uh, k3)]))
        inner = e([x + (h / 6) * k for x, k in zip(u, k1)])
        inner = [a + (h / 3) * (b + c) for a, b, c in zip(inner, k2, k3)]
        self.blocks = [a + (h / 6) * k for a, k in zip(e(inner), k4)]

    def step(self):
        if self.interaction_picture:
            return self._lawson_step()
        h = self.dt
        r = self.blocks
        k1 = self.rhs(r)
        k2 = self.rhs([x + (h / 2) * k for x, k in zip(r, k1)])
        acc = [a + 2 * b for a, b in zip(k1, k2)]
        del k1
        k3 = self.rhs([x + (h / 2) * k for x, k in zip(r, k2)])
        del k2
        for a, k in zip(acc, k3):
            a += 2 * k
        k4 = self.rhs([x + h * k for x, k in zip(r, k3)])
        del k3
        for x, a, k in zip(r, acc, k4):
            a += k
            x += (h / 6) * a

    def electronic(self) -> np.ndarray:
        red = np.zeros((self.n_el, self.n_el), dtype=complex)
        for idx, r in zip(self.sectors, self.blocks):
            red[np.ix_(idx, idx)] = np.einsum("abmm->ab", r)
        return red

    def mode_populations(self) -> np.ndarray:
        diag = np.zeros(self.M)
        for r in self.blocks:
            diag += np.einsum("aamm->m", r).real
        return diag @ self.bits

    def sink_rate_of_change(self, k: int) -> float:
        # the free part leaves populations unchanged, so either form of the
        # right-hand side gives the same diagonal derivative
        s, loc = self.where[k]
        d = self.rhs(self.blocks)[s]
        return float(np.trace(d[loc, loc]).real)

    def checks(self):
        herm = 0.0
        for r in self.blocks:
            herm = max(herm, np.max(np.abs(r - r.transpose(1, 0, 3, 2).conj())))
        return herm

    def min_eigenvalue(self) -> float:
        lo = np.inf
        for r in self.blocks:
            sz = r.shape[0] * self.M
            m = r.transpose(0, 2, 1, 3).reshape(sz, sz)
            lo = min(lo, np.linalg.eigvalsh(0.5 * (m + m.conj().T)).min())
        return float(lo)

    def dense(self) -> np.ndarray:
        full = np.zeros((self.n_el, self.M, self.n_el, self.M), dtype=complex)
        for idx, r in zip(self.sectors, self.blocks):
            full[np.ix_(idx, range(self.M), idx, range(self.M))] = r.transpose(0, 2, 1, 3)
        d = self.n_el * self.M
        return full.reshape(d, d)


def _backend(gens: GeneratorSet, rho0: np.ndarray, dt: float, scheme: str = "auto"):
    structure = gens.structure()
    if scheme == "interaction":
        if structure is None:
            raise ValidationError("interaction-picture stepping needs a structured generator")
        return _SectorBackend(gens, rho0, dt, structure, interaction_picture=True)
    if gens.dim <= DENSE_PROPAGATOR_MAX_DIM:
        return _DenseBackend(gens, rho0, dt)
    if gens.modes is not None and structure is not None:
        return _SectorBackend(gens, rho0, dt, structure,
                              interaction_picture=(scheme == "auto"))
    return _SparseBackend(gens, rho0, dt)


# generic accessors working on every back-end
def _electronic(b) -> np.ndarray:
    if isinstance(b, _SectorBackend):
        return b.electronic()
    d = b.dense()
    n_el, m = b.gens.n_el, b.gens.mode_dim
    return np.einsum("ambm->ab", d.reshape(n_el, m, n_el, m))


def _mode_pops(b) -> np.ndarray:
    if isinstance(b, _SectorBackend):
        return b.mode_populations()
    g = b.gens
    d = np.real(np.diag(b.dense())).reshape(g.n_el, g.mode_dim).sum(axis=0)
    bits = (np.arange(g.mode_dim)[:, None] >> (g.n_modes - 1 - np.arange(g.n_modes))[None, :]) & 1
    return d @ bits


def _sink_site_rate(b, k: int) -> float:
    """d/dt of the total population on electronic index ``k``."""
    if isinstance(b, _SectorBackend):
        return b.sink_rate_of_change(k)
    g = b.gens
    d = b.derivative().reshape(g.n_el, g.mode_dim, g.n_el, g.mode_dim)
    return float(np.trace(d[k, :, k, :]).real)


def _hermiticity(b) -> float:
    if isinstance(b, _SectorBackend):
        return b.checks()
    d = b.dense()
    return float(np.max(np.abs(d - d.conj().T)))


def _min_eig(b) -> float:
    if isinstance(b, _SectorBackend):
        return b.min_eigenvalue()
    d = b.dense()
    return float(np.linalg.eigvalsh(0.5 * (d + d.conj().T)).min())


def _as_matrix(rho0, gens: GeneratorSet) -> np.ndarray:
    if isinstance(rho0, DensityMatrix):
        if rho0.dim != gens.dim:
            raise DimensionMismatch(f"state dim {rho0.dim} != generator dim {gens.dim}")
        return rho0.data
    data = np.asarray(rho0, dtype=complex)
    if data.shape != (gens.dim, gens.dim):
        raise DimensionMismatch(f"state shape {data.shape} != generator dim {gens.dim}")
    DensityMatrix(data, gens.n_el, gens.n_modes).validate()
    return data


def _integrate(gens, rho0, cfg: IntegratorConfig, *, record: bool, transform=None,
               coherence_pairs=((1, 2),), record_modes=True):
    n = cfg.n_steps
    b = _backend(gens, rho0, cfg.dt, cfg.scheme)
    k = gens.sink_site
    two_gamma = 2 * gens.sink_rate if k is not None else 0.0
    h = cfg.dt
    times, pops, integ, cohs, hyb, modes = [], [], [], {p: [] for p in coherence_pairs}, [], []
    u = transform.unitary if transform is not None else None
    ns = gens.n_sites

    def kk_pop(red):
        return red[k, k].real if k is not None else 0.0

    red = _electronic(b)
    prev = kk_pop(red)
    trap = 0.0
    d0 = _sink_site_rate(b, k) if (k is not None and record) else 0.0
    min_eig = _min_eig(b)

    def sample(step, red):
        t = step * h
        times.append(t)
        pops.append(np.real(np.diag(red)).copy())
        corr = (h * h / 12) * (d0 - _sink_site_rate(b, k)) if k is not None else 0.0
        integ.append(two_gamma * (trap + corr))
        for (i, j) in coherence_pairs:
            cohs[(i, j)].append(red[i, j])
        if u is not None:
            sites = red[1:ns + 1, 1:ns + 1]
            hyb.append(np.real(np.diag(u @ sites @ u.conj().T)))
        if record_modes and gens.n_modes:
            modes.append(_mode_pops(b))
        tr = np.trace(red).real
        if abs(tr - 1) > TRACE_TOL:
            raise NumericalInstability(f"trace drifted to {tr!r} at t={t}; reduce dt")
        herm = _hermiticity(b)
        if herm > HERMITIAN_TOL:
            raise NumericalInstability(f"Hermiticity lost ({herm:.3g}) at t={t}; reduce dt")

    if record:
        sample(0, red)
    if not record and isinstance(b, _DenseBackend):
        b.advance(n)
        red = _electronic(b)
    else:
        for step in range(1, n + 1):
            b.step()
            if k is not None or record:
                red = _electronic(b)
                cur = kk_pop(red)
                trap += 0.5 * h * (prev + cur)
                prev = cur
            if step % cfg.positivity_check_stride == 0 or step == n:
                lo = _min_eig(b)
                min_eig = min(min_eig, lo)
                if lo < POSITIVITY_FLOOR:
                    raise NumericalInstability(
                        f"negative eigenvalue {lo:.3g} at t={step * h}; reduce dt")
            if record and (step % cfg.record_stride == 0 or step == n):
                sample(step, red)
        if not record:
            red = _electronic(b)
    if not np.all(np.isfinite(red)):
        raise NumericalInstability(f"state diverged with dt={h}; reduce dt")
    final = float(red[-1, -1].real) if k is not None else 0.0
    if not record:
        return final, b
    traj = Trajectory(
        times=np.array(times),
        populations=np.array(pops),
        sink_integral=np.array(integ),
        coherences={p: np.array(v) for p, v in cohs.items()},
        hybrid_populations=np.array(hyb) if u is not None else None,
        hybrid_labels=transform.labels if transform is not None else None,
        mode_populations=np.array(modes) if modes else None,
        dt=h,
        min_eigenvalue=min_eig,
    )
    return final, traj


def evolve(rho0, generators: GeneratorSet, config: IntegratorConfig, *,
           transform: Optional[BasisTransform] = None, hybrid_pair=None,
           coherence_pairs=((1, 2),), record_modes: bool = True) -> Trajectory:
    """Integrate from ``rho0`` to ``config.t_final`` and record observables.

    With ``config.check_convergence`` the run is repeated at ``dt/2`` and
    rejected (:class:`StepTooLarge`) if the final sink population moves by
    ``config.tolerance`` or more.
    """
    data = _as_matrix(rho0, generators)
    final, traj = _integrate(generators, data, config, record=True, transform=transform,
                             coherence_pairs=coherence_pairs, record_modes=record_modes)
    if hybrid_pair is not None:
        traj.hybrid_pair = tuple(hybrid_pair)
    if config.check_convergence:
        fine, _ = _integrate(generators, data, config.halved(), record=False)
        delta = abs(fine - final)
        traj.convergence_delta = delta
        if delta >= config.tolerance:
            raise StepTooLarge(
                f"halving dt={config.dt} moved p_sink({config.t_final}) by {delta:.3g} "
                f">= {config.tolerance}; use a smaller dt")
    return traj


def stable_step(generators: GeneratorSet, dt: float, t_final: float, bound: float = 1.0) -> float:
    """Largest dt / 2**m with dt * (spectral radius of the generator) <= bound.

    Only available for generators small enough for a dense superoperator;
    larger ones return ``dt`` unchanged.
    """
    if generators.dim > DENSE_PROPAGATOR_MAX_DIM:
        return dt
    radius = np.max(np.abs(np.linalg.eigvals(generators.superoperator())))
    while dt * radius > bound:
        dt /= 2
    IntegratorConfig(dt, t_final).n_steps  # still divides t_final
    return dt


def final_sink_population(rho0, generators: GeneratorSet, config: IntegratorConfig) -> float:
    """p_sink(t_final) only, without recording (same RK4 scheme and guard)."""
    data = _as_matrix(rho0, generators)
    coarse, _ = _integrate(generators, data, config, record=False)
    if config.check_convergence:
        fine, _ = _integrate(generators, data, config.halved(), record=False)
        if abs(fine - coarse) >= config.tolerance:
            raise StepTooLarge(f"halving dt moved p_sink by {abs(fine - coarse):.3g}")
    return coarse


def final_state(rho0, generators: GeneratorSet, config: IntegratorConfig) -> DensityMatrix:
    data = _as_matrix(rho0, generators)
    _, b = _integrate(generators, data, config, record=False)
    return DensityMatrix(b.dense(), generators.n_el, generators.n_modes)


def coherence_lifetime(traj: Trajectory, pair=(1, 2), threshold: float = 0.01) -> float:
    """Earliest recorded time after which |rho_ij| stays below ``threshold``."""
    c = np.abs(traj.coherences[tuple(pair)])
    above = np.nonzero(c >= threshold)[0]
    if above.size == 0:
        return float(traj.times[0])
    last = above[-1]
    if last + 1 >= len(traj.times):
        return float("inf")
    return float(traj.times[last + 1])
