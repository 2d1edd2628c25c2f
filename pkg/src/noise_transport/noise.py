"""Dissipative generators: dephasing, radiative decay, sink trapping, local modes.

State layout.  The electronic space has dimension ``N + 2``: index 0 is
the zero-exciton (ground) state, indices ``1..N`` are the sites and
``N + 1`` is the sink.  With local modes attached the full space is
``electronic (x) mode_1 (x) ... (x) mode_m`` with two levels per mode,
electronic index major.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    BasisError,
    CapacityError,
    DimensionMismatch,
    ValidationError,
)
from .model import KAPPA, BasisTransform, NetworkHamiltonian, UnitSystem

PSD_FLOOR = -1e-10
DEFAULT_MAX_DIM = 4096


class DephasingMode(enum.Enum):
    LOCAL = "local"
    CORRELATED = "correlated"


@dataclass(frozen=True)
class DephasingSpec:
    mode: DephasingMode = DephasingMode.LOCAL
    local_rates: Optional[np.ndarray] = None
    correlated_matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        mode = DephasingMode(self.mode)
        object.__setattr__(self, "mode", mode)
        if mode is DephasingMode.LOCAL:
            if self.local_rates is None:
                raise ValidationError("local dephasing needs local_rates")
            r = np.array(self.local_rates, dtype=float).reshape(-1)
            if np.any(r < 0) or not np.all(np.isfinite(r)):
                raise ValidationError("dephasing rates must be finite and >= 0")
            r.setflags(write=False)
            object.__setattr__(self, "local_rates", r)
        else:
            if self.correlated_matrix is None:
                raise ValidationError("correlated dephasing needs correlated_matrix")
            g = check_psd(self.correlated_matrix)
            g.setflags(write=False)
            object.__setattr__(self, "correlated_matrix", g)

    @classmethod
    def local(cls, rates) -> "DephasingSpec":
        return cls(DephasingMode.LOCAL, local_rates=rates)

    @classmethod
    def correlated(cls, matrix) -> "DephasingSpec":
        return cls(DephasingMode.CORRELATED, correlated_matrix=matrix)

    @property
    def n_sites(self) -> int:
        if self.mode is DephasingMode.LOCAL:
            return self.local_rates.size
        return self.correlated_matrix.shape[0]

    def gamma_matrix(self) -> np.ndarray:
        if self.mode is DephasingMode.LOCAL:
            return np.diag(self.local_rates)
        return np.array(self.correlated_matrix)


@dataclass(frozen=True)
class DissipationSpec:
    """Radiative loss to the ground state plus the irreversible sink."""

    radiative_rates: np.ndarray
    sink_site: Optional[int] = None
    sink_rate: float = 0.0

    def __post_init__(self):
        r = np.array(self.radiative_rates, dtype=float).reshape(-1)
        if np.any(r < 0):
            raise ValidationError("radiative rates must be >= 0")
        r.setflags(write=False)
        object.__setattr__(self, "radiative_rates", r)
        if self.sink_site is not None:
            if not 1 <= self.sink_site <= r.size:
                raise ValidationError(f"sink site {self.sink_site} outside 1..{r.size}")
            if not self.sink_rate > 0:
                raise ValidationError("sink rate must be > 0")

    @property
    def n_sites(self) -> int:
        return self.radiative_rates.size


@dataclass(frozen=True)
class LocalModeSpec:
    """Two-level vibrational modes coupled to site populations.

    ``omega_h`` and ``damping`` are in cm^-1 for spectroscopic networks
    (plain numbers for dimensionless ones).  ``damping_convention``
    selects how the damping converts to a rate: ``"angular"`` multiplies
    by 2*pi*c, ``"ordinary"`` by c only.
    """

    omega_h: float = 180.0
    huang_rhys: float = 0.22
    damping: float = 0.0
    attached_sites: Optional[tuple] = None
    damping_convention: str = "angular"

    def __post_init__(self):
        if not self.omega_h > 0:
            raise ValidationError("mode frequency must be > 0")
        if self.huang_rhys < 0:
            raise ValidationError("Huang-Rhys factor must be >= 0")
        if self.damping < 0:
            raise ValidationError("mode damping must be >= 0")
        if self.damping_convention not in ("angular", "ordinary"):
            raise ValidationError("damping_convention must be 'angular' or 'ordinary'")
        if self.attached_sites is not None:
            sites = tuple(sorted({int(s) for s in self.attached_sites}))
            if not sites:
                raise ValidationError("attached_sites must be non-empty")
            object.__setattr__(self, "attached_sites", sites)

    @property
    def coupling(self) -> float:
        """g = sqrt(S_H) * omega_H, in the same units as ``omega_h``."""
        return float(np.sqrt(self.huang_rhys) * self.omega_h)

    def sites(self, n_sites: int) -> tuple:
        sites = self.attached_sites or tuple(range(1, n_sites + 1))
        if sites[0] < 1 or sites[-1] > n_sites:
            raise ValidationError(f"attached sites {sites} outside 1..{n_sites}")
        return sites


@dataclass(frozen=True)
class NoiseSpec:
    dissipation: DissipationSpec
    dephasing: Optional[DephasingSpec] = None
    modes: Optional[LocalModeSpec] = None

    def __post_init__(self):
        if self.dephasing is not None and self.dephasing.n_sites != self.dissipation.n_sites:
            raise DimensionMismatch("dephasing and dissipation disagree on n_sites")

    @property
    def n_sites(self) -> int:
        return self.dissipation.n_sites

    @classmethod
    def noiseless(cls, n_sites, sink_site=None, sink_rate=0.0, radiative=0.0) -> "NoiseSpec":
        return cls(DissipationSpec(np.full(n_sites, float(radiative)), sink_site, sink_rate))

    def with_dephasing(self, dephasing: Optional[DephasingSpec]) -> "NoiseSpec":
        return NoiseSpec(self.dissipation, dephasing, self.modes)

    def with_modes(self, modes: Optional[LocalModeSpec]) -> "NoiseSpec":
        return NoiseSpec(self.dissipation, self.dephasing, modes)

    # JSON block used by run configs
    @classmethod
    def from_dict(cls, doc: dict, n_sites: int, defaults: Optional[dict] = None) -> "NoiseSpec":
        doc = dict(doc or {})
        defaults = defaults or {}
        rad = doc.get("radiative", defaults.get("radiative", 0.0))
        rad = np.full(n_sites, float(rad)) if np.isscalar(rad) else np.asarray(rad, float)
        if rad.shape != (n_sites,):
            raise DimensionMismatch("radiative rates must have one entry per site")
        sink = doc.get("sink", defaults.get("sink"))
        if sink:
            diss = DissipationSpec(rad, int(sink["site"]), float(sink["rate"]))
        else:
            diss = DissipationSpec(rad)
        deph = None
        d = doc.get("dephasing")
        if d:
            mode = d.get("mode", "local")
            if mode == "local":
                rates = d.get("rates", 0.0)
                rates = np.full(n_sites, float(rates)) if np.isscalar(rates) else rates
                deph = DephasingSpec.local(rates)
            else:
                deph = DephasingSpec.correlated(d["matrix"])
        modes = None
        m = doc.get("modes")
        if m:
            modes = LocalModeSpec(
                omega_h=float(m.get("omega_h", 180.0)),
                huang_rhys=float(m.get("s_h", 0.22)),
                damping=float(m.get("damping", 0.0)),
                attached_sites=tuple(m["sites"]) if m.get("sites") else None,
                damping_convention=m.get("convention", "angular"),
            )
        return cls(diss, deph, modes)

    def to_dict(self) -> dict:
        diss = self.dissipation
        out: dict = {"radiative": [float(x) for x in diss.radiative_rates]}
        if diss.sink_site is not None:
            out["sink"] = {"site": diss.sink_site, "rate": diss.sink_rate}
        if self.dephasing is not None:
            if self.dephasing.mode is DephasingMode.LOCAL:
                out["dephasing"] = {"mode": "local",
                                    "rates": [float(x) for x in self.dephasing.local_rates]}
            else:
                out["dephasing"] = {"mode": "correlated",
                                    "matrix": self.dephasing.correlated_matrix.tolist()}
        if self.modes is not None:
            m = self.modes
            out["modes"] = {"omega_h": m.omega_h, "s_h": m.huang_rhys, "damping": m.damping,
                            "sites": list(m.attached_sites) if m.attached_sites else None,
                            "convention": m.damping_convention}
        return out


def check_psd(matrix) -> np.ndarray:
    g = np.array(matrix, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise DimensionMismatch("correlated dephasing matrix must be square")
    if np.max(np.abs(g - g.T)) > 1e-12:
        raise ValidationError("correlated dephasing matrix must be symmetric")
    g = 0.5 * (g + g.T)
    lo = np.linalg.eigvalsh(g).min()
    if lo < PSD_FLOOR:
        raise ValidationError(
            f"correlated dephasing matrix not PSD (min eigenvalue {lo:.3g}); "
            "the generator would not be completely positive")
    return g


# -- dissipator actions on electronic density matrices ----------------------

def _sites_of(rho, n_sites):
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape != (n_sites + 2, n_sites + 2):
        raise DimensionMismatch(f"expected a {(n_sites + 2,) * 2} density matrix, got {rho.shape}")
    return rho


def apply_local_dephasing(rho, spec) -> np.ndarray:
    """sum_j gamma_j (2 n_j rho n_j - {n_j, rho}) with n_j = |j><j|."""
    if isinstance(spec, DephasingSpec):
        if spec.mode is not DephasingMode.LOCAL:
            raise ValidationError("apply_local_dephasing needs a local spec")
        rates = spec.local_rates
    else:
        rates = np.asarray(spec, dtype=float)
    rho = _sites_of(rho, rates.size)
    out = np.zeros_like(rho, dtype=complex)
    for j, g in enumerate(rates, start=1):
        if g == 0:
            continue
        out[j, :] -= g * rho[j, :]
        out[:, j] -= g * rho[:, j]
        out[j, j] += 2 * g * rho[j, j]
    return out


def dephasing_multiplier(gamma: np.ndarray, n_el: Optional[int] = None) -> np.ndarray:
    """Elementwise decay factors of ``sum_mn gamma_mn [A_m, [A_n, .]]``.

    For projectors ``A_m = |m><m|`` the double commutator acting on
    ``|a><b|`` gives ``(d^T gamma d) |a><b|`` with ``d = e_a - e_b``.
    """
    n = gamma.shape[0]
    n_el = n + 2 if n_el is None else n_el
    g = np.zeros((n_el, n_el))
    g[1:n + 1, 1:n + 1] = gamma
    d = np.diag(g)
    return d[:, None] + d[None, :] - 2 * g


def apply_correlated_dephasing(rho, gamma_matrix) -> np.ndarray:
    """-sum_mn gamma_mn [A_m, [A_n, rho]] for site projectors A_m."""
    g = check_psd(gamma_matrix)
    rho = _sites_of(rho, g.shape[0])
    return -dephasing_multiplier(g) * rho


def apply_radiative(rho, spec) -> np.ndarray:
    """sum_j Gamma_j (2 sigma_j^- rho sigma_j^+ - {n_j, rho})."""
    rates = spec.radiative_rates if isinstance(spec, DissipationSpec) else np.asarray(spec, float)
    rho = _sites_of(rho, rates.size)
    out = np.zeros_like(rho, dtype=complex)
    for j, g in enumerate(rates, start=1):
        if g == 0:
            continue
        out[j, :] -= g * rho[j, :]
        out[:, j] -= g * rho[:, j]
        out[0, 0] += 2 * g * rho[j, j]
    return out


def apply_sink(rho, spec: DissipationSpec) -> np.ndarray:
    """Irreversible transfer from the sink-coupled site k into index N+1."""
    n = spec.n_sites
    rho = _sites_of(rho, n)
    out = np.zeros_like(rho, dtype=complex)
    if spec.sink_site is None:
        return out
    k, s, g = spec.sink_site, n + 1, spec.sink_rate
    out[k, :] -= g * rho[k, :]
    out[:, k] -= g * rho[:, k]
    out[s, s] += 2 * g * rho[k, k]
    return out


# -- generator sets ----------------------------------------------------------

@dataclass(frozen=True)
class ModeBath:
    """Two-level local modes; all quantities in angular units (rad per time)."""

    frequency: float
    coupling: float
    damping: float
    attachments: tuple  # electronic index each mode couples to

    @property
    def n_modes(self) -> int:
        return len(self.attachments)


def _unit(n, i, j):
    m = np.zeros((n, n))
    m[i, j] = 1.0
    return m


@dataclass(frozen=True, eq=False)
class GeneratorSet:
    """Hamiltonian plus Lindblad terms ``rate * (2 L rho L^+ - {L^+ L, rho})``.

    ``hamiltonian`` and every jump operator act on the electronic space
    only; modes, when present, are described by ``modes`` and lifted on
    demand.  Dephasing channels enter as Hermitian jump operators (their
    double-commutator form coincides with the Lindblad form).
    """

    hamiltonian: np.ndarray
    jumps: tuple = ()
    modes: Optional[ModeBath] = None
    n_sites: int = 0
    sink_index: Optional[int] = None
    sink_site: Optional[int] = None
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        h = np.array(self.hamiltonian, dtype=complex)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise DimensionMismatch("Hamiltonian must be square")
        h.setflags(write=False)
        object.__setattr__(self, "hamiltonian", h)
        jumps = []
        for rate, op in self.jumps:
            op = np.array(op, dtype=complex)
            if op.shape != h.shape:
                raise DimensionMismatch("jump operator shape differs from Hamiltonian")
            op.setflags(write=False)
            jumps.append((float(rate), op))
        object.__setattr__(self, "jumps", tuple(jumps))

    @property
    def n_el(self) -> int:
        return self.hamiltonian.shape[0]

    @property
    def n_modes(self) -> int:
        return 0 if self.modes is None else self.modes.n_modes

    @property
    def mode_dim(self) -> int:
        return 2 ** self.n_modes

    @property
    def dim(self) -> int:
        return self.n_el * self.mode_dim

    # full-space operators (reference path) --------------------------------
    @functools.cached_property
    def _full(self):
        md = self.mode_dim
        eye_m = sp.identity(md, format="csr")
        h = sp.kron(sp.csr_matrix(self.hamiltonian), eye_m, format="csr")
        lindblad = [(r, sp.kron(sp.csr_matrix(op), eye_m, format="csr"))
                    for r, op in self.jumps if r != 0]
        if self.modes is not None:
            mb = self.modes
            lower = sp.csr_matrix(np.array([[0.0, 1.0], [0.0, 0.0]]))
            number = sp.csr_matrix(np.array([[0.0, 0.0], [0.0, 1.0]]))
            sx = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
            eye_el = sp.identity(self.n_el, format="csr")
            for q, e in enumerate(mb.attachments):
                left = sp.identity(2 ** q, format="csr")
                right = sp.identity(2 ** (mb.n_modes - 1 - q), format="csr")

                def on_mode(op):
                    return sp.kron(sp.kron(left, op), right, format="csr")

                h = h + mb.frequency * sp.kron(eye_el, on_mode(number), format="csr")
                proj = sp.csr_matrix(_unit(self.n_el, e, e))
                h = h + mb.coupling * sp.kron(proj, on_mode(sx), format="csr")
                if mb.damping > 0:
                    lindblad.append((mb.damping, sp.kron(eye_el, on_mode(lower), format="csr")))
        h = h.tocsr()
        terms = []
        for r, op in lindblad:
            op = op.tocsr()
            terms.append((r, op, (op.conj().T @ op).tocsr(), op.conj().T.tocsr()))
        return h, terms

    @property
    def sink_rate(self) -> float:
        """Rate of the jump feeding the sink (0 if there is no sink)."""
        if self.sink_index is None:
            return 0.0
        for r, op in self.jumps:
            nz = np.argwhere(op != 0)
            if len(nz) == 1 and tuple(nz[0]) == (self.sink_index, self.sink_site):
                return r * abs(op[self.sink_index, self.sink_site]) ** 2
        return 0.0

    def full_hamiltonian(self) -> np.ndarray:
        return self._full[0].toarray()

    def apply(self, rho) -> np.ndarray:
        """Right-hand side of the master equation for a dense ``rho``."""
        rho = np.asarray(rho)
        if rho.shape != (self.dim, self.dim):
            raise DimensionMismatch(f"state shape {rho.shape} != ({self.dim}, {self.dim})")
        h, terms = self._full
        hr = h @ rho
        rh = (h.conj().T @ rho.conj().T).conj().T
        out = -1j * (hr - rh)
        for r, op, opdop, opd in terms:
            lr = op @ rho
            out += r * (2 * (opd.T @ lr.T).T - opdop @ rho - (opdop.T @ rho.T).T)
        return out

    def superoperator(self) -> np.ndarray:
        """Dense Liouvillian acting on row-major ``vec(rho)``."""
        d = self.dim
        if d > 64:
            raise CapacityError(f"dense superoperator for dim {d} is too large")
        h, terms = self._full
        h = h.toarray()
        eye = np.eye(d)
        sup = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
        for r, op, opdop, _ in terms:
            op, opdop = op.toarray(), opdop.toarray()
            sup += r * (2 * np.kron(op, op.conj())
                        - np.kron(opdop, eye) - np.kron(eye, opdop.T))
        return sup

    def transformed(self, u: BasisTransform) -> "GeneratorSet":
        """Same generator expressed in a rotated site basis."""
        if self.modes is not None:
            raise BasisError("basis rotation of mode-extended generators is not supported")
        if u.dim != self.n_sites:
            raise DimensionMismatch("transform must act on the site block")
        full = np.eye(self.n_el, dtype=complex)
        full[1:self.n_sites + 1, 1:self.n_sites + 1] = u.unitary
        rot = lambda a: full @ a @ full.conj().T  # noqa: E731
        return GeneratorSet(rot(self.hamiltonian), tuple((r, rot(op)) for r, op in self.jumps),
                            None, self.n_sites, self.sink_index, self.sink_site,
                            dict(self.labels, basis=u.description))

    # structured view used by the sector integrator -------------------------
    def structure(self):
        """Decompose jumps into elementwise decay and single-entry transfers.

        Returns ``(multiplier, transfers)`` where the dissipator acting on
        the electronic indices is ``-multiplier * rho`` plus, for each
        ``(rate, to, frm)`` transfer, ``2 rate rho[frm, frm]`` added to
        ``[to, to]``.  Returns None if some jump has neither form.
        """
        n = self.n_el
        mult = np.zeros((n, n))
        transfers = []
        for r, op in self.jumps:
            if r == 0:
                continue
            nz = np.argwhere(op != 0)
            if np.all(nz[:, 0] == nz[:, 1]) and np.allclose(op.imag, 0):
                l = np.diag(op).real
                mult += r * (l[:, None] - l[None, :]) ** 2
            elif len(nz) == 1:
                to, frm = nz[0]
                c = abs(op[to, frm]) ** 2
                mult[frm, :] += r * c
                mult[:, frm] += r * c
                transfers.append((r * c, int(to), int(frm)))
            else:
                return None
        return mult, transfers


def _site_hamiltonian(h, units=None) -> tuple:
    if isinstance(h, NetworkHamiltonian):
        return h.angular_matrix(), h.n_sites, h.units
    m = np.asarray(h)
    units = UnitSystem.parse(units or UnitSystem.DIMENSIONLESS)
    return m * units.kappa, m.shape[0], units


def build_generators(h, noise: NoiseSpec, units=None, max_dim: int = DEFAULT_MAX_DIM) -> GeneratorSet:
    """Assemble the full generator for a network and its noise description.

    ``h`` is a :class:`NetworkHamiltonian` or a raw (possibly rotated)
    site-block matrix in the units named by ``units``.  Rates in ``noise``
    are taken as already expressed per unit time.
    """
    hm, n, units = _site_hamiltonian(h, units)
    if noise.n_sites != n:
        raise DimensionMismatch(f"noise spec for {noise.n_sites} sites, network has {n}")
    n_el = n + 2
    ham = np.zeros((n_el, n_el), dtype=complex)
    ham[1:n + 1, 1:n + 1] = hm
    jumps = []
    if noise.dephasing is not None:
        jumps.extend(_dephasing_jumps(noise.dephasing, n_el))
    diss = noise.dissipation
    for j, g in enumerate(diss.radiative_rates, start=1):
        if g > 0:
            jumps.append((g, _unit(n_el, 0, j)))
    sink_index = None
    if diss.sink_site is not None:
        sink_index = n + 1
        jumps.append((diss.sink_rate, _unit(n_el, sink_index, diss.sink_site)))
    gens = GeneratorSet(ham, tuple(jumps), None, n, sink_index, diss.sink_site,
                        {"units": units.value})
    if noise.modes is not None:
        return extend_with_modes(gens, noise.modes, units, max_dim=max_dim)
    return gens


def _dephasing_jumps(spec: DephasingSpec, n_el: int):
    n = spec.n_sites
    if spec.mode is DephasingMode.LOCAL:
        return [(g, _unit(n_el, j, j)) for j, g in enumerate(spec.local_rates, start=1) if g > 0]
    w, v = np.linalg.eigh(spec.correlated_matrix)
    out = []
    for lam, vec in zip(w, v.T):
        if lam <= 0:
            continue
        op = np.zeros((n_el, n_el))
        op[1:n + 1, 1:n + 1] = np.diag(vec)
        out.append((float(lam), op))
    return out


def extend_with_modes(gens: GeneratorSet, modes: LocalModeSpec, units=UnitSystem.SPECTROSCOPIC,
                      max_dim: int = DEFAULT_MAX_DIM) -> GeneratorSet:
    """Attach two-level local modes to an electronic generator set."""
    if gens.modes is not None:
        raise ValidationError("generator set already carries modes")
    units = UnitSystem.parse(units)
    sites = modes.sites(gens.n_sites)
    dim = gens.n_el * 2 ** len(sites)
    if dim > max_dim:
        raise CapacityError(
            f"{len(sites)} modes give dimension {dim} > cap {max_dim}; attach fewer sites")
    kappa = units.kappa
    rate_kappa = kappa if modes.damping_convention == "angular" else kappa / (2 * np.pi)
    bath = ModeBath(frequency=modes.omega_h * kappa,
                    coupling=modes.coupling * kappa,
                    damping=modes.damping * rate_kappa,
                    attachments=tuple(sites))
    return GeneratorSet(gens.hamiltonian, gens.jumps, bath, gens.n_sites,
                        gens.sink_index, gens.sink_site, dict(gens.labels))
