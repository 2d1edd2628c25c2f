"""Network Hamiltonians, basis changes and the bundled FMO data."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    FormatError,
    InvalidNetwork,
    InvalidPair,
    ValidationError,
)

#: rad ps^-1 per cm^-1, i.e. 2*pi*c with c in cm/ps
KAPPA = 0.1883651567

#: 2*Gamma_j = 1/(1 ns) expressed in ps^-1
DEFAULT_RADIATIVE_RATE = 0.5e-3

FMO_DATA = "fmo_paestuarii.json"

_SYMMETRY_TOL = 1e-9


class UnitSystem(enum.Enum):
    DIMENSIONLESS = "dimensionless"
    SPECTROSCOPIC = "cm-1"

    @property
    def kappa(self) -> float:
        """Factor turning an energy entry into an angular frequency."""
        return KAPPA if self is UnitSystem.SPECTROSCOPIC else 1.0

    @classmethod
    def parse(cls, value) -> "UnitSystem":
        if isinstance(value, cls):
            return value
        aliases = {"cm-1": cls.SPECTROSCOPIC, "cm^-1": cls.SPECTROSCOPIC,
                   "spectroscopic": cls.SPECTROSCOPIC,
                   "dimensionless": cls.DIMENSIONLESS}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise FormatError(f"unknown unit system {value!r}") from None


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class NetworkHamiltonian:
    """Single-excitation Hamiltonian over ``n_sites`` sites.

    ``energies`` sit on the diagonal, ``couplings`` (symmetric, zero
    diagonal) off it.  Values are in the units given by ``units``; use
    :meth:`angular_matrix` to get angular frequencies for propagation.
    """

    energies: np.ndarray
    couplings: np.ndarray
    units: UnitSystem = UnitSystem.DIMENSIONLESS
    labels: Optional[tuple] = None

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=float)
        c = np.asarray(self.couplings, dtype=float)
        if e.ndim != 1 or e.size < 1:
            raise InvalidNetwork("energies must be a non-empty vector")
        n = e.size
        if c.shape != (n, n):
            raise DimensionMismatch(f"couplings shape {c.shape} != ({n}, {n})")
        if not (np.all(np.isfinite(e)) and np.all(np.isfinite(c))):
            raise ValidationError("non-finite Hamiltonian entries")
        asym = np.max(np.abs(c - c.T)) if n > 1 else 0.0
        if asym > _SYMMETRY_TOL:
            raise ValidationError(f"coupling matrix not symmetric (max deviation {asym:.3g})")
        if np.max(np.abs(np.diag(c))) > _SYMMETRY_TOL:
            raise ValidationError("coupling matrix must have a zero diagonal")
        c = 0.5 * (c + c.T)
        np.fill_diagonal(c, 0.0)
        object.__setattr__(self, "energies", _frozen(e))
        object.__setattr__(self, "couplings", _frozen(c))
        object.__setattr__(self, "units", UnitSystem.parse(self.units))
        if self.labels is not None:
            labels = tuple(str(s) for s in self.labels)
            if len(labels) != n:
                raise DimensionMismatch("labels length must equal n_sites")
            object.__setattr__(self, "labels", labels)

    @property
    def n_sites(self) -> int:
        return self.energies.size

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.energies) + self.couplings

    def angular_matrix(self) -> np.ndarray:
        return self.matrix * self.units.kappa

    @classmethod
    def from_matrix(cls, matrix, units=UnitSystem.DIMENSIONLESS, labels=None):
        m = np.asarray(matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionMismatch("Hamiltonian matrix must be square")
        if np.iscomplexobj(m):
            if np.max(np.abs(m.imag)) > _SYMMETRY_TOL:
                raise ValidationError("NetworkHamiltonian holds real matrices only")
            m = m.real
        c = m - np.diag(np.diag(m))
        return cls(np.diag(m).copy(), c, units, labels)

    def with_energies(self, energies) -> "NetworkHamiltonian":
        return NetworkHamiltonian(energies, self.couplings, self.units, self.labels)


@dataclass(frozen=True)
class BasisTransform:
    unitary: np.ndarray
    description: str = ""
    labels: Optional[tuple] = None

    def __post_init__(self):
        u = np.array(self.unitary, dtype=complex)
        if u.ndim != 2 or u.shape[0] != u.shape[1]:
            raise DimensionMismatch("transform must be square")
        err = np.max(np.abs(u.conj().T @ u - np.eye(u.shape[0])))
        if err > 1e-12:
            raise ValidationError(f"transform is not unitary (deviation {err:.3g})")
        u.setflags(write=False)
        object.__setattr__(self, "unitary", u)

    @property
    def dim(self) -> int:
        return self.unitary.shape[0]


@dataclass(frozen=True)
class FmoSystem:
    hamiltonian: NetworkHamiltonian
    sink_rate: float
    source_site: int = 1
    sink_site: int = 3
    radiative_rate: float = DEFAULT_RADIATIVE_RATE
    provenance: str = field(default="", compare=False)

    def __post_init__(self):
        n = self.hamiltonian.n_sites
        for name in ("source_site", "sink_site"):
            s = getattr(self, name)
            if not 1 <= s <= n:
                raise InvalidNetwork(f"{name}={s} outside 1..{n}")
        if not self.sink_rate > 0:
            raise ValidationError("sink_rate must be positive")
        if self.radiative_rate < 0:
            raise ValidationError("radiative_rate must be non-negative")


def build_fcn(n: int, j_coupling: float, energies: Optional[Sequence[float]] = None,
              units=UnitSystem.DIMENSIONLESS) -> NetworkHamiltonian:
    """Fully connected network: every pair of sites coupled by ``j_coupling``."""
    if n < 2:
        raise InvalidNetwork("a fully connected network needs n >= 2")
    if energies is None:
        energies = np.zeros(n)
    energies = np.asarray(energies, dtype=float)
    if energies.shape != (n,):
        raise DimensionMismatch(f"expected {n} energies, got {energies.shape}")
    couplings = np.full((n, n), float(j_coupling))
    np.fill_diagonal(couplings, 0.0)
    return NetworkHamiltonian(energies, couplings, units)


def disordered_energies(n: int, seed: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Site energies drawn uniformly from ``[low, high]`` with a seeded generator."""
    return np.random.default_rng(seed).uniform(low, high, size=n)


# -- serialization ---------------------------------------------------------

def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: top level must be an object")
    return doc


def network_from_dict(doc: dict) -> NetworkHamiltonian:
    try:
        units = UnitSystem.parse(doc.get("units", "dimensionless"))
        n = int(doc["n_sites"])
        energies = np.asarray(doc["energies"], dtype=float)
        couplings = np.asarray(doc["couplings"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed network document: {exc}") from exc
    if energies.shape != (n,):
        raise FormatError(f"energies must have length n_sites={n}")
    if couplings.shape != (n, n):
        raise FormatError("couplings must be a full n_sites x n_sites matrix")
    return NetworkHamiltonian(energies, couplings, units, doc.get("labels"))


def load_network(path) -> NetworkHamiltonian:
    return network_from_dict(_read_json(path))


def network_to_dict(h: NetworkHamiltonian, *, sink: Optional[dict] = None,
                    source: Optional[int] = None, provenance: Optional[str] = None) -> dict:
    doc = {
        "units": h.units.value,
        "n_sites": h.n_sites,
        "energies": [float(x) for x in h.energies],
        "couplings": [[float(x) for x in row] for row in h.couplings],
    }
    if h.labels is not None:
        doc["labels"] = list(h.labels)
    if sink is not None:
        doc["sink"] = dict(sink)
    if source is not None:
        doc["source"] = int(source)
    if provenance is not None:
        doc["provenance"] = provenance
    return doc


def save_network(h: NetworkHamiltonian, path, **extra) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(h, **extra), fh, indent=2)
        fh.write("\n")


def fmo_data_path() -> Path:
    return Path(str(resources.files("noise_transport.data").joinpath(FMO_DATA)))


def load_fmo(path=None, sink_rate: Optional[float] = None) -> FmoSystem:
    """Load the bundled 7-site FMO monomer (or a file with the same schema)."""
    doc = _read_json(path or fmo_data_path())
    h = network_from_dict(doc)
    sink = doc.get("sink") or {}
    rate = sink_rate if sink_rate is not None else sink.get("rate")
    if rate is None:
        raise FormatError("FMO file carries no sink rate and none was given")
    return FmoSystem(
        hamiltonian=h,
        sink_rate=float(rate),
        source_site=int(doc.get("source", 1)),
        sink_site=int(sink.get("site", 3)),
        radiative_rate=float(doc.get("radiative_rate", DEFAULT_RADIATIVE_RATE)),
        provenance=doc.get("provenance", ""),
    )


# -- basis changes ----------------------------------------------------------

def hybrid_transform(pair, n_sites: int) -> BasisTransform:
    """Mix sites ``i`` and ``j`` (1-based) into ``(|i> +/- |j>)/sqrt(2)``.

    The ``+`` combination takes slot ``i`` and the ``-`` combination slot
    ``j``; every other site is left alone.  The matrix is real symmetric
    and squares to the identity.
    """
    i, j = (int(p) for p in pair)
    if i == j:
        raise InvalidPair("hybrid pair needs two distinct sites")
    for s in (i, j):
        if not 1 <= s <= n_sites:
            raise InvalidPair(f"site {s} outside 1..{n_sites}")
    u = np.eye(n_sites)
    a, b = i - 1, j - 1
    r = 1.0 / np.sqrt(2.0)
    u[a, a], u[a, b] = r, r
    u[b, a], u[b, b] = r, -r
    labels = [str(k + 1) for k in range(n_sites)]
    labels[a], labels[b] = "+", "-"
    return BasisTransform(u, f"hybrid basis of sites {i},{j}", tuple(labels))


def transform_hamiltonian(h, u: BasisTransform) -> np.ndarray:
    """Return ``U H U^dagger`` as a complex Hermitian matrix."""
    m = h.matrix if isinstance(h, NetworkHamiltonian) else np.asarray(h)
    if m.shape != (u.dim, u.dim):
        raise DimensionMismatch(f"Hamiltonian {m.shape} vs transform {u.dim}x{u.dim}")
    out = u.unitary @ m @ u.unitary.conj().T
    return 0.5 * (out + out.conj().T)


def edit_coupling(h_matrix, state_a: int, state_b: int, new_value) -> np.ndarray:
    """Copy of ``h_matrix`` with element (a, b) and its mirror replaced (1-based)."""
    m = np.array(h_matrix, dtype=complex)
    n = m.shape[0]
    for s in (state_a, state_b):
        if not 1 <= s <= n:
            raise IndexError(f"state {s} outside 1..{n}")
    a, b = state_a - 1, state_b - 1
    if a == b:
        m[a, a] = complex(new_value).real
    else:
        m[a, b] = new_value
        m[b, a] = np.conj(new_value)
    return m
