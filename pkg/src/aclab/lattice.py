"""Periodic one-dimensional lattice substrate.

Sites live on ``Lambda = {-N+1, ..., N}`` (2N sites, spacing 1 in lattice
units).  The physical window ``[-1/2, 1/2]`` maps in through ``x = eps*xi``
with ``eps = 1/(2N)``; loads given as physical profiles are sampled onto the
lattice as ``f(xi) = eps * profile(eps*xi)`` so that all model formulas work
in unscaled lattice units.  Displacements are 2N-periodic with the value at
site 0 pinned to zero.

Arrays are indexed in canonical site order ``i = xi + N - 1``, i.e. index 0
holds site ``-N+1`` and index ``2N-1`` holds site ``N``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, PotentialDomainError, RangeViolationError

__all__ = [
    "PairPotential",
    "LatticeSystem",
    "LatticeFunction",
    "ExternalLoad",
    "finite_difference",
    "lattice_pairing",
    "sample_load",
    "bond_strains",
    "scatter_bond_forces",
]


# ---------------------------------------------------------------------------
# pair potentials
# ---------------------------------------------------------------------------

def _harmonic_evaluators():
    return (
        lambda r: 0.5 * (np.asarray(r, dtype=float) - 1.0) ** 2,
        lambda r: np.asarray(r, dtype=float) - 1.0,
        lambda r: np.ones_like(np.asarray(r, dtype=float)),
        lambda r: np.zeros_like(np.asarray(r, dtype=float)),
    )


def _lj_evaluators():
    # phi(r) = r^-12 - 2 r^-6, minimum at r = 1 with depth 1
    return (
        lambda r: r ** -12 - 2.0 * r ** -6,
        lambda r: -12.0 * r ** -13 + 12.0 * r ** -7,
        lambda r: 156.0 * r ** -14 - 84.0 * r ** -8,
        lambda r: -2184.0 * r ** -15 + 672.0 * r ** -9,
    )


class PairPotential:
    """A pair potential with derivatives up to third order.

    The shifted potential ``phi_rho(r) = phi(r + F*rho)`` is provided through
    :meth:`shifted`.  Derivative evaluators are validated against central
    finite differences of the next-lower order at construction.
    """

    _PROBES = np.array([0.75, 0.9, 1.1, 1.6, 2.3])

    def __init__(self, kind: str, evaluators, domain_min: float | None = None,
                 validate: bool = True):
        if len(evaluators) != 4:
            raise ConfigurationError("need evaluators for orders 0..3")
        self.kind = kind
        self._eval = tuple(evaluators)
        self.domain_min = domain_min
        if validate:
            self.check_derivatives()

    @classmethod
    def harmonic(cls) -> "PairPotential":
        return cls("harmonic", _harmonic_evaluators())

    @classmethod
    def lennard_jones(cls) -> "PairPotential":
        return cls("lennard_jones", _lj_evaluators(), domain_min=0.0)

    @classmethod
    def user(cls, evaluators, domain_min: float | None = None) -> "PairPotential":
        return cls("user", evaluators, domain_min=domain_min)

    @classmethod
    def from_name(cls, name: str) -> "PairPotential":
        name = name.lower()
        if name in ("harmonic", "h"):
            return cls.harmonic()
        if name in ("lennard_jones", "lj", "lennard-jones"):
            return cls.lennard_jones()
        raise ConfigurationError(f"unknown potential '{name}'")

    def __call__(self, r, order: int = 0):
        if not 0 <= order <= 3:
            raise RangeViolationError(f"potential derivative order {order} not in 0..3")
        r = np.asarray(r, dtype=float)
        if self.domain_min is not None and np.any(r <= self.domain_min):
            raise PotentialDomainError(
                f"{self.kind} potential evaluated at r <= {self.domain_min}")
        out = self._eval[order](r)
        return out if out.ndim else float(out)

    def shifted(self, F: float, rho: int, r, order: int = 0):
        """Evaluate ``phi^(order)(r + F*rho)``."""
        return self(np.asarray(r, dtype=float) + F * rho, order)

    def check_derivatives(self, rel_tol: float = 1e-5) -> None:
        """Verify each derivative against a central difference of its parent."""
        probes = self._PROBES
        if self.domain_min is not None:
            probes = probes[probes > self.domain_min + 0.5]
        h = 1e-6
        for order in range(3):
            exact = np.asarray(self(probes, order + 1))
            fd = (np.asarray(self(probes + h, order))
                  - np.asarray(self(probes - h, order))) / (2 * h)
            scale = np.maximum(np.abs(exact), 1.0)
            if np.max(np.abs(fd - exact) / scale) > rel_tol:
                raise ConfigurationError(
                    f"derivative evaluator of order {order + 1} does not match "
                    f"finite differences of order {order}")


# ---------------------------------------------------------------------------
# lattice system and functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatticeSystem:
    """Periodic chain of ``2N`` sites with macroscopic strain F.

    ``half_count`` is N, so the chain has sites ``{-N+1, ..., N}`` and
    ``eps = 1/(2N)``.  ``interaction_range`` holds the positive hop lengths.
    """

    half_count: int
    macro_strain: float
    interaction_range: tuple[int, ...]
    potential: PairPotential

    def __post_init__(self):
        rng = tuple(sorted(int(r) for r in self.interaction_range))
        object.__setattr__(self, "interaction_range", rng)
        if not rng:
            raise ConfigurationError("interaction range must be nonempty")
        if any(r <= 0 for r in rng) or len(set(rng)) != len(rng):
            raise ConfigurationError("interaction range entries must be distinct positive integers")
        if self.half_count < 1:
            raise ConfigurationError("half_count must be a positive integer")
        if 2 * self.half_count <= 4 * rng[-1]:
            raise ConfigurationError(
                f"chain of {2 * self.half_count} sites too short for cutoff {rng[-1]}: "
                "need 2N > 4*r_cut")
        if self.macro_strain <= 0:
            raise ConfigurationError("macro strain must be positive")

    @property
    def n_sites(self) -> int:
        return 2 * self.half_count

    @property
    def eps(self) -> float:
        return 1.0 / (2 * self.half_count)

    @property
    def r_cut(self) -> int:
        return self.interaction_range[-1]

    def sites(self) -> np.ndarray:
        """Canonical site labels ``-N+1 .. N`` in array order."""
        N = self.half_count
        return np.arange(-N + 1, N + 1)

    def site_index(self, xi) -> np.ndarray:
        """Array index of site ``xi`` (periodic wrap)."""
        N = self.half_count
        return np.mod(np.asarray(xi) + N - 1, 2 * N)

    @property
    def pin_index(self) -> int:
        return self.half_count - 1  # site 0


class LatticeFunction:
    """A 2N-periodic displacement with ``u(0) = 0``.

    Values are stored in canonical site order.  Set ``pinned=False`` only
    for test fixtures that deliberately break the pin.
    """

    def __init__(self, system: LatticeSystem, values, pinned: bool = True):
        values = np.asarray(values, dtype=float)
        if values.shape != (system.n_sites,):
            raise ConfigurationError(
                f"expected {system.n_sites} site values, got shape {values.shape}")
        if pinned and values[system.pin_index] != 0.0:
            raise ConfigurationError("value at site 0 must be exactly zero")
        self.system = system
        self.values = values

    @classmethod
    def zeros(cls, system: LatticeSystem) -> "LatticeFunction":
        return cls(system, np.zeros(system.n_sites))

    def __call__(self, xi):
        """Value at site(s) ``xi`` using the periodic extension."""
        return self.values[self.system.site_index(xi)]

    def copy(self) -> "LatticeFunction":
        return LatticeFunction(self.system, self.values.copy(), pinned=False)


def bond_strains(values: np.ndarray, rho: int) -> np.ndarray:
    """``D_rho u`` for every site: entry ``i`` holds ``u(xi_i + rho) - u(xi_i)``."""
    return np.roll(values, -rho) - values


def scatter_bond_forces(t: np.ndarray, rho: int) -> np.ndarray:
    """Adjoint of :func:`bond_strains`: scatter per-bond weights to sites."""
    return np.roll(t, rho) - t


def finite_difference(u: LatticeFunction, xi: int, rho: int) -> float:
    """``D_rho u(xi) = u(xi + rho) - u(xi)`` with periodic extension."""
    rng = u.system.interaction_range
    if rho not in rng and -rho not in rng:
        raise RangeViolationError(f"hop {rho} outside +-{rng}")
    return float(u(xi + rho) - u(xi))


def lattice_pairing(f, u) -> float:
    """Duality pairing ``sum_xi f(xi) u(xi)`` over one period."""
    fv = f.values if isinstance(f, LatticeFunction) else np.asarray(f, dtype=float)
    uv = u.values if isinstance(u, LatticeFunction) else np.asarray(u, dtype=float)
    if fv.shape != uv.shape:
        raise ConfigurationError("pairing requires matching site counts")
    return float(np.dot(fv, uv))


# ---------------------------------------------------------------------------
# external loads
# ---------------------------------------------------------------------------

# 4th-order central stencil for a third derivative
_FD3_OFFSETS = np.array([-3.0, -2.0, -1.0, 1.0, 2.0, 3.0])
_FD3_WEIGHTS = np.array([-1.0, 8.0, -13.0, 13.0, -8.0, 1.0]) / 8.0


class ExternalLoad:
    """Dead load given as a profile on the physical window ``[-1/2, 1/2]``.

    ``kind='singular'`` is the defect-like profile
    ``f_scale*(1/2-|x|)/|x|`` (zero at x=0), ``kind='smooth'`` is the
    zero-mean 1-periodic ``f_scale*sin(2*pi*x)``.  User profiles must vanish
    at x = 0.
    """

    def __init__(self, kind: str, f_scale: float,
                 profile_fn: Callable | None = None,
                 profile_d3_fn: Callable | None = None):
        self.kind = kind
        self.f_scale = float(f_scale)
        self._profile_fn = profile_fn
        self._profile_d3_fn = profile_d3_fn

    @classmethod
    def singular(cls, f_scale: float) -> "ExternalLoad":
        return cls("singular", f_scale)

    @classmethod
    def smooth(cls, f_scale: float) -> "ExternalLoad":
        return cls("smooth", f_scale)

    @classmethod
    def user(cls, profile_fn: Callable, f_scale: float = 1.0,
             profile_d3_fn: Callable | None = None) -> "ExternalLoad":
        return cls("user", f_scale, profile_fn, profile_d3_fn)

    @classmethod
    def from_name(cls, name: str, f_scale: float) -> "ExternalLoad":
        name = name.lower()
        if name == "singular":
            return cls.singular(f_scale)
        if name == "smooth":
            return cls.smooth(f_scale)
        raise ConfigurationError(f"unknown load kind '{name}'")

    # profile and its third derivative on the physical window -------------

    def profile(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "singular":
            with np.errstate(divide="ignore", invalid="ignore"):
                out = self.f_scale * (0.5 - np.abs(x)) / np.abs(x)
            out = np.where(x == 0.0, 0.0, out)
        elif self.kind == "smooth":
            out = self.f_scale * np.sin(2 * np.pi * x)
        else:
            out = self.f_scale * np.asarray(self._profile_fn(x), dtype=float)
        return out if out.ndim else float(out)

    def profile_d3(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "singular":
            with np.errstate(divide="ignore", invalid="ignore"):
                out = -3.0 * self.f_scale * np.sign(x) / x ** 4
            out = np.where(x == 0.0, 0.0, out)
        elif self.kind == "smooth":
            out = -self.f_scale * (2 * np.pi) ** 3 * np.cos(2 * np.pi * x)
        elif self._profile_d3_fn is not None:
            out = self.f_scale * np.asarray(self._profile_d3_fn(x), dtype=float)
        else:
            h = 1e-2
            stencil = self.profile(x[..., None] + h * _FD3_OFFSETS)
            out = stencil @ _FD3_WEIGHTS / h ** 3
        return out if out.ndim else float(out)

    # lattice-scale views --------------------------------------------------

    def lattice_values(self, system: LatticeSystem) -> np.ndarray:
        """Per-site load ``f(xi) = eps * profile(eps*xi)``; site 0 gets 0."""
        eps = system.eps
        vals = eps * np.asarray(self.profile(eps * system.sites()), dtype=float)
        vals[system.pin_index] = 0.0
        return vals

    def continuum(self, system: LatticeSystem) -> Callable:
        """Load as a function of the lattice coordinate, ``eps*profile(eps*x)``."""
        eps = system.eps
        return lambda x: eps * self.profile(eps * np.asarray(x, dtype=float))

    def continuum_d3(self, system: LatticeSystem) -> Callable:
        """Third derivative of :meth:`continuum` in the lattice coordinate."""
        eps = system.eps
        return lambda x: eps ** 4 * self.profile_d3(eps * np.asarray(x, dtype=float))


def sample_load(load: ExternalLoad, system: LatticeSystem) -> np.ndarray:
    """Sample a physical load profile onto the lattice."""
    return load.lattice_values(system)
