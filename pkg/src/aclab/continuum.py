"""Cauchy-Born and higher-order continuum models on the periodic chain.

The classical density is ``W_cb(g) = sum_rho phi_rho(rho*g)``; the
higher-order density augments the argument with the third gradient,
``W_hoc(g1, g3) = sum_rho phi_rho(rho*g1 + rho^3/24 * g3)``, and reduces to
``W_cb`` exactly at ``g3 = 0``.  The higher-order problem is posed in the
periodic C^2 quintic space (variational form only; no sixth-order strong
form is discretized) and the classical one in P1, both pinned at x = 0.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError
from .fem import (
    AFFINE,
    QUINTIC,
    MixedFEFunction,
    MixedFESpace,
    build_canonical_mesh,
)
from .lattice import ExternalLoad, LatticeSystem, bond_strains, scatter_bond_forces
from .solver import NewtonConfig, newton_minimize

__all__ = [
    "HOCDensity",
    "density_cb",
    "density_hoc",
    "HOCOperator",
    "CBOperator",
    "energy_hoc",
    "variation_hoc",
    "hessian_hoc",
    "solve_hoc",
    "solve_cb",
    "stress_hoc",
    "hoc_space",
    "cb_space",
]


def density_cb(system: LatticeSystem, g, order: int = 0):
    """``sum_rho rho^order phi^(order)_rho(rho*g)`` (vectorized in g)."""
    g = np.asarray(g, dtype=float)
    out = np.zeros_like(g)
    for rho in system.interaction_range:
        out = out + rho ** order * np.asarray(
            system.potential.shifted(system.macro_strain, rho, rho * g, order))
    return out if out.ndim else float(out)


class HOCDensity:
    """Higher-order energy density with first and second partials.

    Weights the chain-rule factors as (rho, rho^3/24) for the two arguments.
    """

    def __init__(self, system: LatticeSystem):
        self.system = system

    def _args(self, g1, g3):
        return np.asarray(g1, dtype=float), np.asarray(g3, dtype=float)

    def value(self, g1, g3):
        g1, g3 = self._args(g1, g3)
        sys = self.system
        out = np.zeros(np.broadcast(g1, g3).shape)
        for rho in sys.interaction_range:
            a = rho * g1 + rho ** 3 / 24.0 * g3
            out += np.asarray(sys.potential.shifted(sys.macro_strain, rho, a, 0))
        return out

    def grad(self, g1, g3):
        g1, g3 = self._args(g1, g3)
        sys = self.system
        shape = np.broadcast(g1, g3).shape
        p1, p3 = np.zeros(shape), np.zeros(shape)
        for rho in sys.interaction_range:
            w3 = rho ** 3 / 24.0
            a = rho * g1 + w3 * g3
            d = np.asarray(sys.potential.shifted(sys.macro_strain, rho, a, 1))
            p1 += rho * d
            p3 += w3 * d
        return p1, p3

    def hess(self, g1, g3):
        g1, g3 = self._args(g1, g3)
        sys = self.system
        shape = np.broadcast(g1, g3).shape
        h11, h13, h33 = np.zeros(shape), np.zeros(shape), np.zeros(shape)
        for rho in sys.interaction_range:
            w3 = rho ** 3 / 24.0
            a = rho * g1 + w3 * g3
            d = np.asarray(sys.potential.shifted(sys.macro_strain, rho, a, 2))
            h11 += rho * rho * d
            h13 += rho * w3 * d
            h33 += w3 * w3 * d
        return h11, h13, h33


def density_hoc(system: LatticeSystem, g1, g3, which: str = "value"):
    dens = HOCDensity(system)
    if which == "value":
        out = dens.value(g1, g3)
        return out if out.ndim else float(out)
    if which == "grad":
        return dens.grad(g1, g3)
    if which == "hess":
        return dens.hess(g1, g3)
    raise ConfigurationError(f"unknown density request '{which}'")


# ---------------------------------------------------------------------------
# spaces
# ---------------------------------------------------------------------------

def hoc_space(system: LatticeSystem) -> MixedFESpace:
    """Periodic C^2 quintic space on the canonical mesh, pinned at x=0."""
    return MixedFESpace(system, build_canonical_mesh(system, None, QUINTIC))


def cb_space(system: LatticeSystem) -> MixedFESpace:
    """Periodic P1 space on the canonical mesh, pinned at x=0."""
    return MixedFESpace(system, build_canonical_mesh(system, None, AFFINE))


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

class HOCOperator:
    """Galerkin assembly of the higher-order continuum energy."""

    def __init__(self, system: LatticeSystem, space: MixedFESpace, nquad: int = 6):
        if np.any(space.mesh.kinds != QUINTIC):
            raise ConfigurationError("higher-order model needs an all-quintic mesh")
        self.system = system
        self.space = space
        self.nquad = nquad
        self.density = HOCDensity(system)

    def _batches(self):
        return self.space.quad_batches(self.nquad)

    def energy(self, coeffs: np.ndarray) -> float:
        total = 0.0
        for b in self._batches():
            cloc = coeffs[b.dofmap]
            g1 = cloc @ b.basis[1].T
            g3 = cloc @ b.basis[3].T
            total += float(np.sum(self.density.value(g1, g3) @ b.wq))
        return total

    def gradient(self, coeffs: np.ndarray) -> np.ndarray:
        g = np.zeros(self.space.n_dof)
        for b in self._batches():
            cloc = coeffs[b.dofmap]
            g1 = cloc @ b.basis[1].T
            g3 = cloc @ b.basis[3].T
            p1, p3 = self.density.grad(g1, g3)
            loc = (p1 * b.wq) @ b.basis[1] + (p3 * b.wq) @ b.basis[3]
            np.add.at(g, b.dofmap, loc)
        return g

    def hessian(self, coeffs: np.ndarray) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for b in self._batches():
            cloc = coeffs[b.dofmap]
            g1 = cloc @ b.basis[1].T
            g3 = cloc @ b.basis[3].T
            h11, h13, h33 = self.density.hess(g1, g3)
            B1, B3 = b.basis[1], b.basis[3]
            loc = (np.einsum("eq,qi,qj->eij", h11 * b.wq, B1, B1)
                   + np.einsum("eq,qi,qj->eij", h13 * b.wq, B1, B3)
                   + np.einsum("eq,qi,qj->eij", h13 * b.wq, B3, B1)
                   + np.einsum("eq,qi,qj->eij", h33 * b.wq, B3, B3))
            n_e, k = b.dofmap.shape
            rows.append(np.repeat(b.dofmap, k, axis=1).ravel())
            cols.append(np.tile(b.dofmap, (1, k)).ravel())
            vals.append(loc.ravel())
        H = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.space.n_dof, self.space.n_dof))
        return H.tocsr()

    def load_vector(self, f) -> np.ndarray:
        """Assemble ``int f psi_k`` by quadrature (f given on lattice coords)."""
        out = np.zeros(self.space.n_dof)
        for b in self._batches():
            fq = np.asarray(f(b.xq), dtype=float)
            np.add.at(out, b.dofmap, (fq * b.wq) @ b.basis[0])
        return out


class CBOperator:
    """P1 Cauchy-Born model; element strains make every term closed-form."""

    def __init__(self, system: LatticeSystem, space: MixedFESpace, nquad: int = 6):
        if np.any(space.mesh.kinds != AFFINE) or not space.mesh.is_canonical():
            raise ConfigurationError("classical model needs the canonical P1 mesh")
        self.system = system
        self.space = space
        self.nquad = nquad

    def _strains(self, coeffs):
        vals = coeffs[self.space.value_dofs]
        return bond_strains(vals, 1)

    def energy(self, coeffs: np.ndarray) -> float:
        return float(np.sum(density_cb(self.system, self._strains(coeffs), 0)))

    def gradient(self, coeffs: np.ndarray) -> np.ndarray:
        t = np.asarray(density_cb(self.system, self._strains(coeffs), 1))
        g = np.zeros(self.space.n_dof)
        g[self.space.value_dofs] = scatter_bond_forces(t, 1)
        return g

    def hessian(self, coeffs: np.ndarray) -> sp.csr_matrix:
        c = np.asarray(density_cb(self.system, self._strains(coeffs), 2))
        n = self.system.n_sites
        idx = np.arange(n)
        j = (idx + 1) % n
        rows = np.concatenate([idx, idx, j, j])
        cols = np.concatenate([idx, j, idx, j])
        vals = np.concatenate([c, -c, -c, c])
        return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()

    def load_vector(self, f) -> np.ndarray:
        out = np.zeros(self.space.n_dof)
        for b in self.space.quad_batches(self.nquad):
            fq = np.asarray(f(b.xq), dtype=float)
            np.add.at(out, b.dofmap, (fq * b.wq) @ b.basis[0])
        return out


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def energy_hoc(system: LatticeSystem, u: MixedFEFunction, nquad: int = 6) -> float:
    return HOCOperator(system, u.space, nquad).energy(u.coeffs)


def variation_hoc(system: LatticeSystem, u: MixedFEFunction, nquad: int = 6) -> np.ndarray:
    return HOCOperator(system, u.space, nquad).gradient(u.coeffs)


def hessian_hoc(system: LatticeSystem, u: MixedFEFunction, nquad: int = 6) -> sp.csr_matrix:
    return HOCOperator(system, u.space, nquad).hessian(u.coeffs)


def _pinned_solve(op, space, load_vec, tol, max_iter):
    free = np.flatnonzero(space.free)

    def expand(x):
        full = np.zeros(space.n_dof)
        full[free] = x
        return full

    def energy(x):
        full = expand(x)
        return op.energy(full) - float(np.dot(load_vec, full))

    def gradient(x):
        return (op.gradient(expand(x)) - load_vec)[free]

    def hessian(x):
        H = op.hessian(expand(x)).tocsc()
        return H[np.ix_(free, free)]

    cfg = NewtonConfig(tol=tol, max_iter=max_iter)
    x, report = newton_minimize(energy, gradient, hessian, np.zeros(free.size), cfg)
    return MixedFEFunction(space, expand(x)), report


def solve_hoc(system: LatticeSystem, load: ExternalLoad, tol: float = 1e-10,
              max_iter: int = 50, nquad: int = 6):
    """Minimize the higher-order continuum energy against a quadrature load.

    Intended for smooth load profiles; singular profiles are accepted but
    the model is not expected to approximate the chain then.
    """
    space = hoc_space(system)
    op = HOCOperator(system, space, nquad)
    return _pinned_solve(op, space, op.load_vector(load.continuum(system)), tol, max_iter)


def solve_cb(system: LatticeSystem, load: ExternalLoad, tol: float = 1e-10,
             max_iter: int = 50, nquad: int = 6):
    """Minimize the P1 Cauchy-Born energy against a quadrature load."""
    space = cb_space(system)
    op = CBOperator(system, space, nquad)
    return _pinned_solve(op, space, op.load_vector(load.continuum(system)), tol, max_iter)


def stress_hoc(system: LatticeSystem, u: MixedFEFunction, x) -> float | np.ndarray:
    """Pointwise higher-order stress from the closed four-term formula.

    Equals ``d/dx^2 applied to dW/d(grad^3 u)`` plus ``dW/d(grad u)``, i.e.
    the first-order stress of the variational form after integration by
    parts; evaluated from the local derivatives of u up to order five.
    """
    d = [None] + [np.atleast_1d(u(x, m)) for m in range(1, 6)]
    sys = system
    out = np.zeros_like(d[1])
    for rho in sys.interaction_range:
        w3 = rho ** 3 / 24.0
        a = rho * d[1] + w3 * d[3]
        p1 = np.asarray(sys.potential.shifted(sys.macro_strain, rho, a, 1))
        p2 = np.asarray(sys.potential.shifted(sys.macro_strain, rho, a, 2))
        p3 = np.asarray(sys.potential.shifted(sys.macro_strain, rho, a, 3))
        out += (rho ** 6 / 576.0 * p2 * d[5]
                + w3 * p3 * (rho * d[2] + w3 * d[4]) ** 2
                + rho ** 4 / 24.0 * p2 * d[3]
                + rho * p1)
    return out if np.asarray(x).ndim else float(out[0])
