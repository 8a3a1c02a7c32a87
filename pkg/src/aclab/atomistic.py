"""The atomistic chain model: energy, variations, minimization, stability.

The energy per period is ``sum_xi sum_rho phi_rho(D_rho u(xi))`` with
``phi_rho(r) = phi(r + F*rho)``.  Minimization is over displacements with
``u(0) = 0``; the pin is enforced by eliminating that degree of freedom
from the solve rather than by penalty.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalError
from .lattice import (
    ExternalLoad,
    LatticeFunction,
    LatticeSystem,
    bond_strains,
    sample_load,
    scatter_bond_forces,
)
from .solver import NewtonConfig, SolveReport, banded_solve, newton_minimize

__all__ = [
    "AtomisticOperator",
    "energy_atomistic",
    "gradient_atomistic",
    "hessian_atomistic",
    "solve_atomistic",
    "stability_margin",
    "nn_laplacian",
]


def _values(u):
    return u.values if isinstance(u, LatticeFunction) else np.asarray(u, dtype=float)


def pair_hessian(system: LatticeSystem, coeffs_by_rho: dict[int, np.ndarray]) -> sp.csr_matrix:
    """Assemble ``sum_rho D_rho^T diag(c_rho) D_rho`` over the periodic chain.

    ``coeffs_by_rho[rho]`` holds one stiffness coefficient per bond, indexed
    by the bond's source site.
    """
    n = system.n_sites
    rows, cols, vals = [], [], []
    idx = np.arange(n)
    for rho, c in coeffs_by_rho.items():
        j = (idx + rho) % n
        rows.extend([idx, idx, j, j])
        cols.extend([idx, j, idx, j])
        vals.extend([c, -c, -c, c])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def nn_laplacian(system: LatticeSystem) -> sp.csr_matrix:
    """Nearest-neighbour Laplacian quadratic form ``||nabla v||^2``."""
    n = system.n_sites
    ones = np.ones(n)
    return pair_hessian(system, {1: ones})


class AtomisticOperator:
    """Energy, gradient and Hessian of the atomistic model.

    All methods accept and return plain site-value arrays in canonical
    order; the operator itself is read-only after construction.
    """

    def __init__(self, system: LatticeSystem, load: np.ndarray | None = None):
        self.system = system
        self.load = np.zeros(system.n_sites) if load is None else np.asarray(load, dtype=float)

    def energy(self, values: np.ndarray) -> float:
        sys = self.system
        total = 0.0
        for rho in sys.interaction_range:
            d = bond_strains(values, rho)
            total += float(np.sum(sys.potential.shifted(sys.macro_strain, rho, d, 0)))
        return total

    def gradient(self, values: np.ndarray) -> np.ndarray:
        sys = self.system
        g = np.zeros_like(values)
        for rho in sys.interaction_range:
            d = bond_strains(values, rho)
            t = np.asarray(sys.potential.shifted(sys.macro_strain, rho, d, 1))
            g += scatter_bond_forces(t, rho)
        return g

    def hessian(self, values: np.ndarray) -> sp.csr_matrix:
        sys = self.system
        coeffs = {}
        for rho in sys.interaction_range:
            d = bond_strains(values, rho)
            coeffs[rho] = np.asarray(sys.potential.shifted(sys.macro_strain, rho, d, 2))
        return pair_hessian(sys, coeffs)

    def objective(self, values: np.ndarray) -> float:
        return self.energy(values) - float(np.dot(self.load, values))


def energy_atomistic(system: LatticeSystem, u) -> float:
    return AtomisticOperator(system).energy(_values(u))


def gradient_atomistic(system: LatticeSystem, u) -> np.ndarray:
    """Per-site first variation; the pinned site's component is reported too."""
    return AtomisticOperator(system).gradient(_values(u))


def hessian_atomistic(system: LatticeSystem, u) -> sp.csr_matrix:
    return AtomisticOperator(system).hessian(_values(u))


def solve_atomistic(system: LatticeSystem, load, tol: float = 1e-10,
                    max_iter: int = 50):
    """Minimize ``E(u) - <f, u>`` from ``u = 0``; returns ``(u, report)``.

    ``load`` may be an :class:`ExternalLoad` or a per-site array.
    """
    f = sample_load(load, system) if isinstance(load, ExternalLoad) else np.asarray(load, dtype=float)
    op = AtomisticOperator(system, f)
    n = system.n_sites
    pin = system.pin_index
    free = np.ones(n, dtype=bool)
    free[pin] = False

    def expand(x):
        full = np.zeros(n)
        full[free] = x
        return full

    def energy(x):
        return op.objective(expand(x))

    def gradient(x):
        return (op.gradient(expand(x)) - f)[free]

    def hessian(x):
        H = op.hessian(expand(x)).tocsc()
        keep = np.flatnonzero(free)
        return H[np.ix_(keep, keep)]

    cfg = NewtonConfig(tol=tol, max_iter=max_iter)
    x, report = newton_minimize(energy, gradient, hessian, np.zeros(n - 1), cfg)
    return LatticeFunction(system, expand(x)), report


def stability_margin(system: LatticeSystem, u) -> float:
    """Smallest generalized eigenvalue of ``(H, L)`` on the pinned subspace.

    ``L`` is the nearest-neighbour Laplacian, so the value is
    ``min <H v, v> / ||nabla v||^2``; a positive margin certifies the
    second-order optimality condition numerically.
    """
    values = _values(u)
    H = AtomisticOperator(system).hessian(values)
    L = nn_laplacian(system)
    keep = np.flatnonzero(np.arange(system.n_sites) != system.pin_index)
    Hf = H.tocsc()[np.ix_(keep, keep)]
    Lf = L.tocsc()[np.ix_(keep, keep)]
    n = Hf.shape[0]
    try:
        if n <= 1200:
            w = sla.eigvalsh(Hf.toarray(), Lf.toarray())
            return float(w[0])
        w = spla.eigsh(Hf.tocsc(), k=1, M=Lf.tocsc(), sigma=0.0, which="LM",
                       return_eigenvectors=False)
        return float(w[0])
    except (np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
        raise NumericalError(f"stability eigenproblem failed: {exc}") from exc
