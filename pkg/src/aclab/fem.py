"""One-dimensional meshes, quadrature, and the mixed P1 / quintic-Hermite space.

The continuum displacement space couples piecewise-affine elements inside the
atomistic region with two-node quintic Hermite elements elsewhere.  A Hermite
node carries (value, first, second derivative) degrees of freedom, so any
coefficient vector is C^2 across quintic-quintic junctions by construction;
interpolation of lattice data determines the derivative DOFs through a C^4
quintic spline (node-exact, fifth-order accurate in the gradient).

Coordinates are lattice units throughout: the canonical mesh has unit
elements with nodes on the sites, coarse meshes keep unit elements in the
atomistic and blending regions and large lattice-aligned elements outside.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import make_interp_spline

from .errors import ConfigurationError, NumericalError, RangeViolationError
from .lattice import LatticeFunction, LatticeSystem

__all__ = [
    "AFFINE",
    "QUINTIC",
    "Mesh1D",
    "QuadratureRule",
    "MixedFESpace",
    "MixedFEFunction",
    "hermite_quintic_eval",
    "build_canonical_mesh",
    "build_coarse_mesh",
    "interpolate_P1",
    "interpolate_mixed_Pi",
    "interpolate_coarse_Pi_h",
    "integrate",
]

AFFINE = 0
QUINTIC = 1

# ---------------------------------------------------------------------------
# reference quintic Hermite basis on [0, 1]
#
# Shape functions prescribe (value, slope, curvature) at both endpoints; the
# DOF order is (u0, u0', u0'', u1, u1', u1'').  Rows are t^0..t^5 coefficients.
# ---------------------------------------------------------------------------

_HERMITE_COEFFS = np.array([
    [1.0, 0.0, 0.0, -10.0, 15.0, -6.0],
    [0.0, 1.0, 0.0, -6.0, 8.0, -3.0],
    [0.0, 0.0, 0.5, -1.5, 1.5, -0.5],
    [0.0, 0.0, 0.0, 10.0, -15.0, 6.0],
    [0.0, 0.0, 0.0, -4.0, 7.0, -3.0],
    [0.0, 0.0, 0.0, 0.5, -1.0, 0.5],
])


def _poly_derivs():
    out = [_HERMITE_COEFFS]
    c = _HERMITE_COEFFS
    for _ in range(5):
        c = c[:, 1:] * np.arange(1, c.shape[1])
        out.append(c)
    return out


_H_DERIVS = _poly_derivs()


def hermite_basis(t, order: int = 0) -> np.ndarray:
    """Reference basis derivatives ``N_k^(order)(t)``, shape ``(len(t), 6)``."""
    if not 0 <= order <= 5:
        raise RangeViolationError(f"quintic derivative order {order} not in 0..5")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    c = _H_DERIVS[order]
    powers = t[:, None] ** np.arange(c.shape[1])[None, :]
    return powers @ c.T


def _dof_scale(h: float) -> np.ndarray:
    return np.array([1.0, h, h * h, 1.0, h, h * h])


def element_basis(h: float, t, order: int) -> np.ndarray:
    """Scaled basis for raw endpoint DOFs ``(u, u', u'')`` on an element of size h."""
    return hermite_basis(t, order) * _dof_scale(h)[None, :] * h ** (-order)


def hermite_quintic_eval(endpoint_data, h: float, x, order: int = 0):
    """Evaluate the quintic with prescribed endpoint jets at local coordinate x.

    ``endpoint_data`` is ``(u0, u0', u0'', u1, u1', u1'')`` and ``x`` lies in
    ``[0, h]``.  Orders above 5 are rejected.
    """
    d = np.asarray(endpoint_data, dtype=float)
    if d.shape != (6,):
        raise ConfigurationError("endpoint data must have 6 entries")
    scalar = np.ndim(x) == 0
    out = element_basis(h, np.asarray(x, dtype=float) / h, order) @ d
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

def _wrap_site(x, half_count: int):
    """Map lattice coordinates into the canonical window (-N, N]."""
    n = 2 * half_count
    return np.asarray(x) - n * np.ceil((np.asarray(x) - half_count) / n - 1.0) - n


def _wrapped_distance(x, center: float, half_count: int):
    n = 2 * half_count
    d = np.mod(np.asarray(x, dtype=float) - center, n)
    return np.minimum(d, n - d)


@dataclass(frozen=True)
class Mesh1D:
    """Periodic partition of one lattice period into affine/quintic elements.

    ``nodes`` are lattice sites in ascending canonical order; element ``i``
    spans ``[nodes[i], nodes[i] + h_i]`` with the last element wrapping to
    ``nodes[0] + period``.
    """

    nodes: np.ndarray
    kinds: np.ndarray
    period: int

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=int)
        kinds = np.asarray(self.kinds, dtype=int)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "kinds", kinds)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ConfigurationError("mesh needs at least two nodes")
        if np.any(np.diff(nodes) <= 0):
            raise ConfigurationError("mesh nodes must be strictly increasing")
        if kinds.shape != nodes.shape:
            raise ConfigurationError("one element kind per node is required")
        if nodes[-1] - nodes[0] >= self.period:
            raise ConfigurationError("mesh nodes must fit inside one period")

    @property
    def n_elements(self) -> int:
        return self.nodes.size

    @property
    def node_x_ext(self) -> np.ndarray:
        return np.append(self.nodes, self.nodes[0] + self.period).astype(float)

    @property
    def h(self) -> np.ndarray:
        return np.diff(self.node_x_ext)

    @property
    def midpoints(self) -> np.ndarray:
        return self.nodes + 0.5 * self.h

    def is_canonical(self) -> bool:
        return bool(np.all(self.h == 1.0))


def _core_margin(system: LatticeSystem, decomposition, x) -> np.ndarray:
    """Signed distance beyond the atomistic core ((<=0 inside)."""
    margin = getattr(decomposition, "signed_core_margin", None)
    if callable(margin):
        return np.asarray(margin(x))
    d = _wrapped_distance(x, getattr(decomposition, "center", 0), system.half_count)
    return d - decomposition.l_a


def _element_kinds(system: LatticeSystem, nodes: np.ndarray, h: np.ndarray,
                   decomposition) -> np.ndarray:
    if decomposition is None:
        return np.full(nodes.size, QUINTIC, dtype=int)
    mids = nodes + 0.5 * h
    inside = _core_margin(system, decomposition, mids) <= -0.5 * h + 1e-9
    return np.where(inside, AFFINE, QUINTIC).astype(int)


def build_canonical_mesh(system: LatticeSystem, decomposition=None,
                         default_kind: int = QUINTIC) -> Mesh1D:
    """Unit-element mesh on all sites; affine inside the atomistic region.

    With ``decomposition=None`` every element gets ``default_kind``.
    """
    nodes = system.sites()
    h = np.ones(nodes.size)
    if decomposition is None:
        kinds = np.full(nodes.size, default_kind, dtype=int)
    else:
        _check_alignment(decomposition)
        kinds = _element_kinds(system, nodes, h, decomposition)
    return Mesh1D(nodes, kinds, system.n_sites)


def _check_alignment(decomposition):
    for name in ("l_a", "l_b"):
        value = getattr(decomposition, name)
        if int(value) != value:
            raise ConfigurationError(f"{name} must be lattice aligned, got {value}")


def build_coarse_mesh(system: LatticeSystem, decomposition, target_h: int) -> Mesh1D:
    """Representative-atom mesh: unit elements through the atomistic and
    blending regions, elements of size ``about target_h`` in the far field.

    Every far-field arc between fine regions is split into near-equal
    lattice-aligned segments.
    """
    if target_h < 1 or int(target_h) != target_h:
        raise ConfigurationError("target_h must be a positive integer")
    target_h = int(target_h)
    _check_alignment(decomposition)
    sites = system.sites()
    coord = getattr(decomposition, "blend_coordinate", None)
    # two extra unit cells beyond each shell keep the jet closure stencils
    # of the shell-end nodes on mesh nodes
    pad = 2
    if callable(coord):
        t, _, lb = coord(sites)
        fine = sites[(t - 1.0) * lb <= pad + 1e-9]
    else:
        d = _wrapped_distance(sites, getattr(decomposition, "center", 0), system.half_count)
        fine = sites[d <= decomposition.l_a + decomposition.l_b + pad + 1e-9]
    if fine.size == 0:
        raise ConfigurationError("decomposition has no fine region")
    width_c = system.n_sites - (fine.size - 0)
    if width_c <= 0:
        raise ConfigurationError("no continuum region to coarsen")
    if target_h > width_c:
        raise ConfigurationError(
            f"target_h={target_h} exceeds continuum width {width_c}")

    nodes = [np.sort(fine)]
    gaps = np.diff(np.append(nodes[0], nodes[0][0] + system.n_sites))
    for start, gap in zip(np.sort(fine), gaps):
        if gap <= 1:
            continue
        n_seg = max(1, round(gap / target_h))
        sizes = np.full(n_seg, gap // n_seg, dtype=int)
        sizes[: gap - sizes.sum()] += 1
        nodes.append(start + np.cumsum(sizes)[:-1])
    all_nodes = np.unique(_wrap_site(np.concatenate(nodes), system.half_count).astype(int))
    h = np.diff(np.append(all_nodes, all_nodes[0] + system.n_sites))
    kinds = _element_kinds(system, all_nodes, h, decomposition)
    return Mesh1D(all_nodes, kinds, system.n_sites)


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

class QuadratureRule:
    """Gauss-Legendre points and weights on the reference interval [0, 1]."""

    def __init__(self, n: int = 6):
        if n < 1:
            raise ConfigurationError("quadrature order must be positive")
        t, w = np.polynomial.legendre.leggauss(n)
        self.n = n
        self.points = 0.5 * (t + 1.0)
        self.weights = 0.5 * w


def integrate(rule: QuadratureRule, mesh: Mesh1D, integrand) -> float:
    """Integrate a callable over one period, element by element."""
    total = 0.0
    xs = mesh.node_x_ext
    for i in range(mesh.n_elements):
        a, h = xs[i], xs[i + 1] - xs[i]
        total += h * float(np.dot(rule.weights, integrand(a + h * rule.points)))
    return total


# ---------------------------------------------------------------------------
# the mixed finite element space
# ---------------------------------------------------------------------------

@dataclass
class ElementBatch:
    """Elements of equal kind and size, prepared for vectorized assembly."""

    kind: int
    h: float
    elems: np.ndarray          # element indices
    dofmap: np.ndarray         # (n_e, nloc) global DOF columns
    starts: np.ndarray         # left endpoint of every element
    xq: np.ndarray             # (n_e, q) quadrature points, global coords
    wq: np.ndarray             # (q,) weights including the h factor
    basis: dict                # order -> (q, nloc) scaled basis matrix


class MixedFESpace:
    """Global DOF bookkeeping over a :class:`Mesh1D`.

    Value-only nodes live strictly inside the affine region; every node
    touching a quintic element carries (value, d1, d2).  The value DOF at
    site ``pin_site`` is pinned to zero.
    """

    def __init__(self, system: LatticeSystem, mesh: Mesh1D, pin_site: int = 0):
        self.system = system
        self.mesh = mesh
        m = mesh.n_elements
        prev_kind = mesh.kinds[np.arange(m) - 1]  # element left of node i
        self.node_hermite = (mesh.kinds == QUINTIC) | (prev_kind == QUINTIC)

        mult = np.where(self.node_hermite, 3, 1)
        self.node_offset = np.concatenate([[0], np.cumsum(mult)])
        self.n_dof = int(self.node_offset[-1])

        pin_nodes = np.flatnonzero(mesh.nodes == int(_wrap_site(pin_site, system.half_count)))
        if pin_nodes.size != 1:
            raise ConfigurationError(f"pin site {pin_site} is not a mesh node")
        self.pin_node = int(pin_nodes[0])
        self.pin_dof = int(self.node_offset[self.pin_node])
        self.free = np.ones(self.n_dof, dtype=bool)
        self.free[self.pin_dof] = False

        self.value_dofs = self.node_offset[:-1].astype(int)  # value DOF per node
        self._dofmaps = self._build_dofmaps()
        self._batches: dict[int, list[ElementBatch]] = {}
        self._site_matrix = None

    # -- construction helpers ------------------------------------------------

    def _node_dofs(self, i: int) -> list[int]:
        base = int(self.node_offset[i])
        return [base, base + 1, base + 2] if self.node_hermite[i] else [base]

    def _build_dofmaps(self):
        m = self.mesh.n_elements
        maps = []
        for i in range(m):
            j = (i + 1) % m
            left, right = self._node_dofs(i), self._node_dofs(j)
            if self.mesh.kinds[i] == QUINTIC:
                maps.append(left[:3] + right[:3])
            else:
                maps.append([left[0], right[0]])
        return maps

    # -- public structure ----------------------------------------------------

    def element_dofs(self, i: int) -> list[int]:
        return self._dofmaps[i]

    def dof_count_check(self) -> int:
        """Value nodes + 3x Hermite nodes, minus the pin."""
        return int(np.sum(~self.node_hermite) + 3 * np.sum(self.node_hermite) - 1)

    def quad_batches(self, nquad: int = 6) -> list[ElementBatch]:
        if nquad in self._batches:
            return self._batches[nquad]
        rule = QuadratureRule(nquad)
        xs = self.mesh.node_x_ext
        h_all = self.mesh.h
        batches = []
        keys = sorted({(int(k), float(h)) for k, h in zip(self.mesh.kinds, h_all)})
        for kind, h in keys:
            elems = np.flatnonzero((self.mesh.kinds == kind) & (h_all == h))
            dofmap = np.array([self._dofmaps[e] for e in elems], dtype=int)
            starts = xs[elems]
            xq = starts[:, None] + h * rule.points[None, :]
            wq = h * rule.weights
            if kind == QUINTIC:
                basis = {m: element_basis(h, rule.points, m) for m in range(6)}
            else:
                t = rule.points
                basis = {
                    0: np.column_stack([1.0 - t, t]),
                    1: np.column_stack([-np.ones_like(t), np.ones_like(t)]) / h,
                }
            batches.append(ElementBatch(kind, h, elems, dofmap, starts, xq, wq, basis))
        self._batches[nquad] = batches
        return batches

    def site_matrix(self) -> sp.csr_matrix:
        """Sparse evaluation of all lattice sites from the coefficient vector."""
        if self._site_matrix is not None:
            return self._site_matrix
        sys = self.system
        n_sites = sys.n_sites
        rows, cols, vals = [], [], []
        # nodes are sites themselves
        node_sites = sys.site_index(self.mesh.nodes)
        rows.append(node_sites)
        cols.append(self.value_dofs)
        vals.append(np.ones(node_sites.size))
        # interior sites of coarse elements
        xs = self.mesh.node_x_ext
        for i in range(self.mesh.n_elements):
            a, b = xs[i], xs[i + 1]
            h = b - a
            if h == 1.0:
                continue
            if self.mesh.kinds[i] != QUINTIC:
                raise ConfigurationError("coarse elements must be quintic")
            interior = np.arange(int(a) + 1, int(b))
            t = (interior - a) / h
            B = element_basis(h, t, 0)
            dof = np.asarray(self._dofmaps[i], dtype=int)
            rows.append(sys.site_index(interior).repeat(6))
            cols.append(np.tile(dof, interior.size))
            vals.append(B.ravel())
        G = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_sites, self.n_dof))
        self._site_matrix = G.tocsr()
        return self._site_matrix

    def gradient_gram(self) -> sp.csr_matrix:
        """Assemble ``int grad(psi_i) grad(psi_j)`` (H1-seminorm Gram matrix)."""
        rows, cols, vals = [], [], []
        for batch in self.quad_batches(6):
            B1 = batch.basis[1]
            loc = np.einsum("q,qi,qj->ij", batch.wq, B1, B1)
            for dof in batch.dofmap:
                rows.append(np.repeat(dof, dof.size))
                cols.append(np.tile(dof, dof.size))
                vals.append(loc.ravel())
        G = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_dof, self.n_dof))
        return G.tocsr()


class MixedFEFunction:
    """Coefficient vector over a :class:`MixedFESpace` with pointwise evaluation."""

    def __init__(self, space: MixedFESpace, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (space.n_dof,):
            raise ConfigurationError(
                f"expected {space.n_dof} coefficients, got {coeffs.shape}")
        self.space = space
        self.coeffs = coeffs

    @classmethod
    def zeros(cls, space: MixedFESpace) -> "MixedFEFunction":
        return cls(space, np.zeros(space.n_dof))

    def node_values(self) -> np.ndarray:
        return self.coeffs[self.space.value_dofs]

    def site_values(self) -> np.ndarray:
        return self.space.site_matrix() @ self.coeffs

    def __call__(self, x, order: int = 0):
        mesh = self.space.mesh
        scalar = np.ndim(x) == 0
        x = np.atleast_1d(np.asarray(x, dtype=float))
        x0 = mesh.nodes[0]
        xw = np.mod(x - x0, mesh.period) + x0
        xs = mesh.node_x_ext
        elem = np.clip(np.searchsorted(xs, xw, side="right") - 1, 0, mesh.n_elements - 1)
        out = np.empty_like(xw)
        for e in np.unique(elem):
            mask = elem == e
            a, h = xs[e], xs[e + 1] - xs[e]
            t = (xw[mask] - a) / h
            dof = np.asarray(self.space.element_dofs(e), dtype=int)
            if mesh.kinds[e] == QUINTIC:
                out[mask] = element_basis(h, t, order) @ self.coeffs[dof]
            else:
                if order == 0:
                    out[mask] = (1.0 - t) * self.coeffs[dof[0]] + t * self.coeffs[dof[1]]
                elif order == 1:
                    out[mask] = (self.coeffs[dof[1]] - self.coeffs[dof[0]]) / h
                else:
                    out[mask] = 0.0
        return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# interpolation operators
# ---------------------------------------------------------------------------

def _site_values(system: LatticeSystem, u) -> np.ndarray:
    if isinstance(u, LatticeFunction):
        return u.values
    u = np.asarray(u, dtype=float)
    if u.shape != (system.n_sites,):
        raise ConfigurationError("need one value per lattice site")
    return u


def interpolate_P1(u, space: MixedFESpace) -> MixedFEFunction:
    """Continuous piecewise-affine nodal interpolation (all-affine spaces)."""
    if np.any(space.mesh.kinds != AFFINE):
        raise ConfigurationError("P1 interpolation needs an all-affine mesh")
    values = _site_values(space.system, u)
    coeffs = values[space.system.site_index(space.mesh.nodes)]
    return MixedFEFunction(space, coeffs)


def _hermite_arcs(space: MixedFESpace):
    """Hermite node indices grouped into contiguous cyclic arcs.

    Returns ``(arcs, periodic)``; on an all-quintic mesh there is a single
    arc covering every node and ``periodic`` is True.
    """
    herm = space.node_hermite
    m = herm.size
    if herm.all():
        return [np.arange(m)], True
    arcs = []
    idx = np.flatnonzero(herm)
    if idx.size:
        # rotate so that the scan starts just after an affine node
        start = (int(np.flatnonzero(~herm).max()) + 1) % m
        order = (start + np.arange(m)) % m
        current = []
        for i in order:
            if herm[i]:
                current.append(i)
            elif current:
                arcs.append(np.asarray(current, dtype=int))
                current = []
        if current:
            arcs.append(np.asarray(current, dtype=int))
    return arcs, False


# 4th-order centered stencils for the interface jet closure
_JET1_STENCIL = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_JET2_STENCIL = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


def clamped_end_jets(system: LatticeSystem, values: np.ndarray, site: int):
    """Fourth-order finite-difference (slope, curvature) at a lattice site."""
    stencil_sites = system.site_index(site + np.arange(-2, 3))
    window = values[stencil_sites]
    return float(_JET1_STENCIL @ window), float(_JET2_STENCIL @ window)


def interpolate_mixed_Pi(u, space: MixedFESpace) -> MixedFEFunction:
    """Node-exact interpolation into the mixed space.

    Values are matched at every mesh node; on the quintic region the
    derivative DOFs come from a C^4 quintic interpolating spline, periodic
    on an all-quintic mesh.  On a mixed mesh the spline's end jets at the
    atomistic interface are clamped to fourth-order centered differences of
    the site data, which keeps the interpolant accurate to the order of the
    far-field model right up to the interface.
    """
    sys = space.system
    values = _site_values(sys, u)
    coeffs = np.zeros(space.n_dof)
    node_vals = values[sys.site_index(space.mesh.nodes)]
    coeffs[space.value_dofs] = node_vals

    arcs, periodic = _hermite_arcs(space)
    for arc in arcs:
        xs = space.mesh.nodes[arc].astype(float)
        if not periodic:
            wrap = xs < xs[0]
            xs = xs + wrap * space.mesh.period
        ys = node_vals[arc]
        if xs.size < 6:
            raise ConfigurationError("need at least six nodes for quintic interpolation")
        try:
            if periodic:
                xx = np.append(xs, xs[0] + space.mesh.period)
                yy = np.append(ys, ys[0])
                spl = make_interp_spline(xx, yy, k=5, bc_type="periodic")
            else:
                bc_l = clamped_end_jets(sys, values, int(space.mesh.nodes[arc[0]]))
                bc_r = clamped_end_jets(sys, values, int(space.mesh.nodes[arc[-1]]))
                bc = ([(1, bc_l[0]), (2, bc_l[1])], [(1, bc_r[0]), (2, bc_r[1])])
                spl = make_interp_spline(xs, ys, k=5, bc_type=bc)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded by mesh invariants
            raise NumericalError(f"singular spline system: {exc}") from exc
        base = space.node_offset[arc].astype(int)
        coeffs[base + 1] = spl(xs, nu=1)
        coeffs[base + 2] = spl(xs, nu=2)
    return MixedFEFunction(space, coeffs)


def interpolate_coarse_Pi_h(u, coarse_space: MixedFESpace) -> MixedFEFunction:
    """Interpolation matching lattice data only at the representative atoms."""
    return interpolate_mixed_Pi(u, coarse_space)
