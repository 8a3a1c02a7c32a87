"""Experiment driver: error norms, convergence and coarsening studies, CSV output.

The reference in every comparison is the full atomistic solve at the same
resolution.  Lattice-valued methods are compared strain-against-strain on
the canonical elements; finite-element methods are compared against the
node-exact interpolant of the reference built on the method's own space, so
the coarsening study measures the interpolant-vs-solution gap that the
fifth-order estimate controls.
"""

from __future__ import annotations

import io
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .atomistic import solve_atomistic
from .continuum import solve_cb, solve_hoc
from .coupling import (
    DomainDecomposition,
    ghost_force_diagnostic,
    solve_coupled,
)
from .errors import AclabError, ConfigurationError
from .fem import (
    QUINTIC,
    MixedFEFunction,
    QuadratureRule,
    build_coarse_mesh,
    interpolate_mixed_Pi,
)
from .lattice import (
    ExternalLoad,
    LatticeFunction,
    LatticeSystem,
    PairPotential,
    bond_strains,
)

__all__ = [
    "ExperimentConfig",
    "ConvergenceRecord",
    "strain_error",
    "error_indicator_hoc",
    "run_convergence_study",
    "run_coarsening_study",
    "dump_strain_profile",
    "fit_slope",
    "write_records",
    "read_records",
    "interface_jump_check",
]

ALL_METHODS = ("atomistic", "cb", "hoc", "bqce", "bqcf", "bqhoce", "bqhocf")


@dataclass
class ExperimentConfig:
    """Parameters shared by the study drivers.

    ``blend_fraction`` sets the default proportional decomposition
    ``l_a = l_b = round(c * 2N)``; explicit ``l_a``/``l_b`` override it.
    """

    methods: tuple = ("bqce", "bqcf", "bqhoce", "bqhocf")
    half_counts: tuple = (50, 100, 200, 400, 800)
    potential: str = "harmonic"
    interaction_range: tuple = (1, 2)
    macro_strain: float = 1.0
    f_scale: float = 20000.0
    load_kind: str = "singular"
    blend_fraction: float = 0.125
    shield_antipode: bool = True
    l_a: int | None = None
    l_b: int | None = None
    tol: float | None = None
    max_iter: int = 50
    nquad: int = 6
    h_list: tuple = (2000, 1000, 500, 250)
    coarse_half_count: int = 10000
    coarse_l_a: int = 100
    coarse_l_b: int = 100
    region: str = "all"
    out: str | None = None

    def system(self, half_count: int) -> LatticeSystem:
        return LatticeSystem(half_count, self.macro_strain,
                             tuple(self.interaction_range),
                             PairPotential.from_name(self.potential))

    def load(self) -> ExternalLoad:
        return ExternalLoad.from_name(self.load_kind, self.f_scale)

    def defect_centers(self, system: LatticeSystem) -> tuple:
        """Atomistic window centers.

        The singular profile is rough at x = 0 and also has a slope jump at
        the periodic boundary x = +-1/2; both points need lattice
        resolution for the far field to stay smooth, so by default a second
        window sits at the antipode.
        """
        if self.load_kind == "singular" and self.shield_antipode:
            return (0, system.half_count)
        return (0,)

    def decomposition(self, system: LatticeSystem) -> DomainDecomposition:
        """Proportional windows: the default is l_a = l_b = round(2N/8) at the
        load singularity; with antipode shielding the second window gets a
        quarter of that (the slope jump there is a much weaker defect)."""
        centers = self.defect_centers(system)
        if self.l_a is not None and self.l_b is not None:
            return DomainDecomposition(system, self.l_a, self.l_b, centers)
        w = max(int(round(self.blend_fraction * system.n_sites)), system.r_cut, 2)
        if len(centers) == 1:
            return DomainDecomposition(system, w, w, centers)
        ws = max(int(round(self.blend_fraction / 4.0 * system.n_sites)), system.r_cut, 2)
        return DomainDecomposition(system, (w, ws), (w, ws), centers)

    def solve_tol(self, load: ExternalLoad) -> float:
        if self.tol is not None:
            return self.tol
        return 1e-11 * (1.0 + abs(load.f_scale))


@dataclass
class ConvergenceRecord:
    method: str
    resolution: float      # eps for refinement studies, h for coarsening
    relative_error: float
    absolute_error: float = float("nan")

    def __post_init__(self):
        if self.relative_error < 0:
            raise ConfigurationError("errors must be nonnegative")


# ---------------------------------------------------------------------------
# error norms
# ---------------------------------------------------------------------------

def _element_region_mask(system, decomposition, mids, region: str):
    if region == "all":
        return np.ones(mids.size, dtype=bool)
    if decomposition is None:
        raise ConfigurationError(f"region '{region}' needs a decomposition")
    labels = decomposition.point_region(mids)
    table = {"atomistic": 0, "blend": 1, "continuum": 2}
    if region not in table:
        raise ConfigurationError(f"unknown region '{region}'")
    mask = labels == table[region]
    if not mask.any():
        raise ConfigurationError(f"region '{region}' contains no elements")
    return mask


def strain_error(u_ref: LatticeFunction, u_m, region: str = "all",
                 decomposition: DomainDecomposition | None = None,
                 nquad: int = 6):
    """L2 norm of the strain mismatch against the atomistic reference.

    Returns ``(absolute, relative)``; the denominator is the reference
    strain norm over the whole period in the comparison representation.
    """
    system = u_ref.system
    if isinstance(u_m, MixedFEFunction) and np.any(u_m.space.mesh.kinds == QUINTIC):
        space = u_m.space
        ref = interpolate_mixed_Pi(u_ref, space)
        diff = ref.coeffs - u_m.coeffs
        mesh = space.mesh
        mids = mesh.midpoints
        mask = _element_region_mask(system, decomposition, mids, region)
        err2 = 0.0
        den2 = 0.0
        for b in space.quad_batches(nquad):
            d1 = diff[b.dofmap] @ b.basis[1].T
            r1 = ref.coeffs[b.dofmap] @ b.basis[1].T
            sel = mask[b.elems]
            err2 += float(np.sum((d1[sel] ** 2) @ b.wq))
            den2 += float(np.sum((r1 ** 2) @ b.wq))
    else:
        values = u_m.values if isinstance(u_m, LatticeFunction) else u_m.node_values()
        e_ref = bond_strains(u_ref.values, 1)
        e_m = bond_strains(np.asarray(values, dtype=float), 1)
        mids = system.sites() + 0.5
        mask = _element_region_mask(system, decomposition, mids, region)
        err2 = float(np.sum((e_ref - e_m)[mask] ** 2))
        den2 = float(np.sum(e_ref ** 2))
    absolute = np.sqrt(err2)
    relative = absolute / np.sqrt(den2) if den2 > 0 else absolute
    return absolute, relative


def error_indicator_hoc(u: MixedFEFunction, load: ExternalLoad | None = None,
                        region_elems=None, nquad: int = 8) -> float:
    """Smoothness indicator controlling the higher-order modeling error.

    Sum of the L2 norms of ``grad^5 u``, ``grad^2 u grad^4 u``,
    ``grad^3 u (grad^2 u)^2``, the mixed ``L4/L8`` product term, and
    ``grad^3 f``; all integrals by per-element quadrature over the quintic
    region (or the supplied element subset).
    """
    space = u.space
    system = space.system
    acc = {k: 0.0 for k in ("d5", "cross24", "cross322", "l4", "l8", "f3")}
    for b in space.quad_batches(nquad):
        if b.kind != QUINTIC:
            continue
        sel = np.ones(b.elems.size, dtype=bool) if region_elems is None \
            else np.isin(b.elems, region_elems)
        if not sel.any():
            continue
        cloc = u.coeffs[b.dofmap[sel]]
        d2 = cloc @ b.basis[2].T
        d3 = cloc @ b.basis[3].T
        d4 = cloc @ b.basis[4].T
        d5 = cloc @ b.basis[5].T
        acc["d5"] += float(np.sum(d5 ** 2 @ b.wq))
        acc["cross24"] += float(np.sum((d2 * d4) ** 2 @ b.wq))
        acc["cross322"] += float(np.sum((d3 * d2 ** 2) ** 2 @ b.wq))
        acc["l4"] += float(np.sum(d3 ** 4 @ b.wq))
        acc["l8"] += float(np.sum(d2 ** 8 @ b.wq))
        if load is not None:
            f3 = np.asarray(load.continuum_d3(system)(b.xq[sel]), dtype=float)
            acc["f3"] += float(np.sum(f3 ** 2 @ b.wq))
    product = np.sqrt(acc["l4"]) * np.sqrt(acc["l8"])
    return (np.sqrt(acc["d5"]) + np.sqrt(acc["cross24"]) + np.sqrt(acc["cross322"])
            + product + np.sqrt(acc["f3"]))


# ---------------------------------------------------------------------------
# slope fitting and CSV records
# ---------------------------------------------------------------------------

def fit_slope(resolutions, errors):
    """Least squares fit of ``log(error)`` against ``log(resolution)``.

    Returns ``(slope, intercept, r2)``.  Nonpositive errors are dropped
    with a warning; everything dropped is an error.
    """
    res = np.asarray(resolutions, dtype=float)
    err = np.asarray(errors, dtype=float)
    keep = err > 0
    if not keep.all():
        warnings.warn(f"excluded {int((~keep).sum())} nonpositive error values")
    if keep.sum() < 2:
        raise ConfigurationError("need at least two positive errors to fit a slope")
    x, y = np.log(res[keep]), np.log(err[keep])
    slope, intercept = np.polyfit(x, y, 1)
    yhat = slope * x + intercept
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def write_records(records, path, slopes=None, comment=None):
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        if slopes:
            for m, s in sorted(slopes.items()):
                fh.write(f"# slope {m} = {s:.17g}\n")
        fh.write("method,resolution,relative_error,absolute_error\n")
        for r in records:
            fh.write(f"{r.method},{r.resolution:.17g},{r.relative_error:.17g},"
                     f"{r.absolute_error:.17g}\n")


def read_records(path):
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("method,"):
                continue
            m, res, rel, ab = line.split(",")
            records.append(ConvergenceRecord(m, float(res), float(rel), float(ab)))
    return records


# ---------------------------------------------------------------------------
# the studies
# ---------------------------------------------------------------------------

def _solve_method(method, system, decomposition, load, tol, max_iter, nquad):
    if method == "atomistic":
        return solve_atomistic(system, load, tol, max_iter)[0]
    if method == "cb":
        return solve_cb(system, load, tol, max_iter, nquad)[0]
    if method == "hoc":
        return solve_hoc(system, load, tol, max_iter, nquad)[0]
    return solve_coupled(method, system, decomposition, load, tol, max_iter, nquad)[0]


def run_convergence_study(config: ExperimentConfig):
    """Refinement study in the lattice spacing; returns (records, slopes).

    Solves the atomistic reference plus every requested method at each
    half-count and records relative strain errors against ``eps = 1/(2N)``.
    A failed solve aborts that method's series and flags partial results.
    """
    if len(config.half_counts) < 3:
        raise ConfigurationError("need at least three resolutions")
    load = config.load()
    records = []
    failures = {}
    for n_half in config.half_counts:
        system = config.system(n_half)
        decomposition = config.decomposition(system)
        tol = config.solve_tol(load)
        u_ref = solve_atomistic(system, load, tol, config.max_iter)[0]
        for method in config.methods:
            if method in failures:
                continue
            try:
                u_m = _solve_method(method, system, decomposition, load, tol,
                                    config.max_iter, config.nquad)
                absolute, relative = strain_error(u_ref, u_m, config.region,
                                                  decomposition)
            except AclabError as exc:
                failures[method] = f"{type(exc).__name__} at N={n_half}: {exc}"
                continue
            records.append(ConvergenceRecord(method, system.eps, relative, absolute))
    slopes = {}
    for method in config.methods:
        pts = [(r.resolution, r.relative_error) for r in records if r.method == method]
        if len(pts) >= 2:
            res, err = zip(*pts)
            try:
                slopes[method] = fit_slope(res, err)[0]
            except ConfigurationError:
                slopes[method] = float("nan")
    if config.out:
        note = "refinement study: resolution column is eps"
        if failures:
            note += "; PARTIAL RESULTS: " + "; ".join(
                f"{m}: {msg}" for m, msg in sorted(failures.items()))
        write_records(records, config.out, slopes, note)
    return records, slopes, failures


def run_coarsening_study(config: ExperimentConfig):
    """Coarse-graining study at a fixed large system; returns (records, slope).

    For every target element size h the energy-based higher-order coupling
    is solved on the representative-atom mesh and compared against the
    coarse interpolant of the atomistic reference over the far field.
    """
    if len(config.h_list) < 3:
        raise ConfigurationError("need at least three element sizes")
    system = config.system(config.coarse_half_count)
    decomposition = DomainDecomposition(system, config.coarse_l_a, config.coarse_l_b,
                                        config.defect_centers(system))
    load = config.load()
    tol = config.solve_tol(load)
    u_ref = solve_atomistic(system, load, tol, config.max_iter)[0]
    records = []
    for h in config.h_list:
        mesh = build_coarse_mesh(system, decomposition, int(h))
        u_h = solve_coupled("bqhoce", system, decomposition, load, tol,
                            config.max_iter, config.nquad, mesh=mesh)[0]
        absolute, relative = strain_error(u_ref, u_h, "continuum", decomposition,
                                          config.nquad)
        records.append(ConvergenceRecord("bqhoce_coarse", float(h), relative, absolute))
    res = [r.resolution for r in records]
    err = [r.relative_error for r in records]
    slope = fit_slope(res, err)[0]
    if config.out:
        write_records(records, config.out, {"bqhoce_coarse": slope},
                      "coarsening study: resolution column is h")
    return records, slope


def run_ghost_study(config: ExperimentConfig, half_count: int, l_a: int, lb_list):
    """Ghost-force sweep over blend widths at fixed system size."""
    system = config.system(half_count)
    rows = []
    for l_b in lb_list:
        dec = DomainDecomposition(system, l_a, int(l_b))
        l2, dual = ghost_force_diagnostic("bqce", system, dec, config.nquad)
        rows.append((int(l_b), l2, dual))
    duals = [r[2] for r in rows]
    slope = fit_slope([r[0] for r in rows], duals)[0] if min(duals) > 0 else 0.0
    return rows, slope


# ---------------------------------------------------------------------------
# strain profiles and the interface comparison
# ---------------------------------------------------------------------------

def _midpoint_strains(system, solution, mids):
    if isinstance(solution, MixedFEFunction):
        return np.asarray(solution(mids, 1), dtype=float)
    e = bond_strains(solution.values, 1)
    # element with left node xi has midpoint xi + 1/2
    order = system.site_index(np.floor(mids).astype(int))
    return e[order]


def dump_strain_profile(system, solutions: dict, path,
                        decomposition: DomainDecomposition | None = None):
    """Write per-element strains: physical midpoint column plus one column
    per solution, sorted by position; interfaces noted in the header."""
    eps = system.eps
    mids_lattice = np.sort(((system.sites() + 0.5 + system.half_count)
                            % system.n_sites) - system.half_count)
    names = list(solutions)
    cols = {name: _midpoint_strains(system, solutions[name], mids_lattice)
            for name in names}
    with open(path, "w") as fh:
        if decomposition is not None:
            ia = eps * decomposition.l_a
            ib = eps * (decomposition.l_a + decomposition.l_b)
            fh.write(f"# interfaces: atomistic |x|<={ia:.17g}, blend up to |x|<={ib:.17g}\n")
        fh.write("x," + ",".join(f"strain_{n}" for n in names) + "\n")
        for i, m in enumerate(mids_lattice):
            row = ",".join(f"{cols[n][i]:.17g}" for n in names)
            fh.write(f"{eps * m:.17g},{row}\n")
    return path


def interface_jump_check(system, decomposition, u_ref, u_bqce, u_bqhoce,
                         margin: int = 2):
    """Compare per-element strain errors of the two energy couplings.

    Returns medians over the interiors of the core and far field, and the
    region label of each method's worst element (0 core, 1 blend, 2 far).
    """
    mids = np.sort(((system.sites() + 0.5 + system.half_count)
                    % system.n_sites) - system.half_count)
    ref = _midpoint_strains(system, u_ref, mids)
    err_e = np.abs(_midpoint_strains(system, u_bqce, mids) - ref)
    err_h = np.abs(_midpoint_strains(system, u_bqhoce, mids) - ref)
    dist = np.abs(mids)
    inner_a = dist <= decomposition.l_a - margin
    inner_c = dist >= decomposition.l_a + decomposition.l_b + margin
    regions = decomposition.point_region(mids)
    return {
        "median_core": (float(np.median(err_e[inner_a])), float(np.median(err_h[inner_a]))),
        "median_far": (float(np.median(err_e[inner_c])), float(np.median(err_h[inner_c]))),
        "argmax_region": (int(regions[np.argmax(err_e)]), int(regions[np.argmax(err_h)])),
    }
