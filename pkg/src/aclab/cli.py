"""Command line driver.

Subcommands: ``solve`` (one method, one system, strain profile CSV),
``converge`` (refinement study), ``coarsen`` (coarse-graining study) and
``ghost`` (ghost-force sweep over blend widths).  Every flag can also be
given in a config file of ``key = value`` lines; flags override the file.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .atomistic import solve_atomistic
from .coupling import DomainDecomposition, ghost_force_diagnostic, solve_coupled
from .errors import AclabError
from .harness import (
    ExperimentConfig,
    dump_strain_profile,
    run_convergence_study,
    run_coarsening_study,
    run_ghost_study,
    strain_error,
)

_DEFAULTS = {
    "method": "bqhocf",
    "n": 300,
    "potential": "harmonic",
    "range": "1,2",
    "fscale": 20.0,
    "load": "singular",
    "la": None,
    "lb": None,
    "h_list": "2000,1000,500,250",
    "n_list": "50,100,200,400,800",
    "tol": None,
    "max_iter": 50,
    "out": None,
}


def _parse_int_list(text):
    return tuple(int(tok) for tok in str(text).split(",") if tok.strip())


def _read_config_file(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise AclabError(f"bad config line: {line!r}")
            key, value = (tok.strip() for tok in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _build_parser():
    p = argparse.ArgumentParser(prog="aclab",
                                description="1D atomistic/continuum coupling lab")
    sub = p.add_subparsers(dest="command", required=True)
    for name, doc in (("solve", "solve one method and dump the strain profile"),
                      ("converge", "refinement study over lattice spacings"),
                      ("coarsen", "coarse-graining study over element sizes"),
                      ("ghost", "ghost-force sweep over blend widths")):
        q = sub.add_parser(name, help=doc)
        q.add_argument("--config", help="key=value file; flags override it")
        q.add_argument("--method", help="atomistic|cb|hoc|bqce|bqcf|bqhoce|bqhocf")
        q.add_argument("--n", type=int, help="half-count N (the chain has 2N sites)")
        q.add_argument("--potential", choices=["harmonic", "lj"])
        q.add_argument("--range", help="comma separated hop lengths, e.g. 1,2")
        q.add_argument("--fscale", type=float)
        q.add_argument("--load", choices=["singular", "smooth"])
        q.add_argument("--la", type=int, help="atomistic half-width")
        q.add_argument("--lb", help="blend width; comma list for ghost sweeps")
        q.add_argument("--h-list", dest="h_list", help="coarse element sizes")
        q.add_argument("--n-list", dest="n_list", help="half-counts for converge")
        q.add_argument("--tol", type=float)
        q.add_argument("--max-iter", dest="max_iter", type=int)
        q.add_argument("--out")
    return p


def _settings(args):
    merged = dict(_DEFAULTS)
    if args.config:
        merged.update(_read_config_file(args.config))
    for key in _DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    merged["n"] = int(merged["n"])
    merged["fscale"] = float(merged["fscale"])
    merged["max_iter"] = int(merged["max_iter"])
    if merged["tol"] not in (None, "", "none"):
        merged["tol"] = float(merged["tol"])
    else:
        merged["tol"] = None
    if merged["la"] not in (None, ""):
        merged["la"] = int(merged["la"])
    return merged


def _config_from(settings, methods=None) -> ExperimentConfig:
    lb = settings["lb"]
    lb_single = _parse_int_list(lb)[0] if lb not in (None, "") else None
    return ExperimentConfig(
        methods=methods or (settings["method"],),
        half_counts=_parse_int_list(settings["n_list"]),
        potential={"lj": "lennard_jones"}.get(settings["potential"], settings["potential"]),
        interaction_range=_parse_int_list(settings["range"]),
        f_scale=settings["fscale"],
        load_kind=settings["load"],
        l_a=settings["la"],
        l_b=lb_single,
        tol=settings["tol"],
        max_iter=settings["max_iter"],
        h_list=_parse_int_list(settings["h_list"]),
        out=settings["out"],
    )


def _cmd_solve(settings):
    cfg = _config_from(settings)
    system = cfg.system(settings["n"])
    load = cfg.load()
    dec = cfg.decomposition(system)
    tol = cfg.solve_tol(load)
    u_ref, report = solve_atomistic(system, load, tol, cfg.max_iter)
    solutions = {"atomistic": u_ref}
    method = settings["method"]
    if method != "atomistic":
        u_m = run_one(method, system, dec, load, tol, cfg)
        solutions[method] = u_m
        absolute, relative = strain_error(u_ref, u_m)
        print(f"method={method} N={settings['n']} relative_strain_error={relative:.6e}")
    out = settings["out"] or "strain_profile.csv"
    dump_strain_profile(system, solutions, out, dec)
    print(f"wrote {out} ({report.iterations} reference Newton iterations)")
    return 0


def run_one(method, system, dec, load, tol, cfg):
    from .continuum import solve_cb, solve_hoc

    if method == "cb":
        return solve_cb(system, load, tol, cfg.max_iter)[0]
    if method == "hoc":
        return solve_hoc(system, load, tol, cfg.max_iter)[0]
    return solve_coupled(method, system, dec, load, tol, cfg.max_iter)[0]


def _cmd_converge(settings):
    methods = tuple(tok.strip() for tok in str(settings["method"]).split(",") if tok.strip())
    cfg = _config_from(settings, methods)
    if not cfg.out:
        cfg.out = "convergence.csv"
    records, slopes, failures = run_convergence_study(cfg)
    for method, slope in sorted(slopes.items()):
        print(f"slope {method} = {slope:.3f}")
    for method, msg in sorted(failures.items()):
        print(f"partial results for {method}: {msg}", file=sys.stderr)
    print(f"wrote {cfg.out}")
    return 0 if not failures else 3


def _cmd_coarsen(settings):
    cfg = _config_from(settings)
    cfg.coarse_half_count = settings["n"] if settings["n"] != _DEFAULTS["n"] else 10000
    if settings["la"] is not None:
        cfg.coarse_l_a = int(settings["la"])
    if settings["lb"] not in (None, ""):
        cfg.coarse_l_b = _parse_int_list(settings["lb"])[0]
    if not cfg.out:
        cfg.out = "coarsening.csv"
    records, slope = run_coarsening_study(cfg)
    print(f"slope bqhoce_coarse = {slope:.3f}")
    print(f"wrote {cfg.out}")
    return 0


def _cmd_ghost(settings):
    cfg = _config_from(settings)
    lb_list = _parse_int_list(settings["lb"] or "8,16,32,64")
    half = settings["n"]
    l_a = settings["la"] if settings["la"] is not None else max(cfg.interaction_range)
    rows, slope = run_ghost_study(cfg, half, l_a, lb_list)
    print("l_b,l2_norm,dual_norm")
    for l_b, l2, dual in rows:
        print(f"{l_b},{l2:.6e},{dual:.6e}")
    print(f"slope dual vs l_b = {slope:.3f}")
    if settings["out"]:
        with open(settings["out"], "w") as fh:
            fh.write("l_b,l2_norm,dual_norm\n")
            for l_b, l2, dual in rows:
                fh.write(f"{l_b},{l2:.17g},{dual:.17g}\n")
        print(f"wrote {settings['out']}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        settings = _settings(args)
        handler = {"solve": _cmd_solve, "converge": _cmd_converge,
                   "coarsen": _cmd_coarsen, "ghost": _cmd_ghost}[args.command]
        return handler(settings)
    except AclabError as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
