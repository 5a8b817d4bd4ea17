"""Command line front end: solve, fit, critical, verify.

Thin sequential dispatcher over the library modules.  Every run reads an
INI config (all keys optional, see config.py for the grammar), resolves
it against the defaults and embeds the resolved text plus its sha256 in
each JSON document it writes, so an output directory is self-describing.
Nothing here writes timestamps; with solver.deterministic (or the
--deterministic flag) the wall-clock fields are zeroed too and reruns
are byte-identical.

Exit codes: 0 success, 1 verify failures, 2 config error, 3 solver
non-convergence or bisection budget exhausted, 4 bracket without a sign
change, 5 critical scan terminated by fit failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import config as _config
from . import critical as _critical
from . import freeboundary as _fb
from . import gas as _gas
from . import geometry as _geometry
from . import shooting as _shooting
from . import solver as _solver
from .errors import (AxijetError, BracketError, ConfigError,
                     MaxBisectionsError)

__all__ = ["main", "cmd_solve", "cmd_fit", "cmd_critical", "cmd_verify",
           "VERIFY_CHECKS"]

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3
EXIT_BRACKET = 4
EXIT_CRITICAL_FIT = 5


# ---------------------------------------------------------------------------
# shared plumbing

def _provenance(cfg) -> dict:
    text = _config.dump_config(cfg)
    return {
        "config": text,
        "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
    }


def _walls(cfg):
    nozzle = _geometry.nozzle_wall(cfg.nozzle, a=cfg.a, b=cfg.b, c=cfg.c)
    ground = _geometry.ground_wall(cfg.ground, theta=cfg.theta, w=cfg.w)
    return nozzle, ground


def _solve_options(cfg) -> _solver.SolveOptions:
    n = len(cfg.c_chi)
    # the stock multipliers assume the three-stage schedule; for other
    # lengths only the final stage runs at the full tolerance
    if n == 3:
        mult = (10.0, 3.0, 1.0)
        caps = (800, 800, None)
    else:
        mult = (10.0,) * (n - 1) + (1.0,)
        caps = (800,) * (n - 1) + (None,)
    return _solver.SolveOptions(tol=cfg.tol, max_iter=cfg.max_iter,
                                c_chi=cfg.c_chi, stage_tol_mult=mult,
                                stage_max_iter=caps, w_out=cfg.w_out)


def _build_mesh(cfg, m0: float, lam_est: float | None = None):
    nozzle, ground = _walls(cfg)
    mesh = _geometry.build_jet_mesh(nozzle, ground, mu=cfg.mu,
                                    x_max=cfg.x_max, h=cfg.h, m0=m0,
                                    lam_est=lam_est, air_gap=cfg.air_gap)
    return mesh, nozzle, ground


def _write_text(path: Path, text: str) -> None:
    path.write_text(text)


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _field_table(mesh, psi) -> str:
    lines = ["# x y psi"]
    for (x, y), p in zip(mesh.nodes, np.asarray(psi, dtype=float)):
        lines.append(f"{x:.17g} {y:.17g} {p:.17g}")
    return "\n".join(lines) + "\n"


def _surface_table(surface) -> str:
    lines = ["# x k"]
    for x, k in zip(surface.x, surface.k):
        lines.append(f"{x:.17g} {k:.17g}")
    return "\n".join(lines) + "\n"


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def _write_error(out: Path, cfg, err: BaseException) -> None:
    doc = {"error": type(err).__name__, "message": str(err)}
    doc.update(_provenance(cfg))
    _write_json(out / "error.json", doc)


def _exit_code_for(err: AxijetError) -> int:
    if isinstance(err, BracketError):
        return EXIT_BRACKET
    return EXIT_NO_CONVERGENCE


# ---------------------------------------------------------------------------
# commands

def cmd_solve(cfg, lam: float, m0: float, out_dir: str,
              stage_index: int | None = None) -> int:
    """One minimization at fixed momentum parameter; dumps field, free
    surface and diagnostics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        mesh, nozzle, _ = _build_mesh(cfg, m0, lam_est=lam)
        state = _gas.bernoulli_state(_gas.GasModel(cfg.A, cfg.gamma, cfg.p_atm),
                                     lam)
        res = _solver.solve(mesh, state, m0, options=_solve_options(cfg),
                            stage_index=stage_index)
        surface = _fb.extract_surface(mesh, state, m0, res.psi,
                                      c_chi=res.c_chi_final)
        diag = _fb.diagnostics(mesh, state, m0, res.psi, surface=surface,
                               a=nozzle.a)
    except AxijetError as err:
        _write_error(out, cfg, err)
        return _exit_code_for(err)

    _write_text(out / "field.txt", _field_table(mesh, res.psi))
    _write_text(out / "surface.txt", _surface_table(surface))
    doc = {
        "lambda": lam,
        "m0": m0,
        "converged": bool(res.converged),
        "iterations": int(res.iterations),
        "energy": float(res.energy),
        "pg_norm": float(res.pg_norm),
        "diagnostics": _jsonable(diag),
    }
    doc.update(_provenance(cfg))
    _write_json(out / "diagnostics.json", doc)
    if not res.converged:
        _write_error(out, cfg,
                     AxijetError(f"minimizer stalled at pg={res.pg_norm:.3e}"))
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def _fit_doc(fit, deterministic: bool) -> dict:
    return {
        "lambda_star": fit.lambda_star,
        "fit_residual": fit.fit_residual,
        "residual_scale": fit.residual_scale,
        "bracket": list(fit.bracket),
        "bracket_residuals": list(fit.bracket_residuals),
        "converged_by": fit.converged_by,
        "n_solves": fit.n_solves,
        "lambda_over_m0": fit.lambda_over_m0,
        "solver_converged": fit.solver_converged,
        "solve_seconds": 0.0 if deterministic else fit.solve_seconds,
        "trace": [[lam, r] for lam, r in fit.trace],
    }


def cmd_fit(cfg, m0: float, out_dir: str) -> int:
    """Bisect the momentum parameter until the surface meets the lip;
    dumps the fitted field, surface and fit record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gas = _gas.GasModel(cfg.A, cfg.gamma, cfg.p_atm)
    opts = _solve_options(cfg)
    try:
        if cfg.stages:
            nozzle, ground = _walls(cfg)
            reports, insensitive = _shooting.continue_domain(
                gas, nozzle, ground, m0, list(cfg.stages),
                fit_tol=cfg.fit_tol, lambda_tol=cfg.lambda_tol,
                lam_cont_tol=cfg.lam_cont_tol, slip_tol=cfg.slip_tol,
                options=opts, max_bisect=cfg.max_bisect,
                mesh_kwargs={"air_gap": cfg.air_gap})
            fit, mesh = reports[-1].fit, reports[-1].mesh
            stage_rows = [{"mu": r.mu, "x_max": r.x_max, "h": r.h,
                           "lambda_star": r.fit.lambda_star,
                           "slip_limit": r.diag["slip_limit"]}
                          for r in reports]
        else:
            mesh, nozzle, _ = _build_mesh(cfg, m0)
            fit = _shooting.fit_lambda(mesh, gas, m0, fit_tol=cfg.fit_tol,
                                       lambda_tol=cfg.lambda_tol,
                                       bracket=cfg.bracket,
                                       max_bisect=cfg.max_bisect,
                                       options=opts)
            insensitive = None
            stage_rows = []
        state = _gas.bernoulli_state(gas, fit.lambda_star)
        diag = _fb.diagnostics(mesh, state, m0, fit.psi, surface=fit.surface,
                               a=nozzle.a)
    except AxijetError as err:
        _write_error(out, cfg, err)
        return _exit_code_for(err)

    doc = {"m0": m0, "fit": _fit_doc(fit, cfg.deterministic),
           "diagnostics": _jsonable(diag)}
    if stage_rows:
        doc["stages"] = stage_rows
        doc["truncation_insensitive"] = bool(insensitive)
    doc.update(_provenance(cfg))
    _write_json(out / "fit.json", doc)
    _write_text(out / "field.txt", _field_table(mesh, fit.psi))
    _write_text(out / "surface.txt", _surface_table(fit.surface))
    if not fit.solver_converged:
        _write_error(out, cfg, AxijetError(
            "minimizer stalled at the fitted parameter"))
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def cmd_critical(cfg, out_dir: str) -> int:
    """Scan the inlet flux up to the loss of the subsonic margin; dumps
    the sample table and the scan record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gas = _gas.GasModel(cfg.A, cfg.gamma, cfg.p_atm)
    nozzle, ground = _walls(cfg)
    try:
        curve = _critical.find_critical(
            gas, nozzle, ground, mu=cfg.mu, x_max=cfg.x_max, h=cfg.h,
            m_start=cfg.m_start, m_step0=cfg.m_step0, m_max=cfg.m_max,
            delta_margin=cfg.delta_margin, rel_width=cfg.rel_width,
            options=_solve_options(cfg), fit_tol=cfg.fit_tol,
            lambda_tol=cfg.lambda_tol,
            mesh_kwargs={"air_gap": cfg.air_gap})
    except AxijetError as err:
        _write_error(out, cfg, err)
        return _exit_code_for(err)

    _write_text(out / "margin.txt", curve.table())
    doc = curve.to_dict()
    doc.update(_provenance(cfg))
    _write_json(out / "critical.json", doc)
    return EXIT_CRITICAL_FIT if curve.branch == "fit_failure" else EXIT_OK


# ---------------------------------------------------------------------------
# verify

def _check_sonic_identity(cfg):
    gas = _gas.GasModel(cfg.A, cfg.gamma, cfg.p_atm)
    state = _gas.bernoulli_state(gas, gas.lambda_cr)
    err = abs(state.Pi - gas.lambda_cr) / gas.lambda_cr
    return err <= 1e-12, f"|Pi(lambda_cr)-lambda_cr| rel {err:.2e}"


def _check_rest_density(cfg):
    gas = _gas.GasModel(cfg.A, cfg.gamma, cfg.p_atm)
    worst = 0.0
    for lam in (0.25 * gas.lambda_cr, 0.5 * gas.lambda_cr):
        state = _gas.bernoulli_state(gas, lam)
        rho = float(_gas.density_from_momentum(state, lam * lam))
        worst = max(worst, abs(rho - gas.rho0) / gas.rho0)
    return worst <= 1e-10, f"|rho(lam^2)-rho0| rel {worst:.2e}"


def _check_rest_energy(cfg):
    gas = _gas.GasModel(cfg.A, cfg.gamma, cfg.p_atm)
    state = _gas.bernoulli_state(gas, 0.5 * gas.lambda_cr)
    F, _, _ = _gas.energy_density(state, 0.0)
    return abs(float(F)) <= 1e-14, f"|F(0)| {float(F):.2e}"


def _check_cutoff_monotone(cfg):
    gas = _gas.GasModel(cfg.A, cfg.gamma, cfg.p_atm)
    state = _gas.bernoulli_state(gas, 0.5 * gas.lambda_cr)
    t = np.linspace(0.0, 1.2 * state.t_hi, 2001)
    rho = np.asarray(_gas.density_cutoff(state, t), dtype=float)
    rise = float(np.diff(rho).max())
    return rise <= 1e-12, f"max density rise {rise:.2e}"


def _check_lip_height(cfg):
    nozzle, _ = _walls(cfg)
    err = abs(float(nozzle.height(cfg.b)) - 1.0)
    return err <= 1e-12, f"|g(b)-1| {err:.2e}"


def _check_ground_admissible(cfg):
    _, ground = _walls(cfg)
    x = np.linspace(cfg.b, cfg.b + 100.0, 501)
    g0 = np.asarray(ground.height(x), dtype=float)
    slopes = np.diff(g0) / np.diff(x)
    ok = bool((np.diff(slopes) >= -1e-10).all()
              and slopes.max() <= math.tan(ground.theta) + 1e-10)
    return ok, "ground slope monotone up to tan(theta)"


def _check_uniform_pipe(cfg):
    gas = _gas.GasModel(cfg.A, cfg.gamma, cfg.p_atm)
    m0 = 0.05
    mesh = _geometry.build_pipe_mesh(1.0, 2.0, 0.125)
    state = _gas.bernoulli_state(gas, 0.5 * gas.lambda_cr)
    exact = m0 * (mesh.nodes[:, 0] / mesh.stations[-1]) ** 2
    extra = (mesh.outflow_nodes, exact[mesh.outflow_nodes])
    res = _solver.solve(mesh, state, m0,
                        options=_solver.SolveOptions(tol=1e-9),
                        extra_dirichlet=extra)
    err = float(np.abs(res.psi - exact).max()) / m0
    resid = _solver.pde_residual(mesh, state, m0, res.psi,
                                 extra_dirichlet=extra)
    ok = bool(res.converged and err <= 1e-8 and resid <= 1e-10)
    return ok, f"max error {err:.2e} m0, residual {resid:.2e}"


def _check_config_round_trip(cfg):
    text = _config.dump_config(cfg)
    again = _config.dump_config(_config.load_config(text))
    return text == again, "load -> dump -> load stable"


# name -> callable(cfg) -> (ok, detail). Checks run through this table so
# a fault injected into the underlying module functions surfaces under
# the matching name.
VERIFY_CHECKS = (
    ("gas.sonic_identity", _check_sonic_identity),
    ("gas.rest_density", _check_rest_density),
    ("gas.rest_energy_zero", _check_rest_energy),
    ("gas.cutoff_monotone", _check_cutoff_monotone),
    ("geometry.lip_unit_height", _check_lip_height),
    ("geometry.ground_admissible", _check_ground_admissible),
    ("solver.uniform_pipe", _check_uniform_pipe),
    ("config.round_trip", _check_config_round_trip),
)


def cmd_verify(cfg, stream=None) -> int:
    """Run the named invariant checks at desk scale and print a table."""
    stream = stream or sys.stdout
    failures = 0
    for name, check in VERIFY_CHECKS:
        try:
            ok, detail = check(cfg)
        except Exception as err:  # a crashed check is a failed check
            ok, detail = False, f"{type(err).__name__}: {err}"
        failures += not ok
        stream.write(f"{name:<28} {'PASS' if ok else 'FAIL'}  {detail}\n")
    stream.write(f"{len(VERIFY_CHECKS) - failures}/{len(VERIFY_CHECKS)} "
                 "checks passed\n")
    return EXIT_OK if failures == 0 else EXIT_VERIFY_FAIL


# ---------------------------------------------------------------------------
# dispatch

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="axijet",
        description="Axially symmetric compressible impinging jet: "
                    "minimize, fit the lip, scan the inlet flux.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_lambda=False, with_m0=False, with_out=True):
        sp.add_argument("--config", metavar="PATH", default=None,
                        help="INI config; defaults apply when omitted")
        if with_lambda:
            sp.add_argument("--lambda", dest="lam", type=float, required=True,
                            metavar="F", help="momentum parameter")
        if with_m0:
            sp.add_argument("--m0", type=float, default=0.05, metavar="F",
                            help="inlet mass flux scale (default 0.05)")
        if with_out:
            sp.add_argument("--out", metavar="DIR", default=None,
                            help="output directory (default from config)")
        sp.add_argument("--deterministic", action="store_true",
                        help="zero wall-clock fields so reruns are "
                             "byte-identical")

    sp = sub.add_parser("solve", help="minimize at fixed lambda")
    common(sp, with_lambda=True, with_m0=True)
    sp.add_argument("--stage-index", type=int, default=None, metavar="N",
                    help="run a single band stage")
    sp = sub.add_parser("fit", help="fit lambda to the lip")
    common(sp, with_m0=True)
    sp = sub.add_parser("critical", help="scan the inlet flux")
    common(sp)
    sp = sub.add_parser("verify", help="run the invariant checks")
    common(sp, with_out=False)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _config.load_config(path=args.config)
        if args.deterministic:
            cfg.deterministic = True
            _config.validate(cfg)
    except ConfigError as err:
        sys.stderr.write(f"config error: {err}\n")
        return EXIT_CONFIG

    out = getattr(args, "out", None) or cfg.directory
    if args.command == "solve":
        return cmd_solve(cfg, args.lam, args.m0, out,
                         stage_index=args.stage_index)
    if args.command == "fit":
        return cmd_fit(cfg, args.m0, out)
    if args.command == "critical":
        return cmd_critical(cfg, out)
    return cmd_verify(cfg)


if __name__ == "__main__":
    sys.exit(main())
