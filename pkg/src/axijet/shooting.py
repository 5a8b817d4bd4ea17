"""Fit the momentum parameter so the surface leaves the lip continuously.

The residual r(lambda) = k(b+) - 1 is decreasing: a slower jet is thicker
and detaches above the lip, a faster one below.  Bisection on a bracket
with opposite residual signs therefore converges; each solve warm-starts
from the nearest previously solved field, re-annealing the indicator
band only when the parameter moved far.

Domain truncation (pipe height mu, downstream cut x_max) is removed by
continuation: refit on a grown domain, carrying the field over by linear
interpolation, until the fitted parameter and the far-field layer
constant both settle.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import LinearNDInterpolator

from .errors import (
    BracketError,
    MaxBisectionsError,
    NoCrossingError,
    StageDivergenceError,
)
from .freeboundary import Surface, diagnostics, extract_surface, lip_height
from .gas import GasModel, bernoulli_state
from .geometry import (
    GroundWall,
    Mesh,
    NozzleWall,
    build_jet_mesh,
)
from .solver import SolveOptions, default_init, dirichlet_bounds, solve

__all__ = [
    "FitResult",
    "StageReport",
    "lambda_scale",
    "fit_lambda",
    "continue_domain",
]

# re-anneal the full band schedule when the parameter moves more than this
_WARM_REL_STEP = 0.15


def lambda_scale(mesh: Mesh, m0: float) -> float:
    """Momentum parameter at which the asymptotic layer is as thick as the
    lip clearance; the fitted value lands within a small factor of it."""
    g0_b = float(mesh.ground.height(mesh.b))
    return m0 / (mesh.b * (1.0 - g0_b) * mesh.ground.cos_theta)


@dataclass
class FitResult:
    lambda_star: float
    fit_residual: float
    residual_scale: float      # residual half-gap over the final bracket
    bracket: tuple             # final (lo, hi) in lambda
    bracket_residuals: tuple   # residuals at the final bracket ends
    converged_by: str          # "fit_tol" or "lambda_tol"
    n_solves: int
    trace: list = field(default_factory=list)   # (lambda, residual) per solve
    psi: np.ndarray | None = None
    surface: Surface | None = None
    lambda_over_m0: float = math.nan
    solve_seconds: float = 0.0
    solver_converged: bool = True   # minimizer status at lambda_star


def _residual(mesh, gas, m0, lam, psi_warm, lam_warm, options):
    """One solve plus surface read; +inf residual when the surface never
    comes back under the lid (jet overflows a too-small domain)."""
    state = bernoulli_state(gas, lam)
    stage = None
    if psi_warm is not None and lam_warm is not None:
        if abs(lam - lam_warm) <= _WARM_REL_STEP * lam:
            stage = len(options.c_chi) - 1 if options else 2
    opts = options or SolveOptions()
    res = solve(mesh, state, m0, psi0=psi_warm, options=opts,
                stage_index=stage)
    try:
        surface = extract_surface(mesh, state, m0, res.psi,
                                  c_chi=res.c_chi_final)
        r = lip_height(surface, mesh.b) - 1.0
    except NoCrossingError:
        surface = None
        r = math.inf
    return r, res, surface


def fit_lambda(mesh: Mesh, gas: GasModel, m0: float, *,
               fit_tol: float | None = None,
               bracket: tuple | None = None,
               lambda_tol: float | None = None,
               max_bisect: int = 40,
               options: SolveOptions | None = None,
               psi_warm=None, lam_warm=None) -> FitResult:
    """Bisection on the lip residual.

    Stops at the first |r| <= fit_tol (default 2h), or when the bracket
    narrows below lambda_tol (then the best evaluated point wins).  Pass
    fit_tol=None to disable the residual stop and run the bracket down to
    lambda_tol, which measures the residual the mesh can resolve.
    """
    if fit_tol is None and lambda_tol is None:
        fit_tol = 2.0 * mesh.h
    scale = lambda_scale(mesh, m0)
    if bracket is not None:
        lo, hi = bracket
    else:
        # at large m0 the raw 2x scale can leave the subsonic branch
        hi = min(2.0 * scale, 0.95 * gas.lambda_cr)
        lo = min(0.5 * scale, 0.5 * hi)
    if not 0.0 < lo < hi:
        raise ValueError("bracket must satisfy 0 < lo < hi")

    t0 = time.time()
    trace = []
    n = 0

    def run(lam, warm_psi, warm_lam):
        nonlocal n
        r, res, surface = _residual(mesh, gas, m0, lam, warm_psi, warm_lam,
                                    options)
        n += 1
        trace.append((lam, r))
        return r, res, surface

    r_lo, res_lo, surf_lo = run(lo, None, None)
    r_hi, res_hi, surf_hi = run(hi, res_lo.psi, lo)
    if not (r_lo > 0.0 > r_hi):
        raise BracketError(
            f"no sign change on [{lo:.6g}, {hi:.6g}]: "
            f"r(lo)={r_lo:+.4g}, r(hi)={r_hi:+.4g}")

    best = None   # (abs_r, lam, r, psi, surface, solver_ok)
    if math.isfinite(r_lo):
        best = (abs(r_lo), lo, r_lo, res_lo.psi, surf_lo, res_lo.converged)
    if best is None or abs(r_hi) < best[0]:
        best = (abs(r_hi), hi, r_hi, res_hi.psi, surf_hi, res_hi.converged)

    psi_prev, lam_prev = res_hi.psi, hi
    converged_by = None
    for _ in range(max_bisect):
        if fit_tol is not None and best[0] <= fit_tol:
            converged_by = "fit_tol"
            break
        if lambda_tol is not None and (hi - lo) <= lambda_tol:
            converged_by = "lambda_tol"
            break
        mid = 0.5 * (lo + hi)
        r, res, surface = run(mid, psi_prev, lam_prev)
        psi_prev, lam_prev = res.psi, mid
        if math.isfinite(r) and abs(r) < best[0]:
            best = (abs(r), mid, r, res.psi, surface, res.converged)
        if r > 0.0:
            lo, r_lo = mid, r
        else:
            hi, r_hi = mid, r
    else:
        if fit_tol is not None and best[0] <= fit_tol:
            converged_by = "fit_tol"
        elif lambda_tol is not None and (hi - lo) <= lambda_tol:
            converged_by = "lambda_tol"
        else:
            raise MaxBisectionsError(
                f"{max_bisect} bisections: best |r|={best[0]:.4g} "
                f"(fit_tol={fit_tol}), bracket width {hi - lo:.4g} "
                f"(lambda_tol={lambda_tol})")

    _, lam_star, r_star, psi_star, surf_star, solver_ok = best
    state = bernoulli_state(gas, lam_star)
    if lam_star >= state.Pi - 4.0 * state.eps_tilde:
        raise BracketError(
            f"fitted lambda {lam_star:.6g} leaves the subsonic window")
    gap = abs(r_lo - r_hi) if math.isfinite(r_lo) and math.isfinite(r_hi) \
        else math.nan
    return FitResult(
        lambda_star=lam_star,
        fit_residual=r_star,
        residual_scale=0.5 * gap,
        bracket=(lo, hi),
        bracket_residuals=(r_lo, r_hi),
        converged_by=converged_by,
        n_solves=n,
        trace=trace,
        psi=psi_star,
        surface=surf_star,
        lambda_over_m0=lam_star / m0,
        solve_seconds=time.time() - t0,
        solver_converged=bool(solver_ok),
    )


@dataclass
class StageReport:
    mu: float
    x_max: float
    h: float
    fit: FitResult
    mesh: Mesh
    diag: dict


def _carry_field(old_mesh: Mesh, psi_old, new_mesh: Mesh, gas, lam, m0):
    """Interpolate a solved field onto a new mesh; fill the uncovered
    region with the shear profile and clip into the admissible box."""
    interp = LinearNDInterpolator(old_mesh.nodes, psi_old)
    psi = interp(new_mesh.nodes)
    state = bernoulli_state(gas, lam)
    fallback = default_init(new_mesh, state, m0)
    missing = ~np.isfinite(psi)
    psi[missing] = fallback[missing]
    lb, ub = dirichlet_bounds(new_mesh, m0)
    return np.clip(psi, lb, ub)


def continue_domain(gas: GasModel, nozzle: NozzleWall, ground: GroundWall,
                    m0: float, stages, *,
                    fit_tol=None, lambda_tol=None,
                    lam_cont_tol: float = 0.01,
                    slip_tol: float = 0.02,
                    options: SolveOptions | None = None,
                    max_bisect: int = 40,
                    mesh_kwargs: dict | None = None):
    """Refit on a schedule of growing domains (mu, x_max, h) until the
    fitted parameter is truncation-insensitive.

    Returns (reports, converged).  Raises StageDivergenceError when the
    parameter increments grow instead of shrinking.
    """
    reports: list[StageReport] = []
    lam_prev = None
    psi_prev = None
    mesh_prev = None
    deltas = []
    for (mu, x_max, h) in stages:
        lam_est = lam_prev
        mesh = build_jet_mesh(nozzle, ground, mu=mu, x_max=x_max, h=h, m0=m0,
                              lam_est=lam_est, **(mesh_kwargs or {}))
        warm = None
        bracket = None
        if lam_prev is not None:
            warm = _carry_field(mesh_prev, psi_prev, mesh, gas, lam_prev, m0)
            bracket = (0.75 * lam_prev, 1.3 * lam_prev)
        try:
            fit = fit_lambda(mesh, gas, m0, fit_tol=fit_tol,
                             lambda_tol=lambda_tol, max_bisect=max_bisect,
                             options=options, bracket=bracket,
                             psi_warm=warm, lam_warm=lam_prev)
        except BracketError:
            if bracket is None:
                raise
            fit = fit_lambda(mesh, gas, m0, fit_tol=fit_tol,
                             lambda_tol=lambda_tol, max_bisect=max_bisect,
                             options=options, psi_warm=warm,
                             lam_warm=lam_prev)
        state = bernoulli_state(gas, fit.lambda_star)
        diag = diagnostics(mesh, state, m0, fit.psi, surface=fit.surface,
                           a=nozzle.a)
        reports.append(StageReport(mu=mu, x_max=x_max, h=h, fit=fit,
                                   mesh=mesh, diag=diag))
        if lam_prev is not None:
            deltas.append(abs(fit.lambda_star - lam_prev) / fit.lambda_star)
            if len(deltas) >= 2 and deltas[-1] > deltas[-2] > lam_cont_tol:
                raise StageDivergenceError(
                    f"parameter increments grew: {deltas[-2]:.3g} -> "
                    f"{deltas[-1]:.3g}")
        lam_prev = fit.lambda_star
        psi_prev = fit.psi
        mesh_prev = mesh

    converged = False
    if len(reports) >= 2:
        a, b = reports[-2], reports[-1]
        dl = abs(b.fit.lambda_star - a.fit.lambda_star) / b.fit.lambda_star
        ds = abs(b.diag["slip_limit"] - a.diag["slip_limit"]) / \
            abs(b.diag["slip_limit"])
        converged = dl <= lam_cont_tol and ds <= slip_tol
    return reports, converged
