"""Free-surface extraction and physical diagnostics of a solved field.

The surface is read column by column from the nodal stream function: in
each column right of the lip the interpolant crosses the band threshold
m0 - eps(x) exactly once (eps is the indicator band width in stream
function units), and the crossing segment's linear extension to the full
discharge m0 gives the surface height.  That extension removes the
deterministic part of the band offset, leaving the O(h) smoothing error.

The mass flux through a horizontal or vertical cut is an element-wise
line integral of the discrete velocity.  Written with the per-element
radius ratio it telescopes to exactly 2 pi m0 on uniform flow, and its
defect on a jet solution measures how far the discrete field is from a
divergence-free mass flux, independently of the energy minimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NoCrossingError, NonGraphSurfaceError
from .gas import BernoulliState, inlet_state, pressure_interval
from .geometry import Mesh
from .solver import band_width, discretize, element_momentum, element_velocity

__all__ = [
    "Surface",
    "extract_surface",
    "lip_height",
    "mass_flux",
    "flux_sections",
    "diagnostics",
]


@dataclass
class Surface:
    x: np.ndarray          # station positions right of the lip
    k: np.ndarray          # surface height per station
    rows: np.ndarray       # within-column row index below the crossing
    cols: np.ndarray       # station indices into mesh.stations
    eps_over_dpsi: np.ndarray  # band width relative to the crossing slope


def _band_threshold(mesh: Mesh, state: BernoulliState, m0: float,
                    c_chi: float, x):
    return m0 - band_width(state, m0, mesh.h, c_chi, x)


def extract_surface(mesh: Mesh, state: BernoulliState, m0: float, psi,
                    c_chi: float = 0.25) -> Surface:
    """Column-wise surface extraction right of the lip.

    Raises NoCrossingError if a column never reaches the threshold and
    NonGraphSurfaceError when a column crosses more than once, which
    means the level set is not a graph over x there.
    """
    psi = np.asarray(psi, dtype=float)
    b = mesh.b
    xs, ks, rows, cols, rel = [], [], [], [], []
    for si in range(len(mesh.stations)):
        x = mesh.stations[si]
        if x <= b:
            continue
        # the first column shares the lip corner; its spacing is not yet
        # clear of the step, skip anything closer than half a local step
        dx_local = mesh.stations[si] - mesh.stations[si - 1]
        if x - b < 0.5 * dx_local:
            continue
        ids = mesh.col_nodes[si]
        vals = psi[ids]
        thr = _band_threshold(mesh, state, m0, c_chi, x)
        below = vals < thr
        if not below.any():
            raise NoCrossingError(
                f"column x={x:.4f}: stream function never below threshold")
        sign_flips = np.flatnonzero(below[:-1] & ~below[1:])
        if len(sign_flips) == 0:
            raise NoCrossingError(
                f"column x={x:.4f}: no upward crossing of the band threshold")
        if len(sign_flips) > 1:
            raise NonGraphSurfaceError(
                f"column x={x:.4f}: {len(sign_flips)} crossings, "
                "surface is not a graph")
        j = int(sign_flips[0])
        y = mesh.nodes[ids, 1]
        dpsi = vals[j + 1] - vals[j]
        if dpsi <= 0:
            raise NonGraphSurfaceError(
                f"column x={x:.4f}: non-monotone crossing segment")
        # extend the crossing segment's line to the full discharge m0;
        # this cancels the deterministic band offset eps
        k = y[j] + (m0 - vals[j]) * (y[j + 1] - y[j]) / dpsi
        xs.append(x)
        ks.append(k)
        rows.append(j)
        cols.append(si)
        rel.append((m0 - thr) / dpsi)
    if len(xs) < 3:
        raise NoCrossingError("fewer than three surface columns; domain too short")
    return Surface(x=np.array(xs), k=np.array(ks),
                   rows=np.array(rows, dtype=int),
                   cols=np.array(cols, dtype=int),
                   eps_over_dpsi=np.array(rel))


def lip_height(surface: Surface, b: float) -> float:
    """Surface height extrapolated to the lip station from the first
    three samples, quadratic in (x - b)."""
    if len(surface.x) < 3:
        raise NoCrossingError("need at least three surface samples")
    u = surface.x[:3] - b
    coeffs = np.polyfit(u, surface.k[:3], 2)
    return float(coeffs[-1])


def _nudge_off_nodes(values: np.ndarray, c: float, h: float) -> float:
    for _ in range(8):
        if np.abs(values - c).min() > 1e-9 * max(1.0, abs(c)):
            return c
        c = c + 1.7e-4 * h
    return c


def mass_flux(mesh: Mesh, state: BernoulliState, psi, cut: str, c: float) -> float:
    """Mass flux through the line y=c (cut="y") or x=c (cut="x").

    Element-wise exact integral of the discrete mass flux over the cut:
    rho drops out against the Bernoulli density in the stream function
    derivative, leaving the radius ratio x/x_tilde per element.  The sign
    convention makes the flux of the downward pipe flow positive.
    """
    if cut not in ("y", "x"):
        raise ValueError("cut must be 'y' or 'x'")
    disc = discretize(mesh)
    psi = np.asarray(psi, dtype=float)
    xy = mesh.nodes[mesh.tris]            # (T, 3, 2)
    coord = xy[:, :, 1] if cut == "y" else xy[:, :, 0]
    other = xy[:, :, 0] if cut == "y" else xy[:, :, 1]
    c = _nudge_off_nodes(np.unique(coord), c, mesh.h)

    lo = coord.min(axis=1)
    hi = coord.max(axis=1)
    hit = (lo < c) & (hi > c)
    if not hit.any():
        return 0.0
    idx = np.flatnonzero(hit)
    cc = coord[idx]
    oo = other[idx]
    # both crossing points per element, per-edge interpolation
    pts = np.full((len(idx), 2), np.nan)
    count = np.zeros(len(idx), dtype=int)
    for e0, e1 in ((0, 1), (1, 2), (2, 0)):
        a = cc[:, e0] - c
        bb = cc[:, e1] - c
        crossed = (a * bb) < 0.0
        denom = np.where(crossed, a - bb, 1.0)
        w = a / denom
        xc = oo[:, e0] + w * (oo[:, e1] - oo[:, e0])
        for m in np.flatnonzero(crossed):
            pts[m, count[m]] = xc[m]
            count[m] += 1
    if (count != 2).any():
        raise RuntimeError("degenerate cut after nudge; mesh line hit")
    seg_lo = pts.min(axis=1)
    seg_hi = pts.max(axis=1)
    length = seg_hi - seg_lo
    mid = 0.5 * (seg_lo + seg_hi)

    pt = psi[mesh.tris[idx]]
    gx = (pt * disc.bc[idx]).sum(axis=1) * disc.inv2a[idx]
    gy = (pt * disc.cc[idx]).sum(axis=1) * disc.inv2a[idx]
    if cut == "y":
        # downward mass rate: integrand (x/x_tilde) dpsi/dx over the span
        contrib = (mid / disc.x_tilde[idx]) * gx * length
    else:
        contrib = (c / disc.x_tilde[idx]) * gy * length
    return float(2.0 * math.pi * contrib.sum())


def flux_sections(mesh: Mesh, state: BernoulliState, m0: float, psi):
    """Fluxes through two pipe heights and one downstream vertical cut,
    with their worst relative deviation from the total discharge."""
    target = 2.0 * math.pi * m0
    cuts = [("y", 0.5 * mesh.mu), ("y", 0.25 * mesh.mu), ("x", 0.8 * mesh.x_max)]
    out = {}
    worst = 0.0
    for cut, c in cuts:
        f = mass_flux(mesh, state, psi, cut, c)
        out[f"flux_{cut}_{c:.3g}"] = f
        worst = max(worst, abs(f - target) / target)
    out["flux_error"] = worst
    return out


def _surface_condition_error(mesh: Mesh, state: BernoulliState, surface: Surface,
                             t_elem, skip: int = 2) -> float:
    """Worst relative defect of |grad psi| / x = lambda one cell row below
    the surface, skipping columns next to the lip corner and the outflow.

    The crossing cell itself is contaminated by the indicator band, so the
    evaluation uses the two triangles of the row beneath it, identified by
    their node sets.  The per-triangle P1 gradients alternate around the
    true gradient by O(h); their cell average is the recovered gradient at
    the quad centre, so the sample speed is the mean of the pair.
    """
    s = np.sqrt(np.maximum(t_elem, 0.0))
    lam = state.lam
    worst = 0.0
    end = len(surface.cols) - skip
    for si, j in zip(surface.cols[skip:end], surface.rows[skip:end]):
        if j < 1:
            continue
        left = mesh.col_nodes[si - 1]
        right = mesh.col_nodes[si]
        if j >= len(left):
            continue
        cell = {int(left[j - 1]), int(left[j]), int(right[j - 1]), int(right[j])}
        sel = np.isin(mesh.tris, list(cell)).all(axis=1)
        if not sel.any():
            continue
        err = abs(s[sel].mean() - lam) / lam
        worst = max(worst, float(err))
    return worst


def _slip_limit(surface: Surface, mesh: Mesh, lo: float = 0.5, hi: float = 0.9):
    """Fit c0 + c1/x to x (k - g0) over mid-far stations; c0 estimates the
    far-field layer constant m0 / (lambda cos(theta))."""
    x = surface.x
    g0 = np.asarray(mesh.ground.height(x), dtype=float)
    win = (x >= lo * mesh.x_max) & (x <= hi * mesh.x_max)
    if win.sum() < 4:
        raise ValueError("too few stations in the slip fit window")
    u = x[win]
    v = u * (surface.k[win] - g0[win])
    Amat = np.column_stack([np.ones(u.size), 1.0 / u])
    sol, *_ = np.linalg.lstsq(Amat, v, rcond=None)
    return float(sol[0]), float(sol[1])


def diagnostics(mesh: Mesh, state: BernoulliState, m0: float, psi,
                surface: Surface | None = None, a: float | None = None) -> dict:
    """Physical invariants of a solved field, flat dict of floats/bools."""
    psi = np.asarray(psi, dtype=float)
    disc = discretize(mesh)
    t = element_momentum(mesh, psi)
    out: dict = {}

    if surface is not None:
        out["k_lip"] = lip_height(surface, mesh.b)
        out["fit_residual"] = out["k_lip"] - 1.0
        out["fb_condition_error"] = _surface_condition_error(mesh, state, surface, t)
        c0, c1 = _slip_limit(surface, mesh)
        out["slip_limit"] = c0
        out["slip_curvature"] = c1
        target = m0 / (state.lam * mesh.ground.cos_theta)
        out["slip_limit_error"] = abs(c0 - target) / target

    s_max = float(np.sqrt(t.max()))
    out["subsonic_margin"] = s_max - state.Pi
    out["cutoff_active"] = bool((t > state.t_lo).any())

    u, _v = element_velocity(mesh, state, psi)
    # cells touching the plateau straddle the smoothed surface and are
    # not flow interior; their velocity is a band artifact
    surface_cell = psi[mesh.tris].max(axis=1) >= m0 * (1.0 - 1e-9)
    off_axis = disc.x_cent > 0.5 * (mesh.b if np.isfinite(mesh.b)
                                    else mesh.stations[-1])
    sel = off_axis & ~surface_cell
    out["u_min"] = float(u[sel].min()) if sel.any() else math.nan

    defect = 0.0
    for ids in mesh.col_nodes:
        vals = psi[ids]
        defect = max(defect, float(np.maximum(vals[:-1] - vals[1:], 0.0).max()))
    out["monotone_defect"] = defect

    if a is not None:
        inlet = inlet_state(state, m0, a)
        p1, p2 = pressure_interval(state.gas, 2.0 * math.pi * m0, a,
                                   eps_tilde=state.eps_tilde)
        out["p_in"] = inlet.p_in
        out["p_in_window"] = bool(p1 < inlet.p_in < p2)
        out["p1"] = p1
        out["p2"] = p2

    # decay of the bend influence: compare against the straight-pipe
    # profile on the upper quarter of the pipe section
    ups = (mesh.nodes[:, 1] >= 0.75 * mesh.mu) & \
          (mesh.nodes[:, 0] <= mesh.x_mu + 1e-12)
    if ups.any():
        ref = m0 * (mesh.nodes[ups, 0] / mesh.x_mu) ** 2
        out["upstream_profile_error"] = float(
            np.abs(psi[ups] - ref).max() / m0)

    out.update(flux_sections(mesh, state, m0, psi))
    return out
