"""Surface extraction and diagnostics against synthetic closed forms."""

import math

import numpy as np
import pytest

from axijet import GasModel, bernoulli_state
from axijet.errors import NoCrossingError, NonGraphSurfaceError
from axijet.freeboundary import (
    Surface,
    diagnostics,
    extract_surface,
    flux_sections,
    lip_height,
    mass_flux,
)
from axijet.geometry import build_jet_mesh, build_pipe_mesh, ground_wall, nozzle_wall
from axijet.solver import band_width, solve

GAS = GasModel(A=1.0, gamma=2.0, p_atm=1.0)
M0 = 0.05


@pytest.fixture(scope="module")
def jet_mesh():
    noz = nozzle_wall("CYLINDER_LIP", a=1.0, b=2.0, c=1.0)
    gnd = ground_wall("FLAT_GROUND")
    return build_jet_mesh(noz, gnd, mu=4.0, x_max=8.0, h=0.12, m0=M0)


@pytest.fixture(scope="module")
def fitted(jet_mesh):
    state = bernoulli_state(GAS, 0.0336)
    res = solve(jet_mesh, state, M0)
    assert res.converged
    return state, res


def synthetic_ramp(mesh, m0, k_of_x, clip=False):
    """Column profile linear in y, reaching m0 exactly at height k(x)."""
    x = mesh.nodes[:, 0]
    y = mesh.nodes[:, 1]
    k = k_of_x(np.maximum(x, 1e-9))
    psi = m0 * y / k
    return np.minimum(psi, m0) if clip else psi


def test_extract_surface_recovers_synthetic_height(jet_mesh):
    state = bernoulli_state(GAS, 0.03)
    k_of_x = lambda x: 0.4 + 0.6 / x
    psi = synthetic_ramp(jet_mesh, M0, k_of_x)
    surf = extract_surface(jet_mesh, state, M0, psi, c_chi=0.25)
    # the profile is globally linear per column, so the crossing segment's
    # extension to m0 reproduces k exactly
    k_true = k_of_x(surf.x)
    assert np.abs(surf.k - k_true).max() < 1e-10
    assert np.all(np.diff(surf.cols) == 1)


def test_lip_height_quadratic_exact(jet_mesh):
    b = jet_mesh.b
    k_of_x = lambda x: 0.95 - 0.1 * (x - b) + 0.004 * (x - b) ** 2
    psi = synthetic_ramp(jet_mesh, M0, k_of_x)
    state = bernoulli_state(GAS, 0.03)
    surf = extract_surface(jet_mesh, state, M0, psi, c_chi=0.25)
    assert lip_height(surf, b) == pytest.approx(0.95, abs=1e-9)


def test_extract_surface_rejects_non_graph(jet_mesh):
    state = bernoulli_state(GAS, 0.03)
    psi = synthetic_ramp(jet_mesh, M0, lambda x: 0.5 + 0 * x, clip=True)
    # dent the plateau in one interior column to create a second crossing
    si = len(jet_mesh.stations) - 6
    assert jet_mesh.stations[si] > jet_mesh.b
    ids = jet_mesh.col_nodes[si]
    y = jet_mesh.nodes[ids, 1]
    sel = ids[(y > 0.7) & (y < 0.95)]
    assert sel.size > 0
    psi = psi.copy()
    psi[sel] = 0.2 * M0
    with pytest.raises(NonGraphSurfaceError):
        extract_surface(jet_mesh, state, M0, psi, c_chi=0.25)


def test_extract_surface_no_crossing_when_flooded(jet_mesh):
    state = bernoulli_state(GAS, 0.03)
    # surface above every column top: stream function never reaches m0
    psi = synthetic_ramp(jet_mesh, M0, lambda x: 50.0 + 0 * x)
    with pytest.raises(NoCrossingError):
        extract_surface(jet_mesh, state, M0, psi, c_chi=0.25)


def test_band_threshold_stays_positive(jet_mesh):
    state = bernoulli_state(GAS, 0.5)
    eps = band_width(state, M0, jet_mesh.h, 1.0, jet_mesh.stations[-1])
    assert eps <= 0.3 * M0


def test_pipe_flux_telescopes():
    pipe = build_pipe_mesh(radius=1.0, height=2.0, h=0.1)
    state = bernoulli_state(GAS, 1.0)
    psi = M0 * (pipe.nodes[:, 0] / pipe.stations[-1]) ** 2
    target = 2.0 * math.pi * M0
    for c in (0.5, 1.0 + 0.05 * 0.137, 1.73):
        f = mass_flux(pipe, state, psi, "y", c)
        assert f == pytest.approx(target, rel=1e-13)
    # no radial transport through a vertical cut
    assert abs(mass_flux(pipe, state, psi, "x", 0.6180339)) < 1e-15


def test_flux_on_nonuniform_columns():
    # telescoping holds for arbitrary station spacing, uniform y per column
    from axijet.geometry import Mesh

    rng = np.random.default_rng(11)
    xs = np.concatenate([[0.0], np.cumsum(0.05 + 0.2 * rng.random(12))])
    xs /= xs[-1]
    ny = 9
    yl = np.linspace(0.0, 2.0, ny + 1)
    nodes = np.column_stack([np.repeat(xs, ny + 1),
                             np.tile(yl, len(xs))])
    tris = []
    for i in range(len(xs) - 1):
        for j in range(ny):
            bl = i * (ny + 1) + j
            br = (i + 1) * (ny + 1) + j
            tris.append([bl, br, br + 1])
            tris.append([bl, br + 1, bl + 1])
    none = np.array([], dtype=np.int32)
    mesh = Mesh(
        nodes=nodes, tris=np.array(tris, dtype=np.int32), h=0.25,
        stations=xs,
        col_nodes=[np.arange(i * (ny + 1), (i + 1) * (ny + 1))
                   for i in range(len(xs))],
        node_station=np.repeat(np.arange(len(xs)), ny + 1),
        axis_nodes=none, ground_nodes=none, nozzle_nodes=none,
        inlet_nodes=none, topjet_nodes=none, outflow_nodes=none,
        outflow_edges=np.zeros((0, 2), dtype=np.int32),
        ground=ground_wall("FLAT_GROUND"), b=math.inf,
        x_mu=1.0, mu=2.0, x_max=1.0)
    state = bernoulli_state(GAS, 1.0)
    psi = M0 * nodes[:, 0] ** 2
    f = mass_flux(mesh, state, psi, "y", 1.05)
    assert f == pytest.approx(2.0 * math.pi * M0, rel=1e-13)


def test_diagnostics_on_fitted_field(jet_mesh, fitted):
    state, res = fitted
    surf = extract_surface(jet_mesh, state, M0, res.psi, c_chi=res.c_chi_final)
    d = diagnostics(jet_mesh, state, M0, res.psi, surface=surf, a=1.0)
    assert abs(d["fit_residual"]) < 0.05          # lambda pre-fitted
    assert d["monotone_defect"] <= 1e-6 * M0
    assert d["u_min"] > 0.0
    assert d["subsonic_margin"] < 0.0
    assert not d["cutoff_active"]
    assert d["p_in_window"]
    assert d["flux_error"] < 0.05
    assert d["fb_condition_error"] < 0.15
    assert d["slip_limit_error"] < 0.05
    # surface decays toward the asymptotic layer, never dips below ground
    g0 = jet_mesh.ground.height(surf.x)
    assert (surf.k > g0).all()
    assert surf.k[-1] < surf.k[0]


def test_surface_eps_over_dpsi_sane(jet_mesh, fitted):
    state, res = fitted
    surf = extract_surface(jet_mesh, state, M0, res.psi, c_chi=res.c_chi_final)
    # band stays thin relative to the crossing slope: extension is local
    assert (surf.eps_over_dpsi < 3.0).all()
