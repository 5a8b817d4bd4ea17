"""Critical flux scan: bound arithmetic, record round trip, scan branches."""

import json
import math

import numpy as np
import pytest

from axijet import GasModel
from axijet.critical import (
    MarginCurve,
    MarginSample,
    find_critical,
    flux_bound,
    margin_at,
)
from axijet.geometry import build_jet_mesh, ground_wall, nozzle_wall

GAS = GasModel(A=1.0, gamma=2.0, p_atm=1.0)
NOZ = nozzle_wall("CYLINDER_LIP", a=1.0, b=2.0, c=1.0)
FLAT = ground_wall("FLAT_GROUND")

# deliberately coarse: these tests exercise control flow, not accuracy
MU, X_MAX, H = 2.5, 6.0, 0.2


@pytest.fixture(scope="module")
def tiny_mesh():
    return build_jet_mesh(NOZ, FLAT, mu=MU, x_max=X_MAX, h=H, m0=0.05)


def test_flux_bound_flat():
    assert flux_bound(GAS, NOZ, FLAT) == pytest.approx(
        GAS.lambda_cr * 2.0, rel=1e-15)


def test_flux_bound_inclined():
    gnd = ground_wall("INCLINED_GROUND", theta=0.2)
    gap = abs(1.0 - float(gnd.height(2.0)))
    assert flux_bound(GAS, NOZ, gnd) == pytest.approx(
        GAS.lambda_cr * 2.0 * gap, rel=1e-15)


def test_margin_curve_round_trip():
    curve = MarginCurve(
        samples=[
            MarginSample(m0=0.05, lambda_star=0.03, T=-0.7,
                         cutoff_active=False, fit_ok=True, accepted=True,
                         n_solves=4),
            MarginSample(m0=0.1, lambda_star=0.0, T=0.0,
                         note="BracketError: no sign change"),
        ],
        delta_margin=0.0308, m_bound=2.8284, m_cr_estimate=0.075,
        bracket=(0.05, 0.1), branch="margin")
    back = MarginCurve.from_dict(json.loads(json.dumps(curve.to_dict())))
    assert back == curve
    # failed probes keep their nan placeholders through the round trip
    lone = MarginCurve(samples=[MarginSample(m0=0.2)], delta_margin=0.03,
                       m_bound=2.8, m_cr_estimate=0.1, bracket=(0.0, 0.2),
                       branch="fit_failure")
    again = MarginCurve.from_dict(json.loads(json.dumps(lone.to_dict())))
    assert math.isnan(again.samples[0].lambda_star)
    assert math.isnan(again.samples[0].T)


def test_margin_curve_table_format():
    curve = MarginCurve(
        samples=[MarginSample(m0=0.05, lambda_star=0.03, T=-0.7,
                              cutoff_active=True, fit_ok=True)],
        delta_margin=0.03, m_bound=2.8, m_cr_estimate=0.05,
        bracket=(0.05, math.inf), branch="no_violation")
    txt = curve.table()
    lines = txt.strip().split("\n")
    assert lines[0].startswith("#")
    cols = lines[1].split()
    assert float(cols[0]) == 0.05
    assert float(cols[2]) == -0.7
    assert cols[3] == "1" and cols[4] == "1"


def test_margin_at_single_mesh(tiny_mesh):
    s = margin_at(GAS, tiny_mesh, 0.05, fit_tol=0.1)
    assert s.fit_ok
    assert s.n_solves >= 1
    assert 0.0 < s.lambda_star < GAS.lambda_cr
    # far from critical the whole field is comfortably subsonic
    assert s.T < -0.5
    assert not s.cutoff_active


def test_margin_at_staged_domain():
    s = margin_at(GAS, [(MU, X_MAX, H)], 0.05, nozzle=NOZ, ground=FLAT,
                  fit_tol=0.1)
    assert s.fit_ok
    assert s.T < -0.5


def test_find_critical_no_violation():
    curve = find_critical(GAS, NOZ, FLAT, mu=MU, x_max=X_MAX, h=H,
                          m_start=0.05, m_max=0.08, fit_tol=0.1)
    assert curve.branch == "no_violation"
    assert curve.bracket[0] == pytest.approx(0.08)
    assert math.isinf(curve.bracket[1])
    assert curve.m_cr_estimate == pytest.approx(0.08)
    assert all(s.accepted for s in curve.samples)
    m = [s.m0 for s in curve.samples]
    assert m == sorted(m)


def test_find_critical_immediate_violation():
    # an unreachable margin makes the very first sample violate, so the
    # scan bisects down from m_start with zero as the accepted floor
    curve = find_critical(GAS, NOZ, FLAT, mu=MU, x_max=X_MAX, h=H,
                          m_start=0.05, delta_margin=1.0, rel_width=0.5,
                          max_samples=2, fit_tol=0.1)
    assert curve.branch == "margin"
    assert curve.bracket[0] == 0.0
    assert curve.bracket[1] <= 0.05
    assert not any(s.accepted for s in curve.samples)
    assert all(s.fit_ok for s in curve.samples)


def test_find_critical_rejects_flux_above_cap():
    with pytest.raises(ValueError):
        find_critical(GAS, NOZ, FLAT, mu=MU, x_max=X_MAX, h=H, m_start=3.0)
