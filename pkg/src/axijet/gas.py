"""Isentropic gas relations and the truncated kinetic energy density.

Everything in this module is pointwise thermodynamics, no meshes or fields.
The gas obeys p = A rho^gamma.  Along the flow the Bernoulli relation fixes
the density rho as a function of the squared mass velocity t = (rho q)^2:

    t / (2 rho^2) + A gamma / (gamma - 1) rho^(gamma - 1) = B,

where B is set once by the requirement that a free streamline carrying mass
velocity lam sits at atmospheric pressure.  The relation has two roots; we
always take the subsonic branch rho in (rho_cr, rho_max], on which rho is a
strictly decreasing function of t for t below the sonic threshold Pi^2.

The minimization downstream needs the antiderivative

    F(t) = integral_0^t dt' / rho(t'),

which exists in closed form on the exact branch.  Near the sonic threshold
the inversion degenerates, so the density is frozen smoothly over a small
momentum window of width set by eps_tilde ("cutoff"), making F globally
defined, C^1, and convex-linear past the window.  A converged minimizer is
expected to stay strictly below the window; `cutoff_active` diagnostics
downstream check exactly that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.polynomial import Chebyshev

from .errors import NoSubsonicRootError

__all__ = [
    "GasModel",
    "BernoulliState",
    "bernoulli_state",
    "density_from_momentum",
    "density_cutoff",
    "energy_density",
    "jet_energy_scale",
    "pressure_interval",
    "inlet_state",
    "InletState",
]

# degree of the Chebyshev fit of 1/rho over the blend window; the blended
# density is a cubic bounded away from zero there, so this is overkill on
# purpose (interpolation error far below the 1e-12 targets elsewhere)
_CHEB_DEGREE = 40


@dataclass(frozen=True)
class GasModel:
    """Polytropic gas p = A rho^gamma with a fixed atmospheric pressure.

    Parameters
    ----------
    A : float
        Pressure scale in p = A rho^gamma.
    gamma : float
        Adiabatic exponent, must exceed 1.
    p_atm : float
        Ambient pressure on the free surface of the jet.
    """

    A: float = 1.0
    gamma: float = 2.0
    p_atm: float = 1.0

    def __post_init__(self):
        if not (self.A > 0.0):
            raise ValueError(f"A must be positive, got {self.A}")
        if not (self.gamma > 1.0):
            raise ValueError(f"gamma must exceed 1, got {self.gamma}")
        if not (self.p_atm > 0.0):
            raise ValueError(f"p_atm must be positive, got {self.p_atm}")

    @property
    def rho0(self) -> float:
        """Stagnation-pressure-matching density: p(rho0) = p_atm."""
        return (self.p_atm / self.A) ** (1.0 / self.gamma)

    @property
    def lambda_cr(self) -> float:
        """Mass velocity at which the free surface turns exactly sonic."""
        return math.sqrt(self.A * self.gamma * self.rho0 ** (self.gamma + 1.0))

    def pressure(self, rho):
        return self.A * rho ** self.gamma

    def sound_speed(self, rho):
        return np.sqrt(self.A * self.gamma * rho ** (self.gamma - 1.0))


@dataclass(frozen=True, eq=False)
class BernoulliState:
    """Frozen per-lambda state: branch bounds, cutoff window, blend caches.

    Construct through :func:`bernoulli_state`, which fills the derived
    fields consistently.  All momenta below are squared mass velocities.
    """

    gas: GasModel
    lam: float
    B: float
    rho_max: float
    rho_cr: float
    q_cr: float
    Pi: float
    eps_tilde: float
    t_lo: float        # cutoff starts here, exact branch below
    t_hi: float        # density frozen at and above this momentum
    rho_lo: float
    slope_lo: float    # d rho / d t at t_lo, after the monotonicity clamp
    rho_plateau: float
    F_lo: float
    F_hi: float
    _icheb: Chebyshev  # antiderivative of 1/rho_tilde over [t_lo, t_hi]


class InletState(NamedTuple):
    rho_in: float
    p_in: float
    v_in: float


def _branch_constants(gas: GasModel, lam: float):
    rho0 = gas.rho0
    B = lam * lam / (2.0 * rho0 * rho0) \
        + gas.A * gas.gamma * rho0 ** (gas.gamma - 1.0) / (gas.gamma - 1.0)
    ex = 1.0 / (gas.gamma - 1.0)
    rho_max = (B * (gas.gamma - 1.0) / (gas.A * gas.gamma)) ** ex
    rho_cr = (2.0 * B * (gas.gamma - 1.0) / ((gas.gamma + 1.0) * gas.A * gas.gamma)) ** ex
    q_cr = math.sqrt(2.0 * B * (gas.gamma - 1.0) / (gas.gamma + 1.0))
    return B, rho_max, rho_cr, q_cr, rho_cr * q_cr


def _pow(x, p):
    # np.power with float exponents is the hot-loop cost; special-case the
    # small integers that show up for common gamma
    if p == 1.0:
        return x
    if p == 2.0:
        return x * x
    if p == 3.0:
        return x * x * x
    if p == 0.5:
        return np.sqrt(x)
    return x ** p


def _bernoulli_residual(t, rho, A, gamma, B):
    return t / (2.0 * rho * rho) \
        + A * gamma / (gamma - 1.0) * _pow(rho, gamma - 1.0) - B


def _invert(t, A, gamma, B, rho_cr, rho_max, guess=None):
    """Safeguarded Newton for the subsonic root, vectorized over t.

    The residual is strictly increasing in rho on [rho_cr, rho_max] for any
    t < Pi^2, negative at rho_cr and nonnegative at rho_max, so the bracket
    never breaks; Newton steps that leave it fall back to bisection.  An
    optional warm-start guess cuts the iteration count when t changes
    little between calls, as in the minimization loop.
    """
    t = np.asarray(t, dtype=float)
    lo = np.full(t.shape, rho_cr)
    hi = np.full(t.shape, rho_max)
    if guess is None:
        rho = hi.copy()
    else:
        rho = np.clip(np.asarray(guess, dtype=float),
                      rho_cr * (1.0 + 1e-12), rho_max)
    tol = 1e-13 * max(B, 1.0)
    for _ in range(200):
        H = _bernoulli_residual(t, rho, A, gamma, B)
        done = np.abs(H) <= tol
        if done.all():
            break
        pos = H > 0.0
        hi = np.where(pos & ~done, rho, hi)
        lo = np.where(~pos & ~done, rho, lo)
        dH = (A * gamma * _pow(rho, gamma + 1.0) - t) / (rho * rho * rho)
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = rho - H / dH
        bad = ~np.isfinite(cand) | (cand <= lo) | (cand >= hi)
        rho = np.where(done, rho, np.where(bad, 0.5 * (lo + hi), cand))
    return rho


def _drho_dt(t, rho, A, gamma):
    # implicit differentiation of the Bernoulli relation; denominator is
    # (c^2 - q^2) rho^2 > 0 strictly inside the subsonic branch
    return -rho / (2.0 * (A * gamma * _pow(rho, gamma + 1.0) - t))


def _energy_exact(rho, A, gamma, B, rho_max):
    """Closed form of F(t) on the exact branch, via rho = rho(t).

    Obtained by substituting t(rho) from the Bernoulli relation into
    integral dt / rho; checked against quadrature in the tests.
    """
    coef = 4.0 / (gamma - 1.0) + 2.0
    return 4.0 * B * (rho - rho_max) \
        - coef * A * (_pow(rho, gamma) - rho_max ** gamma)


def _energy_with_guess(state: BernoulliState, t, guess=None):
    """Hot-loop energy evaluation: returns (F, F1, rho_tilde) on a flat
    array, warm-startable.  No scalar conveniences, no validation."""
    gas = state.gas
    exact = t <= state.t_lo
    if exact.all():
        r = _invert(t, gas.A, gas.gamma, state.B, state.rho_cr,
                    state.rho_max, guess=guess)
        F = _energy_exact(r, gas.A, gas.gamma, state.B, state.rho_max)
        return F, 1.0 / r, r
    rho = np.empty_like(t)
    F = np.empty_like(t)
    flat = t >= state.t_hi
    blend = ~exact & ~flat
    if exact.any():
        r = _invert(t[exact], gas.A, gas.gamma, state.B, state.rho_cr,
                    state.rho_max,
                    guess=None if guess is None else guess[exact])
        rho[exact] = r
        F[exact] = _energy_exact(r, gas.A, gas.gamma, state.B, state.rho_max)
    if blend.any():
        tb = t[blend]
        rho[blend], _ = _hermite(tb, state.t_lo, state.t_hi, state.rho_lo,
                                 state.slope_lo, state.rho_plateau)
        F[blend] = state.F_lo + (state._icheb(tb) - state._icheb(state.t_lo))
    if flat.any():
        rho[flat] = state.rho_plateau
        F[flat] = state.F_hi + (t[flat] - state.t_hi) / state.rho_plateau
    return F, 1.0 / rho, rho


def bernoulli_state(gas: GasModel, lam: float, eps_tilde: float | None = None,
                    require_subsonic: bool = False) -> BernoulliState:
    """Build the frozen per-lambda state used by every other gas routine.

    Parameters
    ----------
    gas : GasModel
    lam : float
        Mass velocity carried by the free surface, lam >= 0.
    eps_tilde : float, optional
        Half-width scale of the sonic cutoff window.  Defaults to Pi/100.
        Must satisfy 0 < eps_tilde < Pi/8 so the window stays ordered and
        well inside the branch.
    require_subsonic : bool
        When True, reject lam >= lambda_cr outright.
    """
    if lam < 0.0:
        raise ValueError(f"lam must be nonnegative, got {lam}")
    if require_subsonic and lam >= gas.lambda_cr:
        raise NoSubsonicRootError(
            f"lam={lam} is not below lambda_cr={gas.lambda_cr}")
    B, rho_max, rho_cr, q_cr, Pi = _branch_constants(gas, lam)
    if eps_tilde is None:
        eps_tilde = Pi / 100.0
    if not (0.0 < eps_tilde < Pi / 8.0):
        raise ValueError(
            f"eps_tilde must lie in (0, Pi/8) = (0, {Pi / 8.0}), got {eps_tilde}")

    t_lo = (Pi - 2.0 * eps_tilde) ** 2
    t_hi = (Pi - eps_tilde) ** 2
    A, gamma = gas.A, gas.gamma
    rho_lo = float(_invert(t_lo, A, gamma, B, rho_cr, rho_max))
    rho_plateau = float(_invert(t_hi, A, gamma, B, rho_cr, rho_max))
    m_lo = float(_drho_dt(t_lo, rho_lo, A, gamma))

    # Hermite blend (value+slope on the left, value+flat on the right);
    # clamp the left slope so the cubic stays monotone.  Analysis says the
    # clamp never fires for this family, but it is cheap insurance.
    delta = (rho_plateau - rho_lo) / (t_hi - t_lo)
    if delta < 0.0 and m_lo / delta > 3.0:
        m_lo = 3.0 * delta

    F_lo = float(_energy_exact(rho_lo, A, gamma, B, rho_max))

    def _blend_recip(tt):
        r, _ = _hermite(tt, t_lo, t_hi, rho_lo, m_lo, rho_plateau)
        return 1.0 / r

    cheb = Chebyshev.interpolate(_blend_recip, _CHEB_DEGREE, domain=[t_lo, t_hi])
    icheb = cheb.integ()
    F_hi = F_lo + float(icheb(t_hi) - icheb(t_lo))

    return BernoulliState(
        gas=gas, lam=float(lam), B=B, rho_max=rho_max, rho_cr=rho_cr,
        q_cr=q_cr, Pi=Pi, eps_tilde=float(eps_tilde), t_lo=t_lo, t_hi=t_hi,
        rho_lo=rho_lo, slope_lo=m_lo, rho_plateau=rho_plateau,
        F_lo=F_lo, F_hi=F_hi, _icheb=icheb,
    )


def _hermite(t, t_lo, t_hi, rho_lo, m_lo, rho_hi):
    """Cubic Hermite blend of the density over [t_lo, t_hi], with derivative."""
    dt = t_hi - t_lo
    s = (np.asarray(t, dtype=float) - t_lo) / dt
    h00 = (2.0 * s - 3.0) * s * s + 1.0
    h10 = ((s - 2.0) * s + 1.0) * s
    h01 = (3.0 - 2.0 * s) * s * s
    val = h00 * rho_lo + h10 * dt * m_lo + h01 * rho_hi
    d00 = 6.0 * s * (s - 1.0)
    d10 = (3.0 * s - 4.0) * s + 1.0
    dval = (d00 * (rho_lo - rho_hi) / dt + d10 * m_lo)
    return val, dval


def density_from_momentum(state: BernoulliState, t):
    """Exact subsonic density rho(t), no cutoff.

    Raises :class:`NoSubsonicRootError` when any momentum reaches the sonic
    threshold Pi^2, and ValueError on negative momenta.  Scalar in, scalar
    out; arrays are handled elementwise.
    """
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0.0):
        raise ValueError("momentum t must be nonnegative")
    if np.any(arr >= state.Pi ** 2):
        raise NoSubsonicRootError(
            f"momentum {float(np.max(arr))} is not below the sonic "
            f"threshold Pi^2 = {state.Pi ** 2}")
    rho = _invert(arr, state.gas.A, state.gas.gamma, state.B,
                  state.rho_cr, state.rho_max)
    return float(rho) if np.isscalar(t) or arr.ndim == 0 else rho


def _cutoff_with_slope(state: BernoulliState, t):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    rho = np.empty_like(t)
    drho = np.zeros_like(t)
    exact = t <= state.t_lo
    flat = t >= state.t_hi
    blend = ~exact & ~flat
    if exact.any():
        te = t[exact]
        r = _invert(te, state.gas.A, state.gas.gamma, state.B,
                    state.rho_cr, state.rho_max)
        rho[exact] = r
        drho[exact] = _drho_dt(te, r, state.gas.A, state.gas.gamma)
    if blend.any():
        rho[blend], drho[blend] = _hermite(
            t[blend], state.t_lo, state.t_hi,
            state.rho_lo, state.slope_lo, state.rho_plateau)
    if flat.any():
        rho[flat] = state.rho_plateau
    return rho, drho


def density_cutoff(state: BernoulliState, t):
    """Cutoff density rho_tilde(t): exact branch, blended, then frozen.

    Defined for every t >= 0, monotone nonincreasing and C^1.  Agrees with
    :func:`density_from_momentum` for t <= (Pi - 2 eps_tilde)^2.
    """
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0.0):
        raise ValueError("momentum t must be nonnegative")
    rho, _ = _cutoff_with_slope(state, arr)
    return float(rho[0]) if np.isscalar(t) or arr.ndim == 0 else rho


def energy_density(state: BernoulliState, t):
    """Energy density F(t) with its first two derivatives.

    Returns (F, F1, F11) where F1 = dF/dt = 1/rho_tilde(t) and
    F11 = dF1/dt.  On the exact branch F is in closed form; over the blend
    window it is the exactly integrated Chebyshev fit of 1/rho_tilde; past
    the window it continues linearly (frozen density).
    """
    arr = np.asarray(t, dtype=float)
    scalar = np.isscalar(t) or arr.ndim == 0
    arr = np.atleast_1d(arr)
    if np.any(arr < 0.0):
        raise ValueError("momentum t must be nonnegative")
    rho, drho = _cutoff_with_slope(state, arr)
    F1 = 1.0 / rho
    F11 = -drho / (rho * rho)

    F = np.empty_like(arr)
    exact = arr <= state.t_lo
    flat = arr >= state.t_hi
    blend = ~exact & ~flat
    if exact.any():
        F[exact] = _energy_exact(rho[exact], state.gas.A, state.gas.gamma,
                                 state.B, state.rho_max)
    if blend.any():
        F[blend] = state.F_lo + (state._icheb(arr[blend])
                                 - state._icheb(state.t_lo))
    if flat.any():
        F[flat] = state.F_hi + (arr[flat] - state.t_hi) / state.rho_plateau
    if scalar:
        return float(F[0]), float(F1[0]), float(F11[0])
    return F, F1, F11


def jet_energy_scale(state: BernoulliState) -> float:
    """Scale Lambda of the surface energy: Lambda^2 = 2 F1(lam^2) lam^2 - F(lam^2).

    On the exact branch F1(lam^2) = 1/rho0, because the Bernoulli relation
    at atmospheric pressure is satisfied by rho0 identically.
    """
    t = state.lam * state.lam
    F, F1, _ = energy_density(state, t)
    lam2 = 2.0 * F1 * t - F
    # roundoff guard: the scale is provably positive for lam > 0
    return math.sqrt(max(lam2, 0.0))


def pressure_interval(gas: GasModel, M0: float, a: float,
                      eps_tilde: float | None = None):
    """Admissible inlet pressure window (p1, p2) for total mass flux M0.

    p1 corresponds to a stagnant free surface (lam = 0), p2 to the sonic
    limit lam = lambda_cr; any inlet pressure strictly between them selects
    a unique subsonic lam.  Raises :class:`NoSubsonicRootError`, carrying
    the largest admissible flux in ``threshold``, when M0 is too large for
    the lam = 0 branch (which is the binding one).
    """
    if M0 <= 0.0 or a <= 0.0:
        raise ValueError("M0 and a must be positive")
    t = M0 * M0 / (math.pi ** 2 * a ** 4)
    s0 = bernoulli_state(gas, 0.0, eps_tilde)
    if t >= s0.Pi ** 2:
        thr = math.pi * a * a * s0.Pi
        raise NoSubsonicRootError(
            f"total flux M0={M0} admits no subsonic inlet state; "
            f"the threshold is {thr}", threshold=thr)
    s2 = bernoulli_state(gas, gas.lambda_cr, eps_tilde)
    rho1 = density_from_momentum(s0, t)
    rho2 = density_from_momentum(s2, t)
    return gas.pressure(rho1), gas.pressure(rho2)


def inlet_state(state: BernoulliState, m0: float, a: float) -> InletState:
    """Uniform far-upstream pipe state for reduced flux m0 through radius a.

    The reduced flux is the Stokes stream function value on the nozzle
    wall; the total mass flux through the pipe is 2 pi m0.  The velocity is
    axial, negative because the flow moves toward the ground.
    """
    if m0 <= 0.0 or a <= 0.0:
        raise ValueError("m0 and a must be positive")
    t_in = 4.0 * m0 * m0 / a ** 4
    rho_in = density_from_momentum(state, t_in)
    v_in = -2.0 * m0 / (a * a * rho_in)
    return InletState(rho_in=rho_in, p_in=state.gas.pressure(rho_in), v_in=v_in)
