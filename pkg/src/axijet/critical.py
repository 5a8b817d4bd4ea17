"""Critical inlet flux scan.

The subsonic margin of a fitted solution is T = max over elements of
|grad psi| / x minus the sonic momentum Pi(lambda_star).  The scan walks
the inlet flux m0 upward while T stays below -delta_margin and the lip
fit keeps converging, then bisects the first violating step down to a
1 percent bracket.  Two exits are possible and both are reported rather
than decided in advance: the margin crosses the threshold while fits
still converge, or the fit itself stops producing a solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

from .errors import AxijetError
from .gas import GasModel, bernoulli_state
from .geometry import Mesh, NozzleWall, GroundWall, build_jet_mesh
from .solver import SolveOptions, element_momentum
from .shooting import fit_lambda, continue_domain


@dataclass
class MarginSample:
    """One probed inlet flux: fitted lambda, margin and status flags."""

    m0: float
    lambda_star: float = math.nan
    T: float = math.nan
    cutoff_active: bool = False
    fit_ok: bool = False
    accepted: bool = False     # fit_ok and T <= -delta_margin
    n_solves: int = 0
    note: str = ""


@dataclass
class MarginCurve:
    """Scan record: samples sorted by m0 plus the terminal bracket."""

    samples: list
    delta_margin: float
    m_bound: float             # inlet flux cap from the wall geometry
    m_cr_estimate: float
    bracket: tuple             # (largest accepted m0, smallest violating m0)
    branch: str                # "margin", "fit_failure" or "no_violation"

    def to_dict(self) -> dict:
        return {
            "delta_margin": self.delta_margin,
            "m_bound": self.m_bound,
            "m_cr_estimate": self.m_cr_estimate,
            "bracket": list(self.bracket),
            "branch": self.branch,
            "samples": [asdict(s) for s in self.samples],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarginCurve":
        return cls(
            samples=[MarginSample(**s) for s in d["samples"]],
            delta_margin=d["delta_margin"],
            m_bound=d["m_bound"],
            m_cr_estimate=d["m_cr_estimate"],
            bracket=tuple(d["bracket"]),
            branch=d["branch"],
        )

    def table(self) -> str:
        """Text table, one sample per row."""
        lines = ["# m lambda_star T cutoff_active fit_ok"]
        for s in self.samples:
            lines.append(
                f"{s.m0:.10g} {s.lambda_star:.10g} {s.T:.10g} "
                f"{int(s.cutoff_active)} {int(s.fit_ok)}")
        return "\n".join(lines) + "\n"


def flux_bound(gas: GasModel, nozzle: NozzleWall, ground: GroundWall) -> float:
    """Upper bound on the inlet flux a subsonic jet can carry through the
    gap between the lip and the ground."""
    g0_b = float(ground.height(nozzle.b))
    return gas.lambda_cr * nozzle.b * abs(1.0 - g0_b)


def margin_at(gas: GasModel, domain, m0: float, *,
              nozzle: NozzleWall | None = None,
              ground: GroundWall | None = None,
              options: SolveOptions | None = None,
              fit_tol: float | None = None,
              lambda_tol: float | None = None,
              bracket: tuple | None = None,
              psi_warm=None, lam_warm=None) -> MarginSample:
    """Fit lambda at one inlet flux and measure the subsonic margin.

    domain is either a built Mesh (one fit, warm-startable through
    psi_warm / lam_warm) or a list of (mu, x_max, h) stages handed to
    continue_domain together with the wall objects.  Fit failures come
    back as fit_ok=False with the reason in note, never as an exception.
    """
    sample, _ = _probe(gas, domain, m0, nozzle=nozzle, ground=ground,
                       options=options, fit_tol=fit_tol,
                       lambda_tol=lambda_tol, bracket=bracket,
                       psi_warm=psi_warm, lam_warm=lam_warm)
    return sample


def _probe(gas, domain, m0, *, nozzle, ground, options, fit_tol,
           lambda_tol, bracket, psi_warm, lam_warm):
    """margin_at plus the (mesh, psi, lambda) triple for warm chaining."""
    try:
        if isinstance(domain, Mesh):
            mesh = domain
            fit = fit_lambda(mesh, gas, m0, fit_tol=fit_tol,
                             lambda_tol=lambda_tol, bracket=bracket,
                             options=options, psi_warm=psi_warm,
                             lam_warm=lam_warm)
        else:
            if nozzle is None or ground is None:
                raise ValueError("staged domain needs nozzle and ground")
            reports, _ = continue_domain(gas, nozzle, ground, m0,
                                         list(domain), fit_tol=fit_tol,
                                         lambda_tol=lambda_tol,
                                         options=options)
            mesh, fit = reports[-1].mesh, reports[-1].fit
    except AxijetError as err:
        return MarginSample(m0=m0, note=f"{type(err).__name__}: {err}"), None

    state = bernoulli_state(gas, fit.lambda_star)
    t = element_momentum(mesh, fit.psi)
    T = float(math.sqrt(max(float(t.max()), 0.0)) - state.Pi)
    cutoff = bool((t > state.t_lo).any())
    fit_ok = bool(fit.solver_converged)
    note = "" if fit_ok else "minimizer stalled at lambda_star"
    sample = MarginSample(m0=m0, lambda_star=fit.lambda_star, T=T,
                          cutoff_active=cutoff, fit_ok=fit_ok,
                          n_solves=fit.n_solves, note=note)
    return sample, (mesh, fit.psi, fit.lambda_star)


def find_critical(gas: GasModel, nozzle: NozzleWall, ground: GroundWall, *,
                  mu: float, x_max: float, h: float,
                  m_start: float = 0.05,
                  m_step0: float | None = None,
                  m_max: float | None = None,
                  delta_margin: float | None = None,
                  rel_width: float = 0.01,
                  max_samples: int = 60,
                  options: SolveOptions | None = None,
                  fit_tol: float | None = None,
                  lambda_tol: float | None = None,
                  mesh_kwargs: dict | None = None) -> MarginCurve:
    """Continuation in the inlet flux up to the loss of the safe margin.

    Advances from m_start while samples are accepted (converged fit and
    T <= -delta_margin), halving the step on a failed advance and
    doubling it, capped, after three straight successes; then bisects the
    violating interval to rel_width relative width.  The estimate is the
    final bracket midpoint and never exceeds the geometric flux bound.

    delta_margin defaults to the sonic momentum at rest over 25, echoing
    the cutoff half-width times four.
    """
    if delta_margin is None:
        delta_margin = 4.0 * bernoulli_state(gas, 0.0).eps_tilde
    if m_step0 is None:
        m_step0 = m_start
    bound = flux_bound(gas, nozzle, ground)
    m_max = bound if m_max is None else min(m_max, bound)
    if m_start > m_max:
        raise ValueError(f"m_start={m_start} above the flux cap {m_max:.6g}")

    mesh = build_jet_mesh(nozzle, ground, mu, x_max, h, m0=m_start,
                          **(mesh_kwargs or {}))

    samples: list[MarginSample] = []
    warm = None   # (psi, lam, m) of the last accepted sample

    def probe(m):
        nonlocal warm
        br = pw = lw = None
        if warm is not None:
            psi_w, lam_w, m_w = warm
            s = m / m_w
            pw, lw = psi_w * s, lam_w * s
            hi = min(1.25 * lw, 0.97 * gas.lambda_cr)
            br = (min(0.8 * lw, 0.5 * hi), hi)
        sample, aux = _probe(gas, mesh, m, nozzle=nozzle, ground=ground,
                             options=options, fit_tol=fit_tol,
                             lambda_tol=lambda_tol, bracket=br,
                             psi_warm=pw, lam_warm=lw)
        if not sample.fit_ok and br is not None:
            # scaled bracket may have missed the sign change; one retry
            # on the default bracket, still warm in the field
            sample, aux = _probe(gas, mesh, m, nozzle=nozzle, ground=ground,
                                 options=options, fit_tol=fit_tol,
                                 lambda_tol=lambda_tol, bracket=None,
                                 psi_warm=pw, lam_warm=lw)
        sample.accepted = bool(sample.fit_ok and sample.T <= -delta_margin)
        if sample.accepted and aux is not None:
            warm = (aux[1], aux[2], m)
        samples.append(sample)
        return sample

    step_cap = 8.0 * m_step0
    first = probe(m_start)
    lo = m_start if first.accepted else 0.0
    hi_sample = None if first.accepted else first
    hi = None if first.accepted else m_start

    if hi is None:
        step = m_step0
        streak = 1
        while len(samples) < max_samples:
            if lo >= m_max * (1.0 - 1e-12):
                return _finish(samples, delta_margin, bound, lo, math.inf,
                               None, "no_violation", m_max)
            m_next = min(lo + step, m_max)
            s = probe(m_next)
            if s.accepted:
                lo = m_next
                streak += 1
                if streak >= 3:
                    step = min(2.0 * step, step_cap)
                    streak = 0
            else:
                hi, hi_sample = m_next, s
                break
        else:
            return _finish(samples, delta_margin, bound, lo, math.inf,
                           None, "no_violation", lo)

    while (hi - lo) > rel_width * hi and len(samples) < max_samples:
        mid = 0.5 * (lo + hi)
        s = probe(mid)
        if s.accepted:
            lo = mid
        else:
            hi, hi_sample = mid, s

    branch = "margin" if hi_sample.fit_ok else "fit_failure"
    return _finish(samples, delta_margin, bound, lo, hi, hi_sample, branch,
                   0.5 * (lo + hi))


def _finish(samples, delta_margin, bound, lo, hi, hi_sample, branch, m_cr):
    samples = sorted(samples, key=lambda s: s.m0)
    return MarginCurve(samples=samples, delta_margin=delta_margin,
                       m_bound=bound, m_cr_estimate=float(m_cr),
                       bracket=(lo, hi), branch=branch)
