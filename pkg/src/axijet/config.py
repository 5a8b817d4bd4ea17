"""Run configuration: INI sections with typed keys and load-time checks.

The grammar is plain configparser INI.  Every key has a default matching
the reference setup, so an empty file (or no file) is a valid config.
Floats serialize with repr-faithful precision and the whole structure
round-trips load -> dump -> load identically.

Sections and keys:

    [gas]            A, gamma, p_atm
    [walls]          nozzle, ground, a, b, c, theta, w
    [discretization] mu, x_max, h, air_gap, stages
    [solver]         tol, max_iter, c_chi, w_out, deterministic
    [shooting]       fit_tol, lambda_tol, bracket, lam_cont_tol, slip_tol,
                     max_bisect
    [critical]       delta_margin, m_start, m_step0, m_max, rel_width
    [outputs]        directory, formats

stages is a comma list of mu:x_max:h triples; empty means a single stage
taken from (mu, x_max, h).  bracket is "lo,hi" or empty for the built-in
scaling.  Optional floats (fit_tol, lambda_tol, delta_margin, m_max,
m_step0) accept the empty string as "use the module default".
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields

from .errors import ConfigError
from .geometry import NOZZLE_KINDS, GROUND_KINDS

_FORMATS = ("txt", "json")


@dataclass
class RunConfig:
    # gas
    A: float = 1.0
    gamma: float = 2.0
    p_atm: float = 1.0
    # walls
    nozzle: str = "CYLINDER_LIP"
    ground: str = "FLAT_GROUND"
    a: float = 1.0
    b: float = 2.0
    c: float = 1.0
    theta: float = 0.0
    w: float = 1.0
    # discretization
    mu: float = 4.0
    x_max: float = 25.0
    h: float = 0.03
    air_gap: float = 0.4
    stages: tuple = ()          # ((mu, x_max, h), ...) when staged
    # solver
    tol: float = 2e-7
    max_iter: int = 4000
    c_chi: tuple = (1.0, 0.5, 0.25)
    w_out: float = 1.0
    deterministic: bool = False
    # shooting
    fit_tol: float | None = None
    lambda_tol: float | None = None
    bracket: tuple | None = None
    lam_cont_tol: float = 0.01
    slip_tol: float = 0.02
    max_bisect: int = 40
    # critical
    delta_margin: float | None = None
    m_start: float = 0.05
    m_step0: float | None = None
    m_max: float | None = None
    rel_width: float = 0.01
    # outputs
    directory: str = "out"
    formats: tuple = ("txt", "json")


_SECTIONS = {
    "gas": ("A", "gamma", "p_atm"),
    "walls": ("nozzle", "ground", "a", "b", "c", "theta", "w"),
    "discretization": ("mu", "x_max", "h", "air_gap", "stages"),
    "solver": ("tol", "max_iter", "c_chi", "w_out", "deterministic"),
    "shooting": ("fit_tol", "lambda_tol", "bracket", "lam_cont_tol",
                 "slip_tol", "max_bisect"),
    "critical": ("delta_margin", "m_start", "m_step0", "m_max", "rel_width"),
    "outputs": ("directory", "formats"),
}

_FLOATS = {"A", "gamma", "p_atm", "a", "b", "c", "theta", "w", "mu",
           "x_max", "h", "air_gap", "tol", "w_out", "lam_cont_tol",
           "slip_tol", "m_start", "rel_width"}
_OPT_FLOATS = {"fit_tol", "lambda_tol", "delta_margin", "m_step0", "m_max"}
_INTS = {"max_iter", "max_bisect"}
_BOOLS = {"deterministic"}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):      # stages
            return ", ".join(":".join(f"{x:.17g}" for x in t) for t in v)
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return ""
    return str(v)


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _FLOATS:
            return float(raw)
        if key in _OPT_FLOATS:
            return float(raw) if raw else None
        if key in _INTS:
            return int(raw)
        if key in _BOOLS:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if key == "stages":
            if not raw:
                return ()
            out = []
            for part in raw.split(","):
                trip = part.strip().split(":")
                if len(trip) != 3:
                    raise ValueError(f"stage {part.strip()!r} is not mu:x_max:h")
                out.append(tuple(float(x) for x in trip))
            return tuple(out)
        if key == "c_chi":
            vals = tuple(float(x) for x in raw.split(",") if x.strip())
            if not vals:
                raise ValueError("c_chi must list at least one stage")
            return vals
        if key == "bracket":
            if not raw:
                return None
            vals = tuple(float(x) for x in raw.split(","))
            if len(vals) != 2:
                raise ValueError("bracket must be lo,hi")
            return vals
        if key == "formats":
            vals = tuple(x.strip() for x in raw.split(",") if x.strip())
            return vals
        return raw                              # plain strings
    except ValueError as err:
        raise ConfigError(f"key {key}: {err}") from None


def dump_config(cfg: RunConfig) -> str:
    """Serialize to INI text, all keys explicit, stable order."""
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
        lines.append("")
    return "\n".join(lines)


def load_config(text: str | None = None, path: str | None = None) -> RunConfig:
    """Parse INI text (or a file) over the defaults and validate."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str        # keys are case-sensitive (A vs a)
    if path is not None:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
    if text:
        try:
            parser.read_string(text)
        except configparser.Error as err:
            raise ConfigError(f"config parse error: {err}") from None

    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            assert key in known
            setattr(cfg, key, _parse_value(key, raw))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Range checks mirroring the module preconditions; raises ConfigError."""
    def need(cond: bool, msg: str):
        if not cond:
            raise ConfigError(msg)

    need(cfg.gamma > 1.0, f"gamma > 1 required, got {cfg.gamma}")
    need(cfg.A > 0.0, f"A > 0 required, got {cfg.A}")
    need(cfg.p_atm > 0.0, f"p_atm > 0 required, got {cfg.p_atm}")
    need(cfg.nozzle in NOZZLE_KINDS,
         f"nozzle preset {cfg.nozzle!r} not in {NOZZLE_KINDS}")
    need(cfg.ground in GROUND_KINDS,
         f"ground preset {cfg.ground!r} not in {GROUND_KINDS}")
    need(0.0 < cfg.a < cfg.b, f"need 0 < a < b, got a={cfg.a}, b={cfg.b}")
    need(cfg.c > 0.0, f"c > 0 required, got {cfg.c}")
    need(0.0 <= cfg.theta < math.pi / 4,
         f"theta in [0, pi/4) required, got {cfg.theta}")
    need(cfg.w > 0.0, f"w > 0 required, got {cfg.w}")
    need(cfg.mu > 1.0, f"mu > 1 required, got {cfg.mu}")
    need(cfg.h > 0.0, f"h > 0 required, got {cfg.h}")
    need(cfg.x_max > cfg.b + 4.0 * cfg.h,
         f"x_max must clear the lip: {cfg.x_max} <= {cfg.b} + 4h")
    need(cfg.air_gap > 0.0, f"air_gap > 0 required, got {cfg.air_gap}")
    for i, (mu, x_max, h) in enumerate(cfg.stages):
        need(mu > 1.0 and h > 0.0 and x_max > cfg.b + 4.0 * h,
             f"stage {i} out of range: mu={mu}, x_max={x_max}, h={h}")
    for prev, nxt in zip(cfg.stages, cfg.stages[1:]):
        need(nxt[0] >= prev[0] and nxt[1] >= prev[1] and nxt[2] <= prev[2],
             "stages must grow in mu and x_max and not coarsen in h")
    need(cfg.tol > 0.0, f"tol > 0 required, got {cfg.tol}")
    need(cfg.max_iter > 0, f"max_iter > 0 required, got {cfg.max_iter}")
    need(all(0.0 < c <= 4.0 for c in cfg.c_chi),
         f"c_chi entries must lie in (0, 4], got {cfg.c_chi}")
    need(cfg.w_out >= 0.0, f"w_out >= 0 required, got {cfg.w_out}")
    if cfg.fit_tol is not None:
        need(cfg.fit_tol > 0.0, f"fit_tol > 0 required, got {cfg.fit_tol}")
    if cfg.lambda_tol is not None:
        need(cfg.lambda_tol > 0.0,
             f"lambda_tol > 0 required, got {cfg.lambda_tol}")
    if cfg.bracket is not None:
        need(0.0 < cfg.bracket[0] < cfg.bracket[1],
             f"bracket needs 0 < lo < hi, got {cfg.bracket}")
    need(cfg.lam_cont_tol > 0.0, "lam_cont_tol > 0 required")
    need(cfg.slip_tol > 0.0, "slip_tol > 0 required")
    need(cfg.max_bisect > 0, "max_bisect > 0 required")
    if cfg.delta_margin is not None:
        need(cfg.delta_margin > 0.0, "delta_margin > 0 required")
    need(cfg.m_start > 0.0, f"m_start > 0 required, got {cfg.m_start}")
    if cfg.m_step0 is not None:
        need(cfg.m_step0 > 0.0, "m_step0 > 0 required")
    if cfg.m_max is not None:
        need(cfg.m_max >= cfg.m_start, "m_max must reach m_start")
    need(0.0 < cfg.rel_width < 1.0, "rel_width must lie in (0, 1)")
    need(cfg.directory.strip() != "", "outputs directory must be non-empty")
    bad = [f for f in cfg.formats if f not in _FORMATS]
    need(not bad, f"unknown output formats {bad}, expected subset of {_FORMATS}")
    need(len(cfg.formats) > 0, "formats must list at least one of txt,json")
