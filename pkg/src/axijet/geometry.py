"""Wall shapes and graded triangulations of the truncated flow domain.

The meridian domain is bounded by the symmetry axis x = 0, the ground
y = g0(x), the nozzle wall y = g(x) coming down to the lip at (b, 1), a
horizontal inlet cut at height mu inside the pipe, an artificial lid a
little above the expected jet for x > b, and an outflow cut at x = x_max.

Meshes are column structured: a list of x stations, one shared vertical
node ladder per station, quad strips between neighbors split along the
"/" diagonal.  Two blocks: the low block between the ground and the
interface curve (nozzle wall clipped at mu, continued past the lip at
fixed height above the ground), and the high block between the interface
and the lid for x > b.  Column structure is what later makes uniform pipe
flow an exact discrete minimizer, so nodes in one column share their x
coordinate bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MeshQualityError

__all__ = [
    "NozzleWall",
    "GroundWall",
    "nozzle_wall",
    "ground_wall",
    "Mesh",
    "build_jet_mesh",
    "build_pipe_mesh",
]

NOZZLE_KINDS = ("CYLINDER_LIP",)
GROUND_KINDS = ("FLAT_GROUND", "INCLINED_GROUND")


@dataclass(frozen=True)
class NozzleWall:
    """Nozzle wall y = g(x) on (a, b], hyperbolic family with lip g(b) = 1.

    g(x) = 1 + c / (x - a) - c / (b - a), strictly decreasing, blowing up
    at the inner radius a.  The lip sits at (b, 1) for every member.
    """

    kind: str
    a: float
    b: float
    c: float

    def height(self, x):
        return 1.0 + self.c / (np.asarray(x) - self.a) - self.c / (self.b - self.a)

    def slope(self, x):
        return -self.c / (np.asarray(x) - self.a) ** 2

    def radius_at(self, y):
        """Inverse wall curve: pipe radius at height y >= 1."""
        return self.a + self.c / (np.asarray(y) - 1.0 + self.c / (self.b - self.a))


@dataclass(frozen=True)
class GroundWall:
    """Ground y = g0(x): flat, or an inclined asymptote smoothed at the axis.

    The inclined family g0 = tan(theta) (sqrt(x^2 + w^2) - w) starts flat
    at the axis (slope zero, curvature positive) and approaches slope
    tan(theta) far out, so the jet eventually runs along a straight
    incline while the axisymmetric stagnation point stays regular.
    """

    kind: str
    theta: float
    w: float

    def height(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "FLAT_GROUND":
            return np.zeros_like(x)
        return math.tan(self.theta) * (np.hypot(x, self.w) - self.w)

    def slope(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "FLAT_GROUND":
            return np.zeros_like(x)
        return math.tan(self.theta) * x / np.hypot(x, self.w)

    @property
    def cos_theta(self) -> float:
        return math.cos(self.theta)

    @property
    def sin_theta(self) -> float:
        return math.sin(self.theta)


def nozzle_wall(kind: str = "CYLINDER_LIP", a: float = 1.0, b: float = 2.0,
                c: float = 1.0) -> NozzleWall:
    if kind not in NOZZLE_KINDS:
        raise ValueError(f"unknown nozzle kind {kind!r}, expected one of {NOZZLE_KINDS}")
    if not (0.0 < a < b):
        raise ValueError(f"need 0 < a < b, got a={a}, b={b}")
    if c <= 0.0:
        raise ValueError(f"need c > 0, got {c}")
    return NozzleWall(kind=kind, a=a, b=b, c=c)


def ground_wall(kind: str = "FLAT_GROUND", theta: float = 0.0,
                w: float = 1.0) -> GroundWall:
    if kind not in GROUND_KINDS:
        raise ValueError(f"unknown ground kind {kind!r}, expected one of {GROUND_KINDS}")
    if kind == "FLAT_GROUND":
        theta = 0.0
    if not (0.0 <= theta < math.pi / 4):
        raise ValueError(f"theta must lie in [0, pi/4), got {theta}")
    if w <= 0.0:
        raise ValueError(f"need w > 0, got {w}")
    return GroundWall(kind=kind, theta=theta, w=w)


@dataclass(eq=False)
class Mesh:
    """Column-structured triangulation plus boundary bookkeeping.

    col_nodes[i] lists the node ids of station i bottom to top (low block
    ladder, then the high block ladder above the shared interface node
    where present).  Tag arrays hold node ids; outflow_edges holds node
    id pairs of the outflow cut for boundary line integrals.
    """

    nodes: np.ndarray
    tris: np.ndarray
    h: float
    stations: np.ndarray
    col_nodes: list
    node_station: np.ndarray
    axis_nodes: np.ndarray
    ground_nodes: np.ndarray
    nozzle_nodes: np.ndarray
    inlet_nodes: np.ndarray
    topjet_nodes: np.ndarray
    outflow_nodes: np.ndarray
    outflow_edges: np.ndarray
    ground: GroundWall
    b: float
    x_mu: float
    mu: float
    x_max: float
    quality: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_tris(self) -> int:
        return self.tris.shape[0]

    def ground_height(self, x):
        return self.ground.height(x)


def _march_stations(x0, x1, step_fn):
    """March left to right with local steps, then rescale to land on x1."""
    xs = [x0]
    x = x0
    while x < x1:
        x = x + step_fn(x)
        xs.append(x)
    xs = np.asarray(xs)
    if len(xs) < 2:
        return np.array([x0, x1])
    # proportional rescale of the increments so the last point is exact
    inc = np.diff(xs)
    inc *= (x1 - x0) / inc.sum()
    out = x0 + np.concatenate(([0.0], np.cumsum(inc)))
    out[-1] = x1
    return out


def _jet_stations(nozzle: NozzleWall, mu: float, x_max: float, h: float):
    """Station list: uniform in the pipe, wall-slope graded along the
    nozzle, geometric growth downstream of the lip."""
    x_mu = float(nozzle.radius_at(mu))
    b = nozzle.b

    n_a = max(2, int(math.ceil(x_mu / (2.0 * h))))
    seg_a = np.linspace(0.0, x_mu, n_a + 1)

    def wall_step(x):
        s = abs(float(nozzle.slope(max(x, x_mu))))
        return min(max(2.4 * h / max(s, 1e-12), h / 3.0), h)

    seg_b = _march_stations(x_mu, b, wall_step)

    # downstream: grow from h by 6 percent per step, capped at 6h
    inc = []
    d = h
    total = 0.0
    while total < x_max - b:
        inc.append(d)
        total += d
        d = min(d * 1.06, 6.0 * h)
    inc = np.asarray(inc)
    inc *= (x_max - b) / inc.sum()
    seg_c = b + np.concatenate(([0.0], np.cumsum(inc)))
    seg_c[-1] = x_max

    stations = np.concatenate([seg_a, seg_b[1:], seg_c[1:]])
    i_mu = n_a
    i_b = n_a + len(seg_b) - 1
    assert stations[i_mu] == x_mu and stations[i_b] == b
    return stations, i_mu, i_b, x_mu


def _stretch_first_frac(sigma, n):
    """First-interval fraction of the exponential ladder, (e^(s/n)-1)/(e^s-1)."""
    return np.expm1(sigma / n) / np.expm1(sigma)


def _solve_sigma(s1_frac, n):
    """Per-column stretch exponents from first-spacing fractions, by bisection.

    Columns whose uniform spacing already meets the target get sigma = 0.
    """
    s1_frac = np.asarray(s1_frac, dtype=float)
    sigma = np.zeros_like(s1_frac)
    need = s1_frac < 1.0 / n - 1e-14
    if not need.any():
        return sigma
    lo = np.full(need.sum(), 1e-12)
    hi = np.full(need.sum(), 60.0)
    tgt = s1_frac[need]
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        too_coarse = _stretch_first_frac(mid, n) > tgt
        lo = np.where(too_coarse, mid, lo)
        hi = np.where(too_coarse, hi, mid)
    sigma[need] = 0.5 * (lo + hi)
    return sigma


def _ladder_fracs(sigma, n):
    """Node fractions of one ladder: uniform when sigma = 0, else exponential."""
    u = np.arange(n + 1) / n
    if sigma < 1e-12:
        return u
    return np.expm1(sigma * u) / np.expm1(sigma)


def _pick_n_low(heights, s1, caps, q_max=1.5, n_max=3000):
    """Smallest shared ladder size meeting first-spacing and cap targets."""
    heights = np.asarray(heights, float)
    s1_frac = np.minimum(s1 / heights, 1.0)
    n = max(4, int(math.ceil((heights / caps).max())))
    while n <= n_max:
        sigma = _solve_sigma(s1_frac, n)
        growth_ok = sigma <= n * math.log(q_max) + 1e-12
        stretched = sigma > 1e-12
        den = np.where(stretched, np.expm1(sigma), 1.0)
        last = np.where(
            stretched,
            heights * np.exp(sigma) * (-np.expm1(-sigma / n)) / den,
            heights / n)
        if growth_ok.all() and (last <= caps * (1.0 + 1e-9)).all():
            return n, sigma
        n = max(n + 4, int(n * 1.08))
    raise MeshQualityError("no ladder size satisfies the vertical grading targets")


def _tri_quality(nodes, tris):
    p = nodes[tris]
    e0 = p[:, 1] - p[:, 0]
    e1 = p[:, 2] - p[:, 1]
    e2 = p[:, 0] - p[:, 2]
    area2 = e0[:, 0] * (-e2[:, 1]) - e0[:, 1] * (-e2[:, 0])
    angles = np.stack([
        np.arctan2(area2, -(e2 * e0).sum(1)),
        np.arctan2(area2, -(e0 * e1).sum(1)),
        np.arctan2(area2, -(e1 * e2).sum(1)),
    ], axis=1)
    # flattest edge slope and bounding-box aspect classify deliberate
    # anisotropy (ground layers, sheared wall strips); the 20 degree rule
    # applies only to the isotropic core
    with np.errstate(divide="ignore"):
        slopes = np.stack([
            np.abs(e0[:, 1] / np.where(e0[:, 0] == 0, np.nan, e0[:, 0])),
            np.abs(e1[:, 1] / np.where(e1[:, 0] == 0, np.nan, e1[:, 0])),
            np.abs(e2[:, 1] / np.where(e2[:, 0] == 0, np.nan, e2[:, 0])),
        ], axis=1)
    flattest = np.nanmin(slopes, axis=1)
    w = p[:, :, 0].max(1) - p[:, :, 0].min(1)
    hgt = p[:, :, 1].max(1) - p[:, :, 1].min(1)
    aspect = np.maximum(w, hgt) / np.maximum(np.minimum(w, hgt), 1e-300)
    core = (aspect <= 1.45) & (flattest <= 0.5)
    return 0.5 * area2, np.degrees(angles.min(1)), core


def _finalize_quality(mesh: Mesh, angle_min: float, tri_core_mask=None):
    area, min_angle, core = _tri_quality(mesh.nodes, mesh.tris)
    if tri_core_mask is not None:
        # strips the generator deliberately shears (wall-following columns)
        # are exempt from the isotropic angle rule, never from positivity
        core &= tri_core_mask
    if area.min() <= 0.0:
        raise MeshQualityError(f"nonpositive triangle area {area.min():.3e}")
    core_angle = float(min_angle[core].min()) if core.any() else float("nan")
    if core.any() and core_angle < angle_min:
        raise MeshQualityError(
            f"isotropic-core minimum angle {core_angle:.2f} deg is below "
            f"the {angle_min} deg gate")
    mesh.quality = {
        "min_area": float(area.min()),
        "min_angle_all_deg": float(min_angle.min()),
        "min_angle_core_deg": core_angle,
        "core_fraction": float(core.mean()),
        "n_nodes": mesh.n_nodes,
        "n_tris": mesh.n_tris,
    }
    return mesh


def build_jet_mesh(nozzle: NozzleWall, ground: GroundWall, mu: float,
                   x_max: float, h: float, m0: float,
                   lam_est: float | None = None, air_gap: float = 0.4,
                   angle_min: float = 20.0) -> Mesh:
    """Two-block graded mesh of the truncated jet domain.

    The vertical ladders cluster toward the ground with a per-column
    exponential stretch whose first spacing tracks the expected local jet
    thickness m0 / (lam_est x cos theta), six elements inside it; lam_est
    defaults to 2 m0, the usual fitted-parameter scale.  The lid sits
    air_gap above the lip, following the ground offset so the gap stays
    constant on inclined ground.
    """
    if mu <= 1.0:
        raise ValueError(f"inlet cut mu must exceed the lip height 1, got {mu}")
    if x_max <= nozzle.b + 4.0 * h:
        raise ValueError(f"x_max={x_max} leaves no room past the lip b={nozzle.b}")
    if h <= 0.0 or m0 <= 0.0:
        raise ValueError("h and m0 must be positive")
    if lam_est is None:
        lam_est = 2.0 * m0

    stations, i_mu, i_b, x_mu = _jet_stations(nozzle, mu, x_max, h)
    S = len(stations)
    b = nozzle.b

    g0 = np.asarray(ground.height(stations), dtype=float)
    g0_b = float(ground.height(b))
    if g0_b >= 0.75:
        raise ValueError(
            f"ground rises to {g0_b:.3f} at the lip; the corridor between "
            "lip and ground is too thin for this wall pair")
    ysplit = np.where(
        stations <= x_mu, mu,
        np.where(stations <= b,
                 np.asarray(nozzle.height(np.maximum(stations, x_mu * (1 + 1e-12))),
                            dtype=float),
                 1.0 + g0 - g0_b))
    ysplit[:i_mu + 1] = mu
    ysplit[i_b] = 1.0
    heights = ysplit - g0

    delta_jet = m0 / (lam_est * np.maximum(stations, b) * ground.cos_theta)
    s1 = np.clip(delta_jet / 6.0, h / 32.0, h)
    caps = h * np.clip(heights / (1.0 - g0_b), 1.0, 2.0)
    n_low, sigma = _pick_n_low(heights, s1, caps)

    # low block nodes, one ladder per station (x constant per column bitwise)
    ys = np.empty((S, n_low + 1))
    for i in range(S):
        ys[i] = g0[i] + heights[i] * _ladder_fracs(sigma[i], n_low)
        ys[i, 0] = g0[i]
        ys[i, -1] = ysplit[i]
    low_x = np.repeat(stations, n_low + 1)
    low_y = ys.ravel()

    def low_id(i, j):
        return i * (n_low + 1) + j

    n_low_nodes = S * (n_low + 1)

    # high block: geometric ladder of the air gap, bottom row shared with
    # the low block interface
    n_high = 1
    while h * (1.3 ** n_high - 1.0) / 0.3 < air_gap:
        n_high += 1
    gap_inc = h * 1.3 ** np.arange(n_high)
    gap_inc *= air_gap / gap_inc.sum()
    gap_off = np.cumsum(gap_inc)

    K = S - i_b
    hi_x = np.repeat(stations[i_b:], n_high)
    hi_y = (ysplit[i_b:, None] + gap_off[None, :]).ravel()

    def high_id(k, j):
        # j = 0 is the shared interface node of the low block
        if j == 0:
            return low_id(i_b + k, n_low)
        return n_low_nodes + k * n_high + (j - 1)

    nodes = np.column_stack([np.concatenate([low_x, hi_x]),
                             np.concatenate([low_y, hi_y])])

    # triangles: "/" diagonal everywhere
    tris = []
    ii = np.arange(S - 1)[:, None]
    jj = np.arange(n_low)[None, :]
    bl = ii * (n_low + 1) + jj
    br = (ii + 1) * (n_low + 1) + jj
    tris.append(np.stack([bl, br, br + 1], axis=-1).reshape(-1, 3))
    tris.append(np.stack([bl, br + 1, bl + 1], axis=-1).reshape(-1, 3))

    def hid(k, j):
        return np.where(j == 0, low_id(i_b + k, n_low),
                        n_low_nodes + k * n_high + (j - 1))

    kk = np.arange(K - 1)[:, None]
    jj = np.arange(n_high)[None, :]
    blh = hid(kk, jj)
    brh = hid(kk + 1, jj)
    trh = hid(kk + 1, jj + 1)
    tlh = hid(kk, jj + 1)
    tris.append(np.stack([blh, brh, trh], axis=-1).reshape(-1, 3))
    tris.append(np.stack([blh, trh, tlh], axis=-1).reshape(-1, 3))
    tris = np.ascontiguousarray(np.concatenate(tris), dtype=np.int32)

    # tags
    axis_nodes = np.array([low_id(0, j) for j in range(n_low + 1)])
    ground_nodes = np.array([low_id(i, 0) for i in range(S)])
    inlet_nodes = np.array([low_id(i, n_low) for i in range(i_mu + 1)])
    nozzle_nodes = np.array([low_id(i, n_low) for i in range(i_mu, i_b + 1)])
    topjet_nodes = np.concatenate([
        np.array([high_id(0, j) for j in range(1, n_high + 1)]),
        np.array([high_id(k, n_high) for k in range(K)]),
    ])
    out_low = np.array([low_id(S - 1, j) for j in range(n_low + 1)])
    out_high = np.array([high_id(K - 1, j) for j in range(1, n_high + 1)])
    outflow_nodes = np.concatenate([out_low, out_high])
    outflow_edges = np.column_stack([outflow_nodes[:-1], outflow_nodes[1:]])

    col_nodes = []
    node_station = np.empty(len(nodes), dtype=np.int32)
    for i in range(S):
        ids = [low_id(i, j) for j in range(n_low + 1)]
        if i >= i_b:
            ids += [high_id(i - i_b, j) for j in range(1, n_high + 1)]
        ids = np.asarray(ids, dtype=np.int32)
        node_station[ids] = i
        col_nodes.append(ids)

    mesh = Mesh(
        nodes=nodes, tris=tris, h=h, stations=stations, col_nodes=col_nodes,
        node_station=node_station, axis_nodes=axis_nodes,
        ground_nodes=ground_nodes, nozzle_nodes=nozzle_nodes,
        inlet_nodes=inlet_nodes, topjet_nodes=np.unique(topjet_nodes),
        outflow_nodes=outflow_nodes, outflow_edges=outflow_edges,
        ground=ground, b=b, x_mu=x_mu, mu=mu, x_max=x_max,
    )
    # column strips whose interface drops faster than 0.3 per unit x are
    # sheared on purpose (ladder heights track the wall); exempt them
    slope_low = np.abs(np.diff(ysplit) / np.diff(stations))
    ok_low = np.repeat(slope_low <= 0.3, n_low)
    ok_high = np.repeat(slope_low[i_b:] <= 0.3, n_high)
    tri_core = np.concatenate([ok_low, ok_low, ok_high, ok_high])
    return _finalize_quality(mesh, angle_min, tri_core)


def build_pipe_mesh(radius: float, height: float, h: float) -> Mesh:
    """Uniform rectangle mesh of a straight pipe, axis at x = 0.

    Used by verification runs: uniform axial flow is an exact discrete
    minimizer on this mesh.  The bottom cut is tagged as outflow, the
    vertical wall as nozzle.
    """
    if radius <= 0 or height <= 0 or h <= 0:
        raise ValueError("radius, height, h must be positive")
    nx = max(2, round(radius / h))
    ny = max(2, round(height / h))
    xs = np.arange(nx + 1) * (radius / nx)
    xs[-1] = radius
    yl = np.arange(ny + 1) * (height / ny)
    yl[-1] = height

    nodes = np.column_stack([np.repeat(xs, ny + 1),
                             np.tile(yl, nx + 1)])

    def nid(i, j):
        return i * (ny + 1) + j

    ii = np.arange(nx)[:, None]
    jj = np.arange(ny)[None, :]
    bl = ii * (ny + 1) + jj
    br = (ii + 1) * (ny + 1) + jj
    t1 = np.stack([bl, br, br + 1], axis=-1).reshape(-1, 3)
    t2 = np.stack([bl, br + 1, bl + 1], axis=-1).reshape(-1, 3)
    tris = np.ascontiguousarray(np.concatenate([t1, t2]), dtype=np.int32)

    axis_nodes = np.array([nid(0, j) for j in range(ny + 1)])
    wall_nodes = np.array([nid(nx, j) for j in range(ny + 1)])
    inlet_nodes = np.array([nid(i, ny) for i in range(nx + 1)])
    bottom_nodes = np.array([nid(i, 0) for i in range(nx + 1)])
    outflow_edges = np.column_stack([bottom_nodes[:-1], bottom_nodes[1:]])

    col_nodes = [np.arange(i * (ny + 1), (i + 1) * (ny + 1), dtype=np.int32)
                 for i in range(nx + 1)]
    node_station = np.repeat(np.arange(nx + 1, dtype=np.int32), ny + 1)

    mesh = Mesh(
        nodes=nodes, tris=tris, h=h, stations=xs, col_nodes=col_nodes,
        node_station=node_station, axis_nodes=axis_nodes,
        ground_nodes=np.array([], dtype=np.int32), nozzle_nodes=wall_nodes,
        inlet_nodes=inlet_nodes, topjet_nodes=np.array([], dtype=np.int32),
        outflow_nodes=bottom_nodes, outflow_edges=outflow_edges,
        ground=ground_wall("FLAT_GROUND"), b=math.inf, x_mu=radius, mu=height,
        x_max=radius,
    )
    return _finalize_quality(mesh, angle_min=20.0)
