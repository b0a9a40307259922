"""Reference hypersurfaces with closed-form geometry on structured charts.

Conventions: the unit normal points outward (upward for graphs), the second
fundamental form is ``l_ij = -(tau_i | d_j nu)`` and the Weingarten map has
mixed components ``l^i_j = g^{ik} l_kj``.  With these conventions a round
sphere has principal curvatures ``-1/r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
import numpy as np

from .grid import ChartGrid, GridError

KINDS = ("circle", "sphere", "cylinder", "torus", "graph")


class SurfaceError(ValueError):
    """Invalid reference-surface parameters."""


@dataclass(frozen=True, eq=False)
class ReferenceSurface:
    """Discretized reference hypersurface.

    Per-node arrays (``N`` nodes, chart dimension ``m``, ambient ``m + 1``):

    ``points`` (N, m+1), ``tangents`` (N, m, m+1) with ``tangents[:, i] = d_i p``,
    ``hess_points`` (N, m, m, m+1), ``normal`` (N, m+1), ``dnormal`` (N, m, m+1),
    ``hess_normal`` (N, m, m, m+1), ``metric``/``metric_inv`` (N, m, m),
    ``sff`` (N, m, m), ``weingarten`` (N, m, m) indexed ``[i, j] = l^i_j``,
    ``christoffel`` (N, m, m, m) indexed ``[k, i, j] = Gamma^k_ij``,
    ``principal_curvatures`` (N, m).
    """

    kind: str
    params: dict
    grid: ChartGrid
    points: np.ndarray
    tangents: np.ndarray
    hess_points: np.ndarray
    normal: np.ndarray
    dnormal: np.ndarray
    hess_normal: np.ndarray
    tubular_radius: float
    closed: bool
    axis_names: tuple[str, ...]
    lift: np.ndarray | None = None
    metric: np.ndarray = field(init=False)
    metric_inv: np.ndarray = field(init=False)
    sff: np.ndarray = field(init=False)
    weingarten: np.ndarray = field(init=False)
    christoffel: np.ndarray = field(init=False)
    principal_curvatures: np.ndarray = field(init=False)
    cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.lift is None:
            object.__setattr__(self, "lift", np.zeros((self.grid.ndim, self.points.shape[1])))
        g = np.einsum("nia,nja->nij", self.tangents, self.tangents)
        ginv = np.linalg.inv(g)
        sff = -np.einsum("nia,nja->nij", self.tangents, self.dnormal)
        sff = 0.5 * (sff + np.swapaxes(sff, 1, 2))
        w = np.einsum("nik,nkj->nij", ginv, sff)
        gam = np.einsum("nkl,nijb,nlb->nkij", ginv, self.hess_points, self.tangents)
        # eigenvalues of the g-self-adjoint Weingarten map via a symmetric form
        chol = np.linalg.cholesky(g)
        cinv = np.linalg.inv(chol)
        sym = np.einsum("nia,nab,njb->nij", cinv, sff, cinv)
        kappa = np.linalg.eigvalsh(sym)
        for name, value in (
            ("metric", g),
            ("metric_inv", ginv),
            ("sff", sff),
            ("weingarten", w),
            ("christoffel", gam),
            ("principal_curvatures", kappa),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def m(self) -> int:
        return self.grid.ndim

    @property
    def size(self) -> int:
        return self.grid.size

    @property
    def area_element(self) -> np.ndarray:
        return np.sqrt(np.linalg.det(self.metric))

    def coords(self) -> dict[str, np.ndarray]:
        """Chart coordinates of all nodes keyed by axis name."""
        return dict(zip(self.axis_names, self.grid.coords))

    def unwrap(self, positions: np.ndarray) -> np.ndarray:
        """Remove the linear drift ``coords @ lift`` so that node positions of a
        periodic patch become periodic in the index (safe to difference)."""
        return positions - np.stack(self.grid.coords, -1) @ self.lift

    def difference_positions(self, positions: np.ndarray):
        """Centred first and second chart differences of node positions,
        shapes ``(N, m, m+1)`` and ``(N, m, m, m+1)``."""
        grid = self.grid
        base = self.unwrap(positions)
        m = self.m
        first = np.stack([grid.d1(k) @ base + self.lift[k] for k in range(m)], axis=1)
        second = np.empty((self.size, m, m, positions.shape[1]))
        for i in range(m):
            for j in range(i, m):
                second[:, i, j] = grid.d2(i, j) @ base
                second[:, j, i] = second[:, i, j]
        return first, second

    def sample_spacing(self, positions: np.ndarray | None = None) -> float:
        """Largest Euclidean distance between grid-adjacent nodes (minimum image
        across periodic copies).  ``positions`` defaults to the reference nodes."""
        pts = self.points if positions is None else np.asarray(positions, dtype=float)
        pairs = self.grid.neighbour_pairs()
        diff = pts[pairs[:, 1]] - pts[pairs[:, 0]]
        d = np.linalg.norm(diff, axis=-1)
        for v in self.periods():
            for sgn in (1.0, -1.0):
                d = np.minimum(d, np.linalg.norm(diff + sgn * v, axis=-1))
        return float(d.max())

    def mesh_wrap(self) -> tuple[bool, ...]:
        """Axes to stitch when meshing: periodic and not carrying a linear drift."""
        return tuple(bool(p and not np.any(self.lift[k])) for k, p in enumerate(self.grid.periodic))

    def periods(self) -> list[np.ndarray]:
        """Ambient translations that map the sampled patch onto its periodic copies."""
        out = []
        if self.kind == "cylinder":
            out.append(np.array([self.params["length"], 0.0, 0.0]))
        elif self.kind == "graph":
            for k, length in enumerate(self.params["box"]):
                v = np.zeros(self.m + 1)
                v[k] = length
                out.append(v)
        return out


# -- closed-form charts ----------------------------------------------------


def _check_resolution(resolution, m):
    res = tuple(int(n) for n in np.atleast_1d(resolution))
    if len(res) == 1 and m > 1:
        res = res * m
    if len(res) != m:
        raise SurfaceError(f"resolution needs {m} entries, got {len(res)}")
    return res


def _circle(r, resolution):
    if not r > 0:
        raise SurfaceError("circle radius r must be positive")
    (n,) = _check_resolution(resolution, 1)
    grid = ChartGrid((n,), (2 * math.pi / n,), (0.0,), (True,), (False,))
    (t,) = grid.coords
    c, s = np.cos(t), np.sin(t)
    nu = np.stack([c, s], -1)
    dnu = np.stack([-s, c], -1)[:, None, :]
    hnu = np.stack([-c, -s], -1)[:, None, None, :]
    return dict(
        grid=grid,
        points=r * nu,
        tangents=r * dnu,
        hess_points=r * hnu,
        normal=nu,
        dnormal=dnu,
        hess_normal=hnu,
        tubular_radius=float(r),
        closed=True,
        axis_names=("t",),
    )


def _sphere(r, resolution):
    if not r > 0:
        raise SurfaceError("sphere radius r must be positive")
    # resolution is (n_phi, n_theta) following the usual "64x32" reading
    nphi, ntheta = _check_resolution(resolution, 2)
    h = math.pi / ntheta
    grid = ChartGrid(
        (ntheta, nphi),
        (h, 2 * math.pi / nphi),
        (0.5 * h, 0.0),
        (False, True),
        (True, False),
        pole_partner=1,
    )
    th, ph = grid.coords
    st, ct, sf, cf = np.sin(th), np.cos(th), np.sin(ph), np.cos(ph)
    z = np.zeros_like(th)
    nu = np.stack([st * cf, st * sf, ct], -1)
    n_t = np.stack([ct * cf, ct * sf, -st], -1)
    n_f = np.stack([-st * sf, st * cf, z], -1)
    n_tt = -nu
    n_tf = np.stack([-ct * sf, ct * cf, z], -1)
    n_ff = np.stack([-st * cf, -st * sf, z], -1)
    dnu = np.stack([n_t, n_f], 1)
    hnu = np.stack([np.stack([n_tt, n_tf], 1), np.stack([n_tf, n_ff], 1)], 1)
    return dict(
        grid=grid,
        points=r * nu,
        tangents=r * dnu,
        hess_points=r * hnu,
        normal=nu,
        dnormal=dnu,
        hess_normal=hnu,
        tubular_radius=float(r),
        closed=True,
        axis_names=("theta", "phi"),
    )


def _cylinder(r, length, resolution):
    if not r > 0:
        raise SurfaceError("cylinder radius r must be positive")
    if not length > 0:
        raise SurfaceError("cylinder period length must be positive")
    nx, nphi = _check_resolution(resolution, 2)
    grid = ChartGrid((nx, nphi), (length / nx, 2 * math.pi / nphi), (0.0, 0.0), (True, True), (False, False))
    x, ph = grid.coords
    c, s, z = np.cos(ph), np.sin(ph), np.zeros_like(ph)
    nu = np.stack([z, c, s], -1)
    n_f = np.stack([z, -s, c], -1)
    n_ff = np.stack([z, -c, -s], -1)
    zero = np.zeros_like(nu)
    ex = np.stack([np.ones_like(x), z, z], -1)
    dnu = np.stack([zero, n_f], 1)
    hnu = np.stack([np.stack([zero, zero], 1), np.stack([zero, n_ff], 1)], 1)
    tangents = np.stack([ex, r * n_f], 1)
    hess = np.stack([np.stack([zero, zero], 1), np.stack([zero, r * n_ff], 1)], 1)
    return dict(
        grid=grid,
        points=np.stack([x, r * c, r * s], -1),
        tangents=tangents,
        hess_points=hess,
        normal=nu,
        dnormal=dnu,
        hess_normal=hnu,
        tubular_radius=float(r),
        closed=False,
        axis_names=("x", "phi"),
        lift=np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
    )


def _torus(big_r, r, resolution):
    if not (0 < r < big_r):
        raise SurfaceError("torus radii must satisfy 0 < r < R")
    nu_, nv = _check_resolution(resolution, 2)
    grid = ChartGrid((nu_, nv), (2 * math.pi / nu_, 2 * math.pi / nv), (0.0, 0.0), (True, True), (False, False))
    u, v = grid.coords
    cu, su, cv, sv = np.cos(u), np.sin(u), np.cos(v), np.sin(v)
    z = np.zeros_like(u)
    nu = np.stack([cv * cu, cv * su, sv], -1)
    n_u = np.stack([-cv * su, cv * cu, z], -1)
    n_v = np.stack([-sv * cu, -sv * su, cv], -1)
    n_uu = np.stack([-cv * cu, -cv * su, z], -1)
    n_uv = np.stack([sv * su, -sv * cu, z], -1)
    n_vv = np.stack([-cv * cu, -cv * su, -sv], -1)
    rad = big_r + r * cv
    p = np.stack([rad * cu, rad * su, r * sv], -1)
    p_u = np.stack([-rad * su, rad * cu, z], -1)
    p_v = r * n_v
    p_uu = np.stack([-rad * cu, -rad * su, z], -1)
    p_uv = r * n_uv
    p_vv = r * n_vv
    return dict(
        grid=grid,
        points=p,
        tangents=np.stack([p_u, p_v], 1),
        hess_points=np.stack([np.stack([p_uu, p_uv], 1), np.stack([p_uv, p_vv], 1)], 1),
        normal=nu,
        dnormal=np.stack([n_u, n_v], 1),
        hess_normal=np.stack([np.stack([n_uu, n_uv], 1), np.stack([n_uv, n_vv], 1)], 1),
        tubular_radius=float(min(r, big_r - r)),
        closed=True,
        axis_names=("u", "v"),
    )


def spectral_derivatives(values: np.ndarray, box: tuple[float, ...], order: int = 2):
    """Derivatives of periodic samples on a uniform box by FFT.

    Returns a dict keyed by multi-index tuples (one count per axis) for all
    total orders up to ``order``.
    """
    m = values.ndim
    fhat = np.fft.fftn(values)
    out = {}
    for alpha in np.ndindex(*([order + 1] * m)):
        if sum(alpha) > order:
            continue
        mult = np.ones(values.shape, dtype=complex)
        for k, a in enumerate(alpha):
            n = values.shape[k]
            ik = 2j * math.pi * np.fft.fftfreq(n, d=box[k] / n)
            if a % 2 and n % 2 == 0:
                ik[n // 2] = 0.0  # unpaired Nyquist coefficient
            shape = [1] * m
            shape[k] = n
            mult = mult * (ik**a).reshape(shape)
        out[tuple(alpha)] = np.real(np.fft.ifftn(fhat * mult))
    return out


def _graph(f, box, resolution):
    box = tuple(float(b) for b in np.atleast_1d(box))
    m = len(box)
    if m not in (1, 2):
        raise SurfaceError("graph reference needs a one- or two-dimensional periodic box")
    if any(b <= 0 for b in box):
        raise SurfaceError("graph box lengths must be positive")
    res = _check_resolution(resolution, m)
    grid = ChartGrid(res, tuple(b / n for b, n in zip(box, res)), (0.0,) * m, (True,) * m, (False,) * m)
    coords = grid.coords
    if callable(f):
        fv = np.asarray(f(*coords), dtype=float)
        fv = np.broadcast_to(fv, coords[0].shape).astype(float)
    else:
        fv = np.asarray(f, dtype=float).ravel()
        if fv.size != grid.size:
            raise SurfaceError("graph samples do not match the grid resolution")
    if not np.all(np.isfinite(fv)):
        raise SurfaceError("graph function f must be finite on the box")
    fg = fv.reshape(res)
    der = spectral_derivatives(fg, box, order=2)

    def unit(k):
        a = [0] * m
        a[k] += 1
        return tuple(a)

    def pair(i, j):
        a = [0] * m
        a[i] += 1
        a[j] += 1
        return tuple(a)

    n = grid.size
    grad = np.stack([der[unit(k)].ravel() for k in range(m)], -1)
    hess = np.empty((n, m, m))
    for i in range(m):
        for j in range(m):
            hess[:, i, j] = der[pair(i, j)].ravel()
    points = np.concatenate([np.stack(coords, -1), fv[:, None]], -1)
    tangents = np.zeros((n, m, m + 1))
    for i in range(m):
        tangents[:, i, i] = 1.0
        tangents[:, i, m] = grad[:, i]
    hess_points = np.zeros((n, m, m, m + 1))
    hess_points[..., m] = hess
    w = 1.0 / np.sqrt(1.0 + np.sum(grad**2, -1))
    normal = np.concatenate([-grad * w[:, None], w[:, None]], -1)
    dnormal = np.empty((n, m, m + 1))
    hess_normal = np.empty((n, m, m, m + 1))
    for a in range(m + 1):
        dn = spectral_derivatives(normal[:, a].reshape(res), box, order=2)
        for i in range(m):
            dnormal[:, i, a] = dn[unit(i)].ravel()
            for j in range(m):
                hess_normal[:, i, j, a] = dn[pair(i, j)].ravel()
    return dict(
        grid=grid,
        points=points,
        tangents=tangents,
        hess_points=hess_points,
        normal=normal,
        dnormal=dnormal,
        hess_normal=hess_normal,
        tubular_radius=math.nan,  # filled by the certifier
        closed=False,
        axis_names=("x", "y")[:m],
        lift=np.eye(m, m + 1),
    )


def build_reference(kind: str, params: dict | None = None, resolution=64, *, graph_radius_cap: float = 1e3) -> ReferenceSurface:
    """Build a reference surface from closed-form geometry.

    Parameters
    ----------
    kind : {"circle", "sphere", "cylinder", "torus", "graph"}
    params : dict
        ``circle``/``sphere``: ``r``; ``cylinder``: ``r``, ``length``;
        ``torus``: ``R``, ``r``; ``graph``: ``f`` (callable of the chart
        coordinates or node samples) and ``box`` (period lengths).
    resolution : int or tuple of int
        Node counts per axis.  For the sphere this is ``(n_phi, n_theta)``.
    """
    params = dict(params or {})
    kind = kind.lower()
    try:
        if kind == "circle":
            data = _circle(float(params.get("r", 1.0)), resolution)
        elif kind == "sphere":
            data = _sphere(float(params.get("r", 1.0)), resolution)
        elif kind == "cylinder":
            data = _cylinder(float(params.get("r", 1.0)), float(params.get("length", 2 * math.pi)), resolution)
        elif kind == "torus":
            data = _torus(float(params.get("R", 2.0)), float(params.get("r", 1.0)), resolution)
        elif kind == "graph":
            if "f" not in params:
                raise SurfaceError("graph reference needs a function f")
            data = _graph(params["f"], params.get("box", (2 * math.pi,)), resolution)
        else:
            raise SurfaceError(f"unknown surface kind {kind!r}; expected one of {KINDS}")
    except GridError as exc:
        raise SurfaceError(f"resolution: {exc}") from exc
    if kind == "graph":
        params.setdefault("box", (2 * math.pi,))
    surface = ReferenceSurface(kind=kind, params=params, **data)
    if kind == "graph":
        from .certify import graph_radius

        est = graph_radius(surface, cap=graph_radius_cap)
        object.__setattr__(surface, "tubular_radius", est.certified)
    return surface


# -- reports -----------------------------------------------------------------


@dataclass(frozen=True)
class ConsistencyReport:
    metric_error: float
    sff_error: float
    christoffel_error: float
    spacing: float

    @property
    def max_error(self) -> float:
        return max(self.metric_error, self.sff_error, self.christoffel_error)


def geometry_consistency_check(surface: ReferenceSurface) -> ConsistencyReport:
    """Compare stored analytic geometry with centred differences of the
    node positions and normals.

    Christoffel symbols are compared in lowered form ``(d_i d_j p | tau_l)``
    so that the comparison is not amplified by the inverse metric near
    coordinate poles.  Ambient vector fields are scalars under the pole
    reflection, so no parity sign is applied when differencing them.
    """
    grid = surface.grid
    tau, hp = surface.difference_positions(surface.points)
    dnu = np.stack([grid.d1(k) @ surface.normal for k in range(surface.m)], axis=1)
    g = np.einsum("nia,nja->nij", tau, tau)
    sff = -np.einsum("nia,nja->nij", tau, dnu)
    sff = 0.5 * (sff + np.swapaxes(sff, 1, 2))
    gam_low = np.einsum("nijb,nlb->nlij", hp, tau)
    ref_low = np.einsum("nlk,nkij->nlij", surface.metric, surface.christoffel)
    return ConsistencyReport(
        metric_error=float(np.abs(g - surface.metric).max()),
        sff_error=float(np.abs(sff - surface.sff).max()),
        christoffel_error=float(np.abs(gam_low - ref_low).max()),
        spacing=max(grid.spacing),
    )


@dataclass(frozen=True)
class CurvatureBound:
    sup: float
    radius_bound: float  # math.inf when the surface is flat

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.radius_bound)


def weingarten_sup(surface: ReferenceSurface, atol: float = 1e-12) -> CurvatureBound:
    """Largest absolute principal curvature and the implied radius bound ``1/sup``."""
    sup = float(np.abs(surface.principal_curvatures).max())
    if sup <= atol:
        return CurvatureBound(0.0, math.inf)
    return CurvatureBound(sup, 1.0 / sup)


def torus_principal_curvatures(big_r: float, r: float, v) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form principal curvatures of a torus at tube angle ``v``
    (outward normal): tube direction ``-1/r`` and the parallel direction
    ``-cos v / (R + r cos v)``."""
    v = np.asarray(v, dtype=float)
    return np.full_like(v, -1.0 / r), -np.cos(v) / (big_r + r * np.cos(v))


def export_obj(path, positions: np.ndarray, grid: ChartGrid, wrap=None) -> None:
    """Write node positions as an OBJ mesh; quads are split into triangles.

    One-dimensional charts are written as a polyline (``l`` records), closed
    when the axis is periodic.  ``wrap`` overrides which axes are stitched
    across their seam (an open tube should not be closed along its axis).
    """
    with open(path, "w") as fh:
        for p in positions:
            xyz = list(p) + [0.0] * (3 - len(p))
            fh.write("v {:.17g} {:.17g} {:.17g}\n".format(*xyz))
        if grid.ndim == 1:
            n = grid.size
            closed = grid.periodic[0] if wrap is None else wrap[0]
            stop = n + 1 if closed else n
            fh.write("l " + " ".join(str(i % n + 1) for i in range(stop)) + "\n")
            return
        for a, b, c, d in grid.quad_faces(wrap):
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")
            fh.write(f"f {a + 1} {c + 1} {d + 1}\n")


def random_smooth_field(surface: ReferenceSurface, amplitude: float, *, n_terms: int = 4, max_frequency: float = 2.0,
                        seed=None) -> np.ndarray:
    """Random smooth node field with ``sup|u| = amplitude``.

    The field is a sum of sinusoids of smooth features of the surface:
    unwrapped ambient coordinates (regular through coordinate poles) and, for
    axes carrying a linear drift, the periodic pair ``cos, sin`` of the chart
    coordinate.  Periodic charts therefore receive periodic fields.
    """
    rng = np.random.default_rng(seed)
    feats = [surface.unwrap(surface.points)]
    for k in range(surface.m):
        if np.any(surface.lift[k]):
            n = surface.grid.dims[k]
            period = n * surface.grid.spacing[k]
            ang = 2 * math.pi * surface.grid.coords[k] / period
            feats.append(np.stack([np.cos(ang), np.sin(ang)], -1))
    x = np.concatenate(feats, axis=-1)
    scale = max(float(np.abs(x).max()), 1e-300)
    u = np.zeros(surface.size)
    for _ in range(n_terms):
        w = rng.normal(size=x.shape[1]) * max_frequency / scale
        u += rng.normal() * np.sin(x @ w + rng.uniform(0, 2 * math.pi))
    peak = float(np.abs(u).max())
    if peak == 0.0:
        return u
    return amplitude * u / peak
