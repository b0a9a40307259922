"""Sampled certification of tubular-neighbourhood radii.

A radius ``a`` passes the ball condition when, for every sample ``p`` and
both sides, the open ball of radius ``a`` centred at ``p +/- a nu(p)``
contains no other sample.  The scan is a nearest-neighbour query of the ball
centres against the sample cloud (plus its periodic copies) using a k-d
tree, so the cost is ``O(N log N)`` per radius.

Sampling limits what can be decided.  Distance to the surface is
1-Lipschitz, so a violation smaller than ``slack = 2 h max(1, sup|kappa|)``
may be an artefact of the sample spacing ``h``; such cases are reported as
``inconclusive`` rather than ``violated``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import graph_geometry
from .reference import ReferenceSurface

VERDICTS = ("certified", "violated", "inconclusive")
BISECTION_WIDTH = 1e-3


@dataclass(frozen=True)
class Witness:
    """A sample found strictly inside a tangent ball."""

    node: int
    other: int
    side: int  # +1 outer, -1 inner
    distance: float
    center: np.ndarray
    point: np.ndarray  # coordinates of ``other``, periodic shift applied

    def recheck(self, a: float) -> bool:
        return float(np.linalg.norm(self.point - self.center)) < a


@dataclass(frozen=True)
class Certificate:
    radius_tested: float
    verdict: str
    witness: Witness | None
    deficit: float
    slack: float
    spacing: float
    curvature_sup: float
    n_points: int
    certified_radius: float | None = None
    proposal: float | None = None
    a_priori: float | None = None

    @property
    def certified(self) -> bool:
        return self.verdict == "certified"

    def report(self) -> dict:
        """Flat key-value view, suitable for a text report."""
        out = {
            "radius_tested": self.radius_tested,
            "verdict": self.verdict,
            "deficit": self.deficit,
            "slack": self.slack,
            "spacing": self.spacing,
            "curvature_sup": self.curvature_sup,
            "n_points": self.n_points,
        }
        for key in ("certified_radius", "proposal", "a_priori"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        if self.witness is not None:
            w = self.witness
            out.update(witness_node=w.node, witness_other=w.other,
                       witness_side="+" if w.side > 0 else "-", witness_distance=w.distance)
        return out


def _tolerance(a: float) -> float:
    # round-off allowance for ties such as the centre of a sphere tested at a = r
    return 1e-10 * max(1.0, a)


def nearest_spacing(points: np.ndarray) -> float:
    """Largest nearest-neighbour distance in a point cloud."""
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] < 2:
        raise ValueError("need at least two samples to estimate their spacing")
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(d[:, 1].max())


class _Cloud:
    """Sample cloud with periodic copies, reused across radii during bisection."""

    def __init__(self, points, periods=()):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("ball condition needs a non-empty (N, d) sample array")
        self.points = pts
        self.n = pts.shape[0]
        shifts = [np.zeros(pts.shape[1])]
        per = [np.asarray(v, dtype=float) for v in periods]
        for combo in itertools.product((-1, 0, 1), repeat=len(per)):
            if any(combo):
                shifts.append(sum(c * v for c, v in zip(combo, per)))
        self.shifts = np.array(shifts)
        self.targets = np.concatenate([pts + s for s in self.shifts], axis=0)
        self.tree = cKDTree(self.targets)

    def scan(self, normals, a):
        """Largest deficit ``a - min_{q != p} |q - c|`` over samples and sides."""
        best = (-math.inf, 0, 1, 0, math.inf)
        own = np.arange(self.n)
        for side in (1, -1):
            centers = self.points + side * a * normals
            # coincident centres (e.g. all inner centres of a sphere at a = r)
            # make k-d queries degenerate; query each distinct centre once
            _, first, inverse = np.unique(np.round(centers, 12), axis=0, return_index=True, return_inverse=True)
            dist, idx = self.tree.query(centers[first], k=2)
            dist, idx = dist[inverse.ravel()], idx[inverse.ravel()]
            # drop the sample that generated the ball (at distance ~a)
            first_is_self = idx[:, 0] == own
            d = np.where(first_is_self, dist[:, 1], dist[:, 0])
            j = np.where(first_is_self, idx[:, 1], idx[:, 0])
            deficit = a - d
            k = int(np.argmax(deficit))  # first maximiser: lowest node index
            if deficit[k] > best[0]:
                best = (float(deficit[k]), k, side, int(j[k]), float(d[k]))
        return best


def _certificate(cloud, normals, a, spacing, kappa):
    if not a > 0:
        raise ValueError("tested radius must be positive")
    slack = 2.0 * spacing * max(1.0, kappa)
    deficit, node, side, target, dist = cloud.scan(normals, a)
    if deficit <= _tolerance(a):
        verdict, witness = "certified", None
    elif deficit > slack:
        verdict = "violated"
        center = cloud.points[node] + side * a * normals[node]
        witness = Witness(node, target % cloud.n, side, dist, center, cloud.targets[target].copy())
    else:
        verdict, witness = "inconclusive", None
    return Certificate(radius_tested=float(a), verdict=verdict, witness=witness, deficit=deficit,
                       slack=slack, spacing=spacing, curvature_sup=kappa, n_points=cloud.n)


def ball_condition(points, normals, a: float, *, spacing: float | None = None, curvature_sup: float = 0.0,
                   periods=()) -> Certificate:
    """Check the uniform ball condition of radius ``a`` on a sampled surface.

    Parameters
    ----------
    points, normals : (N, d) arrays
        Samples and unit normals.
    a : float
        Radius to test.
    spacing : float, optional
        Sampling resolution ``h``; defaults to the largest nearest-neighbour
        distance.
    curvature_sup : float
        Bound on ``|kappa|`` entering the slack.
    periods : sequence of vectors
        Ambient translations of a periodic patch; shifted copies of the
        samples are included as targets.
    """
    cloud = _Cloud(points, periods)
    nrm = np.asarray(normals, dtype=float)
    if nrm.shape != cloud.points.shape:
        raise ValueError("normals must match the shape of points")
    h = nearest_spacing(cloud.points) if spacing is None else float(spacing)
    return _certificate(cloud, nrm, a, h, float(curvature_sup))


def bisect_radius(points, normals, upper: float, *, spacing: float | None = None, curvature_sup: float = 0.0,
                  periods=(), width: float = BISECTION_WIDTH) -> tuple[float, Certificate]:
    """Largest radius ``<= upper`` whose verdict is ``certified``, to relative ``width``.

    Returns the radius and the certificate of the last certified test.
    """
    if not upper > 0 or not math.isfinite(upper):
        raise ValueError("bisection needs a finite positive upper radius")
    cloud = _Cloud(points, periods)
    nrm = np.asarray(normals, dtype=float)
    h = nearest_spacing(cloud.points) if spacing is None else float(spacing)
    kappa = float(curvature_sup)
    cert = _certificate(cloud, nrm, upper, h, kappa)
    if cert.certified:
        return float(upper), cert
    lo, hi = 0.0, float(upper)
    good = None
    while hi - lo > width * hi:
        mid = 0.5 * (lo + hi)
        c = _certificate(cloud, nrm, mid, h, kappa)
        if c.certified:
            lo, good = mid, c
        else:
            hi = mid
    if good is None:
        good = _certificate(cloud, nrm, lo, h, kappa) if lo > 0 else cert
    return lo, good


# -- graph radius --------------------------------------------------------------


@dataclass(frozen=True)
class GraphRadius:
    """Tubular-radius estimates for a graph ``x -> (x, f(x))``.

    ``bound`` is the a priori value ``1/(2C)`` with
    ``C = sup|d^2 f| * sup (1 + |df|^2)^{3/2}``; ``certified`` is the largest
    radius passing the sampled ball condition, searched below
    ``min(cap, 1/sup|kappa|)`` and kept a relative ``BISECTION_WIDTH``
    below that curvature proposal.
    """

    hessian_sup: float
    slope_factor: float
    constant: float
    bound: float
    certified: float
    cap: float
    certificate: Certificate | None


def _graph_samples(f_samples, spacing):
    f = np.asarray(f_samples, dtype=float)
    if f.ndim not in (1, 2) or min(f.shape) < 3:
        raise ValueError("graph samples need at least three points per axis")
    if not np.all(np.isfinite(f)):
        raise ValueError("graph samples must be finite")
    h = np.broadcast_to(np.atleast_1d(np.asarray(spacing, dtype=float)), (f.ndim,))
    if np.any(h <= 0):
        raise ValueError("sample spacing must be positive")
    grad = np.stack(np.gradient(f, *h), axis=-1) if f.ndim > 1 else np.gradient(f, h[0])[..., None]
    m = f.ndim
    hess = np.empty(f.shape + (m, m))
    for i in range(m):
        gi = np.gradient(grad[..., i], *h) if m > 1 else [np.gradient(grad[..., i], h[0])]
        for j in range(m):
            hess[..., i, j] = gi[j]
    hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
    axes = [np.arange(n) * h[k] for k, n in enumerate(f.shape)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([*mesh, f], axis=-1).reshape(-1, m + 1)
    return grad.reshape(-1, m), hess.reshape(-1, m, m), points


def graph_radius(source, *, spacing=None, cap: float = 1e3, atol: float = 1e-10) -> GraphRadius:
    """Tubular radius of a graph from a graph reference surface or raw samples.

    ``source`` is either a :class:`ReferenceSurface` of kind ``graph``
    (periodic, spectral derivatives) or an array of samples of ``f`` on a
    regular grid with the given ``spacing`` (one-sided differences at the
    edges, no periodic copies).
    """
    if not cap > 0:
        raise ValueError("cap must be positive")
    periods = ()
    if isinstance(source, ReferenceSurface):
        if source.kind != "graph":
            raise ValueError("graph_radius expects a graph reference surface")
        m = source.m
        grad = source.tangents[:, :, m]
        hess = source.hess_points[:, :, :, m]
        points = source.points
        periods = source.periods()
        h = source.sample_spacing()
    else:
        if spacing is None:
            raise ValueError("raw graph samples need their spacing")
        grad, hess, points = _graph_samples(source, spacing)
        h = None
    slope2 = np.sum(grad**2, axis=-1)
    hsup = float(np.abs(np.linalg.eigvalsh(hess)).max())
    slope = float(((1.0 + slope2) ** 1.5).max())
    c = hsup * slope
    if c <= atol:
        return GraphRadius(hsup, slope, 0.0, cap, cap, cap, None)
    bound = min(cap, 1.0 / (2.0 * c))
    normals = np.concatenate([-grad, np.ones((grad.shape[0], 1))], axis=-1) / np.sqrt(1.0 + slope2)[:, None]
    # principal curvatures of the graph: eigenvalues of hess in the induced metric
    g = np.eye(grad.shape[1])[None] + np.einsum("ni,nj->nij", grad, grad)
    chol_inv = np.linalg.inv(np.linalg.cholesky(g))
    shape = np.einsum("nia,nab,njb->nij", chol_inv, hess, chol_inv) / np.sqrt(1.0 + slope2)[:, None, None]
    kappa = float(np.abs(np.linalg.eigvalsh(shape)).max())
    upper = min(cap, 1.0 / kappa) if kappa > atol else cap
    radius, cert = bisect_radius(points, normals, upper, spacing=h, curvature_sup=kappa, periods=periods)
    if kappa > atol:
        radius = _below_proposal(radius, upper)
    cert = _with(cert, certified_radius=radius, proposal=upper, a_priori=bound)
    return GraphRadius(hsup, slope, c, bound, radius, cap, cert)


def _below_proposal(radius: float, proposal: float) -> float:
    # the proposal is 1/sup|kappa| from discrete curvatures, trusted only to
    # the bisection resolution; report a lower bound at that resolution
    return min(radius, proposal * (1.0 - BISECTION_WIDTH))


def _with(cert: Certificate, **extra) -> Certificate:
    from dataclasses import replace

    return replace(cert, **extra)


# -- surfaces ----------------------------------------------------------------


def certify_offset_surface(surface: ReferenceSurface, rho=None) -> Certificate:
    """Largest sampled ball-condition radius of ``Gamma_rho``.

    The search starts from ``1/sup|kappa(rho)|`` (the curvature radius, a
    necessary bound) and bisects below it.  ``a_priori`` carries the
    guaranteed value ``a - sup|rho|`` inherited from the reference.
    """
    rho = np.zeros(surface.size) if rho is None else np.asarray(rho, dtype=float)
    geo = graph_geometry(surface, rho)
    kappa = float(np.abs(geo.principal_curvatures()).max())
    positions = geo.position
    h = surface.sample_spacing(positions)
    a_priori = float(surface.tubular_radius - np.abs(rho).max())
    if kappa > 1e-12:
        proposal = 1.0 / kappa
    elif math.isfinite(surface.tubular_radius):
        proposal = float(surface.tubular_radius)
    else:
        raise ValueError("flat surface without a finite reference radius; nothing to bisect")
    radius, cert = bisect_radius(positions, geo.normal, proposal, spacing=h, curvature_sup=kappa,
                                 periods=surface.periods())
    if kappa > 1e-12:
        radius = _below_proposal(radius, proposal)
    return _with(cert, certified_radius=radius, proposal=proposal, a_priori=a_priori)


def certify_reference(surface: ReferenceSurface, a: float | None = None) -> Certificate:
    """Ball condition on the reference itself at radius ``a`` (default: its tubular radius)."""
    radius = float(surface.tubular_radius if a is None else a)
    kappa = float(np.abs(surface.principal_curvatures).max())
    return ball_condition(surface.points, surface.normal, radius, spacing=surface.sample_spacing(),
                          curvature_sup=kappa, periods=surface.periods())
