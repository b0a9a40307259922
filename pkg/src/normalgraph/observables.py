"""Geometric functionals along a flow and simple fits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import GraphGeometry, graph_geometry
from .reference import ReferenceSurface

CSV_COLUMNS = (
    "t",
    "area",
    "volume",
    "willmore_energy",
    "sup_rho",
    "sup_grad_rho",
    "holder_seminorm",
    "fit_center_x",
    "fit_center_y",
    "fit_center_z",
    "fit_radius",
    "fit_residual",
)


class FitError(ValueError):
    """Degenerate input to a fit."""


@dataclass(frozen=True)
class SphereFit:
    center: np.ndarray
    radius: float
    residual: float


@dataclass(frozen=True)
class ObservableRecord:
    t: float
    area: float
    enclosed_volume: float | None
    willmore_energy: float | None
    sup_rho: float
    sup_grad_rho: float
    holder_seminorm: float
    sphere_fit: SphereFit | None = None

    def csv_row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))

        fit = self.sphere_fit
        center = list(fit.center) + [0.0] * (3 - len(fit.center)) if fit is not None else [None] * 3
        return [
            fmt(self.t),
            fmt(self.area),
            fmt(self.enclosed_volume),
            fmt(self.willmore_energy),
            fmt(self.sup_rho),
            fmt(self.sup_grad_rho),
            fmt(self.holder_seminorm),
            *[fmt(c) for c in center],
            fmt(fit.radius if fit else None),
            fmt(fit.residual if fit else None),
        ]


def area(geo: GraphGeometry) -> float:
    return float(np.sum(geo.area_element) * geo.surface.grid.cell_volume)


def enclosed_volume(surface: ReferenceSurface, rho: np.ndarray, geometry: GraphGeometry | None = None) -> float:
    """Volume enclosed by ``Gamma_rho`` via the divergence theorem."""
    if not surface.closed:
        raise ValueError(f"enclosed volume is undefined for the non-closed reference {surface.kind!r}")
    geo = geometry if geometry is not None else graph_geometry(surface, rho)
    flux = np.einsum("na,na->n", geo.position, geo.normal)
    return float(np.sum(flux * geo.area_element) * surface.grid.cell_volume / (surface.m + 1))


def willmore_energy(geo: GraphGeometry) -> float:
    return float(np.sum(geo.mean_curvature**2 * geo.area_element) * geo.surface.grid.cell_volume)


def holder_seminorm(geo: GraphGeometry, alpha: float = 0.5) -> float:
    """Discrete alpha-seminorm of the surface gradient over grid-adjacent node pairs.

    Gradients are compared as ambient vectors and distances are Euclidean
    distances between reference nodes.
    """
    surface = geo.surface
    grad_up = np.einsum("nij,nj->ni", surface.metric_inv, geo.drho)
    amb = np.einsum("ni,nia->na", grad_up, surface.tangents)
    pairs = surface.grid.neighbour_pairs()
    dist = np.linalg.norm(surface.points[pairs[:, 0]] - surface.points[pairs[:, 1]], axis=-1)
    diff = np.linalg.norm(amb[pairs[:, 0]] - amb[pairs[:, 1]], axis=-1)
    ok = dist > 0
    if not np.any(ok):
        return 0.0
    return float(np.max(diff[ok] / dist[ok] ** alpha))


def sphere_fit(points: np.ndarray) -> SphereFit:
    """Algebraic least-squares sphere (circle in the plane) through ``points``.

    Solves ``|x|^2 = 2 c.x + d`` for ``(c, d)``; the residual is the RMS of
    ``|x - c| - R``.
    """
    pts = np.asarray(points, dtype=float)
    n, dim = pts.shape
    if n < dim + 1:
        raise FitError(f"need at least {dim + 1} points, got {n}")
    mat = np.hstack([2.0 * pts, np.ones((n, 1))])
    if np.linalg.matrix_rank(mat) < dim + 1:
        raise FitError("degenerate point set (coplanar or repeated)")
    rhs = np.sum(pts**2, axis=1)
    sol, *_ = np.linalg.lstsq(mat, rhs, rcond=None)
    center = sol[:dim]
    r2 = sol[dim] + center @ center
    if r2 <= 0:
        raise FitError("fit produced a non-positive squared radius")
    radius = math.sqrt(r2)
    resid = np.linalg.norm(pts - center, axis=1) - radius
    return SphereFit(center=center, radius=radius, residual=float(np.sqrt(np.mean(resid**2))))


def cylinder_fit(points: np.ndarray, axis: int = 0) -> SphereFit:
    """Circle fit of the cross-sections of a tube aligned with coordinate ``axis``."""
    pts = np.asarray(points, dtype=float)
    keep = [k for k in range(pts.shape[1]) if k != axis]
    fit = sphere_fit(pts[:, keep])
    center = np.zeros(pts.shape[1])
    center[keep] = fit.center
    center[axis] = float(pts[:, axis].mean())
    return SphereFit(center=center, radius=fit.radius, residual=fit.residual)


def shape_fit(surface: ReferenceSurface, positions: np.ndarray) -> SphereFit | None:
    """Round-shape fit suited to the reference kind (``None`` for graphs)."""
    if surface.kind in ("sphere", "circle", "torus"):
        return sphere_fit(positions)
    if surface.kind == "cylinder":
        return cylinder_fit(positions, axis=0)
    return None


def measure(surface: ReferenceSurface, rho: np.ndarray, t: float = 0.0, *, alpha: float = 0.5,
            fit: bool = True, geometry: GraphGeometry | None = None) -> ObservableRecord:
    geo = geometry if geometry is not None else graph_geometry(surface, rho)
    grad_norm = np.sqrt(np.einsum("ni,nij,nj->n", geo.drho, surface.metric_inv, geo.drho))
    return ObservableRecord(
        t=float(t),
        area=area(geo),
        enclosed_volume=enclosed_volume(surface, rho, geo) if surface.closed else None,
        willmore_energy=willmore_energy(geo) if surface.m == 2 else None,
        sup_rho=float(np.abs(geo.rho).max()),
        sup_grad_rho=float(grad_norm.max()),
        holder_seminorm=holder_seminorm(geo, alpha),
        sphere_fit=shape_fit(surface, geo.position) if fit else None,
    )


@dataclass(frozen=True)
class DecayFit:
    rate: float
    r_squared: float


def decay_fit(times, values) -> DecayFit:
    """Least-squares slope of ``log(value)`` against ``t``; positive rate means decay."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise FitError("times and values must be one-dimensional and of equal length")
    if t.size < 10:
        raise FitError(f"need at least 10 samples, got {t.size}")
    if np.any(y <= 0):
        raise FitError("decay fit needs strictly positive values")
    logy = np.log(y)
    slope, intercept = np.polyfit(t, logy, 1)
    pred = slope * t + intercept
    ss_res = float(np.sum((logy - pred) ** 2))
    ss_tot = float(np.sum((logy - logy.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return DecayFit(rate=float(-slope), r_squared=r2)
