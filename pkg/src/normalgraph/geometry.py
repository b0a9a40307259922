"""Geometry of normal graphs ``Gamma_rho = {p + rho(p) nu(p)}`` over a reference surface.

Only the height function is differenced; every reference quantity (positions,
normals and their first and second chart derivatives) comes from the
closed-form reference.  Constant offsets are therefore reproduced to
round-off, and differencing error enters only through ``d rho`` and
``d^2 rho``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .reference import ReferenceSurface


class AdmissibilityError(ValueError):
    """The height function leaves the tubular regime of the reference."""


class DimensionError(ValueError):
    """Quantity requested for an unsupported chart dimension."""


@dataclass(frozen=True, eq=False)
class GraphGeometry:
    """Derived fields of ``Gamma_rho`` at every node.

    Index conventions follow :class:`~normalgraph.reference.ReferenceSurface`:
    ``shape_inverse[n, i, j]`` are the mixed components of
    ``M0 = (I - rho L)^{-1}``, ``tangent_a[n, k]`` the chart components of
    ``a(rho)``, ``christoffel[n, k, i, j] = Gamma^k_ij(rho)``.
    """

    surface: ReferenceSurface
    rho: np.ndarray
    drho: np.ndarray
    ddrho: np.ndarray
    shape_inverse: np.ndarray
    tangent_a: np.ndarray
    beta: np.ndarray
    metric: np.ndarray
    metric_inv: np.ndarray
    det: np.ndarray
    position: np.ndarray
    frame: np.ndarray
    hess_position: np.ndarray
    normal: np.ndarray
    sff: np.ndarray
    mean_curvature: np.ndarray
    christoffel: np.ndarray

    @property
    def m(self) -> int:
        return self.surface.m

    @property
    def weingarten(self) -> np.ndarray:
        """Mixed Weingarten matrix ``g^{ki}(rho) l_ij(rho)``."""
        return np.einsum("nki,nij->nkj", self.metric_inv, self.sff)

    @property
    def gauss_curvature(self) -> np.ndarray:
        if self.m != 2:
            raise DimensionError("Gauss curvature is defined here for two-dimensional surfaces only")
        return np.linalg.det(self.weingarten)

    def principal_curvatures(self) -> np.ndarray:
        chol = np.linalg.cholesky(self.metric)
        cinv = np.linalg.inv(chol)
        sym = np.einsum("nia,nab,njb->nij", cinv, self.sff, cinv)
        return np.linalg.eigvalsh(sym)

    @property
    def area_element(self) -> np.ndarray:
        return np.sqrt(self.det)

    def laplace_beltrami(self, u: np.ndarray) -> np.ndarray:
        grid = self.surface.grid
        du = grid.gradient(u)
        ddu = grid.hessian(u)
        return np.einsum("nij,nij->n", self.metric_inv, ddu - np.einsum("nkij,nk->nij", self.christoffel, du))


def check_admissible(surface: ReferenceSurface, rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (surface.size,):
        raise ValueError(f"height field has shape {rho.shape}; expected ({surface.size},)")
    if not np.all(np.isfinite(rho)):
        raise AdmissibilityError("height field contains non-finite values")
    sup = float(np.abs(rho).max())
    if sup >= surface.tubular_radius:
        raise AdmissibilityError(
            f"sup|rho| = {sup:.6g} reaches the tubular radius {surface.tubular_radius:.6g}"
        )
    return rho


def shape_factors(surface: ReferenceSurface, rho: np.ndarray, drho: np.ndarray | None = None):
    """Return ``(M0, a, beta)`` per node.

    ``M0`` is the inverse of ``I - rho L`` in mixed chart components,
    ``a = M0 grad(rho)`` with the gradient raised by ``g^{ij}``, and
    ``beta = (1 + |a|_g^2)^{-1/2}``.
    """
    rho = check_admissible(surface, rho)
    if drho is None:
        drho = surface.grid.gradient(rho)
    m = surface.m
    shift = np.eye(m)[None] - rho[:, None, None] * surface.weingarten
    if np.any(np.linalg.det(shift) <= 0):
        raise AdmissibilityError("I - rho L is singular or orientation-reversing at some node")
    m0 = np.linalg.inv(shift)
    grad_up = np.einsum("nij,nj->ni", surface.metric_inv, drho)
    a = np.einsum("nij,nj->ni", m0, grad_up)
    a2 = np.einsum("ni,nij,nj->n", a, surface.metric, a)
    beta = 1.0 / np.sqrt(1.0 + a2)
    return m0, a, beta


def _metric_from_formula(surface, rho, drho):
    l = surface.sff
    w = surface.weingarten
    g = surface.metric
    ll = np.einsum("nri,njr->nij", w, l)  # l^r_i l_jr
    return g - 2.0 * rho[:, None, None] * l + (rho**2)[:, None, None] * ll + np.einsum("ni,nj->nij", drho, drho)


def _inverse_from_formula(surface, m0, a, beta):
    # g^{ij}(rho) = (M0 tau^i | [I - beta^2 a(x)a] M0 tau^j); tau^i has components g^{ki}
    b = np.einsum("npk,nki->npi", m0, surface.metric_inv)
    gb = np.einsum("npq,nqi->npi", surface.metric, b)
    base = np.einsum("npi,npj->nij", b, gb)
    s = np.einsum("np,npi->ni", a, gb)
    return base - (beta**2)[:, None, None] * np.einsum("ni,nj->nij", s, s)


def pullback_metric(surface: ReferenceSurface, rho: np.ndarray):
    """Return ``(g_ij(rho), g^{ij}(rho), det g(rho))``.

    ``g_ij(rho) = g_ij - 2 rho l_ij + rho^2 l^r_i l_jr + d_i rho d_j rho`` and
    the inverse from ``K^{-1} = M0 (I - beta^2 a (x) a) M0``.
    """
    rho = check_admissible(surface, rho)
    drho = surface.grid.gradient(rho)
    m0, a, beta = shape_factors(surface, rho, drho)
    g = _metric_from_formula(surface, rho, drho)
    det = np.linalg.det(g)
    if np.any(det <= 0):
        raise AdmissibilityError("pulled-back metric is degenerate")
    return g, _inverse_from_formula(surface, m0, a, beta), det


def graph_geometry(surface: ReferenceSurface, rho: np.ndarray) -> GraphGeometry:
    """Compute every geometric field of ``Gamma_rho`` used by the flows."""
    rho = check_admissible(surface, rho)
    grid = surface.grid
    drho = grid.gradient(rho)
    ddrho = grid.hessian(rho)
    m0, a, beta = shape_factors(surface, rho, drho)
    g = _metric_from_formula(surface, rho, drho)
    det = np.linalg.det(g)
    if np.any(det <= 0):
        raise AdmissibilityError("pulled-back metric is degenerate")
    ginv = _inverse_from_formula(surface, m0, a, beta)

    nu = surface.normal
    r3 = rho[:, None, None]
    frame = surface.tangents + r3 * surface.dnormal + drho[:, :, None] * nu[:, None, :]
    hess = (
        surface.hess_points
        + rho[:, None, None, None] * surface.hess_normal
        + drho[:, :, None, None] * surface.dnormal[:, None, :, :]
        + drho[:, None, :, None] * surface.dnormal[:, :, None, :]
        + ddrho[:, :, :, None] * nu[:, None, None, :]
    )
    # unit normal beta (nu - a^k tau_k); (normal | nu) = beta > 0 fixes the orientation
    normal = beta[:, None] * (nu - np.einsum("nk,nka->na", a, surface.tangents))
    sff = np.einsum("nija,na->nij", hess, normal)
    sff = 0.5 * (sff + np.swapaxes(sff, 1, 2))
    mean = np.einsum("nij,nij->n", ginv, sff) / surface.m
    gam = np.einsum("nkl,nija,nla->nkij", ginv, hess, frame)
    position = surface.points + rho[:, None] * nu
    return GraphGeometry(
        surface=surface,
        rho=rho,
        drho=drho,
        ddrho=ddrho,
        shape_inverse=m0,
        tangent_a=a,
        beta=beta,
        metric=g,
        metric_inv=ginv,
        det=det,
        position=position,
        frame=frame,
        hess_position=hess,
        normal=normal,
        sff=sff,
        mean_curvature=mean,
        christoffel=gam,
    )


def embed(surface: ReferenceSurface, rho: np.ndarray):
    """Return node positions ``p + rho nu`` and the unit normal of ``Gamma_rho``."""
    rho = check_admissible(surface, rho)
    drho = surface.grid.gradient(rho)
    _, a, beta = shape_factors(surface, rho, drho)
    g = _metric_from_formula(surface, rho, drho)
    if np.any(np.linalg.det(g) <= 0):
        raise AdmissibilityError("degenerate tangent frame")
    normal = beta[:, None] * (surface.normal - np.einsum("nk,nka->na", a, surface.tangents))
    return surface.points + rho[:, None] * surface.normal, normal


def second_fundamental_form(surface: ReferenceSurface, rho: np.ndarray) -> np.ndarray:
    return graph_geometry(surface, rho).sff


def curvatures(surface: ReferenceSurface, rho: np.ndarray):
    """Mean curvature (average of principal curvatures) and, for ``m = 2``, Gauss curvature.

    For ``m != 2`` the second entry is ``None``.
    """
    geo = graph_geometry(surface, rho)
    return geo.mean_curvature, (geo.gauss_curvature if geo.m == 2 else None)


def gauss_curvature(surface: ReferenceSurface, rho: np.ndarray) -> np.ndarray:
    if surface.m != 2:
        raise DimensionError("Gauss curvature is defined here for two-dimensional surfaces only")
    return graph_geometry(surface, rho).gauss_curvature


def christoffel_rho(surface: ReferenceSurface, rho: np.ndarray, method: str = "embedding") -> np.ndarray:
    """Christoffel symbols of ``g(rho)``, indexed ``[n, k, i, j]``.

    ``method="embedding"`` uses ``g^{kl}(rho) (d_i d_j Psi | d_l Psi)``;
    ``method="metric"`` differences the metric components,
    ``1/2 g^{kl} (d_i g_jl + d_j g_il - d_l g_ij)``.
    """
    if method == "embedding":
        return graph_geometry(surface, rho).christoffel
    if method != "metric":
        raise ValueError(f"unknown method {method!r}")
    g, ginv, _ = pullback_metric(surface, rho)
    grid = surface.grid
    m = surface.m
    dg = np.empty((surface.size, m, m, m))  # [n, c, i, j] = d_c g_ij
    for i in range(m):
        for j in range(m):
            par = grid.parity((i, j))
            for c in range(m):
                dg[:, c, i, j] = grid.d1(c, par) @ g[:, i, j]
    # lower[n, i, j, l] = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
    lower = 0.5 * (dg + np.transpose(dg, (0, 2, 1, 3)) - np.transpose(dg, (0, 2, 3, 1)))
    return np.einsum("nkl,nijl->nkij", ginv, lower)


def laplace_beltrami(surface: ReferenceSurface, rho: np.ndarray, u: np.ndarray, geometry: GraphGeometry | None = None) -> np.ndarray:
    """``g^{ij}(rho) (d_i d_j u - Gamma^k_ij(rho) d_k u)`` with centred stencils."""
    geo = geometry if geometry is not None else graph_geometry(surface, rho)
    return geo.laplace_beltrami(np.asarray(u, dtype=float))


def dump_csv(path, surface: ReferenceSurface, values: np.ndarray, name: str = "value") -> None:
    """Write a node field as CSV rows: node index, chart coordinates, value."""
    coords = surface.grid.coords
    header = ["node", *surface.axis_names, name]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for n in range(surface.size):
            row = [str(n)] + [repr(float(c[n])) for c in coords] + [repr(float(values[n]))]
            fh.write(",".join(row) + "\n")
