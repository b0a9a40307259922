"""Height-function evolution for surface diffusion and Willmore flow.

The height equation is written as ``d_t rho + A(rho) rho = R(rho)`` where
``A(rho) u = (1/m) C(g*(rho) (x) g*(rho), nabla^4 u)`` is the fourth-order
principal part with coefficients frozen at ``rho`` and ``nabla`` the
Levi-Civita connection of the reference surface.  The IMEX scheme treats
``A(rho^n)`` implicitly and the remainder ``R`` explicitly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import AdmissibilityError, DimensionError, GraphGeometry, check_admissible, graph_geometry
from .reference import ReferenceSurface

log = logging.getLogger(__name__)

FLOWS = ("sdf", "willmore")
SCHEMES = ("imex", "rk4")
SOLVERS = ("direct", "gmres")


class SolverError(RuntimeError):
    """Linear solve failed to reach the requested residual."""

    def __init__(self, message, residual=math.nan, iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class GuardTrip(RuntimeError):
    """A step produced a height field outside the guarded region."""


# -- right-hand sides ----------------------------------------------------------


def sdf_rhs(surface: ReferenceSurface, rho: np.ndarray, geometry: GraphGeometry | None = None) -> np.ndarray:
    """``-(1/beta) Lap_rho H_rho``."""
    geo = geometry if geometry is not None else graph_geometry(surface, rho)
    return -geo.laplace_beltrami(geo.mean_curvature) / geo.beta


def willmore_rhs(surface: ReferenceSurface, rho: np.ndarray, geometry: GraphGeometry | None = None) -> np.ndarray:
    """``-(1/beta) (Lap_rho H + 2 H (H^2 - K))``; two-dimensional surfaces only."""
    if surface.m != 2:
        raise DimensionError("Willmore flow is defined for surfaces in R^3 (m = 2)")
    geo = geometry if geometry is not None else graph_geometry(surface, rho)
    h = geo.mean_curvature
    lap = geo.laplace_beltrami(h)
    return -(lap + 2.0 * h * (h * h - geo.gauss_curvature)) / geo.beta


def flow_rhs(surface, rho, flow: str, geometry: GraphGeometry | None = None) -> np.ndarray:
    if flow == "sdf":
        return sdf_rhs(surface, rho, geometry)
    if flow == "willmore":
        return willmore_rhs(surface, rho, geometry)
    raise ValueError(f"unknown flow {flow!r}; expected one of {FLOWS}")


# -- principal part --------------------------------------------------------------


def _pairs(m):
    return [(i, j) for i in range(m) for j in range(i, m)]


def fourth_order_blocks(surface: ReferenceSurface) -> dict:
    """Sparse matrices ``T[(ij), (lm)]`` with
    ``C(G (x) G, nabla^4 u) = sum G^{ij} G^{lm} T[(ij), (lm)] u`` for any
    symmetric ``G``; off-diagonal pairs already carry both orderings.

    The index convention is ``(nabla^4 u)_{lmji} = (nabla_i nabla_j nabla^2 u)_{lm}``,
    i.e. the inner pair is contracted with the first two derivatives.  The
    leading term of each block is the composed compact stencil
    ``d2_ij d2_lm`` so the discrete principal part matches the one produced
    by differencing the mean curvature twice.
    """
    if "fourth_order_blocks" in surface.cache:
        return surface.cache["fourth_order_blocks"]
    grid = surface.grid
    m = surface.m
    gam = surface.christoffel
    par = grid.parity
    diag = {}

    def dg(k, i, j):
        key = (k, i, j)
        if key not in diag:
            diag[key] = sp.diags(gam[:, k, i, j])
        return diag[key]

    ids = range(m)
    # W_lm = nabla^2 u
    W = {}
    for l, mm in product(ids, ids):
        op = grid.d2(l, mm)
        for k in ids:
            op = op - dg(k, l, mm) @ grid.d1(k)
        W[l, mm] = op.tocsr()
    # S'_lmj: connection part of (nabla W)_{lm;j};  S = d_j W + S'
    Sp, S = {}, {}
    for l, mm, j in product(ids, ids, ids):
        op = sp.csr_matrix((grid.size, grid.size))
        for p in ids:
            op = op - dg(p, j, l) @ W[p, mm] - dg(p, j, mm) @ W[l, p]
        Sp[l, mm, j] = op.tocsr()
        S[l, mm, j] = (grid.d1(j, par((l, mm))) @ W[l, mm] + Sp[l, mm, j]).tocsr()
    R = {}
    for l, mm, j, i in product(ids, ids, ids, ids):
        op = grid.d2(i, j, par((l, mm))) @ W[l, mm] + grid.d1(i, par((l, mm, j))) @ Sp[l, mm, j]
        for p in ids:
            op = op - dg(p, i, l) @ S[p, mm, j] - dg(p, i, mm) @ S[l, p, j] - dg(p, i, j) @ S[l, mm, p]
        R[l, mm, j, i] = op
    blocks = {}
    for a, b in product(_pairs(m), _pairs(m)):
        i, j = a
        l, mm = b
        terms = [(ii, jj) for ii, jj in {(i, j), (j, i)}]
        terms_b = [(ll, qq) for ll, qq in {(l, mm), (mm, l)}]
        op = sp.csr_matrix((grid.size, grid.size))
        for (ii, jj), (ll, qq) in product(terms, terms_b):
            op = op + R[ll, qq, jj, ii]
        blocks[a, b] = op.tocsr()
    surface.cache["fourth_order_blocks"] = blocks
    return blocks


def _row_scale(mat: sp.csr_matrix, w: np.ndarray) -> sp.csr_matrix:
    """``diag(w) @ mat`` without building the diagonal matrix."""
    return sp.csr_matrix((mat.data * np.repeat(w, np.diff(mat.indptr)), mat.indices, mat.indptr), shape=mat.shape)


def _trace_hessian(surface: ReferenceSurface, coef: np.ndarray, christoffel: np.ndarray) -> sp.csr_matrix:
    """Matrix of ``u -> coef^{ij} (d2_ij u - Gamma^k_ij d_k u)``."""
    grid = surface.grid
    m = surface.m
    first = np.zeros((surface.size, m))
    out = None
    for i, j in _pairs(m):
        w = coef[:, i, j] if i == j else 2.0 * coef[:, i, j]
        first += w[:, None] * christoffel[:, :, i, j]
        term = _row_scale(grid.d2(i, j), w)
        out = term if out is None else out + term
    for k in range(m):
        out = out - _row_scale(grid.d1(k), first[:, k])
    return out.tocsr()


def assemble_principal(surface: ReferenceSurface, rho: np.ndarray, geometry: GraphGeometry | None = None,
                       form: str = "composed") -> sp.csr_matrix:
    """Sparse matrix of the principal operator ``A(rho)`` frozen at ``rho``.

    ``form="covariant"`` assembles ``(1/m) C(g*(rho) (x) g*(rho), nabla^4 u)``
    directly from :func:`fourth_order_blocks`.

    ``form="composed"`` (used by the time stepper) assembles
    ``(1/m) beta^{-1} Lap_rho (beta g^{lm}(rho) nabla^2_lm u)``.  Both share the
    principal symbol ``(1/m)|xi|^4_{g*(rho)}`` and coincide at ``rho = 0``;
    they differ by third- and lower-order terms carrying derivatives of
    ``g*(rho)`` and ``beta``.  The composed form is built from exactly the
    stencils that produce ``Lap_rho H_rho``, so the explicit remainder stays
    free of grid-scale fourth-order residue, including near coordinate poles.
    """
    geo = geometry if geometry is not None else graph_geometry(surface, rho)
    ginv = geo.metric_inv
    if form == "covariant":
        out = None
        for (a, b), mat in fourth_order_blocks(surface).items():
            coef = ginv[:, a[0], a[1]] * ginv[:, b[0], b[1]] / surface.m
            term = sp.diags(coef) @ mat
            out = term if out is None else out + term
        return out.tocsr()
    if form != "composed":
        raise ValueError(f"unknown principal form {form!r}")
    inner = _trace_hessian(surface, ginv * geo.beta[:, None, None], surface.christoffel)
    outer = _trace_hessian(surface, ginv, geo.christoffel)
    return _row_scale((outer @ inner).tocsr(), 1.0 / (surface.m * geo.beta))


def splitting_remainder(surface: ReferenceSurface, rho: np.ndarray, flow: str, geometry: GraphGeometry | None = None,
                        principal: sp.csr_matrix | None = None) -> np.ndarray:
    """Explicit part ``A(rho) rho + rhs(rho)`` of the quasilinear splitting."""
    geo = geometry if geometry is not None else graph_geometry(surface, rho)
    a = principal if principal is not None else assemble_principal(surface, rho, geo)
    return a @ geo.rho + flow_rhs(surface, geo.rho, flow, geo)


@dataclass(frozen=True)
class EllipticityBounds:
    r_min: float
    r_max: float


def ellipticity_check(surface: ReferenceSurface, rho: np.ndarray, n_samples: int = 0, seed: int = 0) -> EllipticityBounds:
    """Extremes of the principal symbol ``|xi|^4_{g*(rho)}`` over unit covectors ``|xi|_{g*} = 1``.

    The extremes over the unit sphere are the squared extreme eigenvalues of
    ``g*(rho)`` expressed in a ``g``-orthonormal coframe; ``n_samples > 0``
    additionally evaluates that many deterministic random covectors per node
    and widens the bracket if any sample falls outside (it never should).
    """
    geo = graph_geometry(surface, rho)
    chol = np.linalg.cholesky(surface.metric)  # g = L L^T, unit covectors xi = L w
    sym = np.einsum("nai,nab,nbj->nij", chol, geo.metric_inv, chol)
    eig = np.linalg.eigvalsh(sym)
    lo, hi = float(eig[:, 0].min() ** 2), float(eig[:, -1].max() ** 2)
    if n_samples:
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(n_samples, surface.m))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        xi = np.einsum("nij,sj->nsi", chol, w)
        vals = np.einsum("nsi,nij,nsj->ns", xi, geo.metric_inv, xi) ** 2
        lo, hi = min(lo, float(vals.min())), max(hi, float(vals.max()))
    return EllipticityBounds(lo, hi)


# -- time stepping -----------------------------------------------------------------


@dataclass(frozen=True)
class FlowConfig:
    flow: str = "sdf"
    scheme: str = "imex"
    dt: float = 1e-3
    t_end: float = 1.0
    guard_fraction: float = 0.8
    solver: str = "direct"
    solver_tol: float = 1e-10
    solver_maxiter: int = 500
    stationary_tol: float | None = None
    record_every: int = 1
    snapshot_every: int = 0

    def __post_init__(self):
        if self.flow not in FLOWS:
            raise ValueError(f"flow must be one of {FLOWS}, got {self.flow!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end >= 0:
            raise ValueError("t_end must be non-negative")
        if not 0 < self.guard_fraction < 1:
            raise ValueError("guard_fraction must lie in (0, 1)")
        if not self.solver_tol > 0:
            raise ValueError("solver_tol must be positive")
        if self.solver_maxiter < 1:
            raise ValueError("solver_maxiter must be at least 1")
        if self.record_every < 1:
            raise ValueError("record_every must be at least 1")
        if self.snapshot_every < 0:
            raise ValueError("snapshot_every must be non-negative")
        if self.stationary_tol is not None and not self.stationary_tol >= 0:
            raise ValueError("stationary_tol must be non-negative (0 disables the stationarity stop)")

    def stationary_threshold(self, tubular_radius: float) -> float:
        if self.stationary_tol is not None:
            return self.stationary_tol
        return 1e-8 / tubular_radius**3


@dataclass(frozen=True)
class StepReport:
    max_rate: float
    solver_iterations: int = 0
    residual: float = 0.0
    guard_margin: float = math.nan


@dataclass(frozen=True)
class FlowState:
    t: float
    rho: np.ndarray
    last_report: StepReport | None = None
    steps: int = 0


def _backward_error(matrix, x, rhs) -> float:
    """Normwise backward error ``|Mx - b| / (|M| |x| + |b|)`` in the infinity norm."""
    anorm = float(abs(matrix).sum(axis=1).max())
    denom = anorm * float(np.abs(x).max()) + float(np.abs(rhs).max())
    if denom == 0.0:
        return 0.0
    return float(np.abs(matrix @ x - rhs).max()) / denom


def _solve(matrix: sp.csr_matrix, rhs: np.ndarray, config: FlowConfig):
    """Solve ``matrix x = rhs``; returns ``(x, iterations, residual)``.

    The residual is the normwise backward error, which stays meaningful for
    the badly conditioned fourth-order systems where a residual relative to
    ``|b|`` alone bottoms out near ``eps * cond``.
    """
    if config.solver == "gmres":
        dinv = 1.0 / matrix.diagonal()
        precond = spla.LinearOperator(matrix.shape, matvec=lambda v: dinv * v)
        count = [0]

        def cb(_):
            count[0] += 1

        x, info = spla.gmres(matrix, rhs, M=precond, rtol=config.solver_tol, atol=0.0, restart=100,
                             maxiter=config.solver_maxiter, callback=cb, callback_type="pr_norm")
        res = _backward_error(matrix, x, rhs) if np.all(np.isfinite(x)) else math.inf
        if info == 0 and res <= config.solver_tol:
            return x, count[0], res
        if matrix.shape[0] > 64 * 64:
            raise SolverError(f"gmres stalled at residual {res:.3e}", res, count[0])
        log.debug("gmres stalled at %.3e; falling back to a direct solve", res)
    x = spla.spsolve(matrix.tocsc(), rhs, permc_spec="MMD_ATA")
    if not np.all(np.isfinite(x)):
        raise SolverError("direct solve produced non-finite values", math.inf, 1)
    res = _backward_error(matrix, x, rhs)
    if res > config.solver_tol:
        raise SolverError(f"direct solve residual {res:.3e} exceeds tolerance {config.solver_tol:.1e}", res, 1)
    return x, 1, res


def step(state: FlowState, surface: ReferenceSurface, config: FlowConfig) -> FlowState:
    """Advance one time step.

    Raises :class:`SolverError` when the implicit solve fails,
    :class:`GuardTrip` when the new height field leaves the guarded region,
    and :class:`AdmissibilityError` when an intermediate stage leaves the
    tubular neighbourhood.
    """
    rho = check_admissible(surface, state.rho)
    dt = config.dt
    iters, res = 0, 0.0
    if config.scheme == "imex":
        geo = graph_geometry(surface, rho)
        a = assemble_principal(surface, rho, geo)
        rem = splitting_remainder(surface, rho, config.flow, geo, a)
        lhs = sp.identity(surface.size, format="csr") + dt * a
        new, iters, res = _solve(lhs, rho + dt * rem, config)
    else:
        def f(r):
            return flow_rhs(surface, check_admissible(surface, r), config.flow)

        k1 = f(rho)
        k2 = f(rho + 0.5 * dt * k1)
        k3 = f(rho + 0.5 * dt * k2)
        k4 = f(rho + dt * k3)
        new = rho + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(new)):
        raise SolverError("step produced non-finite values", math.inf, iters)
    limit = config.guard_fraction * surface.tubular_radius
    sup = float(np.abs(new).max())
    report = StepReport(
        max_rate=float(np.abs(new - rho).max() / dt),
        solver_iterations=iters,
        residual=res,
        guard_margin=limit - sup,
    )
    out = FlowState(t=state.t + dt, rho=new, last_report=report, steps=state.steps + 1)
    if sup >= limit:
        err = GuardTrip(f"sup|rho| = {sup:.6g} reached the guard {limit:.6g} at t = {out.t:.6g}")
        err.state = out if sup < surface.tubular_radius else None
        raise err
    return out


@dataclass
class RunResult:
    reason: str
    state: FlowState
    times: list = field(default_factory=list)
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    guard_margins: list = field(default_factory=list)
    message: str = ""

    @property
    def steps(self) -> int:
        return self.state.steps


def run(initial: np.ndarray, surface: ReferenceSurface, config: FlowConfig, *, observe: bool = True,
        fit: bool = True, alpha: float = 0.5, callback=None) -> RunResult:
    """Integrate until ``t_end``, a guard trip, a solver failure or stationarity.

    Termination reasons: ``completed``, ``guard``, ``stationary``,
    ``solver_failure``.  Every exposed state satisfies ``sup|rho| < a``.
    """
    from .observables import measure

    rho0 = check_admissible(surface, np.array(initial, dtype=float))
    state = FlowState(t=0.0, rho=rho0)
    result = RunResult(reason="completed", state=state)
    threshold = config.stationary_threshold(surface.tubular_radius)
    limit = config.guard_fraction * surface.tubular_radius

    def record(st, force=False):
        if observe and (force or st.steps % config.record_every == 0):
            result.records.append(measure(surface, st.rho, st.t, alpha=alpha, fit=fit))
        if config.snapshot_every and (force or st.steps % config.snapshot_every == 0):
            result.snapshots.append((st.t, st.rho.copy()))
        result.times.append(st.t)
        result.guard_margins.append(limit - float(np.abs(st.rho).max()))
        if callback is not None:
            callback(st)

    record(state, force=True)
    if float(np.abs(rho0).max()) >= limit:
        result.reason = "guard"
        result.message = "initial height already at or beyond the guard"
        return result
    n_steps = int(math.ceil(config.t_end / config.dt - 1e-9))
    for _ in range(n_steps):
        try:
            new = step(state, surface, config)
        except GuardTrip as trip:
            if trip.state is not None:
                state = trip.state
                record(state, force=True)
            result.reason, result.message = "guard", str(trip)
            break
        except AdmissibilityError as exc:
            result.reason, result.message = "guard", str(exc)
            break
        except SolverError as exc:
            result.reason, result.message = "solver_failure", str(exc)
            break
        state = replace(new, t=new.steps * config.dt)  # no drift from repeated addition
        stationary = state.last_report.max_rate < threshold
        record(state, force=stationary)
        if stationary:
            result.reason = "stationary"
            break
    else:
        if observe and result.records and result.records[-1].t != state.t:
            record(state, force=True)
    result.state = state
    return result
