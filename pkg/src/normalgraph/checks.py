"""Small-grid invariant suite behind ``normalgraph check``.

Each check is cheap (well under a second) and returns ``(name, ok, detail)``.
"""

from __future__ import annotations

import numpy as np

from .certify import certify_reference
from .flow import FlowConfig, FlowState, assemble_principal, ellipticity_check, flow_rhs, splitting_remainder, step
from .geometry import graph_geometry, pullback_metric
from .observables import sphere_fit
from .reference import build_reference, geometry_consistency_check, random_smooth_field


def _concentric():
    s = build_reference("sphere", {"r": 1.0}, (16, 8))
    geo = graph_geometry(s, np.full(s.size, 0.2))
    err = max(np.abs(geo.mean_curvature + 1 / 1.2).max(), np.abs(geo.gauss_curvature - 1 / 1.44).max())
    return err < 1e-10, f"max curvature error {err:.2e}"


def _inverse_metric():
    s = build_reference("torus", {"R": 2.0, "r": 1.0}, (16, 16))
    g, ginv, _ = pullback_metric(s, random_smooth_field(s, 0.3, seed=0))
    err = np.abs(np.einsum("nij,njk->nik", ginv, g) - np.eye(2)).max()
    return err < 1e-10, f"|g^-1 g - I| = {err:.2e}"


def _splitting():
    s = build_reference("sphere", {"r": 1.0}, (16, 8))
    rho = random_smooth_field(s, 0.2, seed=1)
    worst = 0.0
    for flow in ("sdf", "willmore"):
        geo = graph_geometry(s, rho)
        a = assemble_principal(s, rho, geo)
        lhs = flow_rhs(s, rho, flow, geo) + a @ rho
        rem = splitting_remainder(s, rho, flow, geo, a)
        worst = max(worst, float(np.abs(lhs - rem).max() / max(1.0, np.abs(rem).max())))
    return worst < 1e-10, f"relative splitting defect {worst:.2e}"


def _ellipticity():
    s = build_reference("sphere", {"r": 1.0}, (16, 8))
    b = ellipticity_check(s, np.full(s.size, -0.3))
    want = (1 / 0.7) ** 4
    err = max(abs(b.r_min - want), abs(b.r_max - want))
    return err < 1e-10, f"symbol bounds ({b.r_min:.6g}, {b.r_max:.6g}) vs {want:.6g}"


def _equilibrium():
    s = build_reference("sphere", {"r": 1.0}, (16, 8))
    worst = 0.0
    for flow in ("sdf", "willmore"):
        for scheme in ("imex", "rk4"):
            cfg = FlowConfig(flow=flow, scheme=scheme, dt=1e-4)
            new = step(FlowState(0.0, np.zeros(s.size)), s, cfg)
            worst = max(worst, float(np.abs(new.rho).max()))
    return worst < 1e-10, f"max change after one step {worst:.2e}"


def _ball_condition():
    s = build_reference("sphere", {"r": 1.0}, (64, 32))
    ok_in = certify_reference(s, 1.0)
    out = certify_reference(s, 1.2)
    ok = ok_in.verdict == "certified" and out.verdict == "violated" and out.witness.recheck(1.2)
    return ok, f"a=1: {ok_in.verdict}, a=1.2: {out.verdict}"


def _consistency():
    errs = [geometry_consistency_check(build_reference("torus", {"R": 2.0, "r": 1.0}, n)).max_error for n in (16, 32)]
    ratio = errs[0] / errs[1]
    return 3.0 < ratio < 5.0, f"refinement ratio {ratio:.2f}"


def _fit():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(50, 3))
    pts = 2.0 * v / np.linalg.norm(v, axis=1, keepdims=True) + np.array([0.0, 0.0, 1.0])
    f = sphere_fit(pts)
    err = max(abs(f.radius - 2.0), float(np.abs(f.center - [0, 0, 1]).max()))
    return err < 1e-10, f"fit error {err:.2e}"


CHECKS = (
    ("concentric curvature", _concentric),
    ("inverse metric identity", _inverse_metric),
    ("splitting identity", _splitting),
    ("concentric ellipticity", _ellipticity),
    ("sphere equilibrium step", _equilibrium),
    ("ball condition on the sphere", _ball_condition),
    ("reference consistency order", _consistency),
    ("sphere fit", _fit),
)


def run_checks():
    out = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # report, do not abort the suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
