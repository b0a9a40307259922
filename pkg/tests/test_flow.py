import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from normalgraph.flow import (
    FlowConfig,
    FlowState,
    GuardTrip,
    SolverError,
    _backward_error,
    _solve,
    assemble_principal,
    ellipticity_check,
    flow_rhs,
    run,
    splitting_remainder,
    step,
)
from normalgraph.geometry import AdmissibilityError, graph_geometry
from normalgraph.reference import build_reference, random_smooth_field

TWO_PI = 2 * math.pi
_SURF = {
    "sphere": build_reference("sphere", {"r": 1.0}, (16, 8)),
    "cylinder": build_reference("cylinder", {"r": 1.0, "length": TWO_PI}, (16, 8)),
    "torus": build_reference("torus", {"R": 2.0, "r": 1.0}, (16, 16)),
    "circle": build_reference("circle", {"r": 1.0}, 32),
}


_PAIRS = [(k, f) for k in sorted(_SURF) for f in ("sdf", "willmore") if not (k == "circle" and f == "willmore")]


@given(st.sampled_from(_PAIRS), st.integers(0, 10_000))
def test_splitting_identity(pair, seed):
    name, flow = pair
    s = _SURF[name]
    rho = random_smooth_field(s, 0.4 * s.tubular_radius, seed=seed)
    geo = graph_geometry(s, rho)
    a = assemble_principal(s, rho, geo)
    lhs = flow_rhs(s, rho, flow, geo) + a @ rho
    rem = splitting_remainder(s, rho, flow, geo, a)
    assert np.abs(lhs - rem).max() <= 1e-10 * max(1.0, np.abs(rem).max())


def test_willmore_needs_two_dimensions():
    from normalgraph.geometry import DimensionError

    s = _SURF["circle"]
    with pytest.raises(DimensionError):
        flow_rhs(s, np.zeros(s.size), "willmore")


@pytest.mark.parametrize("r, c", [(1.0, -0.3), (1.0, 0.2), (2.0, -0.6), (2.0, 0.4)])
def test_concentric_ellipticity_bounds(r, c):
    s = build_reference("sphere", {"r": r}, (16, 8))
    b = ellipticity_check(s, np.full(s.size, c), n_samples=50)
    want = (r / (r + c)) ** 4
    assert b.r_min == pytest.approx(want, abs=1e-10)
    assert b.r_max == pytest.approx(want, abs=1e-10)


@given(st.sampled_from(sorted(_SURF)), st.integers(0, 10_000), st.floats(0.1, 0.8))
def test_ellipticity_positive_and_sampled_within_bracket(name, seed, frac):
    s = _SURF[name]
    rho = random_smooth_field(s, frac * s.tubular_radius, seed=seed)
    exact = ellipticity_check(s, rho)
    sampled = ellipticity_check(s, rho, n_samples=40, seed=seed)
    assert exact.r_min > 0
    assert sampled.r_min == pytest.approx(exact.r_min, rel=1e-12)
    assert sampled.r_max == pytest.approx(exact.r_max, rel=1e-12)


def test_principal_operator_on_sphere_harmonic():
    # A(0) = (1/2) Lap^2 on the unit sphere; cos(theta) is an eigenfunction with eigenvalue 2
    errs = []
    for res in ((32, 16), (64, 32)):
        s = build_reference("sphere", {"r": 1.0}, res)
        y = np.cos(s.grid.coords[0])
        errs.append(np.abs(assemble_principal(s, np.zeros(s.size)) @ y - 2 * y).max())
    assert errs[1] < 0.01 and errs[0] / errs[1] > 3


def test_composed_and_covariant_forms_agree_at_zero_on_torus():
    diffs = []
    for n in (32, 64):
        s = build_reference("torus", {"R": 2.0, "r": 1.0}, (n, n))
        u, v = s.grid.coords
        f = np.cos(u) * np.sin(2 * v) + np.cos(v)
        zero = np.zeros(s.size)
        diffs.append(np.abs(assemble_principal(s, zero) @ f - assemble_principal(s, zero, form="covariant") @ f).max())
    assert diffs[1] < 0.05 and 3.0 < diffs[0] / diffs[1] < 5.0
    with pytest.raises(ValueError):
        assemble_principal(s, zero, form="mixed")


def test_composed_and_covariant_share_principal_part():
    # on a smooth field the forms differ by lower-order terms only: the gap stays bounded as h -> 0
    gaps = []
    for n in (32, 64):
        s = build_reference("torus", {"R": 2.0, "r": 1.0}, (n, n))
        rho = random_smooth_field(s, 0.3, seed=4)
        u, v = s.grid.coords
        f = np.cos(u + v)
        d = assemble_principal(s, rho) @ f - assemble_principal(s, rho, form="covariant") @ f
        gaps.append(np.abs(d).max())
    assert gaps[1] < 1.5 * gaps[0]


@pytest.mark.parametrize("flow", ["sdf", "willmore"])
@pytest.mark.parametrize("scheme", ["imex", "rk4"])
def test_sphere_is_an_equilibrium_for_one_step(flow, scheme):
    s = _SURF["sphere"]
    new = step(FlowState(0.0, np.full(s.size, 0.1)), s, FlowConfig(flow=flow, scheme=scheme, dt=1e-4))
    assert np.abs(new.rho - 0.1).max() < 1e-10
    assert new.steps == 1 and new.t == pytest.approx(1e-4)
    assert new.last_report.guard_margin == pytest.approx(0.8 - 0.1)


def test_imex_and_rk4_agree_on_short_run():
    s = build_reference("circle", {"r": 1.0}, 32)
    rho = 0.1 * np.cos(2 * s.grid.coords[0])
    out = {}
    for scheme in ("imex", "rk4"):
        cfg = FlowConfig(flow="sdf", scheme=scheme, dt=1e-5, t_end=2e-3, stationary_tol=0.0)
        out[scheme] = run(rho, s, cfg, observe=False).state.rho
    assert np.abs(out["imex"] - out["rk4"]).max() < 1e-4


def test_run_bookkeeping():
    s = _SURF["sphere"]
    rho = 0.05 * np.sin(s.grid.coords[0]) ** 2 * np.cos(2 * s.grid.coords[1])
    cfg = FlowConfig(flow="willmore", dt=1e-3, t_end=0.02, record_every=5, snapshot_every=10)
    res = run(rho, s, cfg)
    assert res.reason == "completed" and res.steps == 20
    assert res.state.t == 0.02
    assert [r.t for r in res.records] == pytest.approx([0.0, 0.005, 0.01, 0.015, 0.02])
    assert [t for t, _ in res.snapshots] == pytest.approx([0.0, 0.01, 0.02])
    assert len(res.times) == len(res.guard_margins) == 21
    assert all(m > 0 for m in res.guard_margins)


def test_stationary_stop_and_disable():
    s = _SURF["sphere"]
    cfg = FlowConfig(flow="willmore", dt=1e-3, t_end=0.01)
    res = run(np.zeros(s.size), s, cfg, observe=False)
    assert res.reason == "stationary" and res.steps == 1
    res = run(np.zeros(s.size), s, FlowConfig(flow="willmore", dt=1e-3, t_end=0.01, stationary_tol=0.0),
              observe=False)
    assert res.reason == "completed" and res.steps == 10


def test_guard_trip_and_no_exposed_state():
    # a thin slice of cylinder expands under Willmore flow; r(t)^4 = 1 + t
    s = build_reference("cylinder", {"r": 1.0, "length": TWO_PI}, (16, 8))
    cfg = FlowConfig(flow="willmore", dt=1e-3, t_end=1.0, guard_fraction=0.02)
    res = run(np.zeros(s.size), s, cfg, observe=False)
    assert res.reason == "guard"
    t_star = 1.02**4 - 1
    assert abs(res.state.t - t_star) <= 1e-3 + 1e-12
    limit = 0.02 * s.tubular_radius
    assert np.abs(res.state.rho).max() >= limit
    assert np.abs(res.state.rho).max() < s.tubular_radius
    assert all(m > 0 for m in res.guard_margins[:-1]) and res.guard_margins[-1] <= 0


def test_guard_on_initial_and_step_raises():
    s = _SURF["sphere"]
    res = run(np.full(s.size, 0.85), s, FlowConfig(guard_fraction=0.8), observe=False)
    assert res.reason == "guard" and res.steps == 0
    with pytest.raises(GuardTrip):
        step(FlowState(0.0, np.full(s.size, 0.85)), s, FlowConfig(guard_fraction=0.8))
    with pytest.raises(AdmissibilityError):
        step(FlowState(0.0, np.full(s.size, 1.0)), s, FlowConfig())


def test_solver_failure_reason():
    s = _SURF["sphere"]
    rho = 0.05 * np.cos(s.grid.coords[0])
    res = run(rho, s, FlowConfig(flow="willmore", dt=1e-3, t_end=0.01, solver_tol=1e-30), observe=False)
    assert res.reason == "solver_failure" and "residual" in res.message


def test_gmres_matches_direct():
    s = build_reference("sphere", {"r": 1.0}, (32, 16))
    rho = 0.1 * np.sin(s.grid.coords[0]) ** 2 * np.cos(2 * s.grid.coords[1])
    st0 = FlowState(0.0, rho)
    a = step(st0, s, FlowConfig(flow="willmore", dt=1e-4))
    b = step(st0, s, FlowConfig(flow="willmore", dt=1e-4, solver="gmres"))
    assert np.abs(a.rho - b.rho).max() < 1e-9
    assert b.last_report.residual <= 1e-10


def test_backward_error_and_solve():
    import scipy.sparse as sp

    rng = np.random.default_rng(0)
    m = sp.csr_matrix(np.eye(5) * 4 + rng.normal(size=(5, 5)) * 0.1)
    b = rng.normal(size=5)
    x, iters, res = _solve(m, b, FlowConfig(solver="direct"))
    assert res < 1e-14 and iters == 1
    assert _backward_error(m, np.zeros(5), np.zeros(5)) == 0.0
    with pytest.raises(SolverError):
        _solve(m, b, FlowConfig(solver_tol=1e-40))


@pytest.mark.parametrize(
    "kwargs, word",
    [
        ({"flow": "mcf"}, "flow"),
        ({"scheme": "euler"}, "scheme"),
        ({"solver": "cg"}, "solver"),
        ({"dt": -1e-3}, "dt"),
        ({"dt": 0.0}, "dt"),
        ({"t_end": -1.0}, "t_end"),
        ({"guard_fraction": 1.0}, "guard_fraction"),
        ({"solver_tol": 0.0}, "solver_tol"),
        ({"solver_maxiter": 0}, "solver_maxiter"),
        ({"record_every": 0}, "record_every"),
        ({"snapshot_every": -1}, "snapshot_every"),
        ({"stationary_tol": -1e-3}, "stationary_tol"),
    ],
)
def test_config_validation(kwargs, word):
    with pytest.raises(ValueError, match=word):
        FlowConfig(**kwargs)


def test_stationary_threshold_default_scales_with_radius():
    assert FlowConfig().stationary_threshold(2.0) == pytest.approx(1e-8 / 8)
    assert FlowConfig(stationary_tol=0.0).stationary_threshold(2.0) == 0.0


@pytest.mark.parametrize("flow", ["sdf", "willmore"])
def test_remainder_is_lower_order(flow):
    # the response of the remainder to a high-frequency ripple grows slower than that of A
    s = build_reference("torus", {"R": 2.0, "r": 1.0}, (128, 128))
    u, v = s.grid.coords
    base = 0.2 * np.cos(v)
    g0 = graph_geometry(s, base)
    a0 = assemble_principal(s, base, g0)
    r0, ar0 = splitting_remainder(s, base, flow, g0, a0), a0 @ base
    ratios = []
    for k in (4, 8, 16):
        rho = base + 1e-3 * np.cos(k * u) * np.cos(k * v)
        geo = graph_geometry(s, rho)
        a = assemble_principal(s, rho, geo)
        ratios.append(np.abs(splitting_remainder(s, rho, flow, geo, a) - r0).max() / np.abs(a @ rho - ar0).max())
    assert ratios[0] / ratios[1] > 2.5 and ratios[1] / ratios[2] > 2.5
