import math

import numpy as np
import pytest
import sympy as sp

from normalgraph.reference import (
    SurfaceError,
    build_reference,
    export_obj,
    geometry_consistency_check,
    random_smooth_field,
    torus_principal_curvatures,
    weingarten_sup,
)

TWO_PI = 2 * math.pi


def _symbolic_geometry(param, coords):
    """Metric, Christoffel symbols (from the metric) and sff of a parametrisation."""
    x = sp.Matrix(param)
    tau = [x.diff(c) for c in coords]
    g = sp.Matrix(2, 2, lambda i, j: sp.simplify(tau[i].dot(tau[j])))
    ginv = sp.simplify(g.inv())
    gam = [[[sp.simplify(sum(ginv[k, l] * (g[j, l].diff(coords[i]) + g[i, l].diff(coords[j]) - g[i, j].diff(coords[l]))
                             for l in range(2)) / 2) for j in range(2)] for i in range(2)] for k in range(2)]
    n = tau[0].cross(tau[1])
    n = n / sp.sqrt(sp.simplify(n.dot(n)))
    sff = sp.Matrix(2, 2, lambda i, j: sp.simplify(-tau[i].dot(n.diff(coords[j]))))
    return g, gam, sff, n


def _eval(expr, coords, values):
    f = sp.lambdify(coords, expr, "numpy")
    return np.broadcast_to(np.asarray(f(*values), dtype=float), values[0].shape)


@pytest.mark.parametrize("kind", ["torus", "sphere"])
def test_closed_form_geometry_matches_symbolic_oracle(kind):
    a, b = sp.symbols("a b", real=True)
    if kind == "torus":
        big, r = 2.0, 1.0
        param = [(big + r * sp.cos(b)) * sp.cos(a), (big + r * sp.cos(b)) * sp.sin(a), r * sp.sin(b)]
        s = build_reference("torus", {"R": big, "r": r}, (16, 12))
    else:
        param = [sp.sin(a) * sp.cos(b), sp.sin(a) * sp.sin(b), sp.cos(a)]
        s = build_reference("sphere", {"r": 1.0}, (16, 8))
    g, gam, sff, n = _symbolic_geometry(param, (a, b))
    vals = s.grid.coords
    # orientation of the symbolic normal may differ; fix it from the stored normal
    nvec = np.stack([_eval(n[k], (a, b), vals) for k in range(3)], -1)
    sign = np.sign(np.einsum("na,na->n", nvec, s.normal))
    assert np.all(sign == sign[0])
    for i in range(2):
        for j in range(2):
            assert np.abs(_eval(g[i, j], (a, b), vals) - s.metric[:, i, j]).max() < 1e-12
            assert np.abs(sign[0] * _eval(sff[i, j], (a, b), vals) - s.sff[:, i, j]).max() < 1e-12
            for k in range(2):
                assert np.abs(_eval(gam[k][i][j], (a, b), vals) - s.christoffel[:, k, i, j]).max() < 1e-11


def test_sphere_outward_normal_and_negative_curvature(sphere64):
    s = sphere64
    assert np.abs(s.normal - s.points).max() < 1e-15
    assert np.abs(s.principal_curvatures + 1).max() < 1e-12
    assert s.tubular_radius == 1.0
    eye = np.einsum("nij,njk->nik", s.metric_inv, s.metric)
    assert np.abs(eye - np.eye(2)).max() < 1e-12
    assert np.abs(np.linalg.norm(s.normal, axis=1) - 1).max() < 1e-12


def test_cylinder_and_torus_curvatures():
    cyl = build_reference("cylinder", {"r": 2.0, "length": TWO_PI}, (16, 16))
    assert np.allclose(np.sort(cyl.principal_curvatures, axis=1), [[-0.5, 0.0]], atol=1e-14)
    assert cyl.tubular_radius == 2.0
    tor = build_reference("torus", {"R": 2.0, "r": 1.0}, (32, 32))
    k_tube, k_par = torus_principal_curvatures(2.0, 1.0, tor.grid.coords[1])
    exact = np.sort(np.stack([k_tube, k_par], -1), axis=1)
    assert np.abs(np.sort(tor.principal_curvatures, axis=1) - exact).max() < 1e-12
    assert tor.tubular_radius == 1.0


def test_ball_necessary_condition_on_all_kinds():
    for kind, params in [("circle", {"r": 0.5}), ("sphere", {"r": 2.0}), ("cylinder", {"r": 1.5}),
                         ("torus", {"R": 3.0, "r": 1.0}), ("torus", {"R": 1.5, "r": 1.0})]:
        s = build_reference(kind, params, 16)
        assert weingarten_sup(s).sup * s.tubular_radius <= 1 + 1e-12


def test_weingarten_sup_values():
    assert weingarten_sup(build_reference("sphere", {"r": 2.0}, 16)).radius_bound == pytest.approx(2.0)
    flat = build_reference("graph", {"f": lambda x: 0 * x, "box": (TWO_PI,)}, 32)
    bound = weingarten_sup(flat)
    assert bound.sup == 0.0 and bound.unbounded
    # torus: |kappa| is maximal on the tube direction (1/r) and at the inner
    # equator for the parallel direction, 1/(R - r)
    v = np.linspace(0, TWO_PI, 2001)
    kt, kp = torus_principal_curvatures(2.0, 1.0, v)
    want = max(np.abs(kt).max(), np.abs(kp).max())
    assert weingarten_sup(build_reference("torus", {"R": 2.0, "r": 1.0}, 32)).sup == pytest.approx(want)


@pytest.mark.parametrize("kind,params", [
    ("sphere", {"r": 1.0}),
    ("torus", {"R": 2.0, "r": 1.0}),
    ("cylinder", {"r": 1.0, "length": TWO_PI}),
])
def test_consistency_check_is_second_order(kind, params):
    coarse = geometry_consistency_check(build_reference(kind, params, 32)).max_error
    fine = geometry_consistency_check(build_reference(kind, params, 64)).max_error
    assert 3.5 < coarse / fine < 4.5


def test_consistency_check_circle_and_flat_graph():
    rep = geometry_consistency_check(build_reference("circle", {"r": 1.0}, 256))
    # centred differences of (cos, sin) are off by a factor 1 - h^2/6, so the
    # metric and sff discrepancies are h^2/3 to leading order
    assert rep.max_error == pytest.approx(rep.spacing**2 / 3, rel=1e-3)
    flat = build_reference("graph", {"f": lambda x, y: 0 * x, "box": (TWO_PI, TWO_PI)}, 16)
    assert geometry_consistency_check(flat).max_error == 0.0


def test_graph_reference_matches_analytic_derivatives():
    s = build_reference("graph", {"f": lambda x: np.sin(x), "box": (TWO_PI,)}, 64)
    x = s.grid.coords[0]
    assert np.abs(s.tangents[:, 0, 1] - np.cos(x)).max() < 1e-12
    kappa = -np.sin(x) / (1 + np.cos(x) ** 2) ** 1.5
    # upward normal: the crest of sin bends away from it
    assert np.abs(s.principal_curvatures[:, 0] - (-kappa)).max() < 1e-10 or \
        np.abs(s.principal_curvatures[:, 0] - kappa).max() < 1e-10
    assert s.tubular_radius == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("kind,params,match", [
    ("sphere", {"r": -1.0}, "positive"),
    ("torus", {"R": 1.0, "r": 2.0}, "0 < r < R"),
    ("cylinder", {"r": 1.0, "length": 0.0}, "length"),
    ("blob", {}, "unknown surface kind"),
    ("graph", {}, "needs a function"),
])
def test_invalid_parameters_are_named(kind, params, match):
    with pytest.raises(SurfaceError, match=match):
        build_reference(kind, params, 16)


def test_resolution_below_minimum():
    with pytest.raises(SurfaceError, match="at least 8"):
        build_reference("sphere", {"r": 1.0}, (16, 4))


def test_obj_export(tmp_path, cylinder32):
    path = tmp_path / "c.obj"
    export_obj(path, cylinder32.points, cylinder32.grid, cylinder32.mesh_wrap())
    lines = path.read_text().splitlines()
    assert sum(1 for ln in lines if ln.startswith("v ")) == cylinder32.size
    # open along the axis, closed around it
    assert sum(1 for ln in lines if ln.startswith("f ")) == 2 * 31 * 16
    circ = build_reference("circle", {"r": 1.0}, 16)
    export_obj(tmp_path / "c1.obj", circ.points, circ.grid)
    poly = (tmp_path / "c1.obj").read_text().splitlines()[-1].split()
    assert poly[0] == "l" and poly[1] == poly[-1]


def test_random_smooth_field_is_bounded_and_periodic(cylinder32):
    u = random_smooth_field(cylinder32, 0.3, seed=4)
    assert np.abs(u).max() == pytest.approx(0.3)
    # smoothness across the axial seam: the seam jump is comparable to an interior step
    grid = u.reshape(cylinder32.grid.shape)
    seam = np.abs(grid[0] - grid[-1]).max()
    inner = np.abs(np.diff(grid, axis=0)).max()
    assert seam <= 1.5 * inner
