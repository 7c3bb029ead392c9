import numpy as np
import pytest

from cwsbie.errors import FilamentIntersectsDomain, OnFilament
from cwsbie.fields import (
    FieldSamples,
    FilamentLoop,
    bs_filament,
    bs_surface_current,
    bs_volume_harmonic_eval,
    bs_volume_harmonic_trace,
    build_harmonic_neumann_field,
    circular_loop,
    toroidal_circulation,
    z_axis_loop,
)
from cwsbie.geometry import axis_curve, reference_curves, volume_grid
from cwsbie.surface_fields import line_integral, rotated_gradient
from cwsbie.validation import interior_probes

from conftest import rel


def _toroidal_unit(p):
    rho2 = p[:, 0] ** 2 + p[:, 1] ** 2
    return np.stack([-p[:, 1], p[:, 0], 0 * rho2], axis=1) / (2 * np.pi * rho2[:, None])


def _fd_jacobian(f, points, h=1e-4):
    """J[p, a, b] = d f_a / d x_b by central differences."""
    cols = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        cols.append((f(points + e) - f(points - e)) / (2 * h))
    return np.stack(cols, axis=2)


def _curl_div(J):
    curl = np.stack([J[:, 2, 1] - J[:, 1, 2], J[:, 0, 2] - J[:, 2, 0], J[:, 1, 0] - J[:, 0, 1]], axis=1)
    return curl, np.trace(J, axis1=1, axis2=2)


@pytest.fixture(scope="module")
def gamma32(opset32):
    return build_harmonic_neumann_field(opset32)


@pytest.fixture(scope="module")
def gamma64(opset64):
    return build_harmonic_neumann_field(opset64)


def test_loop_center_field():
    loop = circular_loop([0.0, 0.0, 0.0], 1.0, [0.0, 0.0, 1.0], n_segments=512)
    b = bs_filament(loop, np.zeros((1, 3)))[0]
    np.testing.assert_allclose(b, [0.0, 0.0, 0.5], atol=1e-4)


def test_long_wire_limit():
    loop = z_axis_loop(1e4, per_side=64)
    for d in (0.5, 1.0, 3.0):
        b = bs_filament(loop, np.array([[d, 0.0, 0.0]]))[0]
        assert b[1] == pytest.approx(1 / (2 * np.pi * d), rel=1e-3)


def test_reversal_negates():
    loop = circular_loop([0.3, 0.0, 1.0], 2.0, [0.2, 0.1, 1.0])
    p = np.array([[0.1, 0.2, 0.3], [4.0, -1.0, 2.0]])
    np.testing.assert_allclose(bs_filament(loop.reversed(), p), -bs_filament(loop, p), atol=1e-15)


def test_on_filament_rejected():
    loop = circular_loop([0.0, 0.0, 0.0], 1.0, [0.0, 0.0, 1.0])
    with pytest.raises(OnFilament):
        bs_filament(loop, loop.points[3:4])


def test_loop_validation():
    t = np.linspace(0, 2 * np.pi, 65)
    ring = np.stack([np.cos(t), np.sin(t), 0 * t], axis=1)
    with pytest.raises(ValueError):
        FilamentLoop(ring[:-20])
    with pytest.raises(ValueError):
        FilamentLoop(np.vstack([ring[:-1], [[0.5, 0.5, 0.0]]]))
    dup = np.vstack([ring[:1], ring])
    with pytest.raises(ValueError):
        FilamentLoop(dup)


def test_gamma_axisymmetric_value(gamma32):
    np.testing.assert_allclose(gamma32(np.array([[2.0, 0.0, 0.0]]))[0], [0.0, 1 / (4 * np.pi), 0.0], atol=1e-6)


def test_gamma_matches_analytic(gamma32):
    g = gamma32.opset.grid
    assert rel(gamma32.on_surface(), _toroidal_unit(g.nodes)) <= 1e-2
    p = interior_probes()
    assert rel(gamma32(p), _toroidal_unit(p)) <= 1e-2


def test_gamma_circulations(gamma32):
    grid = gamma32.opset.grid
    curves = reference_curves(grid.torus)
    assert abs(line_integral(gamma32.on_surface(), curves.toroidal, grid) - 1.0) <= 1e-3
    assert abs(line_integral(gamma32.on_surface(), curves.poloidal, grid)) <= 1e-3
    assert abs(toroidal_circulation(gamma32, axis_curve(grid.torus)) - 1.0) <= 1e-3


def test_gamma_tangent(gamma32):
    scale = np.abs(gamma32.on_surface()).max()
    assert np.abs(gamma32.normal_residual()).max() <= 1e-3 * scale


def test_gamma_curl_and_divergence_free(gamma32):
    p = interior_probes()
    curl, div = _curl_div(_fd_jacobian(lambda x: gamma32(x, check=False), p))
    scale = np.abs(gamma32(p, check=False)).max()
    assert np.abs(curl).max() <= 1e-4 * scale
    assert np.abs(div).max() <= 1e-4 * scale


def test_gamma_with_offset_filament(opset32):
    # Any loop threading the hole gives the same field once corrected and scaled.
    loop = circular_loop([0.0, 0.0, 0.0], 0.4, [1.0, 0.0, 0.0], current=2.0, n_segments=256)
    with pytest.raises(FilamentIntersectsDomain):
        build_harmonic_neumann_field(opset32, loop)
    far = z_axis_loop(50.0).reversed()
    other = build_harmonic_neumann_field(opset32, far)
    assert rel(other.on_surface(), _toroidal_unit(opset32.grid.nodes)) <= 1e-2


def test_unlinked_filament_rejected(opset32):
    loop = circular_loop([10.0, 0.0, 0.0], 1.0, [0.0, 0.0, 1.0])
    with pytest.raises(FilamentIntersectsDomain):
        build_harmonic_neumann_field(opset32, loop)


def test_gamma_cross_normal_reproduces_gamma(gamma64):
    j = gamma64.cross_normal()
    p = interior_probes()
    assert rel(bs_surface_current(gamma64.opset, j, p), gamma64(p)) <= 2e-2
    x = np.array([[2.0, 0.0, 0.0]])
    assert rel(bs_surface_current(gamma64.opset, j, x)[0], [0.0, 1 / (4 * np.pi), 0.0]) <= 1e-2
    out = bs_surface_current(gamma64.opset, j, np.array([[4.0, 0.0, 0.0]]))
    assert np.abs(out).max() <= 1e-2 * np.abs(gamma64.on_surface()).max()


def test_surface_current_zero_and_linear(gamma32):
    op = gamma32.opset
    p = interior_probes()
    assert np.abs(bs_surface_current(op, np.zeros((op.grid.size, 3)), p)).max() == 0.0
    j1 = gamma32.cross_normal()
    rng = np.random.default_rng(0)
    j2 = op.grid.tangential(rng.standard_normal((op.grid.size, 3)))
    lhs = bs_surface_current(op, 2.0 * j1 - 0.5 * j2, p)
    rhs = 2.0 * bs_surface_current(op, j1, p) - 0.5 * bs_surface_current(op, j2, p)
    np.testing.assert_allclose(lhs, rhs, atol=1e-14 * np.abs(lhs).max())
    stacked = bs_surface_current(op, np.stack([j1, j2], axis=-1), p)
    np.testing.assert_allclose(stacked[..., 1], bs_surface_current(op, j2, p), atol=1e-14)


def test_surface_current_field_curl_and_div_free(gamma64):
    op = gamma64.opset
    g = op.grid
    j = rotated_gradient(g, np.cos(g.theta - g.phi)) + gamma64.cross_normal()
    f = lambda x: bs_surface_current(op, j, x, check=False)  # noqa: E731
    p = interior_probes()
    curl, div = _curl_div(_fd_jacobian(f, p))
    scale = np.abs(f(p)).max()
    assert np.abs(curl).max() <= 1e-4 * scale
    assert np.abs(div).max() <= 1e-4 * scale


def test_volume_harmonic_trace_flux(gamma32):
    g = gamma32.opset.grid
    B = bs_volume_harmonic_trace(gamma32)
    flux = g.weights @ np.sum(B * g.normals, axis=1)
    assert abs(flux) <= 1e-6 * g.weights @ np.linalg.norm(B, axis=1)
    np.testing.assert_allclose(gamma32.opset.apply_V(3.0 * gamma32.cross_normal()), 3.0 * B, atol=1e-14)


def test_volume_harmonic_eval_matches_volume_quadrature(gamma32, torus):
    # Brute force: 1/(4 pi) int_Omega Gamma(y) x (x - y)/|x - y|^3 dy with the analytic Gamma.
    vg = volume_grid(torus, 12, 48, 64)
    G = _toroidal_unit(vg.nodes) * vg.weights[:, None]
    probes = np.array([[4.5, 0.0, 0.0], [0.0, 0.0, 2.0], [0.0, 0.0, 0.0]])
    d = probes[:, None, :] - vg.nodes[None]
    ref = np.sum(np.cross(G[None], d) / np.linalg.norm(d, axis=-1)[..., None] ** 3, axis=1) / (4 * np.pi)
    got = bs_volume_harmonic_eval(gamma32, probes)
    assert rel(got, ref) <= 1e-2


def test_field_samples_csv_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    s = FieldSamples(rng.standard_normal((7, 3)), rng.standard_normal((7, 3)))
    s.to_csv(tmp_path / "f.csv")
    back = FieldSamples.from_csv(tmp_path / "f.csv")
    np.testing.assert_allclose(back.points, s.points, rtol=1e-11)
    np.testing.assert_allclose(back.values, s.values, rtol=1e-11)
    assert s.l2_norm() == pytest.approx(np.linalg.norm(s.values))


def test_field_samples_vtk(tmp_path):
    pts = np.arange(24, dtype=float).reshape(8, 3)
    FieldSamples(pts, pts, shape=(2, 4)).to_vtk(tmp_path / "a.vtk")
    text = (tmp_path / "a.vtk").read_text().splitlines()
    assert "DATASET STRUCTURED_GRID" in text
    assert "DIMENSIONS 4 2 1" in text
    assert "POINT_DATA 8" in text
    FieldSamples(pts, pts).to_vtk(tmp_path / "b.vtk")
    assert "VERTICES 8 16" in (tmp_path / "b.vtk").read_text()


def test_circulation_examples(gamma32, torus):
    ax = axis_curve(torus)
    assert abs(toroidal_circulation(gamma32, ax) - 1.0) <= 1e-3
    assert abs(toroidal_circulation(lambda p: bs_filament(z_axis_loop(1e3), p), ax) - 1.0) <= 1e-3
    grad = lambda p: np.stack([2 * p[:, 0] * p[:, 1], p[:, 0] ** 2, np.cos(p[:, 2])], axis=1)  # noqa: E731
    assert abs(toroidal_circulation(grad, ax)) <= 1e-6
