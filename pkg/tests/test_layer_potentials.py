import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwsbie.errors import AssemblyFailure, NearSurfacePoint, NotMeanZero
from cwsbie.geometry import surface_grid
from cwsbie.layer_potentials import (
    LayerOperatorSet,
    assemble,
    contraction_estimate,
    double_layer_eval,
    duality_inner_product,
    duality_norm,
    interior_double_layer,
    neumann_series,
    series_terms,
    upsample,
)
from cwsbie.surface_fields import mode_values, trig_interpolate


@pytest.mark.parametrize("density", ["const_theta", "cos_theta", "cos_phi"])
@pytest.mark.parametrize("theta", [0.0, 1.0, np.pi / 2, np.pi])
def test_single_layer_matches_elliptic_oracle(opset32, oracle_values, density, theta):
    g = opset32.grid
    f = {"const_theta": np.ones(g.size), "cos_theta": np.cos(g.theta), "cos_phi": np.cos(g.phi)}[density]
    got = trig_interpolate(g, opset32.apply_V(f), np.array([theta]), np.array([0.0]))[0]
    assert got == pytest.approx(oracle_values[f"{density}_{theta:.6f}"], abs=1e-5)


def test_energy_of_one(opset32, oracle_values):
    one = np.ones(opset32.grid.size)
    ref = oracle_values["energy_of_one"]
    assert abs(duality_inner_product(opset32, one, one) - ref) / ref <= 1e-3


def test_solid_angle_row_sums(opset64):
    assert np.abs(opset64.apply_W(np.ones(opset64.grid.size)) + 0.5).max() <= 2e-3


def test_raw_defect_decreases_under_refinement(opset16, opset32, opset64):
    d = [np.abs(o.raw_defect).max() for o in (opset16, opset32, opset64)]
    assert d[0] > d[1] > d[2]
    assert d[2] <= 2e-3


def test_adjoint_structure(opset16):
    w = opset16.weights
    np.testing.assert_allclose(opset16.WT, -(opset16.W.T * w[None, :]) / w[:, None], atol=1e-14)


def test_adjoint_preserves_mean_zero(opset32):
    g = opset32.grid
    rng = np.random.default_rng(3)
    phi = g.project_mean_zero(rng.standard_normal(g.size))
    scale = np.sqrt(g.weights @ phi**2)
    assert abs(g.weights @ opset32.apply_WT(phi)) <= 1e-10 * scale
    for op in (opset32.interior_operator, opset32.exterior_operator):
        assert abs(g.weights @ op(phi)) <= 1e-10 * scale


def test_single_layer_of_one_positive(opset32):
    assert np.all(opset32.apply_V(np.ones(opset32.grid.size)) > 0)


def test_gram_symmetric_positive_definite(opset16):
    np.testing.assert_array_equal(opset16.gram, opset16.gram.T)
    assert np.linalg.eigvalsh(opset16.gram).min() > 0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_duality_symmetric_and_positive(opset16, seed):
    rng = np.random.default_rng(seed)
    psi, phi = rng.standard_normal((2, opset16.grid.size))
    a, b = duality_inner_product(opset16, psi, phi), duality_inner_product(opset16, phi, psi)
    assert abs(a - b) <= 1e-12 * (abs(a) + duality_norm(opset16, psi) * duality_norm(opset16, phi))
    assert duality_inner_product(opset16, psi, psi) > 0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_transpose_duality(opset16, seed):
    rng = np.random.default_rng(seed)
    f, phi = rng.standard_normal((2, opset16.grid.size))
    w = opset16.weights
    lhs = w @ (f * opset16.apply_WT(phi))
    rhs = -w @ (phi * opset16.apply_W(f))
    assert abs(lhs - rhs) <= 1e-12 * (1 + abs(lhs))


def test_double_layer_off_surface_gauss(opset32):
    one = np.ones(opset32.grid.size)
    inside = np.array([[2.0, 0.0, 0.0], [0.0, 2.3, 0.4], [-1.6, -1.0, -0.3]])
    outside = np.array([[0.0, 0.0, 0.0], [4.5, 0.0, 0.0], [2.0, 0.0, 2.0]])
    np.testing.assert_allclose(interior_double_layer(opset32, one, inside), -1.0, atol=1e-4)
    np.testing.assert_allclose(interior_double_layer(opset32, one, outside), 0.0, atol=1e-4)


def test_double_layer_near_surface_warns(opset16):
    with pytest.warns(NearSurfacePoint):
        interior_double_layer(opset16, np.ones(opset16.grid.size), np.array([[2.999, 0.0, 0.0]]))


def test_jump_relation_sin_theta(opset32):
    # Approach a node along -N, extrapolate the limit, compare with -f/2 + W f.
    g = opset32.grid
    f = np.sin(g.theta)
    i = int(np.argmin(np.abs(g.theta - 1.0) + np.abs(g.phi)))
    fine = surface_grid(g.torus, 512, 512)
    ff = upsample(g, f, fine)
    x0, n0 = g.nodes[i], g.normals[i]
    vals = np.array([double_layer_eval(fine, ff, (x0 - d * n0)[None])[0] for d in (0.2, 0.1, 0.05)])
    r1 = 2 * vals[1:] - vals[:-1]
    limit = (4 * r1[1] - r1[0]) / 3
    assert abs(limit - (-0.5 * f[i] + opset32.apply_W(f)[i])) <= 1e-2


def test_neumann_series_small_cases(opset16):
    g = opset16.grid
    b0 = g.project_mean_zero(np.cos(g.theta) + 0.3 * np.sin(g.phi))
    np.testing.assert_allclose(neumann_series(opset16, b0, 0), b0, atol=1e-15)
    np.testing.assert_allclose(neumann_series(opset16, b0, 0, k_start=1), 0.0)
    np.testing.assert_allclose(neumann_series(opset16, b0, 1, k_start=1),
                               g.project_mean_zero(opset16.interior_operator(b0)), atol=1e-14)
    with pytest.raises(ValueError):
        neumann_series(opset16, b0, 2, k_start=2)


def test_neumann_series_rejects_nonzero_mean(opset16):
    with pytest.raises(NotMeanZero):
        neumann_series(opset16, np.ones(opset16.grid.size), 3)


def test_series_terms_decay_geometrically(opset32):
    g = opset32.grid
    b0 = g.project_mean_zero(np.cos(g.theta) * np.sin(2 * g.phi) + np.sin(g.theta))
    norms = np.array([duality_norm(opset32, t) for t in series_terms(opset32, b0, 12)])
    ratio = np.exp(np.polyfit(np.arange(len(norms)), np.log(norms), 1)[0])
    assert ratio < 1
    assert np.all(np.diff(norms) < 0)


def test_contraction_estimate_stable(opset32, opset64):
    lam32, lam64 = contraction_estimate(opset32), contraction_estimate(opset64)
    assert 0 < lam64 < 1
    assert abs(lam32 - lam64) <= 5e-2


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_density_ratio_below_estimate(opset32, seed):
    lam = contraction_estimate(opset32)
    g = opset32.grid
    psi = g.project_mean_zero(np.random.default_rng(seed).standard_normal(g.size))
    ratio = duality_norm(opset32, g.project_mean_zero(opset32.interior_operator(psi))) / duality_norm(opset32, psi)
    assert ratio <= lam + 1e-3


def test_flip_diagonal_breaks_row_sums(opset16):
    bad = assemble(opset16.grid, flip_diagonal=True)
    assert np.abs(bad.apply_W(np.ones(bad.grid.size)) - 0.5).max() < 1e-12
    np.testing.assert_allclose(bad.W - np.diag(np.diag(bad.W)), opset16.W - np.diag(np.diag(opset16.W)))


def test_save_load_round_trip(opset16, tmp_path):
    path = tmp_path / "ops.bin"
    opset16.save(path)
    back = LayerOperatorSet.load(path, opset16.grid)
    np.testing.assert_array_equal(back.gram, opset16.gram)
    np.testing.assert_array_equal(back.W, opset16.W)
    np.testing.assert_array_equal(back.raw_defect, opset16.raw_defect)
    with pytest.raises(AssemblyFailure):
        LayerOperatorSet.load(path, surface_grid(opset16.grid.torus, 16, 24))
    (tmp_path / "junk.bin").write_bytes(b"nonsense" * 4)
    with pytest.raises(AssemblyFailure):
        LayerOperatorSet.load(tmp_path / "junk.bin", opset16.grid)


def test_upsample_exact_for_band_limited(torus):
    coarse, fine = surface_grid(torus, 16, 16), surface_grid(torus, 48, 32)
    keys = [(1, 0), (-2, 1), (3, -2), (0, -5)]
    f = lambda g: sum(mode_values(k, g.theta, g.phi) for k in keys)  # noqa: E731
    np.testing.assert_allclose(upsample(coarse, f(coarse), fine), f(fine), atol=1e-12)
