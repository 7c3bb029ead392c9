"""Acceptance criteria on the circular torus R0 = 2, a = 1.

Each test records one PASS/FAIL line (printed after the run) before asserting.
"""

import numpy as np
import pytest

from cwsbie.bvp import solve_dirichlet_interior, solve_neumann_exterior, solve_neumann_interior
from cwsbie.fields import FieldSamples, bs_surface_current
from cwsbie.geometry import surface_grid
from cwsbie.layer_potentials import contraction_estimate, solid_angle_defect
from cwsbie.reconstruction import (
    current_norm_survey,
    exact_preimage,
    kernel_element,
    neumann_norm_survey,
    regularized_fit,
    relative_winding,
    step1_fit,
    step2_preimage,
)
from cwsbie.surface_fields import avg_windings, line_integral
from cwsbie.validation import exterior_probes, interior_probes

from conftest import ACCEPTANCE_LINES, rel

pytestmark = pytest.mark.slow


def record(number, text, ok):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}")
    return ok


def _toroidal_unit(p):
    rho2 = p[:, 0] ** 2 + p[:, 1] ** 2
    return np.stack([-p[:, 1], p[:, 0], 0 * rho2], axis=1) / (2 * np.pi * rho2[:, None])


@pytest.fixture(scope="module")
def lam64(opset64):
    return contraction_estimate(opset64)


@pytest.fixture(scope="module")
def uniform64(ws64):
    target = FieldSamples(ws64.plasma.nodes, np.tile([0.0, 0.0, 1.0], (len(ws64.plasma.nodes), 1)),
                          ws64.plasma.weights)
    s1 = step1_fit(ws64, target, 49)
    return target, s1, step2_preimage(s1, 20), exact_preimage(s1)


@pytest.fixture(scope="module")
def kernels64(ws64):
    return {r: kernel_element(ws64, r, 10, history=(r == "series")) for r in ("series", "exact", "exterior")}


def test_1_solid_angle(opset16, opset32, opset64, torus):
    assembled = np.abs(opset64.apply_W(np.ones(opset64.grid.size)) + 0.5).max()
    raw = [np.abs(o.raw_defect).max() for o in (opset16, opset32, opset64)]
    raw.append(np.abs(solid_angle_defect(surface_grid(torus, 128, 128))).max())
    decreasing = all(b < a for a, b in zip(raw, raw[1:]))
    ok = assembled <= 2e-3 and raw[2] <= 2e-3 and decreasing
    assert record(1, f"|W1 + 1/2|_inf at 64^2 = {assembled:.2e} (assembled), raw quadrature "
                     f"16/32/64/128 = {', '.join(f'{r:.2e}' for r in raw)}; tol 2e-3, decreasing", ok)


def test_2_analytic_bvps(opset64):
    g = opset64.grid
    x, inner, outer = g.nodes, interior_probes(), exterior_probes()
    errs = {}
    sol = solve_dirichlet_interior(opset64, x[:, 0] - 0.3 * x[:, 2])
    errs["dirichlet linear"] = np.abs(sol.value(inner) - (inner[:, 0] - 0.3 * inner[:, 2])).max()
    sol = solve_neumann_interior(opset64, g.normals[:, 2])
    errs["neumann linear"] = np.abs(sol.gradient(inner) - [0.0, 0.0, 1.0]).max()

    src = np.array([6.0, 0.0, 0.0])
    sol = solve_dirichlet_interior(opset64, 1 / np.linalg.norm(x - src, axis=1))
    errs["dirichlet exterior source"] = rel(sol.value(inner), 1 / np.linalg.norm(inner - src, axis=1))
    d = x - src
    G = -d / np.linalg.norm(d, axis=1)[:, None] ** 3
    sol = solve_neumann_interior(opset64, g.project_mean_zero(np.sum(G * g.normals, axis=1)))
    di = inner - src
    errs["neumann exterior source"] = rel(sol.gradient(inner), -di / np.linalg.norm(di, axis=1)[:, None] ** 3)

    src = np.array([2.0, 0.0, 0.0])
    d = x - src
    G = -d / np.linalg.norm(d, axis=1)[:, None] ** 3
    sol = solve_neumann_exterior(opset64, np.sum(G * g.normals, axis=1))
    errs["exterior interior source"] = rel(sol.value(outer), 1 / np.linalg.norm(outer - src, axis=1))
    ok = max(errs.values()) <= 1e-3
    assert record(2, "BVP oracles " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + "; tol 1e-3", ok)


def test_3_harmonic_neumann_field(ws64):
    gam = ws64.gamma
    p = interior_probes()
    on = rel(gam.on_surface(), _toroidal_unit(ws64.grid.nodes))
    inside = rel(gam(p), _toroidal_unit(p))
    circ = abs(line_integral(gam.on_surface(), ws64.basis.curves.toroidal, ws64.grid) - 1.0)
    ok = on <= 1e-2 and inside <= 1e-2 and circ <= 1e-3
    assert record(3, f"Gamma vs e_phi/(2 pi rho): surface {on:.1e}, interior {inside:.1e} (tol 1e-2); "
                     f"|circulation - 1| = {circ:.1e} (tol 1e-3)", ok)


def test_4_image_membership(ws64):
    gam = ws64.gamma
    j = gam.cross_normal()
    p = interior_probes()
    member = rel(bs_surface_current(ws64.opset, j, p), gam(p))
    leak = np.linalg.norm(bs_surface_current(ws64.opset, j, exterior_probes())) / np.linalg.norm(gam(p))
    ok = member <= 2e-2 and leak <= 2e-2
    assert record(4, f"|BS(Gamma x N) - Gamma|/|Gamma| = {member:.1e}, exterior leakage {leak:.1e}; tol 2e-2", ok)


def test_4_preimage_of_gamma(ws64):
    target = FieldSamples(ws64.plasma.nodes, ws64.gamma_on("plasma"), ws64.plasma.weights)
    res = step2_preimage(step1_fit(ws64, target, 12), 10)
    err = rel(bs_surface_current(ws64.opset, res.current, ws64.plasma.nodes, check=False),
              ws64.gamma_on("plasma"))
    assert record(4, f"step-2 preimage of the Gamma target reproduces Gamma to {err:.1e} at 64^2; tol 2e-2 "
                     "(the 128^2 halving is not run, see README)", err <= 2e-2)


def test_5_geometric_convergence(lam64, uniform64, kernels64):
    _, _, s2, _ = uniform64
    inc = np.array(s2.increment_norms)
    r_step2 = (inc[2:] / inc[1:-1]).max()
    kinc = np.array(kernels64["series"].increment_norms)
    r_kernel = (kinc[2:] / kinc[1:-1]).max()
    leaks = np.array(kernels64["series"].leakage_history)
    fit = np.polyfit(np.arange(len(leaks)), np.log(leaks), 1)
    resid = np.abs(np.log(leaks) - np.polyval(fit, np.arange(len(leaks))))[2:].max()
    leak_ratio = np.exp(fit[0])
    ok = (lam64 < 1 and r_step2 <= lam64 + 0.05 and r_kernel <= lam64 + 0.05
          and np.all(np.diff(leaks) < 0) and leak_ratio < 1 and len(leaks) == 11)
    assert record(5, f"lambda_hat = {lam64:.3f}; max increment ratio step2 {r_step2:.3f}, kernel series "
                     f"{r_kernel:.3f} (tol lambda_hat + 0.05 = {lam64 + 0.05:.3f}); leakage n=0..10 "
                     f"{leaks[0]:.1e} -> {leaks[-1]:.1e}, fitted ratio {leak_ratio:.3f}, "
                     f"log-fit deviation {resid:.2f}", ok)


def test_6_poloidality(ws64, uniform64, kernels64):
    _, _, s2, ex = uniform64
    q_pre = max(relative_winding(ws64, s2.current, "q"), relative_winding(ws64, ex.current, "q"))
    p_ker = max(relative_winding(ws64, k.current, "p") for k in kernels64.values())
    q_ker = min(relative_winding(ws64, k.current, "q") for k in kernels64.values())
    ok = q_pre <= 1e-6 and p_ker <= 1e-2 and q_ker > 0.1
    assert record(6, f"relative |Qbar| of preimages {q_pre:.1e} (tol 1e-6); kernel relative |Pbar| "
                     f"{p_ker:.1e} (tol 1e-2), relative |Qbar| {q_ker:.3f} (away from 0)", ok)


def test_7_route_equivalence(ws64, kernels64):
    d = rel(kernels64["exterior"].current, kernels64["exact"].current)
    s = rel(kernels64["series"].current, kernels64["exact"].current)
    assert record(7, f"exact vs exterior kernel currents {d:.1e} (tol 1e-2); series n=10 vs exact {s:.1e}",
                  d <= 1e-2)


def test_8_winding_analytics(ws64):
    q, _ = avg_windings(ws64.basis.gamma_p_cross_n, ws64.basis)
    err = abs(abs(q) * ws64.grid.area - 1.0)
    assert record(8, f"|Qbar(gamma_p x N)| |Sigma| - 1 = {err:.1e}; tol 1e-3", err <= 1e-3)


def test_9_end_to_end(ws64, uniform64):
    target, s1, s2, _ = uniform64
    hist = np.array(s1.residual_history)
    monotone = bool(np.all(np.diff(hist) <= 1e-12))
    tik = regularized_fit(ws64, target, [1e-2, 1e-4, 1e-6, 1e-8, 1e-10])
    ok = s2.target_residual <= 5e-2 and monotone and tik.residuals[-1] <= 2 * s2.target_residual
    assert record(9, f"uniform target at 64^2, 49 modes, 20 iterations: residual {s2.target_residual:.1e} "
                     f"(tol 5e-2), step-1 history monotone {monotone}; Tikhonov at lambda 1e-10 "
                     f"{tik.residuals[-1]:.1e} (tol 2x = {2 * s2.target_residual:.1e})", ok)


def test_10_norm_surveys(ws32, ws64):
    text, ok = [], True
    for name, survey in (("Neumann", neumann_norm_survey), ("current", current_norm_survey)):
        a, b = survey(ws32, samples=20), survey(ws64, samples=20)
        spread = max(a.max() / a.min(), b.max() / b.min())
        drift = max(a.max() / b.max(), b.max() / a.max(), a.min() / b.min(), b.min() / a.min())
        ok = ok and spread < 20 and drift < 2
        text.append(f"{name} ratios [{b.min():.3g}, {b.max():.3g}] at 64^2, spread {spread:.2f} (tol 20), "
                    f"drift 32->64 {drift:.4f} (tol 2)")
    assert record(10, "; ".join(text), ok)
