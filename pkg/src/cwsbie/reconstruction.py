"""Surface-current reconstruction and the kernel of the surface Biot-Savart map.

The two-step pipeline:

1. fit the target on the plasma region by ``alpha0 * Gamma + sum alpha_i grad f_i``
   with f_i the harmonic extensions of Fourier modes;
2. turn that field into a surface current ``alpha0 Gamma x N + grad f_n x N``
   where f_n solves an interior Neumann problem whose data is a truncated
   Neumann series in (1/2 - WT).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .bvp import HarmonicSolution, solve_dirichlet_interior, solve_neumann_exterior, solve_neumann_interior
from .errors import RankDeficient
from .fields import (
    FieldSamples,
    FilamentLoop,
    HarmonicNeumannField,
    bs_filament,
    bs_surface_current,
    bs_volume_harmonic_trace,
    build_harmonic_neumann_field,
    toroidal_circulation,
)
from .geometry import Curve, FourierTorus, SurfaceGrid, VolumeGrid, axis_curve, surface_grid, volume_grid
from .layer_potentials import (
    LayerOperatorSet,
    PolarRule,
    assemble,
    duality_norm,
    series_terms,
    single_layer_gradient_eval,
    upsample,
)
from .surface_fields import (
    HarmonicSurfaceBasis,
    SurfaceCurrent,
    avg_windings,
    fourier_modes,
    harmonic_basis,
    line_integral,
    mode_values,
    realize_current,
    rotated_gradient,
    surface_divergence,
)


@dataclass(eq=False)
class Workspace:
    """Everything derived from one surface and one grid resolution."""

    grid: SurfaceGrid
    opset: LayerOperatorSet
    basis: HarmonicSurfaceBasis
    gamma: HarmonicNeumannField
    plasma: VolumeGrid
    domain: VolumeGrid
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def torus(self) -> FourierTorus:
        return self.grid.torus

    @property
    def axis(self) -> Curve:
        """Toroidal loop inside the plasma region, used for circulations."""
        return axis_curve(self.torus)

    def gamma_on(self, points_key: str) -> np.ndarray:
        key = ("gamma", points_key)
        if key not in self._cache:
            pts = self.plasma.nodes if points_key == "plasma" else self.domain.nodes
            self._cache[key] = self.gamma(pts, check=False)
        return self._cache[key]

    def gamma_domain_norm(self) -> float:
        """||Gamma||_{L2(Omega)} without evaluating layer potentials near the surface.

        With Gamma = c (B_fil + grad u) and N . grad u = -N . B_fil, Green's
        identity gives ||Gamma||^2 = c^2 (||B_fil||^2 - int_S u du/dN); the
        filament field is smooth in Omega, so plain volume quadrature is exact enough.
        """
        if "gamma_norm" not in self._cache:
            g = self.gamma
            fil = self.domain.l2_norm(bs_filament(g.loop, self.domain.nodes)) ** 2
            u = g.correction
            corr = self.grid.weights @ (u.trace * u.normal_derivative)
            self._cache["gamma_norm"] = abs(g.scale) * float(np.sqrt(fil - corr))
        return self._cache["gamma_norm"]

    def domain_norm(self, j: np.ndarray) -> float:
        """||BS(j)||_{L2(Omega)} from boundary data only.

        Inside Omega the field is a Gamma + grad u: a is its circulation on the
        axis loop and N . grad u = div_S(V[j] x N), since BS(j) = curl V[j].
        """
        a, u, b = interior_decomposition(self, j)
        return float(np.sqrt(a * a * self.gamma_domain_norm() ** 2 + self.grid.weights @ (u.trace * b)))

    def plasma_norm(self, values: np.ndarray) -> float:
        return self.plasma.l2_norm(values)


def interior_decomposition(ws: Workspace, j: np.ndarray):
    """Split BS(j) inside Omega as a * Gamma + grad u; returns (a, u, u's Neumann data)."""
    grid, opset = ws.grid, ws.opset
    potential = opset.apply_V(j)
    b = grid.project_mean_zero(surface_divergence(grid, np.cross(potential, grid.normals)))
    a = line_integral(lambda p: bs_surface_current(opset, j, p, check=False), ws.axis)
    return a, solve_neumann_interior(opset, b), b


def prepare(torus: FourierTorus, n_theta: int = 64, n_phi: int = 64, *,
            plasma_scale: float = 0.5, plasma_shape=(6, 16, 32), domain_shape=(8, 16, 32),
            rule: PolarRule = PolarRule(), upsampling: int = 2,
            loop: FilamentLoop | None = None, opset: LayerOperatorSet | None = None,
            flip_diagonal: bool = False) -> Workspace:
    grid = opset.grid if opset is not None else surface_grid(torus, n_theta, n_phi)
    opset = opset or assemble(grid, rule, flip_diagonal=flip_diagonal, upsampling=upsampling)
    basis = harmonic_basis(grid)
    gamma = build_harmonic_neumann_field(opset, loop)
    plasma = volume_grid(torus, *plasma_shape, minor_scale=plasma_scale)
    domain = volume_grid(torus, *domain_shape, minor_scale=1.0)
    return Workspace(grid, opset, basis, gamma, plasma, domain)


# -- step 1 ---------------------------------------------------------------------------

@dataclass(eq=False)
class Step1Result:
    alpha0: float
    alphas: np.ndarray
    basis_keys: list
    residual_history: list  # relative L2(P) residual with Gamma plus the first 0..N modes
    densities: np.ndarray  # single-layer densities of the Dirichlet solutions, (M, N)
    rank: int
    circulation: float | None
    target: FieldSamples
    workspace: Workspace
    fitted: np.ndarray  # the fitted field at the target points

    @property
    def residual(self) -> float:
        return self.residual_history[-1]

    def field(self, points: np.ndarray) -> np.ndarray:
        ws = self.workspace
        fine = ws.opset.fine_grid()
        psi = upsample(ws.grid, self.densities @ self.alphas, fine)
        return self.alpha0 * ws.gamma(points) + single_layer_gradient_eval(fine, psi, np.atleast_2d(points))

    def normal_trace(self) -> np.ndarray:
        """B . N on the surface from the second-kind normal derivative."""
        ws = self.workspace
        return ws.grid.project_mean_zero(ws.opset.interior_operator(self.densities @ self.alphas))


def _weighted_lstsq(A: np.ndarray, b: np.ndarray, rcond: float = 1e-12):
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > rcond * s[0] if s.size else np.zeros(0, bool)
    coef = Vt[keep].T @ ((U[:, keep].T @ b) / s[keep])
    return coef, int(keep.sum())


def step1_fit(ws: Workspace, target: FieldSamples, n_modes: int,
              circulation_sampler: Callable | None = None, pin_alpha0: bool = False) -> Step1Result:
    """Least-squares fit of the target by Gamma and gradients of harmonic extensions.

    ``target.weights`` are the quadrature weights of the target points. When
    ``circulation_sampler`` is given, the target circulation around the
    plasma axis is reported and, with ``pin_alpha0``, imposed as alpha0.
    """
    if n_modes < 1:
        raise ValueError("n_modes must be at least 1")
    grid, opset = ws.grid, ws.opset
    keys = fourier_modes(n_modes)
    kappa = np.stack([mode_values(k, grid.theta, grid.phi) for k in keys], axis=1)
    dens = solve_dirichlet_interior(opset, kappa).density
    pts = target.points
    fine = opset.fine_grid()
    grads = single_layer_gradient_eval(fine, upsample(grid, dens, fine), pts)  # (P, 3, N)
    gam = ws.gamma(pts) if pts is not ws.plasma.nodes else ws.gamma_on("plasma")
    w = np.ones(len(pts)) if target.weights is None else target.weights
    sw = np.repeat(np.sqrt(w), 3)
    design = np.concatenate([gam[:, :, None], grads], axis=2).reshape(3 * len(pts), n_modes + 1)
    rhs = target.values.reshape(-1)
    circ = toroidal_circulation(circulation_sampler, ws.axis) if circulation_sampler else None

    if pin_alpha0 and circ is not None:
        rhs = rhs - circ * design[:, 0]
        design_fit = design[:, 1:]
        offset = 1
    else:
        design_fit = design
        offset = 0
    A = design_fit * sw[:, None]
    bw = rhs * sw
    norm_t = np.linalg.norm(target.values.reshape(-1) * sw)
    history = []
    if offset:
        history.append(float(np.linalg.norm(bw) / norm_t))
    coef = np.zeros(design_fit.shape[1])
    rank = 0
    for k in range(1 - offset, design_fit.shape[1] + 1):
        coef_k, rank = _weighted_lstsq(A[:, :k], bw)
        history.append(float(np.linalg.norm(A[:, :k] @ coef_k - bw) / norm_t))
        coef = coef_k
    if rank < design_fit.shape[1]:
        warnings.warn(f"step-1 design has effective rank {rank} of {design_fit.shape[1]}",
                      RankDeficient, stacklevel=2)
    if offset:
        alpha0, alphas = circ, coef
    else:
        alpha0, alphas = float(coef[0]), coef[1:]
    fitted = (design[:, 0] * alpha0 + design[:, 1:] @ alphas).reshape(-1, 3)
    return Step1Result(float(alpha0), np.asarray(alphas), keys, history, dens, rank, circ,
                       target, ws, fitted)


# -- step 2 and the exact preimage ----------------------------------------------------

@dataclass(eq=False)
class PreimageResult:
    current: np.ndarray
    iterations: int | None
    series_term_norms: list
    increment_norms: list
    achieved_residual: float  # ||BS(j) - B||_{L2(P)} / ||B||_{L2(P)}, B the step-1 field
    target_residual: float  # same against the original target
    qbar: float
    pbar: float
    neumann: HarmonicSolution


def _current_from_neumann(ws: Workspace, alpha0: float, sol: HarmonicSolution) -> np.ndarray:
    return alpha0 * ws.gamma.cross_normal() + rotated_gradient(ws.grid, sol.trace)


def _finish(ws: Workspace, step1: Step1Result, j: np.ndarray, n, terms, incs, sol) -> PreimageResult:
    pts = step1.target.points
    w = step1.target.weights
    Bj = bs_surface_current(ws.opset, j, pts, check=False)
    fs = FieldSamples(pts, Bj - step1.fitted, w)
    ft = FieldSamples(pts, Bj - step1.target.values, w)
    q, p = avg_windings(j, ws.basis)
    return PreimageResult(j, n, terms, incs,
                          fs.l2_norm() / FieldSamples(pts, step1.fitted, w).l2_norm(),
                          ft.l2_norm() / step1.target.l2_norm(), q, p, sol)


def step2_preimage(step1: Step1Result, n: int) -> PreimageResult:
    ws = step1.workspace
    opset = ws.opset
    bn = step1.normal_trace()
    total = np.zeros_like(bn)
    term_norms, inc_norms = [], []
    for k, term in enumerate(series_terms(opset, bn, n)):
        total += term
        term_norms.append(duality_norm(opset, term))
        if k > 0:
            inc = rotated_gradient(ws.grid, solve_neumann_interior(opset, term).trace)
            inc_norms.append(duality_norm(opset, inc))
    sol = solve_neumann_interior(opset, total)
    j = _current_from_neumann(ws, step1.alpha0, sol)
    return _finish(ws, step1, j, n, term_norms, inc_norms, sol)


def exact_preimage(step1: Step1Result) -> PreimageResult:
    ws = step1.workspace
    opset = ws.opset
    bn = step1.normal_trace()
    data = ws.grid.project_mean_zero(sla.lu_solve(opset.lu_exterior(), bn, check_finite=False))
    sol = solve_neumann_interior(opset, data)
    j = _current_from_neumann(ws, step1.alpha0, sol)
    return _finish(ws, step1, j, None, [], [], sol)


# -- kernel element ----------------------------------------------------------------------

ROUTES = ("series", "exact", "exterior")


@dataclass(eq=False)
class KernelElement:
    current: np.ndarray
    route: str
    leakage: float  # ||BS(j0)||_{L2(P)} / ||Gamma||_{L2(Omega)}
    qbar: float
    pbar: float
    iterations: int | None = None
    leakage_history: list = field(default_factory=list)
    increment_norms: list = field(default_factory=list)


def _kernel_data(ws: Workspace):
    A = bs_volume_harmonic_trace(ws.gamma)
    data = ws.grid.project_mean_zero(np.sum(A * ws.grid.normals, axis=1))
    return A, data


def _leakage(ws: Workspace, j: np.ndarray) -> float:
    B = bs_surface_current(ws.opset, j, ws.plasma.nodes, check=False)
    return ws.plasma.l2_norm(B) / ws.gamma_domain_norm()


def kernel_element(ws: Workspace, route: str = "exact", n: int = 10,
                   history: bool = False) -> KernelElement:
    """A nonzero current with no field inside the domain.

    ``series`` truncates the Neumann series after n terms, ``exact`` solves
    the second-kind system directly and ``exterior`` takes the tangential
    gradient of an exterior Neumann solution.
    """
    if route not in ROUTES:
        raise ValueError(f"unknown kernel route {route!r}; expected one of {ROUTES}")
    opset, grid = ws.opset, ws.grid
    A, data = _kernel_data(ws)
    base = np.cross(A, grid.normals)
    leaks, incs = [], []
    if route == "series":
        total = np.zeros_like(data)
        j = base.copy()
        if history:
            leaks.append(_leakage(ws, j))
        for k, term in enumerate(series_terms(opset, data, n)):
            if k == 0:
                continue
            total += term
            inc = rotated_gradient(grid, solve_neumann_interior(opset, term).trace)
            incs.append(duality_norm(opset, inc))
            j = j + inc
            if history:
                leaks.append(_leakage(ws, j))
        j = base + rotated_gradient(grid, solve_neumann_interior(opset, total).trace)
    elif route == "exact":
        rhs = opset.interior_operator(data)
        nd = grid.project_mean_zero(sla.lu_solve(opset.lu_exterior(), rhs, check_finite=False))
        j = base + rotated_gradient(grid, solve_neumann_interior(opset, nd).trace)
    else:
        g = solve_neumann_exterior(opset, -data)
        j = base + rotated_gradient(grid, g.trace)
    q, p = avg_windings(j, ws.basis)
    return KernelElement(j, route, _leakage(ws, j), q, p, n if route == "series" else None,
                         leaks, incs)


# -- Tikhonov baseline ---------------------------------------------------------------------

def stream_keys(mmax: int, nmax: int) -> list:
    keys = []
    for m in range(0, mmax + 1):
        for n in range(-nmax, nmax + 1):
            if m == 0 and n <= 0:
                continue
            keys += [(m, n), (-m, -n)]
    return keys


@dataclass(eq=False)
class RegularizedFit:
    lambdas: list
    residuals: list  # relative L2(P) residuals
    current_norms: list  # L2(Sigma) norms of the fitted currents
    currents: list  # SurfaceCurrent per lambda


def regularized_fit(ws: Workspace, target: FieldSamples, lambdas, mmax: int = 6,
                    nmax: int = 4) -> RegularizedFit:
    """min ||A c - B_T||^2_{L2(P)} + lambda ||j(c)||^2_{L2(Sigma)} over stream modes and (alpha, beta)."""
    grid = ws.grid
    keys = stream_keys(mmax, nmax)
    cols = [rotated_gradient(grid, mode_values(k, grid.theta, grid.phi)) for k in keys]
    cols += [ws.basis.gamma_t_cross_n, ws.basis.gamma_p_cross_n]
    J = np.stack(cols, axis=2)  # (M, 3, K)
    A = bs_surface_current(ws.opset, J, target.points, check=False)  # (P, 3, K)
    w = np.ones(len(target.points)) if target.weights is None else target.weights
    Aw = (A * np.sqrt(w)[:, None, None]).reshape(-1, J.shape[2])
    bw = (target.values * np.sqrt(w)[:, None]).reshape(-1)
    gram = np.einsum("mck,m,mcl->kl", J, grid.weights, J)
    AtA, Atb = Aw.T @ Aw, Aw.T @ bw
    out = RegularizedFit([], [], [], [])
    tnorm = np.linalg.norm(bw)
    for lam in lambdas:
        c = sla.solve(AtA + lam * gram, Atb, assume_a="sym")
        out.lambdas.append(float(lam))
        out.residuals.append(float(np.linalg.norm(Aw @ c - bw) / tnorm))
        out.current_norms.append(float(np.sqrt(max(c @ gram @ c, 0.0))))
        out.currents.append(SurfaceCurrent({k: float(v) for k, v in zip(keys, c[:-2])},
                                           float(c[-2]), float(c[-1])))
    return out


# -- certificates and norm surveys ----------------------------------------------------------

def qbar_certificate(ws: Workspace, j: np.ndarray) -> float:
    return avg_windings(j, ws.basis)[0]


def relative_winding(ws: Workspace, j: np.ndarray, which: str = "q") -> float:
    """|Qbar| (or |Pbar|) scaled by Cauchy-Schwarz: |<j, gamma>| / (||j|| ||gamma||)."""
    g = ws.basis.gamma_t if which == "q" else ws.basis.gamma_p
    grid = ws.grid
    num = abs(grid.weights @ np.sum(j * g, axis=1))
    return float(num / (grid.l2_norm(j) * grid.l2_norm(g)))


def _random_stream(rng, degree_modes: int):
    keys = fourier_modes(degree_modes)
    return {k: float(v) for k, v in zip(keys, rng.standard_normal(len(keys)) / np.sqrt(len(keys)))}


def random_neumann_data(ws: Workspace, rng, n_modes: int = 24) -> np.ndarray:
    grid = ws.grid
    b = np.zeros(grid.size)
    for k, c in _random_stream(rng, n_modes).items():
        b += c * mode_values(k, grid.theta, grid.phi)
    return grid.project_mean_zero(b)


def neumann_norm_survey(ws: Workspace, samples: int = 20, seed: int = 0, n_modes: int = 24) -> np.ndarray:
    """Ratios ||grad f||_{L2(Omega)} / ||b||_{W^-1/2} for random band-limited Neumann data.

    The numerator uses Green's identity ||grad f||^2 = int_S f b, which needs
    no evaluation near the surface.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(samples):
        b = random_neumann_data(ws, rng, n_modes)
        sol = solve_neumann_interior(ws.opset, b)
        out.append(np.sqrt(max(ws.grid.weights @ (sol.trace * b), 0.0)) / duality_norm(ws.opset, b))
    return np.array(out)


def current_norm_survey(ws: Workspace, samples: int = 20, seed: int = 0, n_modes: int = 24) -> np.ndarray:
    """Ratios ||j||_{W^-1/2} / ||BS(j)||_{L2(Omega)} for random currents without gamma_p x N."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(samples):
        cur = SurfaceCurrent(_random_stream(rng, n_modes), float(rng.standard_normal()), 0.0)
        j = realize_current(cur, ws.basis)
        out.append(duality_norm(ws.opset, j) / ws.domain_norm(j))
    return np.array(out)
