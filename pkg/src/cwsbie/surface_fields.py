"""Tangential calculus on a periodic surface grid.

Scalar densities are float arrays of shape (M,); tangent fields are (M, 3)
arrays of Cartesian vectors. Derivatives are spectral with the Nyquist mode
dropped, so the discrete derivative matrices are real, antisymmetric and
commute with each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .errors import SingularPeriodMatrix
from .geometry import Curve, ReferenceCurves, SurfaceGrid, reference_curves

TWO_PI = 2.0 * np.pi


def _ik(n: int) -> np.ndarray:
    k = np.fft.fftfreq(n, 1.0 / n)
    k[n // 2] = 0.0
    return 1j * k


def _grid_view(grid: SurfaceGrid, f: np.ndarray) -> np.ndarray:
    return np.asarray(f, dtype=float).reshape((grid.n_theta, grid.n_phi) + np.shape(f)[1:])


def d_theta(grid: SurfaceGrid, f: np.ndarray) -> np.ndarray:
    a = _grid_view(grid, f)
    ik = _ik(grid.n_theta).reshape((-1, 1) + (1,) * (a.ndim - 2))
    return np.fft.ifft(ik * np.fft.fft(a, axis=0), axis=0).real.reshape(np.shape(f))


def d_phi(grid: SurfaceGrid, f: np.ndarray) -> np.ndarray:
    a = _grid_view(grid, f)
    ik = _ik(grid.n_phi).reshape((1, -1) + (1,) * (a.ndim - 2))
    return np.fft.ifft(ik * np.fft.fft(a, axis=1), axis=1).real.reshape(np.shape(f))


def covariant_to_vector(grid: SurfaceGrid, cov: np.ndarray) -> np.ndarray:
    """Tangent vector with covariant components ``(v_theta, v_phi)``."""
    gi = grid.inv_metric
    vt = gi[:, 0] * cov[:, 0] + gi[:, 1] * cov[:, 1]
    vp = gi[:, 1] * cov[:, 0] + gi[:, 2] * cov[:, 1]
    return vt[:, None] * grid.e_theta + vp[:, None] * grid.e_phi


def vector_to_contravariant(grid: SurfaceGrid, v: np.ndarray) -> np.ndarray:
    vt = np.sum(v * grid.e_theta, axis=1)
    vp = np.sum(v * grid.e_phi, axis=1)
    gi = grid.inv_metric
    return np.stack([gi[:, 0] * vt + gi[:, 1] * vp, gi[:, 1] * vt + gi[:, 2] * vp], axis=1)


def surface_gradient(grid: SurfaceGrid, f: np.ndarray) -> np.ndarray:
    cov = np.stack([d_theta(grid, f), d_phi(grid, f)], axis=1)
    return covariant_to_vector(grid, cov)


def surface_divergence(grid: SurfaceGrid, v: np.ndarray) -> np.ndarray:
    """Weighted-adjoint divergence ``(1/sqrt g) sum_i D_i(sqrt g v^i)``."""
    c = vector_to_contravariant(grid, v) * grid.sqrt_g[:, None]
    return (d_theta(grid, c[:, 0]) + d_phi(grid, c[:, 1])) / grid.sqrt_g


def cross_normal_covariant(grid: SurfaceGrid, cov: np.ndarray) -> np.ndarray:
    """``h x N`` for a tangent field given by covariant components.

    Equal to ``(s / sqrt g) (h_phi e_theta - h_theta e_phi)``; written this
    way the divergence of the result is a commutator of spectral
    derivatives and vanishes to rounding.
    """
    s = grid.torus.orientation / grid.sqrt_g
    return s[:, None] * (cov[:, 1:2] * grid.e_theta - cov[:, 0:1] * grid.e_phi)


def rotated_gradient(grid: SurfaceGrid, f: np.ndarray) -> np.ndarray:
    """``grad_S f x N``: the divergence-free field generated by a stream function."""
    return cross_normal_covariant(grid, np.stack([d_theta(grid, f), d_phi(grid, f)], axis=1))


def cross_normal(grid: SurfaceGrid, v: np.ndarray) -> np.ndarray:
    return np.cross(v, grid.normals)


def trig_interpolate(grid: SurfaceGrid, values: np.ndarray, theta, phi) -> np.ndarray:
    """Evaluate the trigonometric interpolant of nodal values at (theta, phi)."""
    a = _grid_view(grid, values)
    coef = np.fft.fft2(a, axes=(0, 1)) / grid.size
    kt = np.fft.fftfreq(grid.n_theta, 1.0 / grid.n_theta)
    kp = np.fft.fftfreq(grid.n_phi, 1.0 / grid.n_phi)
    et = np.exp(1j * np.outer(np.asarray(theta), kt))
    ep = np.exp(1j * np.outer(np.asarray(phi), kp))
    tmp = np.einsum("pa,ab...->pb...", et, coef)
    return np.einsum("pb,pb...->p...", ep, tmp).real


# -- surface Poisson problem --------------------------------------------------

def _laplace_parts(grid: SurfaceGrid):
    sg = grid.sqrt_g
    gi = grid.inv_metric
    a_tt, a_tp, a_pp = sg * gi[:, 0], sg * gi[:, 1], sg * gi[:, 2]

    def apply(u):
        ut, up = d_theta(grid, u), d_phi(grid, u)
        return -(d_theta(grid, a_tt * ut + a_tp * up) + d_phi(grid, a_tp * ut + a_pp * up))

    kt = _ik(grid.n_theta).imag[:, None]
    kp = _ik(grid.n_phi).imag[None, :]
    sym = a_tt.mean() * kt**2 + 2 * a_tp.mean() * kt * kp + a_pp.mean() * kp**2
    inv = np.where(sym > 1e-12 * sym.max(), 1.0 / np.where(sym == 0, 1, sym), 0.0)

    def precondition(r):
        rh = np.fft.fft2(r.reshape(grid.shape))
        return np.fft.ifft2(inv * rh).real.ravel()

    return apply, precondition


def solve_surface_poisson(grid: SurfaceGrid, rhs: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Solve ``-sum_i D_i(sqrt g g^ij D_j u) = rhs`` for u orthogonal to the null space."""
    apply, precondition = _laplace_parts(grid)
    M = grid.size
    A = LinearOperator((M, M), matvec=apply, dtype=float)
    P = LinearOperator((M, M), matvec=precondition, dtype=float)
    u, info = cg(A, rhs, rtol=rtol, atol=0.0, M=P, maxiter=2000)
    if info != 0:
        from .errors import NoConvergence
        raise NoConvergence(f"surface Poisson solve did not converge (info={info})")
    return u - u.mean()


@dataclass(frozen=True, eq=False)
class HarmonicSurfaceBasis:
    grid: SurfaceGrid
    gamma_p: np.ndarray
    gamma_t: np.ndarray
    gamma_p_cov: np.ndarray
    gamma_t_cov: np.ndarray
    period_matrix: np.ndarray
    curves: ReferenceCurves

    @property
    def gamma_p_cross_n(self) -> np.ndarray:
        return cross_normal_covariant(self.grid, self.gamma_p_cov)

    @property
    def gamma_t_cross_n(self) -> np.ndarray:
        return cross_normal_covariant(self.grid, self.gamma_t_cov)


def harmonic_basis(grid: SurfaceGrid, curves: ReferenceCurves | None = None) -> HarmonicSurfaceBasis:
    """Harmonic tangent fields with unit periods on the reference curves.

    Each coordinate differential (d theta, d phi) is made co-closed by
    subtracting the gradient of a surface Poisson solution; the two closed
    and co-closed fields are then recombined so that their line integrals
    over (poloidal, toroidal) curves form the identity matrix.
    """
    curves = curves or reference_curves(grid.torus)
    sg, gi = grid.sqrt_g, grid.inv_metric
    covs = []
    for comp in (0, 1):
        ct = sg * gi[:, comp]       # sqrt g * v^theta for v = grad(theta or phi)
        cp = sg * gi[:, 1 + comp]
        u = -solve_surface_poisson(grid, d_theta(grid, ct) + d_phi(grid, cp))
        cov = -np.stack([d_theta(grid, u), d_phi(grid, u)], axis=1)
        cov[:, comp] += 1.0
        covs.append(cov)
    vecs = [covariant_to_vector(grid, c) for c in covs]
    period = np.array([[line_integral(v, curves.poloidal, grid) for v in vecs],
                       [line_integral(v, curves.toroidal, grid) for v in vecs]])
    if abs(np.linalg.det(period)) < 1e-10:
        raise SingularPeriodMatrix(f"period matrix determinant {np.linalg.det(period):.3g}")
    C = np.linalg.inv(period)
    gp_cov = C[0, 0] * covs[0] + C[1, 0] * covs[1]
    gt_cov = C[0, 1] * covs[0] + C[1, 1] * covs[1]
    return HarmonicSurfaceBasis(grid, covariant_to_vector(grid, gp_cov),
                                covariant_to_vector(grid, gt_cov), gp_cov, gt_cov,
                                period, curves)


# -- line integrals -------------------------------------------------------------

def line_integral(v, curve: Curve, grid: SurfaceGrid | None = None) -> float:
    """Periodic trapezoid rule for the circulation of ``v`` along ``curve``.

    ``v`` is either a nodal tangent field on ``grid`` (interpolated
    spectrally onto the curve) or a callable mapping (P, 3) points to (P, 3)
    field values.
    """
    n = curve.n
    if callable(v):
        vals = np.asarray(v(curve.points[:n]))
    else:
        if grid is None:
            raise ValueError("a nodal field needs its grid")
        th, ph = curve.params[:n, 0], curve.params[:n, 1]
        vals = trig_interpolate(grid, v, th, ph)
    return float(np.sum(vals * curve.tangents[:n]) * TWO_PI / n)


# -- Fourier modes and stream-function currents --------------------------------

def fourier_modes(count: int) -> list[tuple[int, int]]:
    """The first ``count`` real Fourier modes, ordered by total degree |m|+|n|.

    A key ``(m, n)`` with m > 0, or m = 0 and n > 0, stands for
    cos(m theta - n phi); its negation ``(-m, -n)`` stands for the matching sine.
    """
    keys: list[tuple[int, int]] = []
    degree = 1
    while len(keys) < count:
        for m in range(0, degree + 1):
            rest = degree - m
            ns = [rest] if m == 0 else sorted({rest, -rest})
            for n in ns:
                keys.append((m, n))
                keys.append((-m, -n))
        degree += 1
    return keys[:count]


def mode_values(key: tuple[int, int], theta, phi) -> np.ndarray:
    m, n = key
    if m > 0 or (m == 0 and n > 0):
        return np.cos(m * theta - n * phi)
    return np.sin(-m * theta + n * phi)


def stream_values(grid: SurfaceGrid, coeffs) -> np.ndarray:
    f = np.zeros(grid.size)
    for (m, n), c in _items(coeffs):
        f += c * mode_values((m, n), grid.theta, grid.phi)
    return f


def _items(coeffs):
    if isinstance(coeffs, dict):
        return list(coeffs.items())
    return [((int(m), int(n)), float(v)) for m, n, v in coeffs]


@dataclass(frozen=True)
class SurfaceCurrent:
    """``j = grad_S f x N + alpha gamma_t x N + beta gamma_p x N``."""

    stream_coeffs: dict = field(default_factory=dict)
    alpha: float = 0.0
    beta: float = 0.0

    def to_json(self) -> dict:
        return {
            "stream_coeffs": [[m, n, v] for (m, n), v in sorted(self.stream_coeffs.items())],
            "alpha": self.alpha,
            "beta": self.beta,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SurfaceCurrent":
        return cls(dict(_items(doc.get("stream_coeffs", []))),
                   float(doc.get("alpha", 0.0)), float(doc.get("beta", 0.0)))


def realize_current(current: SurfaceCurrent, basis: HarmonicSurfaceBasis) -> np.ndarray:
    grid = basis.grid
    j = rotated_gradient(grid, stream_values(grid, current.stream_coeffs))
    return j + current.alpha * basis.gamma_t_cross_n + current.beta * basis.gamma_p_cross_n


def avg_windings(j: np.ndarray, basis: HarmonicSurfaceBasis) -> tuple[float, float]:
    """Area-averaged projections of j on gamma_t and gamma_p: ``(Qbar, Pbar)``."""
    grid = basis.grid
    w = grid.weights / grid.area
    q = float(w @ np.sum(j * basis.gamma_t, axis=1))
    p = float(w @ np.sum(j * basis.gamma_p, axis=1))
    return q, p
