"""Nystrom discretization of the Laplace layer potentials on a surface grid.

Conventions (for x, y on the surface, N the outward normal):

    single layer      (V psi)(x)  = 1/(4 pi) int psi(y) / |x - y|
    double layer      (W f)(x)    = 1/(4 pi) int f(y) N(y).(x - y) / |x - y|^3
    adjoint layer     (WT phi)(x) = 1/(4 pi) int phi(y) N(x).(x - y) / |x - y|^3

With this sign convention W 1 = -1/2 on the surface and WT is the negative
L2 adjoint of W.

Weakly singular integrals use a smooth partition of unity: the trapezoid
rule handles ``(1 - eta) K`` and a polar-coordinate rule in the parameter
chart handles ``eta K`` near the target, with the density interpolated by
local tensor Lagrange polynomials. Only the geometry is evaluated
off-grid (exactly, from the Fourier series).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import scipy.linalg as sla
from scipy.special import erfc

from .errors import AssemblyFailure, NearSurfacePoint, NoConvergence, NotMeanZero
from .geometry import SurfaceGrid

log = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
TWO_PI = 2.0 * np.pi

Kernel = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def single_layer_kernel(x, nx, y, ny):
    return 1.0 / (FOUR_PI * np.linalg.norm(x - y, axis=-1))


def double_layer_kernel(x, nx, y, ny):
    d = x - y
    r = np.linalg.norm(d, axis=-1)
    return np.sum(ny * d, axis=-1) / (FOUR_PI * r**3)


def adjoint_layer_kernel(x, nx, y, ny):
    d = x - y
    r = np.linalg.norm(d, axis=-1)
    return np.sum(nx * d, axis=-1) / (FOUR_PI * r**3)


# -- local polar correction ----------------------------------------------------

def window(t: np.ndarray, steepness: float = 5.0) -> np.ndarray:
    """C-infinity cutoff on [0, 1]: equal to 1 near 0, 0 near 1, flat at both ends."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = t < 1.0
    ti = np.clip(t[inside], 1e-300, None)
    out[inside] = 0.5 * erfc(steepness * (ti - 0.5) / np.sqrt(ti * (1.0 - ti)))
    return out


def _lagrange_weights(x: np.ndarray, order: int):
    """Stencil start and weights for interpolation at fractional index x."""
    npts = order + 1
    start = np.floor(x).astype(int) - (npts // 2 - 1)
    nodes = start[:, None] + np.arange(npts)[None, :]
    w = np.ones((len(x), npts))
    for a in range(npts):
        for b in range(npts):
            if a != b:
                w[:, a] *= (x - nodes[:, b]) / (nodes[:, a] - nodes[:, b])
    return start, w


@dataclass(frozen=True)
class PolarRule:
    """Polar patch rule; radii are measured in grid cells."""

    radius: float = 8.0
    n_rho: int = 32
    n_alpha: int = 64
    order: int = 9

    def fitted(self, grid: SurfaceGrid) -> "PolarRule":
        """Shrink the patch so that it fits on coarse grids."""
        limit = min(grid.n_theta, grid.n_phi) / 2.0 - 1.0
        if self.radius <= limit:
            return self
        return PolarRule(limit, self.n_rho, self.n_alpha, self.order)

    def nodes(self):
        xg, wg = np.polynomial.legendre.leggauss(self.n_rho)
        rho = 0.5 * self.radius * (xg + 1.0)
        w_rho = 0.5 * self.radius * wg
        alpha = TWO_PI * (np.arange(self.n_alpha) + 0.5) / self.n_alpha
        R, A = np.meshgrid(rho, alpha, indexing="ij")
        W = (w_rho[:, None] * R * (TWO_PI / self.n_alpha)) * window(R / self.radius)
        return R.ravel() * np.cos(A.ravel()), R.ravel() * np.sin(A.ravel()), W.ravel()

    def interpolation(self):
        """Offsets (di, dj) of the stencil box and the (Q, box) interpolation matrix."""
        u, v, w = self.nodes()
        su, wu = _lagrange_weights(u, self.order)
        sv, wv = _lagrange_weights(v, self.order)
        half = int(np.ceil(self.radius)) + self.order
        side = 2 * half + 1
        P = np.zeros((len(u), side, side))
        q = np.arange(len(u))
        for a in range(self.order + 1):
            for b in range(self.order + 1):
                P[q, su + a + half, sv + b + half] += wu[:, a] * wv[:, b]
        keep = np.flatnonzero(np.abs(P).reshape(len(u), -1).max(axis=0) > 0)
        di, dj = np.divmod(keep, side)
        return u, v, w, di - half, dj - half, P.reshape(len(u), -1)[:, keep]


def _index_distance(grid: SurfaceGrid) -> np.ndarray:
    """Minimal-image distance in cells from node 0 to every node, (n_theta, n_phi)."""
    it = np.arange(grid.n_theta)
    ip = np.arange(grid.n_phi)
    it = np.minimum(it, grid.n_theta - it)
    ip = np.minimum(ip, grid.n_phi - ip)
    return np.hypot(it[:, None], ip[None, :])


def kernel_blocks(grid: SurfaceGrid, kernel: Kernel, rule: PolarRule = PolarRule(),
                  chunk: int = 256) -> Iterator[tuple[slice, np.ndarray]]:
    """Yield row blocks of the corrected Nystrom matrix for ``kernel``.

    Entry (i, j) multiplies the density value at node j; the quadrature
    weight is folded in.
    """
    rule = rule.fitted(grid)
    M = grid.size
    nt, nph = grid.shape
    ht, hp = TWO_PI / nt, TWO_PI / nph
    eta_map = window(_index_distance(grid) / rule.radius)
    u, v, wq, di, dj, P = rule.interpolation()
    it_all, ip_all = np.divmod(np.arange(M), nph)
    torus = grid.torus
    for start in range(0, M, chunk):
        rows = np.arange(start, min(start + chunk, M))
        x = grid.nodes[rows]
        nx = grid.normals[rows]
        it, ip = it_all[rows], ip_all[rows]
        with np.errstate(divide="ignore", invalid="ignore"):
            K = kernel(x[:, None, :], nx[:, None, :], grid.nodes[None, :, :],
                       grid.normals[None, :, :])
        eta = eta_map[(it_all[None, :] - it[:, None]) % nt, (ip_all[None, :] - ip[:, None]) % nph]
        K[np.arange(len(rows)), rows] = 0.0
        block = K * (1.0 - eta) * grid.weights[None, :]
        if not np.all(np.isfinite(block)):
            raise AssemblyFailure("non-finite kernel value: coincident nodes")
        # polar patch around each target
        th = grid.theta[rows][:, None] + u[None, :] * ht
        ph = grid.phi[rows][:, None] + v[None, :] * hp
        y, _, _ = torus.evaluate(th, ph)
        ny, jac = torus.normal_area(th, ph)
        Kp = kernel(x[:, None, :], nx[:, None, :], y, ny) * jac * (wq * ht * hp)[None, :]
        C = Kp @ P
        cols = ((it[:, None] + di[None, :]) % nt) * nph + (ip[:, None] + dj[None, :]) % nph
        r_local = np.broadcast_to(np.arange(len(rows))[:, None], cols.shape)
        np.add.at(block, (r_local, cols), C)
        yield slice(rows[0], rows[-1] + 1), block


def kernel_matrix(grid: SurfaceGrid, kernel: Kernel, rule: PolarRule = PolarRule()) -> np.ndarray:
    A = np.empty((grid.size, grid.size))
    for sl, block in kernel_blocks(grid, kernel, rule):
        A[sl] = block
    return A


def solid_angle_defect(grid: SurfaceGrid, rule: PolarRule = PolarRule()) -> np.ndarray:
    """Row sums of the corrected double-layer quadrature plus 1/2, without storing it."""
    out = np.empty(grid.size)
    for sl, block in kernel_blocks(grid, double_layer_kernel, rule):
        out[sl] = block.sum(axis=1) + 0.5
    return out


# -- off-surface evaluation ---------------------------------------------------

def upsample(grid: SurfaceGrid, values: np.ndarray, fine: SurfaceGrid) -> np.ndarray:
    """Zero-padded FFT interpolation of nodal values onto a finer grid."""
    if fine.shape == grid.shape:
        return np.asarray(values, dtype=float)
    a = np.asarray(values, dtype=float).reshape(grid.shape + np.shape(values)[1:])
    nt, nph = grid.shape
    ft, fp = fine.shape
    coef = np.fft.fft2(a, axes=(0, 1))
    out = np.zeros((ft, fp) + a.shape[2:], dtype=complex)
    kt = np.fft.fftfreq(nt, 1.0 / nt).astype(int)
    kp = np.fft.fftfreq(nph, 1.0 / nph).astype(int)
    keep_t = np.abs(kt) < nt // 2
    keep_p = np.abs(kp) < nph // 2
    sub = coef[np.ix_(keep_t, keep_p)]
    out[np.ix_(kt[keep_t] % ft, kp[keep_p] % fp)] = sub
    out *= (ft * fp) / (nt * nph)
    res = np.fft.ifft2(out, axes=(0, 1)).real
    return res.reshape((ft * fp,) + a.shape[2:])


def distance_to_nodes(grid: SurfaceGrid, points: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        d = points[s:s + chunk, None, :] - grid.nodes[None, :, :]
        out[s:s + chunk] = np.sqrt(np.min(np.sum(d * d, axis=-1), axis=1))
    return out


def warn_near(grid: SurfaceGrid, points: np.ndarray) -> None:
    import warnings
    d = distance_to_nodes(grid, points)
    if np.any(d < 0.5 * grid.spacing):
        warnings.warn(f"{int(np.sum(d < 0.5 * grid.spacing))} evaluation points lie within half a "
                      "grid spacing of the surface", NearSurfacePoint, stacklevel=3)


def _pair_chunks(points: np.ndarray, sources: np.ndarray, budget: int = 2_000_000):
    step = max(1, budget // max(1, len(sources)))
    for s in range(0, len(points), step):
        d = points[s:s + step, None, :] - sources[None, :, :]
        r = np.linalg.norm(d, axis=-1)
        r[r == 0.0] = np.inf  # a coincident node contributes nothing
        yield slice(s, s + step), d, r


def single_layer_eval(src: SurfaceGrid, density: np.ndarray, points: np.ndarray) -> np.ndarray:
    """(1/4pi) sum psi_j w_j / |x - y_j|; density may carry trailing columns."""
    q = (density.T * src.weights).T
    out = np.empty((len(points),) + np.shape(density)[1:])
    for sl, _, r in _pair_chunks(points, src.nodes):
        out[sl] = (1.0 / r) @ q / FOUR_PI
    return out


def single_layer_gradient_eval(src: SurfaceGrid, density: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Gradient in x of the single layer; returns (P, 3) or (P, 3, k)."""
    q = (density.T * src.weights).T
    out = np.empty((len(points), 3) + np.shape(density)[1:])
    for sl, d, r in _pair_chunks(points, src.nodes):
        k = -d / (FOUR_PI * r[..., None] ** 3)
        out[sl] = np.einsum("pjc,j...->pc...", k, q)
    return out


def double_layer_eval(src: SurfaceGrid, density: np.ndarray, points: np.ndarray) -> np.ndarray:
    q = density * src.weights
    out = np.empty(len(points))
    for sl, d, r in _pair_chunks(points, src.nodes):
        k = np.sum(d * src.normals[None], axis=-1) / (FOUR_PI * r**3)
        out[sl] = k @ q
    return out


# -- assembled operators -------------------------------------------------------

_MAGIC = b"CWSLAYR1"


@dataclass(eq=False)
class LayerOperatorSet:
    """Dense single-layer, double-layer and adjoint double-layer matrices.

    ``gram`` is the symmetrized weighted single layer ``diag(w) V``; the
    single-layer matrix itself is ``gram / w[:, None]``. The double layer
    has its diagonal fixed so that ``W 1 = -1/2`` exactly, and the adjoint
    is the weighted negative transpose ``-diag(w)^-1 W^T diag(w)``.
    """

    grid: SurfaceGrid
    gram: np.ndarray
    W: np.ndarray
    raw_defect: np.ndarray  # quadrature row sums of the double layer plus 1/2
    rule: PolarRule = field(default_factory=PolarRule)
    upsampling: int = 2
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def weights(self) -> np.ndarray:
        return self.grid.weights

    @property
    def V(self) -> np.ndarray:
        return self.gram / self.weights[:, None]

    @property
    def WT(self) -> np.ndarray:
        w = self.weights
        return -(self.W.T * w[None, :]) / w[:, None]

    def apply_V(self, psi: np.ndarray) -> np.ndarray:
        return (self.gram @ psi) / self.weights if psi.ndim == 1 else (self.gram @ psi) / self.weights[:, None]

    def apply_W(self, f: np.ndarray) -> np.ndarray:
        return self.W @ f

    def apply_WT(self, phi: np.ndarray) -> np.ndarray:
        w = self.weights
        if phi.ndim == 1:
            return -(self.W.T @ (w * phi)) / w
        return -(self.W.T @ (w[:, None] * phi)) / w[:, None]

    def interior_operator(self, phi: np.ndarray) -> np.ndarray:
        """(1/2 - WT) phi: interior normal derivative of the single layer."""
        return 0.5 * phi - self.apply_WT(phi)

    def exterior_operator(self, phi: np.ndarray) -> np.ndarray:
        """(1/2 + WT) phi."""
        return 0.5 * phi + self.apply_WT(phi)

    # factorizations, built on first use
    def gram_eigh(self):
        if "eigh" not in self._cache:
            self._cache["eigh"] = sla.eigh(self.gram, check_finite=False)
        return self._cache["eigh"]

    def lu_exterior(self):
        if "lu_plus" not in self._cache:
            A = self.WT
            A[np.diag_indices_from(A)] += 0.5
            self._cache["lu_plus"] = sla.lu_factor(A, overwrite_a=True, check_finite=False)
        return self._cache["lu_plus"]

    def lu_interior_deflated(self):
        """LU of (1/2 - WT) + 1 w^T / |S|, nonsingular on a connected surface."""
        if "lu_minus" not in self._cache:
            A = -self.WT
            A[np.diag_indices_from(A)] += 0.5
            A += np.outer(np.ones(self.grid.size), self.weights / self.grid.area)
            self._cache["lu_minus"] = sla.lu_factor(A, overwrite_a=True, check_finite=False)
        return self._cache["lu_minus"]

    def fine_grid(self) -> SurfaceGrid:
        if "fine" not in self._cache:
            from .geometry import surface_grid
            k = self.upsampling
            self._cache["fine"] = surface_grid(self.grid.torus, k * self.grid.n_theta,
                                               k * self.grid.n_phi)
        return self._cache["fine"]

    def save(self, path: str | Path) -> None:
        """Binary dump: magic, int64 grid shape, then float64 row-major arrays."""
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<qq", self.grid.n_theta, self.grid.n_phi))
            for arr in (self.gram, self.W, self.raw_defect):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path, grid: SurfaceGrid, rule: PolarRule = PolarRule()) -> "LayerOperatorSet":
        M = grid.size
        with open(path, "rb") as fh:
            if fh.read(8) != _MAGIC:
                raise AssemblyFailure(f"{path}: not a layer-operator dump")
            shape = struct.unpack("<qq", fh.read(16))
            if tuple(shape) != grid.shape:
                raise AssemblyFailure(f"{path}: grid {shape} does not match {grid.shape}")
            gram = np.frombuffer(fh.read(8 * M * M), dtype="<f8").reshape(M, M).copy()
            W = np.frombuffer(fh.read(8 * M * M), dtype="<f8").reshape(M, M).copy()
            defect = np.frombuffer(fh.read(8 * M), dtype="<f8").copy()
        return cls(grid, gram, W, defect, rule)


def assemble(grid: SurfaceGrid, rule: PolarRule = PolarRule(), *, flip_diagonal: bool = False,
             upsampling: int = 2) -> LayerOperatorSet:
    """Assemble the layer operators on ``grid``.

    ``flip_diagonal`` replaces the -1/2 of the double-layer diagonal by +1/2;
    it exists only to check that the validation suite notices.
    """
    w = grid.weights
    V = kernel_matrix(grid, single_layer_kernel, rule)
    V *= w[:, None]
    gram = V
    gram += gram.T.copy()
    gram *= 0.5
    W = kernel_matrix(grid, double_layer_kernel, rule)
    rows = W.sum(axis=1)
    defect = rows + 0.5
    W[np.diag_indices_from(W)] -= rows + (-0.5 if flip_diagonal else 0.5)
    if not (np.all(np.isfinite(gram)) and np.all(np.isfinite(W))):
        raise AssemblyFailure("non-finite operator entries")
    log.debug("assembled %dx%d operators, max solid-angle defect %.2e",
              grid.n_theta, grid.n_phi, np.abs(defect).max())
    return LayerOperatorSet(grid, gram, W, defect, rule, upsampling)


def interior_double_layer(opset: LayerOperatorSet, f: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Double-layer potential of f off the surface (-f inside for f = 1, 0 outside)."""
    warn_near(opset.grid, points)
    fine = opset.fine_grid()
    return double_layer_eval(fine, upsample(opset.grid, f, fine), np.asarray(points, float))


def duality_inner_product(opset: LayerOperatorSet, psi: np.ndarray, phi: np.ndarray) -> float:
    return float(psi @ (opset.gram @ phi))


def duality_norm(opset: LayerOperatorSet, psi: np.ndarray) -> float:
    """Equivalent W^{-1/2} norm; trailing columns (vector components) are summed."""
    if psi.ndim == 1:
        return float(np.sqrt(max(psi @ (opset.gram @ psi), 0.0)))
    return float(np.sqrt(max(np.sum(psi * (opset.gram @ psi)), 0.0)))


def _check_mean_zero(grid: SurfaceGrid, b: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    scale = np.sqrt(grid.weights @ (b * b) / grid.area)
    m = grid.mean(b)
    if abs(m) > tol * max(scale, 1e-300) and abs(m) > 1e-300:
        raise NotMeanZero(f"density mean {m:.3e} exceeds {tol:g} of its rms {scale:.3e}")
    return b - m


def series_terms(opset: LayerOperatorSet, b0: np.ndarray, n: int) -> Iterator[np.ndarray]:
    """Yield (1/2 - WT)^k b0 for k = 0..n, each re-projected to mean zero."""
    grid = opset.grid
    term = _check_mean_zero(grid, b0)
    yield term
    for _ in range(n):
        term = grid.project_mean_zero(opset.interior_operator(term))
        yield term


def neumann_series(opset: LayerOperatorSet, b0: np.ndarray, n: int, k_start: int = 0) -> np.ndarray:
    """Partial sum  sum_{k=k_start}^{n} (1/2 - WT)^k b0."""
    if k_start not in (0, 1):
        raise ValueError("k_start must be 0 or 1")
    total = np.zeros_like(np.asarray(b0, dtype=float))
    for k, term in enumerate(series_terms(opset, b0, n)):
        if k >= k_start:
            total += term
    return total


def contraction_estimate(opset: LayerOperatorSet, iters: int = 200, seed: int = 0,
                         tol: float = 1e-7) -> float:
    """Power iteration for the norm of (1/2 - WT) on mean-zero densities.

    Norms are taken in the single-layer duality inner product.
    """
    grid = opset.grid
    rng = np.random.default_rng(seed)
    x = grid.project_mean_zero(rng.standard_normal(grid.size))
    x /= duality_norm(opset, x)
    history = []
    for _ in range(iters):
        y = grid.project_mean_zero(opset.interior_operator(x))
        ratio = duality_norm(opset, y)
        history.append(ratio)
        x = y / ratio
        if len(history) > 5 and abs(history[-1] - history[-2]) < tol * ratio:
            return ratio
    if abs(history[-1] - history[-2]) > 1e-4:
        raise NoConvergence(f"power iteration ratios still moving: {history[-3:]}")
    return history[-1]
