"""Toroidal surfaces given by Fourier series, plus surface and volume grids.

Grid arrays are stored flattened in theta-major order: node ``k`` sits at
``(theta_i, phi_j)`` with ``k = i * n_phi + j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import AxisIntersection, DegenerateCell, NonEmbedded

TWO_PI = 2.0 * np.pi


def _as_table(coeffs) -> dict[tuple[int, int], float]:
    """Accept a mapping or an iterable of ``(m, n, value)`` triples."""
    if isinstance(coeffs, Mapping):
        return {(int(m), int(n)): float(v) for (m, n), v in coeffs.items()}
    return {(int(m), int(n)): float(v) for m, n, v in coeffs}


@dataclass(frozen=True)
class FourierTorus:
    """Stellarator-symmetric toroidal surface.

    R(theta, phi) = sum R_mn cos(m theta - n nfp phi)
    Z(theta, phi) = sum Z_mn sin(m theta - n nfp phi)

    ``orientation`` is +1 when ``e_theta x e_phi`` points out of the enclosed
    volume and -1 otherwise; normals are always taken outward.
    """

    r_coeffs: dict
    z_coeffs: dict
    nfp: int = 1
    orientation: int = 1

    def _modes(self):
        keys = sorted(set(self.r_coeffs) | set(self.z_coeffs))
        m = np.array([k[0] for k in keys], dtype=float)
        n = np.array([k[1] for k in keys], dtype=float) * self.nfp
        rc = np.array([self.r_coeffs.get(k, 0.0) for k in keys])
        zc = np.array([self.z_coeffs.get(k, 0.0) for k in keys])
        return m, n, rc, zc

    def cylindrical(self, theta, phi):
        """R, Z and their first derivatives ``(R, R_t, R_p, Z, Z_t, Z_p)``."""
        theta = np.asarray(theta, dtype=float)
        phi = np.asarray(phi, dtype=float)
        m, n, rc, zc = self._modes()
        ang = theta[..., None] * m - phi[..., None] * n
        c, s = np.cos(ang), np.sin(ang)
        R = c @ rc
        Rt = -(s * m) @ rc
        Rp = (s * n) @ rc
        Z = s @ zc
        Zt = (c * m) @ zc
        Zp = -(c * n) @ zc
        return R, Rt, Rp, Z, Zt, Zp

    def evaluate(self, theta, phi):
        """Position and tangent vectors ``(x, x_theta, x_phi)``, each (..., 3)."""
        phi = np.asarray(phi, dtype=float)
        R, Rt, Rp, Z, Zt, Zp = self.cylindrical(theta, phi)
        cp, sp = np.cos(phi), np.sin(phi)
        x = np.stack([R * cp, R * sp, Z], axis=-1)
        xt = np.stack([Rt * cp, Rt * sp, Zt], axis=-1)
        xp = np.stack([Rp * cp - R * sp, Rp * sp + R * cp, Zp], axis=-1)
        return x, xt, xp

    def normal_area(self, theta, phi):
        """Outward unit normal and area density sqrt(g) at parameter points."""
        _, xt, xp = self.evaluate(theta, phi)
        cr = np.cross(xt, xp) * self.orientation
        jac = np.linalg.norm(cr, axis=-1)
        return cr / jac[..., None], jac

    def axis(self, phi, derivative: bool = False):
        """The m = 0 part of the surface: a closed curve inside the torus."""
        ax = FourierTorus({k: v for k, v in self.r_coeffs.items() if k[0] == 0},
                          {k: v for k, v in self.z_coeffs.items() if k[0] == 0},
                          self.nfp)
        phi = np.asarray(phi, dtype=float)
        R, _, Rp, Z, _, Zp = ax.cylindrical(np.zeros_like(phi), phi)
        return (R, Z, Rp, Zp) if derivative else (R, Z)

    @property
    def major_radius(self) -> float:
        return self.r_coeffs.get((0, 0), 0.0)

    def scaled(self, minor_scale: float) -> "FourierTorus":
        """Shrink the cross-section toward the axis curve by ``minor_scale``."""
        r = {k: (v if k[0] == 0 else minor_scale * v) for k, v in self.r_coeffs.items()}
        z = {k: (v if k[0] == 0 else minor_scale * v) for k, v in self.z_coeffs.items()}
        return FourierTorus(r, z, self.nfp, self.orientation)

    def to_json(self) -> dict:
        return {
            "nfp": self.nfp,
            "r": [[m, n, v] for (m, n), v in sorted(self.r_coeffs.items())],
            "z": [[m, n, v] for (m, n), v in sorted(self.z_coeffs.items())],
        }


def _probe_checks(torus: FourierTorus, n_theta: int, n_phi: int):
    th, ph = _angles(n_theta, n_phi)
    R = torus.cylindrical(th, ph)[0]
    if np.min(R) <= 0:
        raise AxisIntersection(f"surface reaches the z-axis (min R = {np.min(R):.3g})")
    x, xt, xp = torus.evaluate(th, ph)
    cr = np.cross(xt, xp)
    jac = np.linalg.norm(cr, axis=-1)
    if np.min(jac) <= 1e-12 * np.max(jac):
        raise NonEmbedded("metric determinant vanishes on the probe grid")
    # The poloidal winding of (R, Z) around the axis must not reverse.
    ra, za = torus.axis(ph)
    _, Rt, _, Z, Zt, _ = torus.cylindrical(th, ph)
    turn = (R - ra) * Zt - (Z - za) * Rt
    if not (np.all(turn > 0) or np.all(turn < 0)):
        raise NonEmbedded("cross-section is not star-shaped about the axis curve")
    return x, cr


def build_torus(r_coeffs, z_coeffs, nfp: int = 1) -> FourierTorus:
    """Validate a coefficient table and fix the outward orientation."""
    r = _as_table(r_coeffs)
    z = _as_table(z_coeffs)
    if not r:
        raise NonEmbedded("empty radius coefficient table")
    if r.get((0, 0), 0.0) <= 0:
        raise AxisIntersection("the (0,0) radius coefficient must be positive")
    if int(nfp) < 1:
        raise NonEmbedded("nfp must be a positive integer")
    torus = FourierTorus(r, z, int(nfp), 1)
    x, cr = _probe_checks(torus, 64, 64)
    # Divergence theorem: the sign of the flux of x fixes the orientation.
    flux = float(np.sum(np.einsum("...k,...k", cr, x)))
    return FourierTorus(r, z, int(nfp), 1 if flux > 0 else -1)


def circular_torus(major: float = 2.0, minor: float = 1.0) -> FourierTorus:
    return build_torus({(0, 0): major, (1, 0): minor}, {(1, 0): minor})


def _angles(n_theta: int, n_phi: int):
    th = TWO_PI * np.arange(n_theta) / n_theta
    ph = TWO_PI * np.arange(n_phi) / n_phi
    return np.meshgrid(th, ph, indexing="ij")


@dataclass(frozen=True, eq=False)
class SurfaceGrid:
    torus: FourierTorus
    n_theta: int
    n_phi: int
    theta: np.ndarray
    phi: np.ndarray
    nodes: np.ndarray
    e_theta: np.ndarray
    e_phi: np.ndarray
    normals: np.ndarray
    sqrt_g: np.ndarray
    weights: np.ndarray
    metric: np.ndarray  # (M, 3): g_tt, g_tp, g_pp
    inv_metric: np.ndarray  # (M, 3): g^tt, g^tp, g^pp

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_theta, self.n_phi)

    @property
    def size(self) -> int:
        return self.n_theta * self.n_phi

    @property
    def area(self) -> float:
        return float(self.weights.sum())

    @property
    def spacing(self) -> float:
        """Largest physical distance between neighbouring nodes."""
        dt = np.sqrt(self.metric[:, 0]) * TWO_PI / self.n_theta
        dp = np.sqrt(self.metric[:, 2]) * TWO_PI / self.n_phi
        return float(max(dt.max(), dp.max()))

    def mean(self, values: np.ndarray) -> float:
        return float(self.weights @ values / self.area)

    def project_mean_zero(self, values: np.ndarray) -> np.ndarray:
        return values - self.mean(values)

    def l2_norm(self, values: np.ndarray) -> float:
        v = np.asarray(values)
        sq = v * v if v.ndim == 1 else np.sum(v * v, axis=-1)
        return float(np.sqrt(self.weights @ sq))

    def tangential(self, vectors: np.ndarray) -> np.ndarray:
        """Remove the normal component of nodal 3-vectors."""
        return vectors - np.sum(vectors * self.normals, axis=1)[:, None] * self.normals

    def enclosed_volume(self) -> float:
        return float(self.weights @ np.sum(self.normals * self.nodes, axis=1) / 3.0)


def surface_grid(torus: FourierTorus, n_theta: int, n_phi: int) -> SurfaceGrid:
    if n_theta < 8 or n_phi < 8 or n_theta % 2 or n_phi % 2:
        raise ValueError("grid sizes must be even and at least 8")
    _probe_checks(torus, n_theta, n_phi)
    th, ph = _angles(n_theta, n_phi)
    th, ph = th.ravel(), ph.ravel()
    x, xt, xp = torus.evaluate(th, ph)
    normals, sqrt_g = torus.normal_area(th, ph)
    gtt = np.sum(xt * xt, axis=1)
    gtp = np.sum(xt * xp, axis=1)
    gpp = np.sum(xp * xp, axis=1)
    det = gtt * gpp - gtp**2
    inv = np.stack([gpp / det, -gtp / det, gtt / det], axis=1)
    w = sqrt_g * (TWO_PI / n_theta) * (TWO_PI / n_phi)
    return SurfaceGrid(
        torus, n_theta, n_phi, th, ph, x, xt, xp, normals, sqrt_g, w,
        np.stack([gtt, gtp, gpp], axis=1), inv,
    )


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """Quadrature for the solid torus ``{axis + s * scale * (X - axis)}``."""

    torus: FourierTorus
    minor_scale: float
    shape: tuple[int, int, int]
    coords: np.ndarray  # (K, 3): s, theta, phi
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def volume(self) -> float:
        return float(self.weights.sum())

    def l2_norm(self, vectors: np.ndarray) -> float:
        return float(np.sqrt(self.weights @ np.sum(vectors * vectors, axis=-1)))


def volume_grid(torus: FourierTorus, n_s: int, n_theta: int, n_phi: int,
                minor_scale: float = 1.0) -> VolumeGrid:
    """Gauss-Legendre in the radial label s, trapezoid in both angles."""
    if not 0.0 < minor_scale <= 1.0:
        raise ValueError("minor_scale must lie in (0, 1]")
    xs, ws = np.polynomial.legendre.leggauss(n_s)
    s = 0.5 * (xs + 1.0)
    ws = 0.5 * ws
    th = TWO_PI * np.arange(n_theta) / n_theta
    ph = TWO_PI * np.arange(n_phi) / n_phi
    S, T, P = np.meshgrid(s, th, ph, indexing="ij")
    S, T, P = S.ravel(), T.ravel(), P.ravel()
    R, Rt, _, Z, Zt, _ = torus.cylindrical(T, P)
    ra, za = torus.axis(P)
    c = minor_scale
    rr = ra + S * c * (R - ra)
    zz = za + S * c * (Z - za)
    turn = (R - ra) * Zt - (Z - za) * Rt
    jac = rr * S * c * c * np.abs(turn)
    if np.any(rr <= 0) or not (np.all(turn > 0) or np.all(turn < 0)):
        raise DegenerateCell("radial scaling produced a non-positive Jacobian")
    w = jac * np.repeat(ws, n_theta * n_phi) * (TWO_PI / n_theta) * (TWO_PI / n_phi)
    nodes = np.stack([rr * np.cos(P), rr * np.sin(P), zz], axis=1)
    return VolumeGrid(torus, float(minor_scale), (n_s, n_theta, n_phi),
                      np.stack([S, T, P], axis=1), nodes, w)


@dataclass(frozen=True, eq=False)
class Curve:
    """Closed polyline; ``points[0] == points[-1]``. ``params`` holds (theta, phi)."""

    points: np.ndarray
    tangents: np.ndarray  # d(point)/dt for the parameter t in [0, 2pi)
    params: np.ndarray

    @property
    def n(self) -> int:
        return len(self.points) - 1


@dataclass(frozen=True, eq=False)
class ReferenceCurves:
    poloidal: Curve  # phi = 0, traversed with increasing theta
    toroidal: Curve  # theta = 0, traversed with increasing phi


def coordinate_curve(torus: FourierTorus, kind: str, n: int = 256,
                     fixed: float = 0.0) -> Curve:
    t = TWO_PI * np.arange(n + 1) / n
    t[-1] = 0.0
    if kind == "poloidal":
        th, ph = t, np.full_like(t, fixed)
        _, xt, _ = torus.evaluate(th, ph)
        tan = xt
    elif kind == "toroidal":
        th, ph = np.full_like(t, fixed), t
        _, _, xp = torus.evaluate(th, ph)
        tan = xp
    else:
        raise ValueError(kind)
    x = torus.evaluate(th, ph)[0]
    return Curve(x, tan, np.stack([th, ph], axis=1))


def reference_curves(torus: FourierTorus, n: int = 256) -> ReferenceCurves:
    if n < 256:
        raise ValueError("reference curves need at least 256 samples")
    return ReferenceCurves(coordinate_curve(torus, "poloidal", n),
                           coordinate_curve(torus, "toroidal", n))


def axis_curve(torus: FourierTorus, n: int = 256) -> Curve:
    """The m = 0 axis curve, oriented with increasing phi."""
    t = TWO_PI * np.arange(n + 1) / n
    t[-1] = 0.0
    ra, za, rp, zp = torus.axis(t, derivative=True)
    x = np.stack([ra * np.cos(t), ra * np.sin(t), za], axis=1)
    tan = np.stack([rp * np.cos(t) - ra * np.sin(t), rp * np.sin(t) + ra * np.cos(t), zp], axis=1)
    return Curve(x, tan, np.stack([np.full_like(t, np.nan), t], axis=1))
