"""Biot-Savart evaluations and the harmonic Neumann field of a solid torus.

Field convention: B(x) = 1/(4 pi) int J(y) x (x - y) / |x - y|^3 (unit
permeability), so a unit current along +z produces e_phi / (2 pi rho).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bvp import HarmonicSolution, solve_neumann_interior
from .errors import FilamentIntersectsDomain, OnFilament
from .geometry import Curve, SurfaceGrid
from .layer_potentials import FOUR_PI, LayerOperatorSet, _pair_chunks, upsample, warn_near
from .surface_fields import line_integral


@dataclass(frozen=True, eq=False)
class FieldSamples:
    points: np.ndarray
    values: np.ndarray
    weights: np.ndarray | None = None
    shape: tuple | None = None  # structured layout of the points, if any

    def l2_norm(self) -> float:
        sq = np.sum(self.values * self.values, axis=1)
        w = np.ones(len(sq)) if self.weights is None else self.weights
        return float(np.sqrt(w @ sq))

    def with_values(self, values: np.ndarray) -> "FieldSamples":
        return FieldSamples(self.points, values, self.weights, self.shape)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["x", "y", "z", "Bx", "By", "Bz"])
            for p, v in zip(self.points, self.values):
                out.writerow([f"{c:.12e}" for c in (*p, *v)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "FieldSamples":
        """Read x,y,z,Bx,By,Bz rows; an optional seventh column holds weights."""
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().lower() in ("x", "#"):
                    continue
                rows.append([float(c) for c in row])
        data = np.array(rows, dtype=float)
        w = data[:, 6] if data.shape[1] > 6 else None
        return cls(data[:, :3], data[:, 3:6], w)

    def to_vtk(self, path: str | Path, title: str = "field samples") -> None:
        """Legacy ASCII VTK: a structured grid when ``shape`` is set, vertices otherwise."""
        n = len(self.points)
        lines = ["# vtk DataFile Version 3.0", title, "ASCII"]
        if self.shape is not None:
            # VTK wants the first index fastest; our layout is the last index fastest.
            dims = tuple(reversed(self.shape)) + (1,) * (3 - len(self.shape))
            lines += ["DATASET STRUCTURED_GRID", "DIMENSIONS {} {} {}".format(*dims)]
        else:
            lines += ["DATASET POLYDATA"]
        lines.append(f"POINTS {n} double")
        lines += [f"{p[0]:.10e} {p[1]:.10e} {p[2]:.10e}" for p in self.points]
        if self.shape is None:
            lines.append(f"VERTICES {n} {2 * n}")
            lines += [f"1 {i}" for i in range(n)]
        lines += [f"POINT_DATA {n}", "VECTORS B double"]
        lines += [f"{v[0]:.10e} {v[1]:.10e} {v[2]:.10e}" for v in self.values]
        Path(path).write_text("\n".join(lines) + "\n")


# -- filaments -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FilamentLoop:
    """Closed polyline carrying ``current``; ``points[0] == points[-1]``."""

    points: np.ndarray
    current: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if len(p) < 65:
            raise ValueError("a filament loop needs at least 64 segments")
        if np.linalg.norm(p[0] - p[-1]) > 1e-12 * max(1.0, np.abs(p).max()):
            raise ValueError("filament loop is not closed")
        if np.min(np.linalg.norm(np.diff(p, axis=0), axis=1)) == 0.0:
            raise ValueError("filament loop has a zero-length segment")

    def reversed(self) -> "FilamentLoop":
        return FilamentLoop(self.points[::-1].copy(), self.current)


def circular_loop(center, radius: float, normal, current: float = 1.0,
                  n_segments: int = 128) -> FilamentLoop:
    normal = np.asarray(normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    t = 2 * np.pi * np.arange(n_segments + 1) / n_segments
    pts = np.asarray(center, float) + radius * (np.cos(t)[:, None] * u + np.sin(t)[:, None] * v)
    pts[-1] = pts[0]
    return FilamentLoop(pts, current)


def z_axis_loop(extent: float, per_side: int = 32) -> FilamentLoop:
    """Unit current up the z-axis from -extent to extent, returning at radius ``extent``."""
    corners = np.array([[0, 0, -extent], [0, 0, extent], [extent, 0, extent],
                        [extent, 0, -extent], [0, 0, -extent]], dtype=float)
    pts = [corners[0]]
    for a, b in zip(corners[:-1], corners[1:]):
        s = np.linspace(0.0, 1.0, per_side + 1)[1:]
        pts.extend(a + s[:, None] * (b - a))
    pts = np.array(pts)
    pts[-1] = pts[0]
    return FilamentLoop(pts, 1.0)


def _segment_distance(a, b, x):
    ab = b - a
    t = np.clip(np.sum((x[:, None] - a[None]) * ab[None], axis=-1) / np.sum(ab * ab, axis=-1), 0, 1)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(x[:, None] - closest, axis=-1)


def bs_filament(loop: FilamentLoop, points: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact field of a polygonal loop, summed segment by segment."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    a, b = loop.points[:-1], loop.points[1:]
    out = np.empty_like(x)
    for s in range(0, len(x), chunk):
        xs = x[s:s + chunk]
        if np.any(_segment_distance(a, b, xs) < 1e-9):
            raise OnFilament("evaluation point lies on the filament")
        r1 = a[None] - xs[:, None]
        r2 = b[None] - xs[:, None]
        n1 = np.linalg.norm(r1, axis=-1)
        n2 = np.linalg.norm(r2, axis=-1)
        num = np.cross(r1, r2) * (n1 + n2)[..., None]
        den = n1 * n2 * (n1 * n2 + np.sum(r1 * r2, axis=-1))
        out[s:s + chunk] = np.sum(num / den[..., None], axis=1)
    return out * loop.current / FOUR_PI


# -- surface currents ------------------------------------------------------------

def bs_surface_current(opset: LayerOperatorSet, j: np.ndarray, points: np.ndarray,
                       check: bool = True) -> np.ndarray:
    """Field of a nodal surface current; j may carry a trailing basis axis (M, 3, k)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if check:
        warn_near(opset.grid, points)
    fine = opset.fine_grid()
    jf = upsample(opset.grid, j, fine)
    q = jf * fine.weights.reshape((-1,) + (1,) * (jf.ndim - 1))
    out = np.empty((len(points),) + jf.shape[1:])
    for sl, d, r in _pair_chunks(points, fine.nodes, budget=1_000_000):
        k = d / (FOUR_PI * r[..., None] ** 3)  # (p, M, 3)
        # (q x k)_a = eps_abc q_b k_c
        out[sl, 0] = np.einsum("pm,m...->p...", k[..., 2], q[:, 1]) - np.einsum("pm,m...->p...", k[..., 1], q[:, 2])
        out[sl, 1] = np.einsum("pm,m...->p...", k[..., 0], q[:, 2]) - np.einsum("pm,m...->p...", k[..., 2], q[:, 0])
        out[sl, 2] = np.einsum("pm,m...->p...", k[..., 1], q[:, 0]) - np.einsum("pm,m...->p...", k[..., 0], q[:, 1])
    return out


# -- harmonic Neumann field --------------------------------------------------------

@dataclass(eq=False)
class HarmonicNeumannField:
    """Gamma = B_filament + grad u, tangent to the surface, curl- and divergence-free inside."""

    loop: FilamentLoop
    correction: HarmonicSolution
    scale: float = 1.0

    @property
    def opset(self) -> LayerOperatorSet:
        return self.correction.opset

    def __call__(self, points: np.ndarray, check: bool = True) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return self.scale * (bs_filament(self.loop, points) + self.correction.gradient(points, check))

    def on_surface(self) -> np.ndarray:
        """Nodal values on the surface (tangential by construction)."""
        grid = self.opset.grid
        b = grid.tangential(bs_filament(self.loop, grid.nodes))
        return self.scale * (b + self.correction.tangential_gradient)

    def normal_residual(self) -> np.ndarray:
        """N . Gamma on the surface from the second-kind normal derivative."""
        grid = self.opset.grid
        bn = np.sum(bs_filament(self.loop, grid.nodes) * grid.normals, axis=1)
        return self.scale * (bn + self.correction.normal_derivative)

    def cross_normal(self) -> np.ndarray:
        return np.cross(self.on_surface(), self.opset.grid.normals)


def default_filament(grid: SurfaceGrid) -> FilamentLoop:
    span = np.ptp(grid.nodes, axis=0).max()
    return z_axis_loop(100.0 * span)


def build_harmonic_neumann_field(opset: LayerOperatorSet, loop: FilamentLoop | None = None,
                                 curve: Curve | None = None) -> HarmonicNeumannField:
    """Filament field plus the interior Neumann correction that cancels its normal trace.

    The result is divided by the linking number of the loop with ``curve``
    (default: the toroidal reference circle theta = 0), read off from the
    rounded circulation, so that Ampere's law gives unit circulation.
    """
    from .geometry import reference_curves
    grid = opset.grid
    loop = loop or default_filament(grid)
    R = np.hypot(grid.nodes[:, 0], grid.nodes[:, 1])
    minor = 0.5 * (R.max() - R.min())
    d = _segment_distance(loop.points[:-1], loop.points[1:], grid.nodes).min()
    if d <= 0.1 * minor:
        raise FilamentIntersectsDomain(f"filament passes within {d:.3g} of the surface")
    bn = np.sum(bs_filament(loop, grid.nodes) * grid.normals, axis=1)
    u = solve_neumann_interior(opset, grid.project_mean_zero(-bn))
    field = HarmonicNeumannField(loop, u)
    curve = curve or reference_curves(grid.torus).toroidal
    linking = round(line_integral(field.on_surface(), curve, grid) / loop.current)
    if linking == 0:
        raise FilamentIntersectsDomain("filament does not link the toroidal reference curve")
    field.scale = 1.0 / (linking * loop.current)
    return field


def bs_volume_harmonic_trace(field: HarmonicNeumannField) -> np.ndarray:
    """Volume Biot-Savart of Gamma on the surface, as the single layer of Gamma x N."""
    return field.opset.apply_V(field.cross_normal())


def bs_volume_harmonic_eval(field: HarmonicNeumannField, points: np.ndarray) -> np.ndarray:
    """The same field off the surface."""
    from .layer_potentials import single_layer_eval
    opset = field.opset
    fine = opset.fine_grid()
    return single_layer_eval(fine, upsample(opset.grid, field.cross_normal(), fine),
                             np.atleast_2d(points))


def toroidal_circulation(sampler, curve: Curve) -> float:
    return line_integral(sampler, curve)
