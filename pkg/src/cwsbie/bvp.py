"""Laplace boundary value problems through single-layer representations.

Every solution is ``f = S[psi] - shift`` with ``S`` the single-layer
potential, so normal derivatives are always second-kind expressions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import IllConditioned, SolveFailure
from .layer_potentials import (
    LayerOperatorSet,
    _check_mean_zero,
    single_layer_eval,
    single_layer_gradient_eval,
    upsample,
    warn_near,
)
from .surface_fields import surface_gradient


@dataclass(eq=False)
class HarmonicSolution:
    opset: LayerOperatorSet
    density: np.ndarray
    side: str  # "interior" or "exterior"
    shift: float = 0.0
    condition: float = 1.0

    @property
    def grid(self):
        return self.opset.grid

    @property
    def trace(self) -> np.ndarray:
        return self.opset.apply_V(self.density) - self.shift

    @property
    def tangential_gradient(self) -> np.ndarray:
        return surface_gradient(self.grid, self.trace)

    @property
    def normal_derivative(self) -> np.ndarray:
        if self.side == "interior":
            return self.opset.interior_operator(self.density)
        return -self.opset.exterior_operator(self.density)

    def _fine_density(self):
        fine = self.opset.fine_grid()
        return fine, upsample(self.grid, self.density, fine)

    def value(self, points: np.ndarray, check: bool = True) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if check:
            warn_near(self.grid, points)
        fine, dens = self._fine_density()
        return single_layer_eval(fine, dens, points) - self.shift

    def gradient(self, points: np.ndarray, check: bool = True) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if check:
            warn_near(self.grid, points)
        fine, dens = self._fine_density()
        return single_layer_gradient_eval(fine, dens, points)


def solve_dirichlet_interior(opset: LayerOperatorSet, kappa: np.ndarray,
                             rcond: float = 1e-12) -> HarmonicSolution:
    """Solve V psi = kappa through the symmetric eigendecomposition of the Gram matrix.

    ``kappa`` may carry trailing columns (several right-hand sides); the
    returned density then has matching columns.
    """
    evals, evecs = opset.gram_eigh()
    top = evals.max()
    keep = evals > rcond * top
    cond = top / evals[keep].min()
    if not np.all(keep):
        warnings.warn(f"dropped {int(np.sum(~keep))} single-layer modes below {rcond:g}; "
                      f"condition {cond:.3g}", IllConditioned, stacklevel=2)
    rhs = (np.asarray(kappa, dtype=float).T * opset.weights).T
    coef = (evecs[:, keep].T @ rhs)
    coef = (coef.T / evals[keep]).T
    psi = evecs[:, keep] @ coef
    return HarmonicSolution(opset, psi, "interior", 0.0, float(cond))


def _check_solution(psi: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(psi)):
        raise SolveFailure(f"{what}: non-finite density")
    return psi


def solve_neumann_interior(opset: LayerOperatorSet, b: np.ndarray) -> HarmonicSolution:
    """Interior Neumann problem with mean-zero data; trace normalized to mean zero."""
    grid = opset.grid
    b = _check_mean_zero(grid, np.asarray(b, dtype=float))
    psi = _check_solution(sla.lu_solve(opset.lu_interior_deflated(), b, check_finite=False),
                          "interior Neumann")
    shift = grid.mean(opset.apply_V(psi))
    return HarmonicSolution(opset, psi, "interior", shift)


def solve_neumann_exterior(opset: LayerOperatorSet, b: np.ndarray,
                           require_mean_zero: bool = False) -> HarmonicSolution:
    """Exterior Neumann problem ``N . grad g = b``; g decays at infinity.

    The exterior problem is uniquely solvable for any data on a connected
    surface (data with nonzero flux give a monopole far field), so the
    mean-zero check is opt-in.
    """
    b = np.asarray(b, dtype=float)
    if require_mean_zero:
        b = _check_mean_zero(opset.grid, b)
    psi = _check_solution(sla.lu_solve(opset.lu_exterior(), -b, check_finite=False),
                          "exterior Neumann")
    return HarmonicSolution(opset, psi, "exterior", 0.0)
