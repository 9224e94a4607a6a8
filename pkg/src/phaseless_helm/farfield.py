"""Radiating expansions, near-to-far transforms, translation-invariance
experiments, and backpropagation imaging.

A RadiatingExpansion is a truncated outgoing-harmonic series

    u(x) = sum_{n=-Nmax}^{Nmax} c_n H^(1)_|n|(k |x - c0|) e^{i n phi(x - c0)},

the discrete realization of "radiating field outside a disk enclosing the
scatterer". On a full measurement circle the least-squares fit reduces to an
FFT; on a line segment it is a conditioned least squares with small singular
values dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

from .errors import GeometryError
from .scene import (DirectionGrid, IncidentField, MeasurementSet, Scene,
                    eval_incident, plane_wave, superposition)
from .special import farfield_gamma, mode_farfield_coeff

logger = logging.getLogger(__name__)

SEGMENT_SV_CUTOFF = 1e-10


def truncation_order(k: float, rho: float) -> int:
    """Default expansion truncation Nmax = ceil(k rho) + 2.

    The margin is deliberately small: scattered fields measured on the circle
    of radius rho carry modes only up to ~ k * (scatterer radius), so the band
    ceil(k rho) + 2 holds them to rounding, while the incident field still has
    O(J_{Nmax+1}(k rho)) ~ 1e-2 content beyond the band. That out-of-band
    remainder is what anchors the global phase of a retrieved field; a wide
    margin (e.g. +15) swallows it (J decays superexponentially past k rho) and
    makes the phase numerically unidentifiable.
    """
    return int(np.ceil(k * rho)) + 2


@dataclass
class FarField:
    """Far-field pattern samples under u^s ~ (e^{ik|x|}/sqrt(|x|)) u_inf(x_hat)."""

    angles: np.ndarray
    values: np.ndarray
    k: float

    def __post_init__(self):
        self.angles = np.atleast_1d(np.asarray(self.angles, dtype=float))
        self.values = np.atleast_1d(np.asarray(self.values, dtype=complex))
        if self.angles.shape != self.values.shape:
            raise GeometryError("far-field angles/values length mismatch")


@dataclass
class RadiatingExpansion:
    """Truncated outgoing cylindrical-harmonic expansion of a radiating field."""

    k: float
    nmax: int
    coeffs: np.ndarray          # (2 nmax + 1,), index n = -nmax..nmax
    rho: float                  # reference (fit) radius
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=complex)
        if self.coeffs.shape != (2 * self.nmax + 1,):
            raise GeometryError("expansion coefficient count != 2 nmax + 1")

    def orders(self) -> np.ndarray:
        return np.arange(-self.nmax, self.nmax + 1)

    def evaluate(self, points) -> np.ndarray:
        """Field values at points outside the disk enclosing the sources."""
        pts = np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(self.center)
        r = np.hypot(pts[:, 0], pts[:, 1])
        if np.any(r == 0.0):
            raise GeometryError("expansion evaluated at its center")
        phi = np.arctan2(pts[:, 1], pts[:, 0])
        n = self.orders()
        hank = _sp.hankel1(np.abs(n)[None, :], self.k * r[:, None])  # (M, 2nmax+1)
        return (hank * np.exp(1j * np.outer(phi, n))) @ self.coeffs


def fit_expansion_circle(values, k: float, rho: float, nmax: int,
                         center=(0.0, 0.0)) -> RadiatingExpansion:
    """Least-squares fit on a full circle of M equispaced points: the discrete
    basis is orthogonal, so the fit is Fourier truncation divided by H_|n|(k rho)."""
    values = np.asarray(values, dtype=complex)
    M = values.size
    if 2 * nmax + 1 > M:
        raise GeometryError(f"{M} circle points cannot resolve nmax={nmax}")
    spec = np.fft.fft(values) / M
    n = np.arange(-nmax, nmax + 1)
    coeffs = spec[n % M] / _sp.hankel1(np.abs(n), k * rho)
    return RadiatingExpansion(k=k, nmax=nmax, coeffs=coeffs, rho=rho, center=tuple(center))


class CircleProjector:
    """Orthogonal projector onto the outgoing-expansion span on a full circle
    of M equispaced points: Fourier truncation to |n| <= nmax."""

    def __init__(self, M: int, k: float, rho: float, nmax: int):
        if 2 * nmax + 1 > M:
            raise GeometryError(f"{M} circle points cannot resolve nmax={nmax}")
        self.M, self.k, self.rho, self.nmax = M, k, rho, nmax
        freq = np.fft.fftfreq(M, d=1.0 / M).round().astype(int)
        self.keep = np.abs(freq) <= nmax

    def project(self, values: np.ndarray) -> np.ndarray:
        spec = np.fft.fft(values)
        spec[~self.keep] = 0.0
        return np.fft.ifft(spec)

    def expansion(self, values: np.ndarray) -> RadiatingExpansion:
        return fit_expansion_circle(values, self.k, self.rho, self.nmax)


class SegmentProjector:
    """Least-squares projector onto the outgoing span sampled on a segment.

    The basis is not orthogonal there; singular values below
    SEGMENT_SV_CUTOFF * max are dropped to keep the projection stable.
    """

    def __init__(self, points, k: float, nmax: int, center=(0.0, 0.0)):
        pts = np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(center)
        r = np.hypot(pts[:, 0], pts[:, 1])
        phi = np.arctan2(pts[:, 1], pts[:, 0])
        n = np.arange(-nmax, nmax + 1)
        self.basis = _sp.hankel1(np.abs(n)[None, :], k * r[:, None]) \
            * np.exp(1j * np.outer(phi, n))
        u, s, vh = np.linalg.svd(self.basis, full_matrices=False)
        keep = s > SEGMENT_SV_CUTOFF * s[0]
        self.u = u[:, keep]
        self._s, self._vh, self._keep = s, vh, keep
        self.k, self.nmax, self.center = k, nmax, tuple(center)
        self.rho = float(np.max(r))
        logger.debug("segment projector: kept %d/%d singular values",
                     int(keep.sum()), s.size)

    def project(self, values: np.ndarray) -> np.ndarray:
        return self.u @ (self.u.conj().T @ values)

    def expansion(self, values: np.ndarray) -> RadiatingExpansion:
        y = self.u.conj().T @ values
        coeffs = (self._vh.conj().T[:, self._keep] * (1.0 / self._s[self._keep])) @ y
        return RadiatingExpansion(k=self.k, nmax=self.nmax, coeffs=coeffs,
                                  rho=self.rho, center=self.center)


def make_projector(measurement: MeasurementSet, k: float, nmax: int):
    if measurement.kind == "circle":
        return CircleProjector(measurement.count, k, measurement.radius, nmax)
    return SegmentProjector(measurement.points(), k, nmax)


def expansion_to_farfield(exp: RadiatingExpansion, angles) -> FarField:
    """Far field of the expansion: each mode H_|n| e^{in phi} contributes
    gamma_n e^{in phi}; an off-origin center adds the plane-phase factor."""
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    n = exp.orders()
    gam = np.array([mode_farfield_coeff(int(m), exp.k) for m in n])
    vals = np.exp(1j * np.outer(angles, n)) @ (gam * exp.coeffs)
    c0 = np.asarray(exp.center)
    if np.any(c0 != 0.0):
        xhat = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        vals = vals * np.exp(-1j * exp.k * (xhat @ c0))
    return FarField(angles=angles, values=vals, k=exp.k)


@dataclass
class IndicatorMap:
    """Backpropagation indicator over a square search grid."""

    x: np.ndarray        # (n,) cell-center abscissae
    y: np.ndarray        # (n,) cell-center ordinates
    values: np.ndarray   # (n, n), values[iy, ix] >= 0

    def argmax(self) -> tuple:
        iy, ix = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return iy, ix

    def argmax_point(self) -> np.ndarray:
        iy, ix = self.argmax()
        return np.array([self.x[ix], self.y[iy]])

    @property
    def cell(self) -> float:
        return float(self.x[1] - self.x[0])


def backpropagate(farfields, grid_n: int = 128, half_width: float = None,
                  center=(0.0, 0.0)) -> IndicatorMap:
    """Kirchhoff-type backpropagation indicator

        I(z) = sum_d | (2 pi / A) sum_a u_inf(x_hat_a, d) e^{i k x_hat_a . z} |^2

    summed over the supplied per-direction far fields (full angle grids).
    """
    farfields = list(farfields)
    if not farfields:
        raise GeometryError("backpropagate needs at least one far field")
    k = farfields[0].k
    angles = farfields[0].angles
    for ff in farfields:
        if ff.angles.shape != angles.shape or not np.allclose(ff.angles, angles):
            raise GeometryError("far fields must share one observation grid")
    if half_width is None:
        half_width = np.pi / k * 3.0  # 6 diameters of a wavelength-sized target
    cx, cy = center
    x = cx + (np.arange(grid_n) + 0.5) / grid_n * 2 * half_width - half_width
    y = cy + (np.arange(grid_n) + 0.5) / grid_n * 2 * half_width - half_width
    X, Y = np.meshgrid(x, y)
    xhat = np.stack([np.cos(angles), np.sin(angles)], axis=-1)   # (A, 2)
    phase = np.exp(1j * k * (xhat[:, 0, None] * X.ravel()[None, :]
                             + xhat[:, 1, None] * Y.ravel()[None, :]))  # (A, P)
    w = 2 * np.pi / angles.size
    acc = np.zeros(X.size)
    for ff in farfields:
        acc += np.abs(w * (ff.values @ phase)) ** 2
    return IndicatorMap(x=x, y=y, values=acc.reshape(grid_n, grid_n))


def translation_invariance_report(scene: Scene, shift, nodes: int = 128,
                                  observation_count: int = None) -> dict:
    """Compare phaseless far fields of a scene and its translate.

    Single plane waves: shifting the scatterer by z0 multiplies u_inf by the
    unimodular factor e^{ik(d - x_hat).z0}, so the modulus is unchanged.
    Superpositions u_inf(.,d) + u_inf(.,d0) pick up two different factors and
    the modulus moves; the report records both discrepancies.
    """
    from .obstacle import ObstacleSolver
    from .scene import Obstacle

    if not isinstance(scene.scatterer, Obstacle):
        raise GeometryError("translation report is implemented for obstacle scenes")
    shifted = scene.translate(shift)
    k = scene.wavenumber
    d_angles = scene.directions.angles()
    d0 = scene.directions.d0_angle
    if observation_count is None:
        observation_count = max(64, scene.directions.count)
    obs = 2 * np.pi * np.arange(observation_count) / observation_count
    xhat = np.stack([np.cos(obs), np.sin(obs)], axis=-1)
    z0 = np.asarray(shift, dtype=float)

    base = ObstacleSolver(scene.scatterer, k, nodes)
    moved = ObstacleSolver(shifted.scatterer, k, nodes)

    def ff_matrix(solver):
        rows = [solver.farfield(solver.solve(plane_wave(k, a)), obs)
                for a in d_angles]
        row0 = solver.farfield(solver.solve(plane_wave(k, d0)), obs)
        return np.array(rows), row0

    ff_base, ff0_base = ff_matrix(base)
    ff_mov, ff0_mov = ff_matrix(moved)

    dvec = np.stack([np.cos(d_angles), np.sin(d_angles)], axis=-1)
    law = np.exp(1j * k * ((dvec @ z0)[:, None] - (xhat @ z0)[None, :]))
    shift_law_error = float(np.max(np.abs(ff_mov - law * ff_base)))

    single = float(np.max(np.abs(np.abs(ff_mov) - np.abs(ff_base))))
    sup_base = np.abs(ff_base + ff0_base[None, :])
    sup_mov = np.abs(ff_mov + ff0_mov[None, :])
    superpos = float(np.max(np.abs(sup_mov - sup_base)))

    return {
        "shift": [float(z0[0]), float(z0[1])],
        "single_modulus_discrepancy": single,
        "superposition_modulus_discrepancy": superpos,
        "shift_law_max_error": shift_law_error,
    }


def write_indicator(indicator: IndicatorMap, path) -> None:
    """CSV raster with a JSON header line (consumed by the figures package)."""
    import json

    iy, ix = indicator.argmax()
    pt = indicator.argmax_point()
    meta = {
        "x_min": float(indicator.x[0]), "x_max": float(indicator.x[-1]),
        "y_min": float(indicator.y[0]), "y_max": float(indicator.y[-1]),
        "n": int(indicator.values.shape[0]),
        "argmax_cell": [int(iy), int(ix)],
        "argmax_xy": [float(pt[0]), float(pt[1])],
    }
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(meta) + "\n")
        for row in indicator.values:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
