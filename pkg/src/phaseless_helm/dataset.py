"""Phaseless near-field datasets: |u(x,d)| and |u(x,d,d0)| over the
measurement points and the incident-direction grid.

The reference direction d0 always owns a column of the dataset (it is inserted
into the grid at synthesis time when absent), so the correlation stage can
read r(x, d0) directly and the superposition column at d0 equals twice the
single column there.

File format: one '#'-prefixed JSON header line with the metadata, a CSV header
row, then M*D records `x1,x2,d_angle,r_single,r_pair` with 17 significant
digits (lossless float64 round trip).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import GeometryError, ParseError
from .parallel import map_parallel
from .scene import (MeasurementSet, Scene, circle_measurement, eval_incident,
                    plane_wave, segment_measurement)

logger = logging.getLogger(__name__)

ANGLE_TOL = 1e-12
COLUMNS = ("x1", "x2", "d_angle", "r_single", "r_pair")


@dataclass
class PhaselessDataset:
    """Moduli of total fields over measurement points x direction grid."""

    k: float
    d0_angle: float
    measurement: MeasurementSet
    angles: np.ndarray      # (D,) direction angles, sorted, includes d0
    singles: np.ndarray     # (M, D) r(x, d) = |u(x, d)|
    pairs: np.ndarray       # (M, D) |u(x, d) + u(x, d0)|
    noise: float = 0.0

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float)
        self.singles = np.asarray(self.singles, dtype=float)
        self.pairs = np.asarray(self.pairs, dtype=float)
        self.validate()

    def validate(self) -> None:
        M, D = self.singles.shape
        if self.pairs.shape != (M, D):
            raise GeometryError("singles/pairs shape mismatch")
        if self.angles.shape != (D,):
            raise GeometryError("direction count mismatch")
        if self.measurement.count != M:
            raise GeometryError("measurement count mismatch")
        if np.any(self.singles < 0.0) or np.any(self.pairs < 0.0):
            raise GeometryError("moduli must be nonnegative")
        j0 = self.d0_index()
        if self.noise == 0.0:
            defect = np.max(np.abs(self.pairs[:, j0] - 2.0 * self.singles[:, j0]))
            scale = max(1.0, float(np.max(self.singles)))
            if defect > 1e-9 * scale:
                raise GeometryError(
                    f"pair column at d0 must equal twice the single column "
                    f"(defect {defect:.3e})")

    def d0_index(self) -> int:
        j = int(np.argmin(np.abs(self.angles - self.d0_angle)))
        if abs(self.angles[j] - self.d0_angle) > ANGLE_TOL:
            raise GeometryError("dataset has no column at the reference direction d0")
        return j

    @property
    def shape(self) -> tuple:
        return self.singles.shape

    def singles_at_d0(self) -> np.ndarray:
        return self.singles[:, self.d0_index()]


def _direction_angles_with_d0(count: int, d0_angle: float) -> np.ndarray:
    base = 2.0 * np.pi * np.arange(count) / count
    if np.min(np.abs(base - d0_angle)) <= ANGLE_TOL:
        return base
    return np.sort(np.append(base, d0_angle))


def total_field_matrix(scene: Scene, angles: np.ndarray, nodes: int = 128,
                       threads: Optional[int] = None) -> np.ndarray:
    """Phased total fields u(x_m, d_j) on the measurement set, one column per
    direction. Obstacle scenes share one factorization; medium scenes share
    the FFT kernel; per-direction work may run on worker threads."""
    from .medium import MediumSolver
    from .obstacle import ObstacleSolver
    from .scene import MediumIndex, Obstacle

    points = scene.measurement.points()
    k = scene.wavenumber
    if scene.scatterer is None:
        def one(angle):
            return eval_incident(plane_wave(k, angle), points)
    elif isinstance(scene.scatterer, Obstacle):
        solver = ObstacleSolver(scene.scatterer, k, nodes)

        def one(angle):
            inc = plane_wave(k, angle)
            return solver.total(solver.solve(inc), inc, points)
    elif isinstance(scene.scatterer, MediumIndex):
        solver = MediumSolver(scene.scatterer, k)

        def one(angle):
            return solver.total_at(solver.solve(plane_wave(k, angle)), points)
    else:
        raise GeometryError(f"unsupported scatterer {type(scene.scatterer)}")
    columns = map_parallel(one, list(angles), threads=threads)
    return np.stack(columns, axis=-1)


def dataset_from_fields(scene: Scene, angles: np.ndarray, fields: np.ndarray,
                        noise: float = 0.0, seed: Optional[int] = None) -> PhaselessDataset:
    """Dataset built from phased total-field columns (d0 column required)."""
    angles = np.asarray(angles, dtype=float)
    d0 = scene.directions.d0_angle
    j0 = int(np.argmin(np.abs(angles - d0)))
    if abs(angles[j0] - d0) > ANGLE_TOL:
        raise GeometryError("field matrix has no column at d0")
    singles = np.abs(fields)
    pairs = np.abs(fields + fields[:, j0][:, None])
    if noise > 0.0:
        rng = np.random.default_rng(seed)
        singles = singles * (1.0 + noise * rng.uniform(-1.0, 1.0, singles.shape))
        pairs = pairs * (1.0 + noise * rng.uniform(-1.0, 1.0, pairs.shape))
    return PhaselessDataset(k=scene.wavenumber, d0_angle=d0,
                            measurement=scene.measurement, angles=angles,
                            singles=singles, pairs=pairs, noise=noise)


def synthesize(scene: Scene, noise: float = 0.0, seed: Optional[int] = None,
               nodes: int = 128, threads: Optional[int] = None) -> PhaselessDataset:
    """Synthesize |u(x,d)| and |u(x,d,d0)| from phased forward solves.

    The superposition modulus is assembled from two phased solves through the
    linear superposition of total fields; multiplicative uniform noise of
    amplitude `noise` is applied to every modulus independently when noise > 0.
    """
    angles = _direction_angles_with_d0(scene.directions.count,
                                       scene.directions.d0_angle)
    fields = total_field_matrix(scene, angles, nodes=nodes, threads=threads)
    return dataset_from_fields(scene, angles, fields, noise=noise, seed=seed)


# --- serialization -----------------------------------------------------------

def _meta_dict(ds: PhaselessDataset) -> dict:
    ms = ds.measurement
    if ms.kind == "circle":
        meas = {"kind": "circle", "radius": ms.radius, "count": ms.count}
    else:
        meas = {"kind": "line_segment", "height": ms.height, "x_min": ms.x_min,
                "x_max": ms.x_max, "count": ms.count}
    return {
        "k": ds.k,
        "d0_angle": ds.d0_angle,
        "measurement": meas,
        "direction_angles": [float(a) for a in ds.angles],
        "noise": ds.noise,
        "columns": list(COLUMNS),
    }


def _measurement_from_meta(meas: dict) -> MeasurementSet:
    if meas["kind"] == "circle":
        return circle_measurement(meas["radius"], meas["count"])
    if meas["kind"] == "line_segment":
        return segment_measurement(meas["height"], meas["x_min"], meas["x_max"],
                                   meas["count"])
    raise ParseError(f"unknown measurement kind {meas['kind']!r}")


def write_dataset(ds: PhaselessDataset, path) -> None:
    points = ds.measurement.points()
    M, D = ds.shape
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(_meta_dict(ds)) + "\n")
        fh.write(",".join(COLUMNS) + "\n")
        for m in range(M):
            x1, x2 = points[m]
            for j in range(D):
                fh.write(f"{x1:.17g},{x2:.17g},{ds.angles[j]:.17g},"
                         f"{ds.singles[m, j]:.17g},{ds.pairs[m, j]:.17g}\n")
    logger.debug("wrote dataset %dx%d to %s", M, D, path)


def read_dataset(path) -> PhaselessDataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ParseError("missing '#' JSON header", line=1)
    try:
        meta = json.loads(lines[0][1:])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad JSON header: {exc}", line=1) from exc
    try:
        measurement = _measurement_from_meta(meta["measurement"])
        angles = np.asarray(meta["direction_angles"], dtype=float)
        k = float(meta["k"])
        d0 = float(meta["d0_angle"])
        noise = float(meta.get("noise", 0.0))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"incomplete header: {exc}", line=1) from exc
    if len(lines) < 2 or lines[1].strip() != ",".join(COLUMNS):
        raise ParseError(f"expected column header {','.join(COLUMNS)!r}", line=2)

    M, D = measurement.count, angles.size
    if len(lines) - 2 != M * D:
        raise ParseError(
            f"expected {M * D} records for declared shape {M}x{D}, "
            f"found {len(lines) - 2}", line=len(lines))
    singles = np.empty((M, D))
    pairs = np.empty((M, D))
    for idx, line in enumerate(lines[2:]):
        lineno = idx + 3
        parts = line.split(",")
        if len(parts) != 5:
            raise ParseError(f"expected 5 fields, got {len(parts)}", line=lineno)
        try:
            _, _, ang, r1, r2 = (float(p) for p in parts)
        except ValueError as exc:
            raise ParseError(f"non-numeric field: {exc}", line=lineno) from exc
        m, j = divmod(idx, D)
        if abs(ang - angles[j]) > ANGLE_TOL:
            raise ParseError(
                f"direction angle {ang!r} does not match header angle "
                f"{angles[j]!r}", line=lineno)
        if r1 < 0.0 or r2 < 0.0:
            raise ParseError(f"negative modulus ({min(r1, r2)})", line=lineno)
        singles[m, j] = r1
        pairs[m, j] = r2
    try:
        return PhaselessDataset(k=k, d0_angle=d0, measurement=measurement,
                                angles=angles, singles=singles, pairs=pairs,
                                noise=noise)
    except GeometryError as exc:
        raise ParseError(str(exc)) from exc
