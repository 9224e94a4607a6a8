"""Scene description: geometry, incident fields, and measurement sets.

A Scene bundles the wavenumber, one scatterer (impenetrable obstacle,
penetrable medium, or nothing), a measurement set and the incident-direction
grid. Scenes are immutable after construction and shareable across workers;
`translate` returns a new Scene with the scatterer support shifted while the
measurement set stays fixed.

Conventions: all angles in radians, lengths in user units, boundary curves
parametrized counterclockwise on t in [0, 2pi) so that (p2', -p1')/|p'| is the
outward normal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
from scipy import special as _sp

from .errors import GeometryError, ParseError, SingularityError

DEFAULT_D0_ANGLE = 1.5 * np.pi  # downward reference direction
TWO_PI = 2.0 * np.pi


def _unit(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


@dataclass(frozen=True)
class Direction:
    """Incident direction on the unit circle, stored as its angle."""

    angle: float

    def __post_init__(self):
        object.__setattr__(self, "angle", float(self.angle) % TWO_PI)

    @property
    def unit(self) -> np.ndarray:
        """Unit vector (cos angle, sin angle)."""
        return _unit(self.angle)


@dataclass(frozen=True)
class BoundaryCurve:
    """Closed C^2 boundary curve p(t), t in [0, 2pi), counterclockwise.

    kind is one of "circle", "ellipse", "kite"; the kite is the standard
    non-convex benchmark p(t) = center + (cos t + 0.65 cos 2t - 0.65, 1.5 sin t).
    """

    kind: str
    center: tuple
    radius: float = 1.0        # circle
    semi_axes: tuple = (1.0, 1.0)  # ellipse

    def __post_init__(self):
        if self.kind not in ("circle", "ellipse", "kite"):
            raise GeometryError(f"unknown curve kind {self.kind!r}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        if self.kind == "circle" and self.radius <= 0:
            raise GeometryError(f"circle radius must be positive, got {self.radius}")
        if self.kind == "ellipse":
            a, b = self.semi_axes
            if a <= 0 or b <= 0:
                raise GeometryError(f"ellipse semi-axes must be positive, got {self.semi_axes}")
            object.__setattr__(self, "semi_axes", (float(a), float(b)))

    def point(self, t) -> np.ndarray:
        """p(t); t scalar or array, returns shape (..., 2)."""
        t = np.asarray(t, dtype=float)
        cx, cy = self.center
        if self.kind == "circle":
            x = cx + self.radius * np.cos(t)
            y = cy + self.radius * np.sin(t)
        elif self.kind == "ellipse":
            a, b = self.semi_axes
            x = cx + a * np.cos(t)
            y = cy + b * np.sin(t)
        else:  # kite
            x = cx + np.cos(t) + 0.65 * np.cos(2.0 * t) - 0.65
            y = cy + 1.5 * np.sin(t)
        return np.stack([x, y], axis=-1)

    def derivative(self, t) -> np.ndarray:
        """p'(t)."""
        t = np.asarray(t, dtype=float)
        if self.kind == "circle":
            x = -self.radius * np.sin(t)
            y = self.radius * np.cos(t)
        elif self.kind == "ellipse":
            a, b = self.semi_axes
            x = -a * np.sin(t)
            y = b * np.cos(t)
        else:
            x = -np.sin(t) - 1.3 * np.sin(2.0 * t)
            y = 1.5 * np.cos(t)
        return np.stack([x, y], axis=-1)

    def second_derivative(self, t) -> np.ndarray:
        """p''(t)."""
        t = np.asarray(t, dtype=float)
        if self.kind == "circle":
            x = -self.radius * np.cos(t)
            y = -self.radius * np.sin(t)
        elif self.kind == "ellipse":
            a, b = self.semi_axes
            x = -a * np.cos(t)
            y = -b * np.sin(t)
        else:
            x = -np.cos(t) - 2.6 * np.cos(2.0 * t)
            y = -1.5 * np.sin(t)
        return np.stack([x, y], axis=-1)

    def normal(self, t) -> np.ndarray:
        """Outward unit normal (p2', -p1')/|p'|."""
        d = self.derivative(t)
        n = np.stack([d[..., 1], -d[..., 0]], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def bounding_radius(self, samples: int = 1024) -> float:
        """Radius (about the origin) of a disk containing the curve."""
        t = np.linspace(0.0, TWO_PI, samples, endpoint=False)
        return float(np.max(np.linalg.norm(self.point(t), axis=-1)))

    def bounding_box(self, samples: int = 1024) -> tuple:
        t = np.linspace(0.0, TWO_PI, samples, endpoint=False)
        p = self.point(t)
        return (p[:, 0].min(), p[:, 0].max(), p[:, 1].min(), p[:, 1].max())

    def contains(self, points, samples: int = 2048, margin: float = 0.0) -> np.ndarray:
        """Winding-number inside test against a dense polyline approximation.

        With margin > 0, points within `margin` of the polyline also count as
        inside (used to reject on-boundary evaluation points).
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        t = np.linspace(0.0, TWO_PI, samples, endpoint=False)
        poly = self.point(t)  # (S, 2)
        a = poly[None, :, :] - points[:, None, :]           # (M, S, 2)
        b = np.roll(poly, -1, axis=0)[None, :, :] - points[:, None, :]
        cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
        dot = np.sum(a * b, axis=-1)
        winding = np.abs(np.sum(np.arctan2(cross, dot), axis=-1)) > np.pi
        if margin > 0.0:
            seg = np.roll(poly, -1, axis=0) - poly          # (S, 2)
            seg_len2 = np.maximum(np.sum(seg**2, axis=-1), 1e-300)
            s = np.clip(np.sum(-a * seg[None, :, :], axis=-1) / seg_len2, 0.0, 1.0)
            foot = a + s[..., None] * seg[None, :, :]
            dist = np.min(np.linalg.norm(foot, axis=-1), axis=-1)
            winding |= dist <= margin
        return winding

    def translated(self, shift) -> "BoundaryCurve":
        cx, cy = self.center
        return replace(self, center=(cx + float(shift[0]), cy + float(shift[1])))


def circle_curve(center=(0.0, 0.0), radius: float = 1.0) -> BoundaryCurve:
    return BoundaryCurve(kind="circle", center=tuple(center), radius=float(radius))


def ellipse_curve(center=(0.0, 0.0), a: float = 1.0, b: float = 1.0) -> BoundaryCurve:
    return BoundaryCurve(kind="ellipse", center=tuple(center), semi_axes=(float(a), float(b)))


def builtin_kite(center=(0.0, 0.0)) -> BoundaryCurve:
    """Non-convex kite benchmark curve centered at `center`."""
    return BoundaryCurve(kind="kite", center=tuple(center))


@dataclass(frozen=True)
class Obstacle:
    """Impenetrable scatterer: closed curve plus boundary condition.

    bc is "sound_soft" (u = 0) or "impedance" (du/dnu + eta u = 0); eta may be
    a complex constant or a callable of the curve parameter t with Im eta >= 0.
    eta = 0 gives the sound-hard (Neumann) case.
    """

    curve: BoundaryCurve
    bc: str = "sound_soft"
    eta: Union[complex, Callable, None] = None

    def __post_init__(self):
        if self.bc not in ("sound_soft", "impedance"):
            raise GeometryError(f"unknown boundary condition {self.bc!r}")
        if self.bc == "impedance":
            t = np.linspace(0.0, TWO_PI, 256, endpoint=False)
            vals = self.eta_values(t)
            if np.any(vals.imag < -1e-14):
                raise GeometryError("impedance must satisfy Im eta >= 0 on the boundary")

    def eta_values(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.bc != "impedance" or self.eta is None:
            return np.zeros(t.shape, dtype=complex)
        if callable(self.eta):
            return np.asarray(self.eta(t), dtype=complex) * np.ones(t.shape, dtype=complex)
        return np.full(t.shape, complex(self.eta))

    def translated(self, shift) -> "Obstacle":
        return replace(self, curve=self.curve.translated(shift))


@dataclass(frozen=True)
class MediumIndex:
    """Refractive index n on a uniform Cartesian grid over a square.

    values[iy, ix] is n in the cell with center origin + ((ix+0.5)h, (iy+0.5)h);
    n is 1 outside the square and must be 1 within one cell of its boundary.
    """

    origin: tuple          # lower-left corner of the square
    cell: float            # grid spacing h
    values: np.ndarray     # (ny, nx) complex

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        if vals.ndim != 2:
            raise GeometryError("medium index grid must be 2D")
        if np.any(vals.real <= 0.0):
            raise GeometryError("medium index must satisfy Re n > 0")
        if np.any(vals.imag < -1e-14):
            raise GeometryError("medium index must satisfy Im n >= 0")
        ring = np.concatenate([
            vals[0, :], vals[-1, :], vals[:, 0], vals[:, -1],
        ])
        if np.max(np.abs(ring - 1.0)) > 1e-14:
            raise GeometryError("medium index must equal 1 within one cell of the grid boundary")

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def cell_centers(self) -> tuple:
        """Arrays X, Y of cell-center coordinates, each (ny, nx)."""
        ny, nx = self.values.shape
        x0, y0 = self.origin
        x = x0 + (np.arange(nx) + 0.5) * self.cell
        y = y0 + (np.arange(ny) + 0.5) * self.cell
        return np.meshgrid(x, y)

    def contrast(self) -> np.ndarray:
        """m = n - 1 per cell."""
        return self.values - 1.0

    def support_radius(self) -> float:
        """Max |cell center| over cells with nonzero contrast (0 if none)."""
        X, Y = self.cell_centers()
        m = np.abs(self.contrast()) > 0.0
        if not np.any(m):
            return 0.0
        return float(np.max(np.hypot(X[m], Y[m]))) + self.cell

    def bounding_box(self) -> tuple:
        X, Y = self.cell_centers()
        m = np.abs(self.contrast()) > 0.0
        if not np.any(m):
            x0, y0 = self.origin
            return (x0, x0, y0, y0)
        h = self.cell / 2.0
        return (X[m].min() - h, X[m].max() + h, Y[m].min() - h, Y[m].max() + h)

    def translated(self, shift) -> "MediumIndex":
        x0, y0 = self.origin
        return replace(self, origin=(x0 + float(shift[0]), y0 + float(shift[1])))


def disk_contrast(n0: complex, radius: float = 1.0, center=(0.0, 0.0),
                  half_width: float = None, cells: int = 128,
                  subsamples: int = 64) -> MediumIndex:
    """Piecewise-constant disk n = n0 inside radius, antialiased at the rim.

    Cells straddling the rim get the area-fraction average of the contrast,
    estimated by subsampling, which keeps the staircase error at O(h^2).
    """
    if half_width is None:
        half_width = 1.1 * radius
    cx, cy = float(center[0]), float(center[1])
    origin = (cx - half_width, cy - half_width)
    h = 2.0 * half_width / cells
    x = origin[0] + (np.arange(cells) + 0.5) * h
    y = origin[1] + (np.arange(cells) + 0.5) * h
    X, Y = np.meshgrid(x, y)
    r = np.hypot(X - cx, Y - cy)
    half_diag = h * math.sqrt(0.5)
    frac = np.where(r <= radius - half_diag, 1.0, 0.0)
    rim = (r > radius - half_diag) & (r < radius + half_diag)
    if np.any(rim):
        offs = (np.arange(subsamples) + 0.5) / subsamples - 0.5  # cell-relative
        ox, oy = np.meshgrid(offs * h, offs * h)
        sub = np.hypot(
            (X[rim][:, None] + ox.ravel()[None, :]) - cx,
            (Y[rim][:, None] + oy.ravel()[None, :]) - cy,
        ) <= radius
        frac[rim] = sub.mean(axis=1)
    values = 1.0 + (complex(n0) - 1.0) * frac
    return MediumIndex(origin=origin, cell=h, values=values)


@dataclass(frozen=True)
class MeasurementSet:
    """Measurement points: a circle enclosing the scatterer or a line segment
    at height H strictly above it.

    kind "circle": `radius` rho about the origin, `count` equispaced angles.
    kind "line_segment": x2 = `height`, x1 in [x_min, x_max], `count` points.
    """

    kind: str
    count: int
    radius: float = 0.0
    height: float = 0.0
    x_min: float = 0.0
    x_max: float = 0.0

    def __post_init__(self):
        if self.kind not in ("circle", "line_segment"):
            raise GeometryError(f"unknown measurement kind {self.kind!r}")
        if self.count < 2:
            raise GeometryError("measurement set needs at least 2 points")
        if self.kind == "circle" and self.radius <= 0:
            raise GeometryError("measurement circle radius must be positive")
        if self.kind == "line_segment" and self.x_max <= self.x_min:
            raise GeometryError("line segment needs x_max > x_min")

    def points(self) -> np.ndarray:
        """Sample points, shape (count, 2)."""
        if self.kind == "circle":
            phi = TWO_PI * np.arange(self.count) / self.count
            return self.radius * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
        x1 = np.linspace(self.x_min, self.x_max, self.count)
        return np.stack([x1, np.full(self.count, self.height)], axis=-1)

    def angles(self) -> np.ndarray:
        if self.kind != "circle":
            raise GeometryError("angles() requires a circle measurement set")
        return TWO_PI * np.arange(self.count) / self.count


def circle_measurement(radius: float, count: int = 256) -> MeasurementSet:
    return MeasurementSet(kind="circle", count=count, radius=radius)


def segment_measurement(height: float, x_min: float, x_max: float,
                        count: int = 256) -> MeasurementSet:
    return MeasurementSet(kind="line_segment", count=count, height=height,
                          x_min=x_min, x_max=x_max)


@dataclass(frozen=True)
class DirectionGrid:
    """Equispaced incident directions on [0, 2pi) plus the fixed reference d0."""

    count: int = 64
    d0_angle: float = DEFAULT_D0_ANGLE

    def __post_init__(self):
        object.__setattr__(self, "d0_angle", float(self.d0_angle) % TWO_PI)
        if self.count < 4:
            raise GeometryError("direction grid needs at least 4 directions")

    def angles(self) -> np.ndarray:
        return TWO_PI * np.arange(self.count) / self.count

    @property
    def d0(self) -> Direction:
        return Direction(self.d0_angle)


@dataclass(frozen=True)
class IncidentField:
    """Incident field: plane wave, superposition of two plane waves, or a
    point source Phi(., source)."""

    kind: str            # "plane" | "superposition" | "point_source"
    k: float
    angle: float = 0.0           # plane
    angles: tuple = (0.0, 0.0)   # superposition
    source: tuple = (0.0, 0.0)   # point_source

    def __post_init__(self):
        if self.kind not in ("plane", "superposition", "point_source"):
            raise GeometryError(f"unknown incident field kind {self.kind!r}")
        if self.k <= 0:
            raise GeometryError(f"wavenumber must be positive, got {self.k}")


def plane_wave(k: float, angle: float) -> IncidentField:
    return IncidentField(kind="plane", k=k, angle=float(angle))


def superposition(k: float, angle1: float, angle2: float) -> IncidentField:
    return IncidentField(kind="superposition", k=k, angles=(float(angle1), float(angle2)))


def point_source(k: float, source) -> IncidentField:
    return IncidentField(kind="point_source", k=k,
                         source=(float(source[0]), float(source[1])))


def eval_incident(field: IncidentField, points) -> np.ndarray:
    """Incident field values at the points; shape matches points[..., 0]."""
    points = np.asarray(points, dtype=float)
    k = field.k
    if field.kind == "plane":
        d = _unit(field.angle)
        return np.exp(1j * k * (points @ d))
    if field.kind == "superposition":
        d1 = _unit(field.angles[0])
        d2 = _unit(field.angles[1])
        return np.exp(1j * k * (points @ d1)) + np.exp(1j * k * (points @ d2))
    y = np.asarray(field.source, dtype=float)
    r = np.linalg.norm(points - y, axis=-1)
    if np.any(r == 0.0):
        raise SingularityError("incident point source evaluated at its own location")
    return 0.25j * _sp.hankel1(0, k * r)


def eval_incident_normal_derivative(field: IncidentField, points, normals) -> np.ndarray:
    """Normal derivative d u^i / d nu at the points."""
    points = np.asarray(points, dtype=float)
    normals = np.asarray(normals, dtype=float)
    k = field.k
    if field.kind == "plane":
        d = _unit(field.angle)
        return 1j * k * (normals @ d) * np.exp(1j * k * (points @ d))
    if field.kind == "superposition":
        f1 = plane_wave(k, field.angles[0])
        f2 = plane_wave(k, field.angles[1])
        return (eval_incident_normal_derivative(f1, points, normals)
                + eval_incident_normal_derivative(f2, points, normals))
    y = np.asarray(field.source, dtype=float)
    diff = points - y
    r = np.linalg.norm(diff, axis=-1)
    if np.any(r == 0.0):
        raise SingularityError("incident point source evaluated at its own location")
    return -0.25j * k * _sp.hankel1(1, k * r) * np.sum(diff * normals, axis=-1) / r


Scatterer = Union[Obstacle, MediumIndex, None]


@dataclass(frozen=True)
class Scene:
    """Immutable description consumed by every solver and synthesizer."""

    wavenumber: float
    scatterer: Scatterer
    measurement: MeasurementSet
    directions: DirectionGrid = field(default_factory=DirectionGrid)

    def __post_init__(self):
        if self.wavenumber <= 0:
            raise GeometryError(f"wavenumber must be positive, got {self.wavenumber}")
        self.validate()

    def validate(self) -> None:
        """Check that the measurement set stands clear of the scatterer."""
        box = self._scatterer_box()
        if box is None:
            return
        x0, x1, y0, y1 = box
        ms = self.measurement
        if ms.kind == "circle":
            corner = max(np.hypot(x, y) for x in (x0, x1) for y in (y0, y1))
            if corner >= ms.radius:
                raise GeometryError(
                    f"measurement circle (radius {ms.radius}) does not enclose "
                    f"the scatterer bounding box (corner radius {corner:.6g})")
        else:
            if y1 >= ms.height:
                raise GeometryError(
                    f"scatterer top {y1:.6g} not strictly below the measurement "
                    f"line height {ms.height}")

    def _scatterer_box(self):
        if self.scatterer is None:
            return None
        if isinstance(self.scatterer, Obstacle):
            x0, x1, y0, y1 = self.scatterer.curve.bounding_box()
            return (x0, x1, y0, y1)
        return self.scatterer.bounding_box()

    def scatterer_radius(self) -> float:
        """Radius about the origin of a disk containing the scatterer support."""
        if self.scatterer is None:
            return 0.0
        if isinstance(self.scatterer, Obstacle):
            return self.scatterer.curve.bounding_radius()
        return self.scatterer.support_radius()

    def translate(self, shift) -> "Scene":
        """Scene with the scatterer translated by `shift`; measurement unchanged."""
        if self.scatterer is None:
            return self
        moved = self.scatterer.translated(shift)
        return replace(self, scatterer=moved)

    # --- serialization ---------------------------------------------------

    def to_jsonable(self) -> dict:
        sc = self.scatterer
        if sc is None:
            scat = {"type": "none", "params": {}}
        elif isinstance(sc, Obstacle):
            params = {"center": list(sc.curve.center), "bc": sc.bc}
            if sc.curve.kind == "circle":
                params["radius"] = sc.curve.radius
            elif sc.curve.kind == "ellipse":
                params["semi_axes"] = list(sc.curve.semi_axes)
            if sc.bc == "impedance":
                eta = sc.eta
                if callable(eta):
                    raise ParseError("callable impedance cannot be serialized")
                eta = complex(eta if eta is not None else 0.0)
                params["eta"] = [eta.real, eta.imag]
            scat = {"type": sc.curve.kind, "params": params}
        else:
            vals = sc.values
            scat = {"type": "medium_grid", "params": {
                "origin": list(sc.origin), "cell": sc.cell,
                "shape": list(vals.shape),
                "real": vals.real.ravel().tolist(),
                "imag": vals.imag.ravel().tolist(),
            }}
        ms = self.measurement
        if ms.kind == "circle":
            meas = {"kind": "circle", "params": {"radius": ms.radius, "count": ms.count}}
        else:
            meas = {"kind": "line_segment", "params": {
                "height": ms.height, "x_min": ms.x_min, "x_max": ms.x_max,
                "count": ms.count}}
        return {
            "wavenumber": self.wavenumber,
            "scatterer": scat,
            "measurement": meas,
            "directions": {"count": self.directions.count,
                           "d0_angle": self.directions.d0_angle},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_jsonable(), indent=2) + "\n")


def _scatterer_from_jsonable(obj: dict, base_dir: Optional[Path]) -> Scatterer:
    kind = obj.get("type", "none")
    params = obj.get("params", {})
    if kind == "none":
        return None
    if kind in ("circle", "ellipse", "kite"):
        center = params.get("center", [0.0, 0.0])
        if kind == "circle":
            curve = circle_curve(center, params.get("radius", 1.0))
        elif kind == "ellipse":
            a, b = params.get("semi_axes", [1.0, 1.0])
            curve = ellipse_curve(center, a, b)
        else:
            curve = builtin_kite(center)
        bc = params.get("bc", "sound_soft")
        eta = params.get("eta")
        if eta is not None:
            eta = complex(eta[0], eta[1])
        return Obstacle(curve=curve, bc=bc, eta=eta)
    if kind == "medium_disk":
        n0 = params.get("n0", [1.2, 0.0])
        return disk_contrast(complex(n0[0], n0[1]),
                             radius=params.get("radius", 1.0),
                             center=params.get("center", [0.0, 0.0]),
                             half_width=params.get("half_width"),
                             cells=params.get("cells", 128))
    if kind == "medium_grid":
        ny, nx = params["shape"]
        vals = (np.asarray(params["real"], dtype=float)
                + 1j * np.asarray(params["imag"], dtype=float)).reshape(ny, nx)
        return MediumIndex(origin=tuple(params["origin"]), cell=params["cell"], values=vals)
    if kind == "medium_csv":
        if base_dir is None:
            base_dir = Path(".")
        real = np.loadtxt(base_dir / params["real_csv"], delimiter=",", ndmin=2)
        imag_path = params.get("imag_csv")
        imag = (np.loadtxt(base_dir / imag_path, delimiter=",", ndmin=2)
                if imag_path else np.zeros_like(real))
        return MediumIndex(origin=tuple(params["origin"]), cell=params["cell"],
                           values=real + 1j * imag)
    raise ParseError(f"unknown scatterer type {kind!r}")


def scene_from_jsonable(obj: dict, base_dir: Optional[Path] = None) -> Scene:
    try:
        scat = _scatterer_from_jsonable(obj.get("scatterer", {"type": "none"}), base_dir)
        ms = obj["measurement"]
        params = ms.get("params", {})
        if ms["kind"] == "circle":
            measurement = circle_measurement(params["radius"], params.get("count", 256))
        elif ms["kind"] == "line_segment":
            measurement = segment_measurement(params["height"], params["x_min"],
                                              params["x_max"], params.get("count", 256))
        else:
            raise ParseError(f"unknown measurement kind {ms['kind']!r}")
        dd = obj.get("directions", {})
        directions = DirectionGrid(count=dd.get("count", 64),
                                   d0_angle=dd.get("d0_angle", DEFAULT_D0_ANGLE))
        return Scene(wavenumber=float(obj["wavenumber"]), scatterer=scat,
                     measurement=measurement, directions=directions)
    except (KeyError, TypeError, IndexError) as exc:
        raise ParseError(f"malformed scene description: {exc}") from exc


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON in {path}: {exc}", line=exc.lineno) from exc
    return scene_from_jsonable(obj, base_dir=path.parent)


def translate_scene(scene: Scene, shift) -> Scene:
    """Scene with scatterer support translated by `shift` (measurement fixed)."""
    return scene.translate(shift)
