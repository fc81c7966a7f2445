"""Field-frame geometry: sun vectors, heliostat tracking, facet canting,
and spline mirror surfaces with analytic normals.

Conventions used throughout the package:
  * ENU field frame: index 0 = east, 1 = north, 2 = up, meters.
    3-vectors are float64 numpy arrays of shape (3,).
  * Azimuth is measured in degrees clockwise from north, elevation in
    degrees above the horizon.
  * Each heliostat carries four flat facets in a fixed 2x2 layout
    (lower-left, lower-right, upper-left, upper-right). Fine mirror shape
    is a clamped cubic B-spline over an 8x8 grid of z-deviations in
    millimeters, measured from the canted facet plane.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

EAST = np.array([1.0, 0.0, 0.0])
NORTH = np.array([0.0, 1.0, 0.0])
UP = np.array([0.0, 0.0, 1.0])

FACET_WIDTH_M = 1.6
FACET_HEIGHT_M = 1.25
FACET_GAP_M = 0.02
FACETS_PER_HELIOSTAT = 4
CONTROL_GRID = 8
SPLINE_DEGREE = 3
MAX_CONTROL_Z_MM = 50.0
MIN_FOCAL_DISTANCE_M = 65.0


class GeometryError(ValueError):
    """Invalid geometric input (degenerate direction, malformed spline, ...)."""


def vec3(e, n, u):
    """Build an ENU 3-vector."""
    return np.array([e, n, u], dtype=float)


def normalize(v):
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise GeometryError("cannot normalize a (near-)zero vector")
    return v / norm


def solar_vector(azimuth_deg, elevation_deg):
    """Unit vector pointing from the field toward the sun.

    Args:
        azimuth_deg: Degrees clockwise from north, in [0, 360).
        elevation_deg: Degrees above the horizon, in [-90, 90].

    Returns:
        Unit ENU vector (sin az * cos el, cos az * cos el, sin el).
    """
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    return np.array(
        [math.sin(az) * math.cos(el), math.cos(az) * math.cos(el), math.sin(el)]
    )


def track_orientation(sun_dir, heliostat_pos, aim_point):
    """Mirror normal that reflects ``sun_dir`` toward ``aim_point``.

    The normal is the bisector of the sun direction and the direction from
    the heliostat to the aim point (law of reflection).

    Args:
        sun_dir: Unit vector toward the sun.
        heliostat_pos: Heliostat position, ENU meters.
        aim_point: Target point, ENU meters. Must differ from the position.

    Returns:
        Unit mirror normal.

    Raises:
        GeometryError: If sun and target directions are antiparallel
            (the reflection is undefined) or the aim coincides with the
            heliostat position.
    """
    sun_dir = np.asarray(sun_dir, dtype=float)
    offset = np.asarray(aim_point, dtype=float) - np.asarray(heliostat_pos, dtype=float)
    if np.linalg.norm(offset) < 1e-12:
        raise GeometryError("aim point coincides with heliostat position")
    target_dir = normalize(offset)
    bisector = sun_dir + target_dir
    if np.linalg.norm(bisector) < 1e-9:
        raise GeometryError("sun and target directions are antiparallel")
    return normalize(bisector)


def reflect(direction, normal):
    """Reflect propagation direction(s) about unit normal(s)."""
    direction = np.asarray(direction, dtype=float)
    normal = np.asarray(normal, dtype=float)
    dot = np.sum(direction * normal, axis=-1, keepdims=True)
    return direction - 2.0 * dot * normal


def orientation_matrix(normal):
    """Rotation matrix whose columns are the heliostat frame axes in ENU.

    The third column is the mirror normal; the first is horizontal
    (normal x up convention), the second completes the right-handed frame.
    """
    n = normalize(normal)
    ref = UP if abs(float(np.dot(n, UP))) < 0.999 else NORTH
    x_axis = normalize(np.cross(ref, n))
    y_axis = np.cross(n, x_axis)
    return np.column_stack([x_axis, y_axis, n])


def rotation_between(a, b):
    """Minimal rotation matrix taking unit vector a onto unit vector b."""
    a = normalize(a)
    b = normalize(b)
    axis = np.cross(a, b)
    sin = np.linalg.norm(axis)
    cos = float(np.dot(a, b))
    if sin < 1e-15:
        if cos > 0.0:
            return np.eye(3)
        raise GeometryError("180-degree rotation is ambiguous")
    axis = axis / sin
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + sin * k + (1.0 - cos) * (k @ k)


@dataclass(frozen=True)
class SunState:
    """Sun direction plus the circumsolar ratio used when tracing."""

    direction: np.ndarray
    csr: float = 0.0

    def __post_init__(self):
        direction = np.asarray(self.direction, dtype=float)
        object.__setattr__(self, "direction", direction)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
            raise GeometryError("sun direction must be a unit vector")
        if not 0.0 <= self.csr <= 0.15:
            raise GeometryError(f"csr {self.csr} outside [0, 0.15]")


@dataclass(frozen=True)
class FacetSpec:
    """One rigid mirror panel: size, mount point, and canting rotation.

    ``canting_rotation`` maps facet-local coordinates (x across width,
    y across height, z along the facet normal) into the heliostat frame.
    """

    width: float = FACET_WIDTH_M
    height: float = FACET_HEIGHT_M
    center_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    canting_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center_offset", np.asarray(self.center_offset, dtype=float))
        rot = np.asarray(self.canting_rotation, dtype=float)
        object.__setattr__(self, "canting_rotation", rot)
        if rot.shape != (3, 3):
            raise GeometryError("canting rotation must be 3x3")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise GeometryError("canting rotation must be orthonormal with det +1")


def facet_layout(gap_m=FACET_GAP_M):
    """Facet center offsets in the heliostat frame, fixed 2x2 order."""
    dx = (FACET_WIDTH_M + gap_m) / 2.0
    dy = (FACET_HEIGHT_M + gap_m) / 2.0
    return [
        vec3(-dx, -dy, 0.0),  # lower-left
        vec3(dx, -dy, 0.0),   # lower-right
        vec3(-dx, dy, 0.0),   # upper-left
        vec3(dx, dy, 0.0),    # upper-right
    ]


@dataclass(frozen=True)
class HeliostatSpec:
    """Physical heliostat: position, four facets, and canting focal distance."""

    id: str
    position: np.ndarray
    facets: tuple
    focal_distance: float

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "facets", tuple(self.facets))
        if len(self.facets) != FACETS_PER_HELIOSTAT:
            raise GeometryError(f"heliostat needs exactly {FACETS_PER_HELIOSTAT} facets")
        if math.isfinite(self.focal_distance) and self.focal_distance < MIN_FOCAL_DISTANCE_M:
            raise GeometryError(
                f"focal distance {self.focal_distance} m below minimum {MIN_FOCAL_DISTANCE_M} m"
            )

    @property
    def mirror_area(self):
        return sum(f.width * f.height for f in self.facets)


def cant_facets(spec):
    """Apply on-axis canting to all facets of a heliostat.

    Each facet is tilted so that rays arriving along the heliostat normal
    and reflected at the facet center converge at the focal distance along
    that normal. A non-finite focal distance leaves all facets flat.

    Args:
        spec: Heliostat with facet mount points set.

    Returns:
        New HeliostatSpec with canting rotations replaced.
    """
    if not math.isfinite(spec.focal_distance):
        facets = tuple(replace(f, canting_rotation=np.eye(3)) for f in spec.facets)
        return replace(spec, facets=facets)

    focus = vec3(0.0, 0.0, spec.focal_distance)
    incoming = vec3(0.0, 0.0, -1.0)
    facets = []
    for facet in spec.facets:
        reflected = normalize(focus - facet.center_offset)
        facet_normal = normalize(reflected - incoming)
        facets.append(replace(facet, canting_rotation=rotation_between(UP, facet_normal)))
    return replace(spec, facets=tuple(facets))


def make_heliostat(hid, position, focal_distance, gap_m=FACET_GAP_M):
    """Standard four-facet heliostat at ``position``, canted for the focal distance."""
    facets = tuple(FacetSpec(center_offset=off) for off in facet_layout(gap_m))
    spec = HeliostatSpec(id=hid, position=np.asarray(position, dtype=float),
                         facets=facets, focal_distance=float(focal_distance))
    return cant_facets(spec)


def clamped_uniform_knots(n_control=CONTROL_GRID, degree=SPLINE_DEGREE):
    """Clamped uniform knot vector on [0, 1] for ``n_control`` basis functions."""
    interior = np.linspace(0.0, 1.0, n_control - degree + 1)[1:-1]
    return np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])


def _validate_knots(knots, degree, n_control):
    knots = np.asarray(knots, dtype=float)
    if knots.ndim != 1 or len(knots) != n_control + degree + 1:
        raise GeometryError(
            f"knot vector needs {n_control + degree + 1} entries, got {knots.shape}"
        )
    if np.any(np.diff(knots) < 0):
        raise GeometryError("knot vector must be nondecreasing")
    if np.any(knots[: degree + 1] != knots[0]) or np.any(knots[-degree - 1 :] != knots[-1]):
        raise GeometryError(f"knot vector must be clamped with multiplicity {degree + 1}")
    return knots


@dataclass(frozen=True)
class FacetSurface:
    """Fine mirror shape of one facet: 8x8 z-control grid in millimeters."""

    control_z: np.ndarray
    degree: int = SPLINE_DEGREE
    knots_u: np.ndarray = None
    knots_v: np.ndarray = None

    def __post_init__(self):
        control = np.asarray(self.control_z, dtype=float)
        if control.shape != (CONTROL_GRID, CONTROL_GRID):
            raise GeometryError(f"control grid must be {CONTROL_GRID}x{CONTROL_GRID}")
        if np.any(np.abs(control) > MAX_CONTROL_Z_MM):
            raise GeometryError(f"control z exceeds sanity bound {MAX_CONTROL_Z_MM} mm")
        object.__setattr__(self, "control_z", control)
        for name in ("knots_u", "knots_v"):
            knots = getattr(self, name)
            if knots is None:
                knots = clamped_uniform_knots(CONTROL_GRID, self.degree)
            knots = _validate_knots(knots, self.degree, CONTROL_GRID)
            object.__setattr__(self, name, knots)

    @classmethod
    def flat(cls):
        return cls(control_z=np.zeros((CONTROL_GRID, CONTROL_GRID)))


@dataclass(frozen=True)
class HeliostatSurface:
    """Four facet surfaces in fixed layout order (LL, LR, UL, UR)."""

    facets: tuple

    def __post_init__(self):
        object.__setattr__(self, "facets", tuple(self.facets))
        if len(self.facets) != FACETS_PER_HELIOSTAT:
            raise GeometryError(f"surface needs exactly {FACETS_PER_HELIOSTAT} facets")

    @classmethod
    def flat(cls):
        return cls(facets=tuple(FacetSurface.flat() for _ in range(FACETS_PER_HELIOSTAT)))

    @classmethod
    def from_array(cls, control, **kwargs):
        control = np.asarray(control, dtype=float)
        if control.shape != (FACETS_PER_HELIOSTAT, CONTROL_GRID, CONTROL_GRID):
            raise GeometryError(f"expected (4, 8, 8) control array, got {control.shape}")
        return cls(facets=tuple(FacetSurface(control_z=c, **kwargs) for c in control))

    def as_array(self):
        return np.stack([f.control_z for f in self.facets])


def _find_span(knots, degree, t):
    # Index of the knot span containing t, clamped to valid basis range.
    n_basis = len(knots) - degree - 1
    span = np.searchsorted(knots, t, side="right") - 1
    return np.clip(span, degree, n_basis - 1)


def bspline_basis(knots, degree, t):
    """Nonzero B-spline basis functions and first derivatives at ``t``.

    Vectorized Cox-de Boor recursion. For each evaluation point only the
    ``degree + 1`` basis functions N_{span-degree..span} are nonzero.

    Args:
        knots: Clamped nondecreasing knot vector.
        degree: Polynomial degree p.
        t: Parameter values, any shape, in [knots[0], knots[-1]].

    Returns:
        (span, basis, dbasis): span indices of shape t.shape, and arrays of
        shape t.shape + (degree + 1,) with values and derivatives.
    """
    knots = np.asarray(knots, dtype=float)
    t = np.asarray(t, dtype=float)
    shape = t.shape
    t_flat = t.ravel()
    span = _find_span(knots, degree, t_flat)

    m = len(t_flat)
    basis = np.zeros((m, degree + 1))
    basis[:, 0] = 1.0
    left = np.zeros((m, degree + 1))
    right = np.zeros((m, degree + 1))
    lower = np.zeros((m, degree + 1))  # order p-1 values, for the derivative

    for j in range(1, degree + 1):
        left[:, j] = t_flat - knots[span + 1 - j]
        right[:, j] = knots[span + j] - t_flat
        if j == degree:
            lower[:, :degree] = basis[:, :degree]
        saved = np.zeros(m)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = np.where(denom > 0, basis[:, r] / np.where(denom > 0, denom, 1.0), 0.0)
            basis[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        basis[:, j] = saved

    # dN_{i,p} = p * (N_{i,p-1}/(U[i+p]-U[i]) - N_{i+1,p-1}/(U[i+p+1]-U[i+1]))
    dbasis = np.zeros((m, degree + 1))
    if degree > 0:
        for r in range(degree + 1):
            i = span - degree + r
            out = np.zeros(m)
            if r >= 1:
                denom = knots[i + degree] - knots[i]
                out += np.where(denom > 0, lower[:, r - 1] / np.where(denom > 0, denom, 1.0), 0.0)
            if r <= degree - 1:
                denom = knots[i + degree + 1] - knots[i + 1]
                out -= np.where(denom > 0, lower[:, r] / np.where(denom > 0, denom, 1.0), 0.0)
            dbasis[:, r] = degree * out

    return span.reshape(shape), basis.reshape(shape + (degree + 1,)), dbasis.reshape(shape + (degree + 1,))


def nurbs_eval(surface, u, v, width_m=FACET_WIDTH_M, height_m=FACET_HEIGHT_M):
    """Evaluate a facet surface: z-deviation and analytic unit normal.

    The spline has uniform unit weights, so this is a plain B-spline. The
    normal comes from the partial derivatives of the lifted surface
    (x(u), y(v), z(u, v)) with x, y scaled to the facet's metric size and
    z converted from millimeters to meters.

    Args:
        surface: FacetSurface to evaluate.
        u, v: Parameters in [0, 1], scalars or broadcastable arrays.
        width_m, height_m: Facet metric dimensions.

    Returns:
        (z, normal): z in millimeters with the broadcast shape of (u, v),
        and unit normals of shape (..., 3).
    """
    u_arr, v_arr = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
    if np.any(u_arr < 0) or np.any(u_arr > 1) or np.any(v_arr < 0) or np.any(v_arr > 1):
        raise GeometryError("u, v must lie in [0, 1]")
    shape = u_arr.shape
    uf = u_arr.ravel()
    vf = v_arr.ravel()

    degree = surface.degree
    span_u, bu, dbu = bspline_basis(surface.knots_u, degree, uf)
    span_v, bv, dbv = bspline_basis(surface.knots_v, degree, vf)

    offsets = np.arange(degree + 1)
    iu = span_u[:, None] - degree + offsets[None, :]
    iv = span_v[:, None] - degree + offsets[None, :]
    ctrl = surface.control_z[iu[:, :, None], iv[:, None, :]]

    z = np.einsum("mi,mij,mj->m", bu, ctrl, bv)
    dz_du = np.einsum("mi,mij,mj->m", dbu, ctrl, bv)
    dz_dv = np.einsum("mi,mij,mj->m", bu, ctrl, dbv)

    # cross((width, 0, dz/du), (0, height, dz/dv)) with z in meters
    nx = -height_m * dz_du * 1e-3
    ny = -width_m * dz_dv * 1e-3
    nz = np.full_like(z, width_m * height_m)
    normal = np.stack([nx, ny, nz], axis=-1)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)

    if shape == ():
        return float(z[0]), normal[0]
    return z.reshape(shape), normal.reshape(shape + (3,))


def save_field(path, heliostats):
    """Write a heliostat field file (JSON array of id/position/focal records)."""
    records = [
        {
            "id": h.id,
            "position_enu_m": [float(x) for x in h.position],
            "focal_distance_m": float(h.focal_distance),
        }
        for h in heliostats
    ]
    Path(path).write_text(json.dumps(records, indent=2) + "\n")


def load_field(path):
    """Read a heliostat field file and rebuild canted HeliostatSpecs."""
    records = json.loads(Path(path).read_text())
    return [
        make_heliostat(r["id"], np.array(r["position_enu_m"], dtype=float),
                       float(r["focal_distance_m"]))
        for r in records
    ]
