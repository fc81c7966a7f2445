"""Sunshape sampling and Monte-Carlo flux tracing onto targets and the receiver.

The tracer is deterministic for a fixed seed independent of how rays are
partitioned across workers: per-ray randomness comes from the counter-based
Philox generator, advanced to the ray index, with a fixed number of draws
per ray.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .geometry import (
    EAST,
    NORTH,
    UP,
    GeometryError,
    normalize,
    nurbs_eval,
    orientation_matrix,
    reflect,
    track_orientation,
)

log = logging.getLogger(__name__)

DISC_EDGE_MRAD = 4.65
THETA_MAX_MRAD = 43.6
_CDF_BINS = 4096
_DRAWS_PER_RAY = 8  # Philox advances in blocks of 4 draws; 8 keeps chunks aligned
_CHUNK_RAYS = 1 << 18

FLUX_MAGIC = b"FLUX"
_FLUX_HEADER = struct.Struct("<4sIIQ")


class FluxError(ValueError):
    """Invalid flux-image operation (geometry mismatch, bad file, ...)."""


@dataclass(frozen=True)
class SunshapeConfig:
    """Buie circumsolar sunshape parameters."""

    csr: float
    theta_max: float = THETA_MAX_MRAD
    disc_edge: float = DISC_EDGE_MRAD

    def __post_init__(self):
        if not 0.0 <= self.csr <= 0.15:
            raise FluxError(f"csr {self.csr} outside [0, 0.15]")


def buie_effective_chi(csr):
    """Map the requested circumsolar ratio to the profile's chi parameter.

    The raw Buie parameterization realizes a circumsolar fraction that
    deviates from its chi argument, badly so for small values (a profile
    built with chi = 0.02 carries only ~0.6% of its energy in the aureole).
    This is the standard Tonatiuh/SolTrace correction polynomial so that
    the realized fraction tracks the requested ratio.
    """
    if csr > 0.145:
        return -0.04419909985804843 + csr * (
            1.401323894233574
            + csr * (-0.3639746714505299 + csr * (-0.9579768560161194 + 1.1550475450828657 * csr))
        )
    if csr > 0.035:
        return 0.022652077593662934 + csr * (
            0.5252380349996234 + (2.5484334534423887 - 0.8763755326550412 * csr) * csr
        )
    return 0.004733749294807862 + csr * (
        4.716738065192151
        + csr * (
            -463.506669149804
            + csr * (24745.88727411664 + csr * (-606122.7511711778 + 5521693.445014727 * csr))
        )
    )


def buie_kappa_gamma(chi):
    """Aureole power-law parameters (kappa, gamma) for a given chi."""
    kappa = 0.9 * math.log(13.5 * chi) * chi ** (-0.3)
    gamma = 2.2 * math.log(0.52 * chi) * chi**0.43 - 0.1
    return kappa, gamma


def buie_pdf(theta, csr, theta_max=THETA_MAX_MRAD, disc_edge=DISC_EDGE_MRAD):
    """Unnormalized Buie sunshape radiance profile.

    phi(theta) = cos(0.326 theta) / cos(0.308 theta) inside the solar disc
    and exp(kappa) * theta^gamma in the aureole up to ``theta_max``; zero
    beyond. The profile is discontinuous at the disc edge. A csr of zero
    gives the pure disc profile.

    Args:
        theta: Angular distance from the sun center, mrad. Scalar or array.
        csr: Circumsolar ratio in [0, 0.15].

    Returns:
        Density values with theta's shape (scalar in, scalar out).
    """
    theta_arr = np.asarray(theta, dtype=float)
    if np.any(theta_arr < 0):
        raise FluxError("theta must be nonnegative")
    out = np.zeros_like(theta_arr)
    disc = theta_arr <= disc_edge
    out[disc] = np.cos(0.326 * theta_arr[disc]) / np.cos(0.308 * theta_arr[disc])
    if csr > 0.0:
        kappa, gamma = buie_kappa_gamma(buie_effective_chi(csr))
        aureole = (theta_arr > disc_edge) & (theta_arr <= theta_max)
        out[aureole] = np.exp(kappa) * theta_arr[aureole] ** gamma
    if np.isscalar(theta) or np.asarray(theta).shape == ():
        return float(out)
    return out


def buie_cdf_table(config, bins=_CDF_BINS):
    """Inverse-CDF table for theta distributed as pdf(theta) * theta.

    Returns (theta_grid, cdf) with cdf monotone from 0 to 1 over
    [0, theta_max]. The solid-angle weighting theta accounts for sampling
    a polar angle in the small-angle approximation.
    """
    upper = config.theta_max if config.csr > 0.0 else config.disc_edge
    edges = np.linspace(0.0, upper, bins + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    weights = buie_pdf(mids, config.csr, config.theta_max, config.disc_edge) * mids
    cdf = np.concatenate([[0.0], np.cumsum(weights)])
    cdf /= cdf[-1]
    return edges, cdf


def buie_sample(config, rng, n=None):
    """Sample angular deviations (theta mrad, phi rad) from the sunshape.

    Args:
        config: SunshapeConfig.
        rng: Seeded numpy Generator; the sample stream is deterministic.
        n: Number of samples; None returns a single (theta, phi) pair.

    Returns:
        Arrays (theta, phi) of length n, or two floats when n is None.
    """
    edges, cdf = buie_cdf_table(config)
    count = 1 if n is None else n
    theta = np.interp(rng.random(count), cdf, edges)
    phi = 2.0 * math.pi * rng.random(count)
    if n is None:
        return float(theta[0]), float(phi[0])
    return theta, phi


@dataclass(frozen=True)
class TargetPlane:
    """Flat Lambertian calibration target with a pixel grid.

    The image x-axis runs along ``right = normal x up``, the y-axis along
    ``up``; pixel (0, 0) is the lower-left corner seen from the field.
    """

    center: np.ndarray
    normal: np.ndarray
    up: np.ndarray
    width: float = 8.0
    height: float = 8.0
    resolution: tuple = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "normal", normalize(self.normal))
        object.__setattr__(self, "up", normalize(self.up))
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        if abs(float(np.dot(self.normal, self.up))) > 1e-9:
            raise GeometryError("target normal and up must be perpendicular")
        if min(self.resolution) < 16:
            raise GeometryError("target resolution must be at least 16x16")

    @property
    def right(self):
        return np.cross(self.normal, self.up)

    def to_dict(self):
        return {
            "kind": "target_plane",
            "center": list(map(float, self.center)),
            "normal": list(map(float, self.normal)),
            "up": list(map(float, self.up)),
            "width": self.width,
            "height": self.height,
            "resolution": list(self.resolution),
        }


@dataclass(frozen=True)
class CurvedReceiver:
    """Tilted cylindrical receiver section, concave face toward the field.

    The section subtends ``opening_angle`` degrees of a vertical cylinder of
    the given radius, then the whole section is tilted toward the ground
    (the field is north of the tower, so the face looks north-down).
    Arc parameter s runs west-to-east over the opening, height parameter h
    bottom-to-top over ``height_extent``.
    """

    apex_height: float = 55.0
    radius: float = 4.14
    opening_angle: float = 60.0
    tilt: float = 25.0
    height_extent: float = 5.0
    resolution: tuple = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        if self.radius <= 0:
            raise GeometryError("receiver radius must be positive")
        if not 0.0 < self.opening_angle < 180.0:
            raise GeometryError("opening angle must lie in (0, 180) degrees")

    @property
    def center(self):
        return np.array([0.0, 0.0, self.apex_height])

    def _frame(self):
        # Tilted east / face-normal / axis directions.
        tilt = math.radians(self.tilt)
        face = np.array([0.0, math.cos(tilt), -math.sin(tilt)])  # toward field, tipped down
        axis = np.array([0.0, math.sin(tilt), math.cos(tilt)])
        return EAST, face, axis

    @property
    def axis_point(self):
        _, face, _ = self._frame()
        return self.center + self.radius * face

    def point(self, s, h):
        """World position of surface coordinates (s, h) in [0, 1]^2."""
        east, face, axis = self._frame()
        alpha = (np.asarray(s, dtype=float) - 0.5) * math.radians(self.opening_angle)
        t_ax = (np.asarray(h, dtype=float) - 0.5) * self.height_extent
        radial = np.multiply.outer(np.sin(alpha), east) - np.multiply.outer(np.cos(alpha), face)
        return self.axis_point + self.radius * radial + np.multiply.outer(t_ax, axis)

    def to_dict(self):
        return {
            "kind": "curved_receiver",
            "apex_height": self.apex_height,
            "radius": self.radius,
            "opening_angle": self.opening_angle,
            "tilt": self.tilt,
            "height_extent": self.height_extent,
            "resolution": list(self.resolution),
        }


def geometry_from_dict(data):
    kind = data.get("kind")
    if kind == "target_plane":
        return TargetPlane(
            center=np.array(data["center"]),
            normal=np.array(data["normal"]),
            up=np.array(data["up"]),
            width=data["width"],
            height=data["height"],
            resolution=tuple(data["resolution"]),
        )
    if kind == "curved_receiver":
        return CurvedReceiver(
            apex_height=data["apex_height"],
            radius=data["radius"],
            opening_angle=data["opening_angle"],
            tilt=data["tilt"],
            height_extent=data["height_extent"],
            resolution=tuple(data["resolution"]),
        )
    raise FluxError(f"unknown geometry kind {kind!r}")


@dataclass
class FluxImage:
    """Hit-density grid on a target or receiver.

    ``raw`` holds per-pixel ray counts, shape (ny, nx) with row 0 at the
    bottom. ``normalized`` rescales the peak to 1 and is all zeros when no
    ray hit.
    """

    raw: np.ndarray
    geometry: object
    ray_count: int

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float32)
        if np.any(self.raw < 0):
            raise FluxError("raw flux must be nonnegative")

    @property
    def normalized(self):
        peak = float(self.raw.max())
        if peak <= 0.0:
            return np.zeros_like(self.raw)
        return self.raw / np.float32(peak)

    @property
    def is_empty(self):
        return float(self.raw.max()) <= 0.0

    @property
    def resolution(self):
        ny, nx = self.raw.shape
        return nx, ny

    def to_bytes(self):
        nx, ny = self.resolution
        blob = json.dumps(self.geometry.to_dict(), separators=(",", ":")).encode()
        return _FLUX_HEADER.pack(FLUX_MAGIC, nx, ny, self.ray_count) + self.raw.astype(
            "<f4"
        ).tobytes() + blob + b"\n"

    @classmethod
    def from_stream(cls, stream):
        header = stream.read(_FLUX_HEADER.size)
        if len(header) < _FLUX_HEADER.size:
            raise FluxError("truncated flux record")
        magic, nx, ny, ray_count = _FLUX_HEADER.unpack(header)
        if magic != FLUX_MAGIC:
            raise FluxError(f"bad flux magic {magic!r}")
        raw = np.frombuffer(stream.read(4 * nx * ny), dtype="<f4").reshape(ny, nx)
        blob = bytearray()
        while True:
            ch = stream.read(1)
            if not ch or ch == b"\n":
                break
            blob.extend(ch)
        geo = geometry_from_dict(json.loads(blob.decode()))
        return cls(raw=raw.copy(), geometry=geo, ray_count=int(ray_count))

    @classmethod
    def from_bytes(cls, data):
        import io

        return cls.from_stream(io.BytesIO(data))

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def _perp_basis(direction):
    ref = UP if abs(float(np.dot(direction, UP))) < 0.999 else NORTH
    t1 = normalize(np.cross(direction, ref))
    t2 = np.cross(direction, t1)
    return t1, t2


def _ray_uniforms(seed, start, count):
    bit_gen = np.random.Philox(key=int(seed) & (2**128 - 1))
    bit_gen.advance(start * _DRAWS_PER_RAY // 4)
    return np.random.Generator(bit_gen).random((count, _DRAWS_PER_RAY))


def _intersect_plane_grid(origins, dirs, plane):
    denom = dirs @ plane.normal
    toward = denom < -1e-12
    t = np.where(toward, ((plane.center - origins) @ plane.normal) / np.where(toward, denom, 1.0), -1.0)
    valid = toward & (t > 0)
    hits = origins + t[:, None] * dirs
    local = hits - plane.center
    lx = local @ plane.right
    ly = local @ plane.up
    nx, ny = plane.resolution
    inside = valid & (np.abs(lx) <= plane.width / 2) & (np.abs(ly) <= plane.height / 2)
    ix = np.clip(((lx + plane.width / 2) / plane.width * nx).astype(np.int64), 0, nx - 1)
    iy = np.clip(((ly + plane.height / 2) / plane.height * ny).astype(np.int64), 0, ny - 1)
    return ix, iy, inside


def _intersect_receiver_batch(origins, dirs, receiver):
    east, face, axis = receiver._frame()
    apex = receiver.axis_point
    rel = origins - apex
    d_ax = dirs @ axis
    rel_ax = rel @ axis
    d_perp = dirs - d_ax[:, None] * axis
    rel_perp = rel - rel_ax[:, None] * axis

    a = np.einsum("ij,ij->i", d_perp, d_perp)
    b = 2.0 * np.einsum("ij,ij->i", d_perp, rel_perp)
    c = np.einsum("ij,ij->i", rel_perp, rel_perp) - receiver.radius**2
    disc = b * b - 4.0 * a * c
    ok = (a > 1e-12) & (disc > 0.0)

    sqrt_disc = np.sqrt(np.where(ok, disc, 0.0))
    denom = np.where(ok, 2.0 * a, 1.0)
    half_open = math.radians(receiver.opening_angle) / 2.0
    half_height = receiver.height_extent / 2.0

    s_out = np.zeros(len(origins))
    h_out = np.zeros(len(origins))
    hit = np.zeros(len(origins), dtype=bool)
    for sign in (-1.0, 1.0):  # near root first
        t = (-b + sign * sqrt_disc) / denom
        cand = ok & ~hit & (t > 1e-9)
        if not np.any(cand):
            continue
        q = rel + t[:, None] * dirs
        t_ax = q @ axis
        radial = q - t_ax[:, None] * axis
        alpha = np.arctan2(radial @ east, -(radial @ face))
        concave = np.einsum("ij,ij->i", dirs, -radial) < 0  # approaching from inside
        accept = cand & concave & (np.abs(alpha) <= half_open) & (np.abs(t_ax) <= half_height)
        s_out[accept] = alpha[accept] / (2.0 * half_open) + 0.5
        h_out[accept] = t_ax[accept] / (2.0 * half_height) + 0.5
        hit |= accept
    return s_out, h_out, hit


def intersect_receiver(origin, direction, receiver):
    """Nearest hit of one ray on the receiver section, or None.

    Args:
        origin: Ray origin, ENU meters.
        direction: Unit ray direction.
        receiver: CurvedReceiver.

    Returns:
        (s, h) surface coordinates in [0, 1]^2, or None on a miss.
        Tangent rays (zero discriminant) count as misses.
    """
    s, h, hit = _intersect_receiver_batch(
        np.asarray(origin, dtype=float)[None, :], np.asarray(direction, dtype=float)[None, :], receiver
    )
    if not hit[0]:
        return None
    return float(s[0]), float(h[0])


def _receiver_grid(s, h, receiver):
    nx, ny = receiver.resolution
    ix = np.clip((s * nx).astype(np.int64), 0, nx - 1)
    iy = np.clip((h * ny).astype(np.int64), 0, ny - 1)
    return ix, iy


def _trace_chunk(heliostat, control, rotations, offsets, helio_rot, sun_dir, cdf_table,
                 target, start, count, seed, surface0):
    draws = _ray_uniforms(seed, start, count)
    facet = np.minimum((draws[:, 0] * len(offsets)).astype(np.int64), len(offsets) - 1)
    u = draws[:, 1]
    v = draws[:, 2]

    degree = surface0.degree
    span_u, bu, dbu = geometry.bspline_basis(surface0.knots_u, degree, u)
    span_v, bv, dbv = geometry.bspline_basis(surface0.knots_v, degree, v)
    offs = np.arange(degree + 1)
    iu = span_u[:, None] - degree + offs[None, :]
    iv = span_v[:, None] - degree + offs[None, :]
    ctrl = control[facet[:, None, None], iu[:, :, None], iv[:, None, :]]

    z_mm = np.einsum("mi,mij,mj->m", bu, ctrl, bv)
    dz_du = np.einsum("mi,mij,mj->m", dbu, ctrl, bv)
    dz_dv = np.einsum("mi,mij,mj->m", bu, ctrl, dbv)

    width = heliostat.facets[0].width
    height = heliostat.facets[0].height
    local_pt = np.stack(
        [(u - 0.5) * width, (v - 0.5) * height, z_mm * 1e-3], axis=-1
    )
    local_n = np.stack(
        [-height * dz_du * 1e-3, -width * dz_dv * 1e-3, np.full_like(z_mm, width * height)],
        axis=-1,
    )
    local_n /= np.linalg.norm(local_n, axis=-1, keepdims=True)

    rot = rotations[facet]
    pt_h = np.einsum("mij,mj->mi", rot, local_pt) + offsets[facet]
    n_h = np.einsum("mij,mj->mi", rot, local_n)
    origins = pt_h @ helio_rot.T + heliostat.position
    normals = n_h @ helio_rot.T

    incoming = np.broadcast_to(-sun_dir, origins.shape)
    if cdf_table is not None:
        edges, cdf = cdf_table
        theta = np.interp(draws[:, 3], cdf, edges) * 1e-3
        phi = 2.0 * math.pi * draws[:, 4]
        t1, t2 = _perp_basis(-sun_dir)
        sin_t = np.sin(theta)
        incoming = (
            (-sun_dir)[None, :] * np.cos(theta)[:, None]
            + t1[None, :] * (np.cos(phi) * sin_t)[:, None]
            + t2[None, :] * (np.sin(phi) * sin_t)[:, None]
        )
    outgoing = reflect(incoming, normals)

    nx, ny = (target.resolution if isinstance(target, TargetPlane) else target.resolution)
    if isinstance(target, TargetPlane):
        ix, iy, inside = _intersect_plane_grid(origins, outgoing, target)
    else:
        s, h, inside = _intersect_receiver_batch(origins, outgoing, target)
        ix, iy = _receiver_grid(s, h, target)
    flat = iy[inside] * nx + ix[inside]
    return np.bincount(flat, minlength=nx * ny).astype(np.float64).reshape(ny, nx)


def trace_flux(heliostat, surface, sun, target, aim_point, n_rays, seed, *,
               threads=1, sunshape="auto"):
    """Monte-Carlo trace of one heliostat's flux onto a target or receiver.

    For each ray: sample a point uniformly on a facet (area-weighted),
    evaluate the spline surface normal there, compose canting and tracking
    orientation, perturb the incoming sun direction by the sunshape,
    reflect, intersect the target, and accumulate hits per pixel.

    Args:
        heliostat: HeliostatSpec (canting set).
        surface: HeliostatSurface of fine mirror shape.
        sun: SunState; its csr selects the sunshape unless overridden.
        target: TargetPlane or CurvedReceiver.
        aim_point: ENU point the heliostat tracks.
        n_rays: Number of rays (>= 1).
        seed: Integer seed; the raw grid is bit-identical for a fixed seed
            regardless of ``threads``.
        threads: Worker threads tracing disjoint ray ranges.
        sunshape: "auto" uses Buie with sun.csr; a SunshapeConfig overrides;
            None traces a point sun (no angular spread).

    Returns:
        FluxImage with integer hit counts in ``raw``.
    """
    if n_rays < 1:
        raise FluxError("n_rays must be >= 1")
    sun_dir = np.asarray(sun.direction, dtype=float)
    mirror_normal = track_orientation(sun_dir, heliostat.position, aim_point)
    helio_rot = orientation_matrix(mirror_normal)

    if sunshape == "auto":
        sunshape = SunshapeConfig(csr=sun.csr)
    cdf_table = buie_cdf_table(sunshape) if sunshape is not None else None

    control = np.stack([f.control_z for f in surface.facets])
    rotations = np.stack([f.canting_rotation for f in heliostat.facets])
    offsets = np.stack([f.center_offset for f in heliostat.facets])

    chunks = [(start, min(_CHUNK_RAYS, n_rays - start)) for start in range(0, n_rays, _CHUNK_RAYS)]

    def run(chunk):
        start, count = chunk
        return _trace_chunk(heliostat, control, rotations, offsets, helio_rot, sun_dir,
                            cdf_table, target, start, count, seed, surface.facets[0])

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            grids = list(pool.map(run, chunks))
    else:
        grids = [run(c) for c in chunks]

    raw = np.sum(grids, axis=0)
    image = FluxImage(raw=raw, geometry=target, ray_count=n_rays)
    if image.is_empty:
        log.warning("trace_flux: no ray hit the target (heliostat %s)", heliostat.id)
    return image


def superpose(images):
    """Sum flux images on identical geometry; normalization from the summed raw.

    Args:
        images: Nonempty list of FluxImage sharing geometry and resolution.

    Returns:
        FluxImage whose raw grid is the element-wise sum.

    Raises:
        FluxError: On empty input or geometry mismatch.
    """
    if not images:
        raise FluxError("cannot superpose zero images")
    ref = images[0]
    ref_geo = ref.geometry.to_dict()
    for img in images[1:]:
        if img.geometry.to_dict() != ref_geo or img.raw.shape != ref.raw.shape:
            raise FluxError("flux images have mismatched geometry")
    raw = np.sum([img.raw.astype(np.float64) for img in images], axis=0)
    return FluxImage(raw=raw, geometry=ref.geometry, ray_count=sum(i.ray_count for i in images))


def write_pgm(path, normalized):
    """8-bit grayscale PGM of a normalized grid (pixel = round(255 * v))."""
    grid = np.asarray(normalized, dtype=float)
    pixels = np.rint(255.0 * grid).astype(np.uint8)
    ny, nx = pixels.shape
    header = f"P5\n{nx} {ny}\n255\n".encode()
    Path(path).write_bytes(header + pixels[::-1].tobytes())  # top row first


def read_pgm(path):
    """Read back a binary PGM written by write_pgm, bottom row first."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise FluxError("not a binary PGM")
    nx, ny = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(data[pos : pos + nx * ny], dtype=np.uint8).reshape(ny, nx)
    return pixels[::-1].copy()


def write_png(path, normalized, cmap="inferno"):
    """False-color PNG of a normalized grid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.imsave(path, np.asarray(normalized)[::-1], cmap=cmap, vmin=0.0, vmax=1.0)
