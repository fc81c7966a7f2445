"""Synthetic training data: procedural surface prior, surface augmentation,
sun-position sampling inside the annual solar envelope, aim scattering, and
dataset persistence.

The surface prior replaces measured mirror-shape data with a procedural
model of the same error taxonomy: per-facet canting tilt, quadratic bow,
sinusoidal waviness, and measurement noise.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, optics
from .geometry import (
    CONTROL_GRID,
    FACET_HEIGHT_M,
    FACET_WIDTH_M,
    FACETS_PER_HELIOSTAT,
    MAX_CONTROL_Z_MM,
    FacetSurface,
    HeliostatSurface,
    SunState,
    make_heliostat,
    solar_vector,
)
from .optics import FluxImage, TargetPlane, trace_flux

log = logging.getLogger(__name__)

MAX_DECLINATION_DEG = 23.44
DEFAULT_LATITUDE = 50.91
DEFAULT_LONGITUDE = 6.39

SCHEMA_VERSION = 1


class DatasetError(RuntimeError):
    """Dataset generation or parsing failure."""


@dataclass(frozen=True)
class SurfacePrior:
    """Magnitudes of the procedural surface error components."""

    canting_tilt_sigma: float = 0.5  # mrad slope per facet axis
    bow_amp_sigma: float = 0.3      # mm center-to-edge
    wave_amp_sigma: float = 0.15    # mm
    wave_freq_range: tuple = (1.0, 3.0)  # cycles per facet
    noise_sigma: float = 0.02       # mm

    def __post_init__(self):
        for name in ("canting_tilt_sigma", "bow_amp_sigma", "wave_amp_sigma", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _grid_coords_mm():
    # Control-point x/y positions across the facet, millimeters from center.
    xs = (np.linspace(0.0, 1.0, CONTROL_GRID) - 0.5) * FACET_WIDTH_M * 1000.0
    ys = (np.linspace(0.0, 1.0, CONTROL_GRID) - 0.5) * FACET_HEIGHT_M * 1000.0
    return xs, ys


def synth_surface(prior, rng):
    """Draw one heliostat surface from the procedural prior.

    Per facet: a tilted plane (Gaussian slopes), a quadratic bow, sinusoidal
    waviness with random phase and frequency along each axis, and i.i.d.
    noise, summed on the control grid and clipped to the sanity bound.

    Args:
        prior: SurfacePrior magnitudes.
        rng: numpy Generator.

    Returns:
        HeliostatSurface.
    """
    xs, ys = _grid_coords_mm()
    xg, yg = np.meshgrid(xs, ys, indexing="ij")
    xi = xg / xg.max() if xg.max() > 0 else xg  # normalized [-1, 1]
    eta = yg / yg.max() if yg.max() > 0 else yg
    facets = []
    for _ in range(FACETS_PER_HELIOSTAT):
        slope_x, slope_y = rng.normal(0.0, prior.canting_tilt_sigma * 1e-3, size=2)
        z = slope_x * xg + slope_y * yg
        bow_x, bow_y = rng.normal(0.0, prior.bow_amp_sigma, size=2)
        z += bow_x * xi**2 + bow_y * eta**2
        for axis, coord in ((0, xi[:, 0]), (1, eta[0, :])):
            amp = rng.normal(0.0, prior.wave_amp_sigma)
            freq = rng.uniform(*prior.wave_freq_range)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            wave = amp * np.sin(math.pi * freq * coord + phase)
            z += wave[:, None] if axis == 0 else wave[None, :]
        z += rng.normal(0.0, prior.noise_sigma, size=z.shape)
        facets.append(FacetSurface(control_z=np.clip(z, -MAX_CONTROL_Z_MM, MAX_CONTROL_Z_MM)))
    return HeliostatSurface(facets=tuple(facets))


def augment_rotate180(surface):
    """Rotate a heliostat surface by 180 degrees about its normal.

    Facet order reverses (opposite corners swap) and each control grid is
    reversed along both indices. The operation is an involution.
    """
    facets = tuple(
        FacetSurface(
            control_z=f.control_z[::-1, ::-1].copy(),
            degree=f.degree,
            knots_u=f.knots_u,
            knots_v=f.knots_v,
        )
        for f in reversed(surface.facets)
    )
    return HeliostatSurface(facets=facets)


def augment_blend(a, b, lam):
    """Convex blend of two surfaces: (1 - lam) * a + lam * b, element-wise."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"blend weight {lam} outside [0, 1]")
    facets = tuple(
        FacetSurface(
            control_z=(1.0 - lam) * fa.control_z + lam * fb.control_z,
            degree=fa.degree,
            knots_u=fa.knots_u,
            knots_v=fa.knots_v,
        )
        for fa, fb in zip(a.facets, b.facets)
    )
    return HeliostatSurface(facets=facets)


def required_declination_deg(azimuth_deg, elevation_deg, latitude_deg):
    """Declination at which the sun passes through (azimuth, elevation).

    From the spherical triangle relating declination, latitude, elevation
    and azimuth (clockwise from north):
    sin(dec) = sin(lat) sin(el) + cos(lat) cos(el) cos(az).
    """
    az = np.radians(azimuth_deg)
    el = np.radians(elevation_deg)
    lat = math.radians(latitude_deg)
    s = math.sin(lat) * np.sin(el) + math.cos(lat) * np.cos(el) * np.cos(az)
    return np.degrees(np.arcsin(np.clip(s, -1.0, 1.0)))


def annual_max_elevation(azimuth_deg, latitude_deg, el_grid_step=0.05):
    """Highest elevation the sun reaches at a given azimuth over the year.

    Scans elevations and keeps those whose required declination stays within
    the +-23.44 degree annual bound. Returns -inf when the sun never appears
    at that azimuth.
    """
    els = np.arange(el_grid_step, 90.0 + el_grid_step, el_grid_step)
    dec = required_declination_deg(azimuth_deg, els, latitude_deg)
    feasible = np.abs(dec) <= MAX_DECLINATION_DEG
    if not np.any(feasible):
        return float("-inf")
    return float(els[feasible].max())


def sun_grid(latitude_deg=DEFAULT_LATITUDE, az_step_deg=10.0, el_step_deg=5.0):
    """Equidistant azimuth-elevation grid restricted to the annual envelope.

    A node is kept when its elevation is positive and does not exceed the
    maximum elevation ever reached at its azimuth during the year.

    Args:
        latitude_deg: Site latitude.
        az_step_deg, el_step_deg: Grid steps, degrees (> 0).

    Returns:
        (directions, angles): unit vectors of shape (n, 3) and the matching
        (azimuth, elevation) pairs of shape (n, 2).

    Raises:
        DatasetError: If no node survives the envelope filter.
    """
    if az_step_deg <= 0 or el_step_deg <= 0:
        raise DatasetError("grid steps must be positive")
    azimuths = np.arange(0.0, 360.0, az_step_deg)
    elevations = np.arange(el_step_deg, 90.0 + 1e-9, el_step_deg)
    nodes = []
    for az in azimuths:
        el_max = annual_max_elevation(az, latitude_deg)
        for el in elevations[elevations <= el_max]:
            nodes.append((az, el))
    if not nodes:
        raise DatasetError("empty sun grid: no node inside the annual envelope")
    angles = np.array(nodes)
    directions = np.array([solar_vector(az, el) for az, el in nodes])
    return directions, angles


def scatter_aim(center, rng, right=geometry.EAST, up=geometry.UP, radius=1.0):
    """Uniform point on the in-plane disc of given radius around ``center``."""
    r = radius * math.sqrt(rng.random())
    phi = 2.0 * math.pi * rng.random()
    return np.asarray(center, dtype=float) + r * (
        math.cos(phi) * np.asarray(right) + math.sin(phi) * np.asarray(up)
    )


@dataclass(frozen=True)
class Observation:
    """One calibration shot: sun state, scattered aim point, flux image."""

    sun: SunState
    aim: np.ndarray
    flux: FluxImage

    def __post_init__(self):
        object.__setattr__(self, "aim", np.asarray(self.aim, dtype=float))


@dataclass(frozen=True)
class DatasetSample:
    """Training/evaluation unit: heliostat, true surface, 1..8 observations."""

    heliostat: geometry.HeliostatSpec
    truth: HeliostatSurface
    observations: tuple

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        if not 1 <= len(self.observations) <= 8:
            raise DatasetError("a sample carries between 1 and 8 observations")


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs of the dataset generator."""

    n_samples: int = 200
    obs_min: int = 3
    obs_max: int = 8
    rays_per_image: int = 16384
    target_heights: tuple = (36.0, 43.0)
    target_size: tuple = (8.0, 8.0)
    resolution: tuple = (64, 64)
    az_step_deg: float = 10.0
    el_step_deg: float = 5.0
    latitude: float = DEFAULT_LATITUDE
    longitude: float = DEFAULT_LONGITUDE
    csr_range: tuple = (0.0, 0.15)
    aim_scatter_radius: float = 1.0
    split_fracs: tuple = (0.7, 0.15, 0.15)
    rotate_prob: float = 0.25
    blend_prob: float = 0.25
    min_sun_elevation: float = 0.0  # extra filter over the envelope, degrees

    def targets(self):
        return [
            TargetPlane(
                center=np.array([0.0, 0.0, h]),
                normal=np.array([0.0, 1.0, 0.0]),
                up=np.array([0.0, 0.0, 1.0]),
                width=self.target_size[0],
                height=self.target_size[1],
                resolution=self.resolution,
            )
            for h in self.target_heights
        ]


def config_hash(config, prior):
    """Stable hash of the generation configuration (stored in the manifest)."""
    payload = json.dumps({"config": asdict(config), "prior": asdict(prior)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _sun_state_dict(sun):
    return {"direction": [float(x) for x in sun.direction], "csr": float(sun.csr)}


def write_sample(path, sample):
    """Serialize one sample: JSON header line, then the flux records."""
    header = {
        "heliostat": {
            "id": sample.heliostat.id,
            "position_enu_m": [float(x) for x in sample.heliostat.position],
            "focal_distance_m": float(sample.heliostat.focal_distance),
        },
        "truth_control_z_mm": sample.truth.as_array().tolist(),
        "observations": [
            {"sun": _sun_state_dict(obs.sun), "aim_enu_m": [float(x) for x in obs.aim]}
            for obs in sample.observations
        ],
    }
    blob = json.dumps(header, separators=(",", ":")).encode() + b"\n"
    for obs in sample.observations:
        blob += obs.flux.to_bytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return len(blob)


def read_sample(path):
    """Read a sample written by write_sample, bit-exact."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        hrec = header["heliostat"]
        heliostat = make_heliostat(
            hrec["id"], np.array(hrec["position_enu_m"]), hrec["focal_distance_m"]
        )
        truth = HeliostatSurface.from_array(np.array(header["truth_control_z_mm"]))
        observations = []
        for obs in header["observations"]:
            flux = FluxImage.from_stream(fh)
            sun = SunState(direction=np.array(obs["sun"]["direction"]), csr=obs["sun"]["csr"])
            observations.append(Observation(sun=sun, aim=np.array(obs["aim_enu_m"]), flux=flux))
    return DatasetSample(heliostat=heliostat, truth=truth, observations=tuple(observations))


def split_heliostats(heliostats, fracs, rng):
    """Assign heliostats to disjoint train/val/test sets by id."""
    ids = [h.id for h in heliostats]
    order = rng.permutation(len(ids))
    n = len(ids)
    n_train = max(1, round(fracs[0] * n))
    n_val = max(1, round(fracs[1] * n))
    n_train = min(n_train, n - 2)
    splits = {"train": [], "val": [], "test": []}
    for rank, idx in enumerate(order):
        if rank < n_train:
            splits["train"].append(ids[idx])
        elif rank < n_train + n_val:
            splits["val"].append(ids[idx])
        else:
            splits["test"].append(ids[idx])
    return splits


def _draw_surface(prior, config, rng):
    surface = synth_surface(prior, rng)
    if rng.random() < config.rotate_prob:
        surface = augment_rotate180(surface)
    if rng.random() < config.blend_prob:
        surface = augment_blend(surface, synth_surface(prior, rng), rng.uniform(0.0, 1.0))
    return surface


def _build_sample(heliostat, prior, config, sun_dirs, targets, sample_seed):
    rng = np.random.default_rng(sample_seed)
    surface = _draw_surface(prior, config, rng)
    n_obs = int(rng.integers(config.obs_min, config.obs_max + 1))
    observations = []
    for k in range(n_obs):
        sun_dir = sun_dirs[int(rng.integers(len(sun_dirs)))]
        csr = float(rng.uniform(*config.csr_range))
        sun = SunState(direction=sun_dir, csr=csr)
        target = targets[int(rng.integers(len(targets)))]
        aim = scatter_aim(target.center, rng, right=target.right, up=target.up,
                          radius=config.aim_scatter_radius)
        trace_seed = int(np.random.SeedSequence([sample_seed, k]).generate_state(1)[0])
        flux = trace_flux(heliostat, surface, sun, target, aim,
                          config.rays_per_image, seed=trace_seed)
        observations.append(Observation(sun=sun, aim=aim, flux=flux))
    return DatasetSample(heliostat=heliostat, truth=surface, observations=tuple(observations))


def generate_dataset(field, prior, config, seed, out_dir, threads=1):
    """Generate and persist a dataset directory.

    Layout: ``manifest.json`` plus one ``samples/NNNNNN.bin`` per sample.
    Heliostat ids are split disjointly into train/val/test; samples cycle
    through the heliostats of their split. Fully deterministic in ``seed``
    (independent of ``threads``).

    Args:
        field: List of HeliostatSpec.
        prior: SurfacePrior.
        config: GenerationConfig.
        seed: Master seed.
        out_dir: Output directory (created).
        threads: Parallel sample workers.

    Returns:
        The manifest dict.
    """
    if len(field) < 3:
        raise DatasetError("need at least 3 heliostats for disjoint splits")
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    splits = split_heliostats(field, config.split_fracs, rng)
    by_id = {h.id: h for h in field}

    sun_dirs, sun_angles = sun_grid(config.latitude, config.az_step_deg, config.el_step_deg)
    keep = sun_angles[:, 1] >= config.min_sun_elevation
    sun_dirs = sun_dirs[keep]
    if len(sun_dirs) == 0:
        raise DatasetError("sun grid empty after elevation filter")
    targets = config.targets()

    # Per-split sample counts proportional to split fractions.
    counts = {
        "train": round(config.n_samples * config.split_fracs[0]),
        "val": round(config.n_samples * config.split_fracs[1]),
    }
    counts["test"] = config.n_samples - counts["train"] - counts["val"]

    jobs = []
    index = 0
    for split in ("train", "val", "test"):
        ids = splits[split]
        for k in range(counts[split]):
            sample_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
            jobs.append((index, split, by_id[ids[k % len(ids)]], sample_seed))
            index += 1

    entries = [None] * len(jobs)

    def run(job):
        idx, split, heliostat, sample_seed = job
        sample = _build_sample(heliostat, prior, config, sun_dirs, targets, sample_seed)
        path = out / "samples" / f"{idx:06d}.bin"
        nbytes = write_sample(path, sample)
        return idx, {
            "index": idx,
            "path": f"samples/{idx:06d}.bin",
            "bytes": nbytes,
            "heliostat_id": heliostat.id,
            "split": split,
            "n_observations": len(sample.observations),
        }

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for idx, entry in pool.map(run, jobs):
                entries[idx] = entry
    else:
        for job in jobs:
            idx, entry = run(job)
            entries[idx] = entry

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "location": {"latitude": config.latitude, "longitude": config.longitude},
        "seed": seed,
        "splits": splits,
        "counts": {k: sum(1 for e in entries if e["split"] == k) for k in ("train", "val", "test")},
        "samples": entries,
        "config": {"generation": asdict(config), "prior": asdict(prior)},
        "config_hash": config_hash(config, prior),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("dataset written: %s (%d samples)", out, len(entries))
    return manifest


class Dataset:
    """Loaded dataset directory with split-wise access to samples."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DatasetError(f"no manifest at {manifest_path}")
        self.manifest = json.loads(manifest_path.read_text())

    @property
    def config_hash(self):
        return self.manifest["config_hash"]

    def entries(self, split=None):
        items = self.manifest["samples"]
        if split is None:
            return items
        return [e for e in items if e["split"] == split]

    def load(self, entry):
        return read_sample(self.root / entry["path"])

    def load_split(self, split):
        return [self.load(e) for e in self.entries(split)]

    def generation_config(self):
        cfg = self.manifest["config"]["generation"]
        cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
        return GenerationConfig(**cfg)

    def prior(self):
        cfg = self.manifest["config"]["prior"]
        cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
        return SurfacePrior(**cfg)
