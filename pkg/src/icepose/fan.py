"""Sector-scan imaging of a phantom from a transducer pose.

Fan convention: the apex sits at the transducer position, the imaging plane
is the transducer's local x-y plane and the centerline points along local
+y. Ray ``i`` leaves at in-plane angle ``-sector/2 + i * sector/(R-1)``
(positive towards +x); sample ``j`` lies at range ``j * depth/(S-1)``.

Raster layout: row 0 is the apex side, rows grow with depth; columns span
x in [-depth*sin(sector/2), +depth*sin(sector/2)]. A pixel is in-sector
when its centre is within ``depth`` of the apex and within the sector angle.
Scan conversion picks the nearest ray and nearest sample per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .geometry import RigidTransform
from .phantom import AnatomyPhantom, intensity_at

SPECKLE_SIGMA = 0.15


@dataclass(frozen=True)
class FanGeometry:
    sector_angle: float = 90.0  # degrees
    depth: float = 100.0  # mm
    ray_count: int = 96
    samples_per_ray: int = 96
    image_h: int = 64
    image_w: int = 64

    def __post_init__(self):
        if not 0.0 < self.sector_angle < 180.0:
            raise ConfigError(f"sector_angle must be in (0, 180), got {self.sector_angle}")
        if not self.depth > 0.0:
            raise ConfigError(f"depth must be positive, got {self.depth}")
        if self.ray_count < 2 or self.samples_per_ray < 2:
            raise ConfigError("ray_count and samples_per_ray must both be >= 2")
        if self.image_h < 1 or self.image_w < 1:
            raise ConfigError("image dimensions must be positive")

    def check_patch(self, patch: int) -> None:
        if patch < 1 or self.image_h % patch or self.image_w % patch:
            raise ConfigError(
                f"image size {self.image_h}x{self.image_w} is not divisible by patch size {patch}"
            )

    @property
    def half_angle_rad(self) -> float:
        return float(np.radians(self.sector_angle) / 2.0)

    def ray_angles(self) -> np.ndarray:
        h = self.half_angle_rad
        return -h + np.arange(self.ray_count) * (2.0 * h / (self.ray_count - 1))

    def sample_ranges(self) -> np.ndarray:
        return np.arange(self.samples_per_ray) * (self.depth / (self.samples_per_ray - 1))

    def half_width(self) -> float:
        return self.depth * float(np.sin(self.half_angle_rad))


def fan_local_points(fan: FanGeometry) -> tuple[np.ndarray, np.ndarray]:
    """In-plane (x, y) coordinates of every ray sample, each of shape [R, S]."""
    phi = fan.ray_angles()[:, None]
    r = fan.sample_ranges()[None, :]
    return r * np.sin(phi), r * np.cos(phi)


def fan_sample_points(pose_world: RigidTransform, fan: FanGeometry) -> np.ndarray:
    """World coordinates of every ray sample, shape [R, S, 3].

    This is the single source of fan geometry for both rendering and export.
    """
    x, y = fan_local_points(fan)
    rot, t = pose_world.rotation, pose_world.translation
    return t + x[..., None] * rot[:, 0] + y[..., None] * rot[:, 1]


def pixel_centers(fan: FanGeometry) -> tuple[np.ndarray, np.ndarray]:
    """In-plane (x, y) coordinates of every pixel centre, each [H, W]."""
    hw = fan.half_width()
    xs = -hw + (np.arange(fan.image_w) + 0.5) * (2.0 * hw / fan.image_w)
    ys = (np.arange(fan.image_h) + 0.5) * (fan.depth / fan.image_h)
    return np.meshgrid(xs, ys)


@lru_cache(maxsize=16)
def _scan_table(fan: FanGeometry) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, y = pixel_centers(fan)
    r = np.hypot(x, y)
    phi = np.arctan2(x, y)
    mask = (r <= fan.depth) & (np.abs(phi) <= fan.half_angle_rad)
    d_phi = 2.0 * fan.half_angle_rad / (fan.ray_count - 1)
    d_r = fan.depth / (fan.samples_per_ray - 1)
    ray = np.clip(np.rint((phi + fan.half_angle_rad) / d_phi), 0, fan.ray_count - 1).astype(np.intp)
    sample = np.clip(np.rint(r / d_r), 0, fan.samples_per_ray - 1).astype(np.intp)
    for a in (mask, ray, sample):
        a.flags.writeable = False
    return mask, ray, sample


def sector_mask(fan: FanGeometry) -> np.ndarray:
    """Boolean [H, W] mask of in-sector pixels; depends on ``fan`` only."""
    return _scan_table(fan)[0]


def scan_table(fan: FanGeometry) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mask, nearest ray index, nearest sample index) per pixel."""
    return _scan_table(fan)


@dataclass(frozen=True, eq=False)
class FanImage:
    pixels: np.ndarray
    pose_world: RigidTransform
    fan: FanGeometry = field(default_factory=FanGeometry)


def render_polar(
    phantom: AnatomyPhantom,
    pose_world: RigidTransform,
    fan: FanGeometry,
    noise_seed: int | None = None,
    speckle: float = SPECKLE_SIGMA,
) -> np.ndarray:
    """Per-ray intensity samples [R, S], with multiplicative speckle when ``speckle > 0``."""
    values = intensity_at(phantom, fan_sample_points(pose_world, fan))
    if speckle > 0.0:
        rng = np.random.default_rng(noise_seed)
        values = np.clip(values * rng.uniform(1.0 - speckle, 1.0 + speckle, values.shape), 0.0, 1.0)
    return values


def render_fan(
    phantom: AnatomyPhantom,
    pose_world: RigidTransform,
    fan: FanGeometry | None = None,
    noise_seed: int | None = 0,
    speckle: float = SPECKLE_SIGMA,
    patch: int = 16,
) -> FanImage:
    """Render a scan-converted sector image; ``speckle=0`` gives the clean image."""
    fan = fan or FanGeometry()
    fan.check_patch(patch)
    if not 0.0 <= speckle < 1.0:
        raise ConfigError(f"speckle must be in [0, 1), got {speckle}")
    polar = render_polar(phantom, pose_world, fan, noise_seed, speckle)
    mask, ray, sample = _scan_table(fan)
    pixels = np.where(mask, polar[ray, sample], 0.0)
    return FanImage(pixels, pose_world, fan)
