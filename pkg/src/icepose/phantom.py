"""Seeded parametric cardiac phantom described by signed distance functions.

The anatomy lives in a local frame whose origin is the left-atrium centre
(x: patient left, y: anterior, z: superior). ``AnatomyPhantom.frame`` places
that frame in world coordinates.

Structures: LA ellipsoid, four pulmonary-vein capsules leaving the posterior
wall, a two-lobed appendage anterolaterally and a vertical esophagus capsule
behind the LA. The scene SDF is the union (pointwise minimum) of all of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .config import format_kv, parse_kv, to_floats, to_int
from .errors import ConfigError
from .geometry import RigidTransform, compose, invert, random_rotation

BLOOD_INTENSITY = 0.05
WALL_INTENSITY = 0.9
TISSUE_INTENSITY = 0.35
BLEND_WIDTH = 0.5  # mm, centred on each band edge

PV_NAMES = ("lspv", "lipv", "rspv", "ripv")
_PV_BASE = {
    "lspv": (0.75, -0.45, 0.5),
    "lipv": (0.75, -0.45, -0.5),
    "rspv": (-0.75, -0.45, 0.5),
    "ripv": (-0.75, -0.45, -0.5),
}
_LAA_BASE = (0.7, 0.7, 0.15)


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    center: np.ndarray
    semi_axes: np.ndarray

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.center - self.semi_axes, self.center + self.semi_axes


@dataclass(frozen=True, eq=False)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.minimum(self.a, self.b) - self.radius, np.maximum(self.a, self.b) + self.radius


@dataclass(frozen=True)
class ParamRanges:
    """Closed [lo, hi] ranges for every randomised phantom parameter (mm / rad)."""

    la_semi_x: tuple[float, float] = (25.0, 29.0)
    la_semi_y: tuple[float, float] = (18.0, 21.0)
    la_semi_z: tuple[float, float] = (20.0, 24.0)
    pv_radius: tuple[float, float] = (5.0, 6.5)
    pv_length: tuple[float, float] = (16.0, 22.0)
    pv_jitter: tuple[float, float] = (-0.12, 0.12)
    laa_length: tuple[float, float] = (10.0, 13.0)
    laa_width: tuple[float, float] = (6.0, 7.5)
    eso_radius: tuple[float, float] = (7.0, 8.5)
    eso_gap: tuple[float, float] = (3.0, 6.0)
    eso_half_length: tuple[float, float] = (40.0, 48.0)
    wall_thickness: tuple[float, float] = (2.0, 3.0)
    world_offset: tuple[float, float] = (-150.0, 150.0)
    bounding_half: float = 60.0
    random_world_rotation: bool = False

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                lo, hi = v
                if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                    raise ConfigError(f"range {f.name} = ({lo}, {hi}) is degenerate")
        positive = ("la_semi_x", "la_semi_y", "la_semi_z", "pv_radius", "pv_length",
                    "laa_length", "laa_width", "eso_radius", "eso_half_length")
        for name in positive:
            if getattr(self, name)[0] <= 0:
                raise ConfigError(f"range {name} must be strictly positive")
        if self.wall_thickness[0] <= BLEND_WIDTH:
            raise ConfigError(f"wall_thickness must exceed the {BLEND_WIDTH} mm blend width")
        if self.eso_gap[0] < 0:
            raise ConfigError("eso_gap must be non-negative")
        if self.bounding_half <= 0:
            raise ConfigError("bounding_half must be positive")

    @classmethod
    def from_mapping(cls, kv: dict[str, str], prefix: str = "phantom.") -> ParamRanges:
        """Read ``<prefix><field> = lo hi`` entries; unknown keys with the prefix are errors."""
        known = {f.name: f for f in fields(cls)}
        updates = {}
        for key, value in kv.items():
            if not key.startswith(prefix):
                continue
            name = key[len(prefix):]
            if name not in known:
                raise ConfigError(f"unknown phantom range {key!r}")
            if name == "bounding_half":
                updates[name] = to_floats(value, 1, key)[0]
            elif name == "random_world_rotation":
                updates[name] = value.strip().lower() in ("1", "true", "yes", "on")
            else:
                updates[name] = to_floats(value, 2, key)
        out = replace(cls(), **updates)
        out.validate()
        return out


@dataclass(frozen=True, eq=False)
class AnatomyPhantom:
    seed: int
    frame: RigidTransform  # local anatomy frame -> world
    la: Ellipsoid
    pvs: tuple[Capsule, ...]
    laa: tuple[Ellipsoid, Ellipsoid]
    eso: Capsule
    wall_thickness: float
    bounding_half: float = 60.0
    _inv: RigidTransform = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_inv", invert(self.frame))

    @property
    def la_center_world(self) -> np.ndarray:
        return self.frame.apply(self.la.center)

    def to_local(self, points) -> np.ndarray:
        return self._inv.apply(points)

    def primitives(self) -> list[Ellipsoid | Capsule]:
        return [self.la, *self.pvs, *self.laa, self.eso]

    def transformed(self, t: RigidTransform) -> AnatomyPhantom:
        """The same anatomy moved rigidly by ``t`` in world space."""
        return replace(self, frame=compose(t, self.frame))

    def check_bounds(self) -> None:
        h = self.bounding_half
        for prim in self.primitives():
            lo, hi = prim.bounds()
            if np.any(lo - self.la.center < -h) or np.any(hi - self.la.center > h):
                raise ConfigError(
                    f"phantom structure {prim.__class__.__name__} extends past the {2 * h:g} mm bounding box"
                )


def _draw(rng: np.random.Generator, rng_range: tuple[float, float]) -> float:
    lo, hi = rng_range
    return float(rng.uniform(lo, hi))


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def ellipsoid_surface_point(e: Ellipsoid, direction: np.ndarray) -> np.ndarray:
    """Point where the ray from the centre along ``direction`` meets the ellipsoid."""
    d = _unit(direction)
    return e.center + d / np.linalg.norm(d / e.semi_axes)


def generate_phantom(seed: int, ranges: ParamRanges | None = None) -> AnatomyPhantom:
    """Draw a phantom deterministically from ``seed`` within ``ranges``."""
    ranges = ranges or ParamRanges()
    ranges.validate()
    rng = np.random.default_rng(seed)

    la = Ellipsoid(
        np.zeros(3),
        np.array([_draw(rng, ranges.la_semi_x), _draw(rng, ranges.la_semi_y), _draw(rng, ranges.la_semi_z)]),
    )
    pvs = []
    for name in PV_NAMES:
        jitter = np.array([_draw(rng, ranges.pv_jitter) for _ in range(3)])
        d = _unit(np.asarray(_PV_BASE[name]) + jitter)
        radius = _draw(rng, ranges.pv_radius)
        length = _draw(rng, ranges.pv_length)
        surface = ellipsoid_surface_point(la, d)
        pvs.append(Capsule(surface - 0.5 * radius * d, surface + length * d, radius))

    laa_len = _draw(rng, ranges.laa_length)
    laa_w = _draw(rng, ranges.laa_width)
    d_laa = _unit(_LAA_BASE)
    base = ellipsoid_surface_point(la, d_laa)
    main = Ellipsoid(base + 0.5 * laa_len * d_laa, np.array([laa_len, laa_w, laa_w]))
    lobe = Ellipsoid(base + 1.3 * laa_len * d_laa + np.array([0.0, 0.0, 0.4 * laa_w]), np.full(3, 0.7 * laa_w))

    eso_r = _draw(rng, ranges.eso_radius)
    y_eso = -(la.semi_axes[1] + _draw(rng, ranges.eso_gap) + eso_r)
    half = _draw(rng, ranges.eso_half_length)
    eso = Capsule(np.array([0.0, y_eso, -half]), np.array([0.0, y_eso, half]), eso_r)

    wall = _draw(rng, ranges.wall_thickness)
    offset = np.array([_draw(rng, ranges.world_offset) for _ in range(3)])
    rot = random_rotation(rng) if ranges.random_world_rotation else np.eye(3)

    phantom = AnatomyPhantom(
        seed=int(seed),
        frame=RigidTransform(rot, offset),
        la=la,
        pvs=tuple(pvs),
        laa=(main, lobe),
        eso=eso,
        wall_thickness=wall,
        bounding_half=ranges.bounding_half,
    )
    phantom.check_bounds()
    return phantom


# --------------------------------------------------------------------------
# signed distances (all vectorised over [..., 3] point arrays, local frame)


def ellipsoid_sdf(e: Ellipsoid, p: np.ndarray) -> np.ndarray:
    """Bounded ellipsoid distance approximation k0 (k0 - 1) / k1.

    Exact on the surface; the centre (k1 = 0) maps to minus the smallest semi-axis.
    """
    q = p - e.center
    k0 = np.linalg.norm(q / e.semi_axes, axis=-1)
    k1 = np.linalg.norm(q / (e.semi_axes * e.semi_axes), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = k0 * (k0 - 1.0) / k1
    return np.where(k1 > 0.0, d, -np.min(e.semi_axes))


def capsule_sdf(c: Capsule, p: np.ndarray) -> np.ndarray:
    pa = p - c.a
    ba = c.b - c.a
    h = np.clip((pa @ ba) / (ba @ ba), 0.0, 1.0)
    return np.linalg.norm(pa - h[..., None] * ba, axis=-1) - c.radius


def primitive_sdf(prim: Ellipsoid | Capsule, p_local: np.ndarray) -> np.ndarray:
    if isinstance(prim, Ellipsoid):
        return ellipsoid_sdf(prim, p_local)
    return capsule_sdf(prim, p_local)


def la_sdf(phantom: AnatomyPhantom, points) -> np.ndarray:
    """Distance to the LA ellipsoid alone, world-frame points."""
    return ellipsoid_sdf(phantom.la, phantom.to_local(points))


def sdf_eval(phantom: AnatomyPhantom, points) -> np.ndarray | float:
    """Scene signed distance (mm) at world-frame ``points`` of shape [..., 3]."""
    pts = np.asarray(points, dtype=np.float64)
    local = phantom.to_local(pts)
    d = primitive_sdf(phantom.la, local)
    for prim in phantom.primitives()[1:]:
        d = np.minimum(d, primitive_sdf(prim, local))
    return float(d) if pts.ndim == 1 else d


def intensity_from_sdf(d, wall_thickness: float):
    """Piecewise-linear band map: blood pool, bright wall, grey tissue."""
    w = 0.5 * wall_thickness
    b = 0.5 * BLEND_WIDTH
    knots = (-w - b, -w + b, w - b, w + b)
    levels = (BLOOD_INTENSITY, WALL_INTENSITY, WALL_INTENSITY, TISSUE_INTENSITY)
    return np.interp(d, knots, levels)


def intensity_at(phantom: AnatomyPhantom, points) -> np.ndarray | float:
    """Echo intensity in [0, 1] at world-frame ``points`` (before speckle)."""
    out = intensity_from_sdf(sdf_eval(phantom, points), phantom.wall_thickness)
    return float(out) if np.ndim(out) == 0 else out


INTENSITY_LIPSCHITZ = (WALL_INTENSITY - BLOOD_INTENSITY) / BLEND_WIDTH  # per mm of signed distance


# --------------------------------------------------------------------------
# key = value serialisation


def phantom_to_text(phantom: AnatomyPhantom) -> str:
    kv: dict[str, object] = {
        "seed": phantom.seed,
        "bounding_half": float(phantom.bounding_half),
        "wall_thickness": float(phantom.wall_thickness),
        "frame.rotation": phantom.frame.rotation.reshape(-1),
        "frame.translation": phantom.frame.translation,
        "la.center": phantom.la.center,
        "la.semi_axes": phantom.la.semi_axes,
    }
    for name, pv in zip(PV_NAMES, phantom.pvs):
        kv[f"pv.{name}.a"] = pv.a
        kv[f"pv.{name}.b"] = pv.b
        kv[f"pv.{name}.radius"] = float(pv.radius)
    for name, e in zip(("main", "lobe"), phantom.laa):
        kv[f"laa.{name}.center"] = e.center
        kv[f"laa.{name}.semi_axes"] = e.semi_axes
    kv["eso.a"] = phantom.eso.a
    kv["eso.b"] = phantom.eso.b
    kv["eso.radius"] = float(phantom.eso.radius)
    header = (
        "anatomy phantom; lengths in mm, local frame origin = LA centre\n"
        "frame.* places the local frame in world coordinates (rotation row-major)"
    )
    return format_kv(kv, header=header)


def phantom_from_text(text: str) -> AnatomyPhantom:
    kv = parse_kv(text)

    def vec(key, n=3):
        if key not in kv:
            raise ConfigError(f"phantom file is missing {key!r}")
        return np.array(to_floats(kv[key], n, key))

    def num(key):
        return float(vec(key, 1)[0])

    pvs = tuple(Capsule(vec(f"pv.{n}.a"), vec(f"pv.{n}.b"), num(f"pv.{n}.radius")) for n in PV_NAMES)
    laa = tuple(Ellipsoid(vec(f"laa.{n}.center"), vec(f"laa.{n}.semi_axes")) for n in ("main", "lobe"))
    return AnatomyPhantom(
        seed=to_int(kv.get("seed", "0"), "seed"),
        frame=RigidTransform(vec("frame.rotation", 9).reshape(3, 3), vec("frame.translation")),
        la=Ellipsoid(vec("la.center"), vec("la.semi_axes")),
        pvs=pvs,
        laa=laa,
        eso=Capsule(vec("eso.a"), vec("eso.b"), num("eso.radius")),
        wall_thickness=num("wall_thickness"),
        bounding_half=num("bounding_half"),
    )
