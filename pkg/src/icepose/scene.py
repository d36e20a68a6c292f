"""3D scene export: phantom isosurface plus ground-truth and predicted fans.

Output is ASCII Wavefront OBJ with one group per object (``phantom``,
``fan_gt``, ``fan_pred``) and a companion ``.mtl`` holding the colour tags.
Fan vertices come from :func:`icepose.fan.fan_sample_points`, the routine
the renderer samples, so exported geometry matches the images exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes

from .fan import FanGeometry, fan_sample_points
from .geometry import RigidTransform
from .phantom import AnatomyPhantom, sdf_eval

MATERIALS = {
    "anatomy": (0.80, 0.45, 0.40),
    "gray": (0.55, 0.55, 0.55),
    "green": (0.05, 0.45, 0.15),
}


@dataclass(frozen=True, eq=False)
class Mesh:
    name: str
    material: str
    vertices: np.ndarray  # [N, 3] world mm
    faces: np.ndarray  # [F, k] zero-based vertex indices


def isosurface(phantom: AnatomyPhantom, resolution: int = 64) -> tuple[Mesh, float]:
    """Zero level set of the phantom SDF over its bounding cube; returns (mesh, cell size)."""
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    h = phantom.bounding_half
    axis = np.linspace(-h, h, resolution)
    cell = float(axis[1] - axis[0])
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    local = phantom.la.center + grid.reshape(-1, 3)
    values = sdf_eval(phantom, phantom.frame.apply(local)).reshape(grid.shape[:3])
    if not values.min() < 0.0 < values.max():
        raise ValueError("phantom surface does not cross the sampling grid")
    verts, faces, _, _ = marching_cubes(values, level=0.0, spacing=(cell, cell, cell))
    world = phantom.frame.apply(phantom.la.center - h + verts)
    return Mesh("phantom", "anatomy", world, faces.astype(np.int64)), cell


def fan_mesh(name: str, material: str, pose_world: RigidTransform, fan: FanGeometry) -> Mesh:
    """Quad strip over every ray sample: vertex ``i*S + j`` is ray i, sample j."""
    pts = fan_sample_points(pose_world, fan)
    r, s = pts.shape[:2]
    idx = np.arange(r * s).reshape(r, s)
    quads = np.stack([idx[:-1, :-1], idx[:-1, 1:], idx[1:, 1:], idx[1:, :-1]], axis=-1)
    return Mesh(name, material, pts.reshape(-1, 3), quads.reshape(-1, 4))


def scene_meshes(
    phantom: AnatomyPhantom,
    gt_pose: RigidTransform,
    pred_pose: RigidTransform,
    fan: FanGeometry,
    resolution: int = 64,
) -> list[Mesh]:
    surface, _ = isosurface(phantom, resolution)
    return [
        surface,
        fan_mesh("fan_gt", "gray", gt_pose, fan),
        fan_mesh("fan_pred", "green", pred_pose, fan),
    ]


def format_obj(meshes: list[Mesh], mtllib: str | None = None) -> str:
    lines = ["# icepose scene"]
    if mtllib:
        lines.append(f"mtllib {mtllib}")
    base = 1
    for m in meshes:
        lines.append(f"o {m.name}")
        lines.append(f"g {m.name}")
        lines.append(f"usemtl {m.material}")
        lines.extend(f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in m.vertices)
        lines.extend("f " + " ".join(str(base + int(i)) for i in face) for face in m.faces)
        base += len(m.vertices)
    return "\n".join(lines) + "\n"


def format_mtl() -> str:
    lines = []
    for name, (r, g, b) in MATERIALS.items():
        lines += [f"newmtl {name}", f"Kd {r:.3f} {g:.3f} {b:.3f}", ""]
    return "\n".join(lines)


def export_scene(
    phantom: AnatomyPhantom,
    gt_pose: RigidTransform,
    pred_pose: RigidTransform,
    fan: FanGeometry,
    out_path: str | Path,
    resolution: int = 64,
) -> Path:
    """Write ``out_path`` (OBJ) and a sibling ``.mtl``; output bytes depend only on the inputs."""
    out_path = Path(out_path)
    mtl = out_path.with_suffix(".mtl")
    text = format_obj(scene_meshes(phantom, gt_pose, pred_pose, fan, resolution), mtllib=mtl.name)
    out_path.write_text(text)
    mtl.write_text(format_mtl())
    return out_path


def read_obj_groups(path: str | Path) -> dict[str, np.ndarray]:
    """Vertices per group of an OBJ written by :func:`export_scene`."""
    groups: dict[str, list[list[float]]] = {}
    current = None
    for line in Path(path).read_text().splitlines():
        if line.startswith("g "):
            current = line[2:].strip()
            groups[current] = []
        elif line.startswith("v ") and current is not None:
            groups[current].append([float(v) for v in line.split()[1:4]])
    return {k: np.asarray(v, dtype=np.float64).reshape(-1, 3) for k, v in groups.items()}
