import numpy as np
import pytest

from icepose.dataset import sample_pose
from icepose.fan import FanGeometry, fan_sample_points
from icepose.geometry import RigidTransform, compose, random_transform
from icepose.phantom import generate_phantom, sdf_eval
from icepose.scene import export_scene, fan_mesh, format_obj, isosurface, read_obj_groups, scene_meshes


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(13)


@pytest.fixture(scope="module")
def poses(phantom):
    rng = np.random.default_rng(0)
    return sample_pose(rng, phantom), sample_pose(rng, phantom)


def test_isosurface_vertices_lie_on_zero_level(phantom):
    mesh, cell = isosurface(phantom, resolution=48)
    assert len(mesh.vertices) > 1000 and mesh.faces.shape[1] == 3
    assert mesh.faces.max() < len(mesh.vertices)
    assert np.max(np.abs(sdf_eval(phantom, mesh.vertices))) < 1.5 * cell


def test_isosurface_follows_world_transform(phantom):
    t = random_transform(np.random.default_rng(1), 200.0)
    a, _ = isosurface(phantom, 24)
    b, _ = isosurface(phantom.transformed(t), 24)
    assert np.allclose(t.apply(a.vertices), b.vertices, atol=1e-9)


def test_fan_mesh_matches_sample_points(poses):
    fan = FanGeometry()
    m = fan_mesh("fan_gt", "gray", poses[0], fan)
    assert np.array_equal(m.vertices, fan_sample_points(poses[0], fan).reshape(-1, 3))
    assert m.faces.shape == ((fan.ray_count - 1) * (fan.samples_per_ray - 1), 4)


def test_fan_mesh_vertex_count_for_two_samples():
    fan = FanGeometry(ray_count=7, samples_per_ray=2)
    m = fan_mesh("f", "gray", RigidTransform.identity(), fan)
    assert m.vertices.shape == (14, 3) and m.faces.shape == (6, 4)
    assert np.array_equal(m.vertices[0::2], np.zeros((7, 3)))  # all rays share the apex


def test_export_groups_and_identical_fans(phantom, poses, tmp_path):
    fan = FanGeometry()
    out = export_scene(phantom, poses[0], poses[0], fan, tmp_path / "scene.obj", resolution=24)
    text = out.read_text()
    assert "mtllib scene.mtl" in text and (tmp_path / "scene.mtl").exists()
    assert "usemtl anatomy" in text and "usemtl gray" in text and "usemtl green" in text
    groups = read_obj_groups(out)
    assert list(groups) == ["phantom", "fan_gt", "fan_pred"]
    assert np.array_equal(groups["fan_gt"], groups["fan_pred"])
    ref = fan_sample_points(poses[0], fan).reshape(-1, 3)
    assert np.max(np.abs(groups["fan_gt"] - ref)) <= 5e-7


def test_export_distinct_fans_and_face_indices(phantom, poses, tmp_path):
    out = export_scene(phantom, poses[0], poses[1], FanGeometry(), tmp_path / "s.obj", resolution=24)
    groups = read_obj_groups(out)
    assert not np.allclose(groups["fan_gt"], groups["fan_pred"])
    n_vert = sum(len(v) for v in groups.values())
    faces = [list(map(int, line.split()[1:])) for line in out.read_text().splitlines() if line.startswith("f ")]
    assert min(min(f) for f in faces) == 1 and max(max(f) for f in faces) == n_vert


def test_export_is_byte_deterministic(phantom, poses, tmp_path):
    a = export_scene(phantom, *poses, FanGeometry(), tmp_path / "a.obj", resolution=24)
    b = export_scene(generate_phantom(13), *poses, FanGeometry(), tmp_path / "b.obj", resolution=24)
    assert a.read_bytes().replace(b"a.mtl", b"b.mtl") == b.read_bytes()


def test_export_unwritable_path(phantom, poses, tmp_path):
    with pytest.raises(OSError):
        export_scene(phantom, *poses, FanGeometry(), tmp_path / "missing" / "x.obj", resolution=8)


def test_format_obj_is_one_based(poses):
    fan = FanGeometry(ray_count=2, samples_per_ray=2)
    meshes = [fan_mesh("a", "gray", poses[0], fan), fan_mesh("b", "green", compose(poses[0], poses[1]), fan)]
    lines = format_obj(meshes).splitlines()
    assert [l for l in lines if l.startswith("f ")] == ["f 1 2 4 3", "f 5 6 8 7"]


def test_scene_meshes_order(phantom, poses):
    names = [m.name for m in scene_meshes(phantom, *poses, FanGeometry(), resolution=8)]
    assert names == ["phantom", "fan_gt", "fan_pred"]
