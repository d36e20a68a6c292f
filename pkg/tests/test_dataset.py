import json
import struct
import zlib
from dataclasses import replace

import numpy as np
import pytest

from icepose.dataset import (
    HEADER_BYTES,
    MAGIC,
    DatasetConfig,
    DatasetManifest,
    PoseBounds,
    build_dataset,
    decode_record,
    encode_record,
    load_batch,
    load_samples,
    mesh_frame,
    read_header,
    record_bytes,
    sample_pose,
    subject_phantom,
)
from icepose.errors import ConfigError, FormatError
from icepose.fan import FanGeometry
from icepose.geometry import (
    RigidTransform,
    decode_rot6d,
    denormalize_pose,
    is_rotation,
    normalize_pose,
    orthonormality_error,
    random_transform,
)
from icepose.phantom import generate_phantom, la_sdf, phantom_from_text


def test_sample_pose_deterministic():
    ph = generate_phantom(1)
    a = sample_pose(np.random.default_rng(42), ph)
    b = sample_pose(np.random.default_rng(42), ph)
    assert a.to_flat().tobytes() == b.to_flat().tobytes()


def test_sample_pose_shell_and_aim():
    ph = generate_phantom(2)
    rng = np.random.default_rng(0)
    bounds = PoseBounds()
    radius = float(np.max(ph.la.semi_axes))
    c = ph.la_center_world
    for _ in range(1000):
        pose = sample_pose(rng, ph, bounds)
        d = la_sdf(ph, pose.translation)
        assert -bounds.shell_inner <= d <= bounds.shell_outer
        assert is_rotation(pose.rotation)
        # ray from the apex along +y passes through the LA bounding sphere
        y = pose.rotation[:, 1]
        q = c - pose.translation
        t = max(q @ y, 0.0)
        assert np.linalg.norm(q - t * y) <= radius


def test_sample_pose_roll_covers_full_circle():
    ph = generate_phantom(3)
    rng = np.random.default_rng(1)
    ups = []
    for _ in range(400):
        r = sample_pose(rng, ph).rotation
        ups.append(r[2, 2])  # world z of the plane normal
    ups = np.array(ups)
    assert ups.min() < -0.8 and ups.max() > 0.8


def test_sample_pose_restricted_roll():
    ph = generate_phantom(3)
    rng = np.random.default_rng(2)
    bounds = PoseBounds(roll_min=0.0, roll_max=0.0)
    for _ in range(50):
        r = sample_pose(rng, ph, bounds).rotation
        # zero roll keeps the lateral axis horizontal unless the view is near vertical
        if abs(r[2, 1]) < 0.9:
            assert abs(r[2, 0]) < 1e-9


def test_pose_bounds_validated():
    with pytest.raises(ConfigError):
        DatasetConfig(pose=PoseBounds(shell_inner=-1.0)).validate()
    with pytest.raises(ConfigError):
        DatasetConfig(subjects=(0, 1, 1)).validate()
    with pytest.raises(ConfigError):
        DatasetConfig(fan=FanGeometry(image_h=40)).validate()


def test_mesh_frame_is_la_translation():
    ph = generate_phantom(9)
    t = mesh_frame(ph)
    assert np.array_equal(t.rotation, np.eye(3)) and np.array_equal(t.translation, ph.la_center_world)
    s = RigidTransform.from_translation(ph.la_center_world + [1.0, 2.0, 3.0])
    assert np.allclose(normalize_pose(s, t).translation, [1, 2, 3], atol=1e-12)


def test_record_round_trip_bit_exact():
    rng = np.random.default_rng(3)
    pose = random_transform(rng)
    pixels = rng.uniform(0, 1, (8, 12)).astype(np.float32)
    buf = encode_record(7, 11, pose, pixels)
    assert len(buf) == record_bytes(8, 12) == 8 + 96 + 4 * 96 + 4
    s = decode_record(buf, 8, 12)
    assert s.subject_id == 7 and s.sample_id == 11
    assert s.image.tobytes() == pixels.tobytes()
    assert s.pose_mesh.as_transform().to_flat().tobytes() == pose.to_flat().tobytes()


def test_record_layout_is_little_endian_and_checksummed():
    pose = RigidTransform.from_translation([1.0, 2.0, 3.0])
    buf = encode_record(1, 2, pose, np.full((2, 2), 0.5, dtype=np.float32))
    assert struct.unpack_from("<II", buf) == (1, 2)
    assert struct.unpack_from("<12d", buf, 8)[9:] == (1.0, 2.0, 3.0)
    assert struct.unpack_from("<4f", buf, 104) == (0.5,) * 4
    assert struct.unpack_from("<I", buf, len(buf) - 4)[0] == zlib.crc32(buf[:-4])
    corrupt = bytearray(buf)
    corrupt[110] ^= 0xFF
    with pytest.raises(FormatError, match="checksum"):
        decode_record(bytes(corrupt), 2, 2)


def test_header_layout():
    from icepose.dataset import encode_header

    buf = encode_header(64, 48, 10, 3)
    assert len(buf) == HEADER_BYTES and buf[:8] == MAGIC
    assert read_header(buf) == (64, 48, 10, 3)
    with pytest.raises(FormatError):
        read_header(b"NOTMAGIC" + buf[8:])


def test_manifest_counts_and_disjoint(small_dataset, small_config):
    m = small_dataset
    assert [m.split_size(s) for s in ("train", "val", "test")] == list(small_config.samples)
    assert [len(m.subject_ids(s)) for s in ("train", "val", "test")] == list(small_config.subjects)
    ids = [set(m.subject_ids(s)) for s in ("train", "val", "test")]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    m.validate()
    back = DatasetManifest.load(m.root)
    assert back.to_json() == m.to_json()
    json.loads((m.root / "manifest.json").read_text())


def test_manifest_validate_detects_truncation(small_config, tmp_path):
    cfg = replace(small_config, subjects=(1, 1, 1), samples=(4, 2, 2))
    m = build_dataset(cfg, tmp_path)
    path = m.root / m.splits["train"][0].file
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError):
        m.validate()


def test_desk_default_counts(tmp_path):
    m = build_dataset(DatasetConfig(), tmp_path)
    assert (m.split_size("train"), m.split_size("val"), m.split_size("test")) == (512, 64, 64)
    assert tuple(len(m.subject_ids(s)) for s in ("train", "val", "test")) == (16, 2, 2)
    ids = [set(m.subject_ids(s)) for s in ("train", "val", "test")]
    assert len(ids[0] | ids[1] | ids[2]) == 20
    images, pos, rot = load_batch(m, "train", range(16))
    assert images.shape == (16, 64, 64) and pos.shape == (16, 3) and rot.shape == (16, 6)


def test_regeneration_byte_identical(small_config, tmp_path):
    cfg = replace(small_config, subjects=(1, 1, 1), samples=(6, 3, 3))
    a = build_dataset(cfg, tmp_path / "a")
    b = build_dataset(cfg, tmp_path / "b")
    files = sorted(p.relative_to(a.root) for p in a.root.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b.root) for p in b.root.rglob("*") if p.is_file())
    for f in files:
        assert (a.root / f).read_bytes() == (b.root / f).read_bytes(), f
    c = build_dataset(replace(cfg, seed=cfg.seed + 1), tmp_path / "c")
    assert (c.root / files[-1]).read_bytes() != (a.root / files[-1]).read_bytes()


def test_stored_poses_round_trip_and_stay_bounded(small_dataset):
    m = small_dataset
    for split in ("train", "val", "test"):
        samples = load_samples(m, split, range(m.split_size(split)))
        for s in samples:
            t = m.mesh_transform(s.subject_id)
            pose = s.pose_mesh.as_transform()
            again = normalize_pose(denormalize_pose(pose, t), t)
            assert np.max(np.abs(again.to_flat() - pose.to_flat())) < 1e-9
            assert np.all(np.abs(s.pose_mesh.position) <= 1.5 * 60.0)
            assert orthonormality_error(s.pose_mesh.orientation) < 1e-9


def test_normalised_positions_centred_per_subject(small_dataset):
    m = small_dataset
    by_subject = {}
    for split in ("train", "val", "test"):
        for s in load_samples(m, split, range(m.split_size(split))):
            by_subject.setdefault(s.subject_id, []).append(s.pose_mesh.position)
    for sid, pts in by_subject.items():
        assert np.linalg.norm(np.mean(pts, axis=0)) <= 0.25 * 120.0, sid


def test_stored_phantoms_match_regeneration(small_dataset):
    m = small_dataset
    for sid in m.subjects:
        text = (m.root / "phantoms" / f"subject_{sid:04d}.cfg").read_text()
        stored = phantom_from_text(text)
        fresh = subject_phantom(m.config, sid)
        assert np.array_equal(stored.la.semi_axes, fresh.la.semi_axes)
        assert np.array_equal(stored.frame.translation, fresh.frame.translation)
        assert np.allclose(m.mesh_transform(sid).translation, fresh.la_center_world, atol=0)


def test_load_batch_contract(small_dataset):
    m = small_dataset
    a = load_batch(m, "train", [0, 5, 31])
    b = load_batch(m, "train", [0, 5, 31])
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()
    images, pos, rot = a
    assert images.dtype == np.float64 and images.min() >= 0 and images.max() <= 1
    for v in load_batch(m, "train", range(32))[2]:
        r = decode_rot6d(v)
        assert orthonormality_error(r) < 1e-9
    with pytest.raises(IndexError):
        load_batch(m, "train", [32])
    with pytest.raises(IndexError):
        load_batch(m, "val", [-1])


def test_load_detects_corrupt_record(small_config, tmp_path):
    cfg = replace(small_config, subjects=(1, 1, 1), samples=(3, 1, 1))
    m = build_dataset(cfg, tmp_path)
    path = m.root / m.splits["train"][0].file
    raw = bytearray(path.read_bytes())
    raw[HEADER_BYTES + record_bytes(64, 64) + 500] ^= 0x5A  # second record's pixels
    path.write_bytes(bytes(raw))
    load_batch(m, "train", [0])
    with pytest.raises(FormatError):
        load_batch(m, "train", [1])


def test_config_from_mapping():
    kv = {
        "seed": "9",
        "dataset.subjects": "3 1 1",
        "dataset.samples": "30 5 5",
        "fan.sector_angle": "75",
        "fan.ray_count": "64",
        "pose.roll_max": "90",
        "dataset.speckle": "0.1",
    }
    cfg = DatasetConfig.from_mapping(kv)
    assert cfg.seed == 9 and cfg.subjects == (3, 1, 1) and cfg.samples == (30, 5, 5)
    assert cfg.fan.sector_angle == 75.0 and cfg.fan.ray_count == 64 and cfg.pose.roll_max == 90.0
    assert DatasetConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ConfigError):
        DatasetConfig.from_mapping({"dataset.samples": "1 1"})
