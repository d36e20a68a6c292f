"""Synthetic (image, pose) dataset: generation, binary records, manifest, loading.

On-disk layout of a dataset directory::

    manifest.json           splits, generation config, per-subject frames
    subject_0000.bin        one record file per subject
    phantoms/subject_0000.cfg   drawn phantom parameters (key = value)

Record file: a 64-byte header ``<8s I I I I I`` = (b"ICEPOSE1", version, H,
W, record count, subject id) zero-padded to 64 bytes, followed by records of
``<I I`` (subject id, sample id), 12 little-endian f64 (pose rotation
row-major then translation, anatomy frame), H*W little-endian f32 pixels
(row-major) and a CRC32 (u32) of all preceding bytes of the record.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import to_floats, to_int
from .errors import ConfigError, ContractError, FormatError
from .fan import FanGeometry, render_fan
from .geometry import Pose, RigidTransform, axis_angle, compose, encode_rot6d, normalize_pose
from .phantom import AnatomyPhantom, ParamRanges, generate_phantom, la_sdf, phantom_to_text

MAGIC = b"ICEPOSE1"
FORMAT_VERSION = 1
HEADER_BYTES = 64
_HEADER = struct.Struct("<8sIIIII")
_RECORD_HEAD = struct.Struct("<II12d")
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")


def record_bytes(h: int, w: int) -> int:
    return _RECORD_HEAD.size + 4 * h * w + 4


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray  # float32 [H, W]
    pose_mesh: Pose
    subject_id: int
    sample_id: int


# --------------------------------------------------------------------------
# pose sampling


@dataclass(frozen=True)
class PoseBounds:
    shell_inner: float = 10.0  # mm inside the LA surface
    shell_outer: float = 30.0  # mm outside the LA surface
    min_aim_distance: float = 5.0  # target must be at least this far from the apex
    roll_min: float = 0.0  # degrees, roll about the centerline
    roll_max: float = 360.0

    def validate(self) -> None:
        if self.shell_inner < 0 or self.shell_outer <= 0 or self.min_aim_distance < 0:
            raise ConfigError("pose bounds must be non-negative (outer > 0)")
        if self.roll_min > self.roll_max:
            raise ConfigError("roll range is degenerate (min > max)")


def _uniform_in_ellipsoid(rng: np.random.Generator, semi_axes: np.ndarray) -> np.ndarray:
    while True:
        q = rng.uniform(-1.0, 1.0, 3)
        if q @ q <= 1.0:
            return q * semi_axes


def aim_rotation(direction: np.ndarray, roll: float) -> np.ndarray:
    """Rotation whose +y column is ``direction``, rolled by ``roll`` radians about it."""
    y = direction / np.linalg.norm(direction)
    ref = np.array([0.0, 0.0, 1.0]) if abs(y[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(y, ref)
    x /= np.linalg.norm(x)
    z = np.cross(x, y)
    return axis_angle(y, roll) @ np.column_stack([x, y, z])


def sample_pose(
    rng: np.random.Generator, phantom: AnatomyPhantom, bounds: PoseBounds | None = None
) -> RigidTransform:
    """World-frame transducer pose in the shell around the LA, aimed into the LA.

    The position is uniform (by rejection) over the set where the LA signed
    distance lies in [-shell_inner, shell_outer]; the centerline points at a
    point uniform inside the LA; the roll about the centerline is uniform
    over [roll_min, roll_max] degrees.
    """
    bounds = bounds or PoseBounds()
    semi = phantom.la.semi_axes
    reach = float(np.max(semi)) + 1.5 * bounds.shell_outer
    identity_frame = replace(phantom, frame=RigidTransform.identity())
    while True:
        p = phantom.la.center + rng.uniform(-reach, reach, 3)
        if -bounds.shell_inner <= la_sdf(identity_frame, p) <= bounds.shell_outer:
            break
    while True:
        target = phantom.la.center + _uniform_in_ellipsoid(rng, semi)
        if np.linalg.norm(target - p) >= max(bounds.min_aim_distance, 1e-6):
            break
    roll = np.radians(rng.uniform(bounds.roll_min, bounds.roll_max))
    local = RigidTransform(aim_rotation(target - p, roll), p)
    return compose(phantom.frame, local)


def mesh_frame(phantom: AnatomyPhantom, rotational: bool = False) -> RigidTransform:
    """Anatomy frame in world coordinates: translation to the LA centre (rotation optional)."""
    rot = phantom.frame.rotation if rotational else np.eye(3)
    return RigidTransform(rot, phantom.la_center_world)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 0
    subjects: tuple[int, int, int] = (16, 2, 2)
    samples: tuple[int, int, int] = (512, 64, 64)
    fan: FanGeometry = field(default_factory=FanGeometry)
    patch: int = 16
    phantom: ParamRanges = field(default_factory=ParamRanges)
    pose: PoseBounds = field(default_factory=PoseBounds)
    speckle: float = 0.15
    rotational_alignment: bool = False

    def validate(self) -> None:
        self.fan.check_patch(self.patch)
        self.phantom.validate()
        self.pose.validate()
        for name, n_subj, n_samp in zip(SPLITS, self.subjects, self.samples):
            if n_subj < 1 or n_samp < n_subj:
                raise ConfigError(f"{name}: need >= 1 subject and at least one sample per subject")

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> DatasetConfig:
        base = cls()
        fan_kw = {}
        for f in fields(FanGeometry):
            key = f"fan.{f.name}"
            if key in kv:
                fan_kw[f.name] = to_int(kv[key], key) if f.type in (int, "int") else to_floats(kv[key], 1, key)[0]
        pose_kw = {}
        for f in fields(PoseBounds):
            key = f"pose.{f.name}"
            if key in kv:
                pose_kw[f.name] = to_floats(kv[key], 1, key)[0]

        def triple(key, default):
            if key not in kv:
                return default
            return tuple(int(v) for v in to_floats(kv[key], 3, key))

        out = cls(
            seed=to_int(kv.get("seed", str(base.seed)), "seed"),
            subjects=triple("dataset.subjects", base.subjects),
            samples=triple("dataset.samples", base.samples),
            fan=replace(base.fan, **fan_kw),
            patch=to_int(kv.get("model.patch", str(base.patch)), "model.patch"),
            phantom=ParamRanges.from_mapping(kv),
            pose=replace(base.pose, **pose_kw),
            speckle=to_floats(kv.get("dataset.speckle", str(base.speckle)), 1, "dataset.speckle")[0],
            rotational_alignment=kv.get("dataset.rotational_alignment", "false").strip().lower() in ("1", "true", "yes"),
        )
        out.validate()
        return out

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> DatasetConfig:
        return cls(
            seed=d["seed"],
            subjects=tuple(d["subjects"]),
            samples=tuple(d["samples"]),
            fan=FanGeometry(**d["fan"]),
            patch=d["patch"],
            phantom=ParamRanges(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["phantom"].items()}),
            pose=PoseBounds(**d["pose"]),
            speckle=d["speckle"],
            rotational_alignment=d["rotational_alignment"],
        )


def subject_seed(master: int, subject_id: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([master, subject_id, stream]).generate_state(1)[0])


def subject_phantom(config: DatasetConfig, subject_id: int) -> AnatomyPhantom:
    return generate_phantom(subject_seed(config.seed, subject_id), config.phantom)


def _split_counts(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


# --------------------------------------------------------------------------
# manifest


@dataclass
class SplitEntry:
    subject_id: int
    file: str
    offsets: list[int]


@dataclass
class DatasetManifest:
    root: Path
    image_shape: tuple[int, int]
    splits: dict[str, list[SplitEntry]]
    subjects: dict[int, dict]
    config: DatasetConfig
    format_version: int = FORMAT_VERSION

    def split_size(self, split: str) -> int:
        return sum(len(e.offsets) for e in self._entries(split))

    def _entries(self, split: str) -> list[SplitEntry]:
        if split not in self.splits:
            raise ContractError(f"unknown split {split!r}; expected one of {sorted(self.splits)}")
        return self.splits[split]

    def records(self, split: str) -> list[tuple[int, Path, int]]:
        """Flat (subject id, file path, byte offset) list, in split order."""
        return [(e.subject_id, self.root / e.file, off) for e in self._entries(split) for off in e.offsets]

    def subject_ids(self, split: str) -> list[int]:
        return [e.subject_id for e in self._entries(split)]

    def mesh_transform(self, subject_id: int) -> RigidTransform:
        return RigidTransform.from_flat(self.subjects[subject_id]["t_world_to_mesh"])

    def phantom(self, subject_id: int) -> AnatomyPhantom:
        return subject_phantom(self.config, subject_id)

    def to_json(self) -> dict:
        return {
            "format": "icepose-manifest",
            "format_version": self.format_version,
            "image_shape": list(self.image_shape),
            "record_bytes": record_bytes(*self.image_shape),
            "config": self.config.to_json(),
            "subjects": {str(k): v for k, v in sorted(self.subjects.items())},
            "splits": {
                name: [asdict(e) for e in entries] for name, entries in self.splits.items()
            },
        }

    def save(self) -> Path:
        path = self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read manifest {path}: {exc}") from None
        if d.get("format") != "icepose-manifest" or d.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"{path}: not a version-{FORMAT_VERSION} icepose manifest")
        return cls(
            root=path.parent,
            image_shape=tuple(d["image_shape"]),
            splits={k: [SplitEntry(**e) for e in v] for k, v in d["splits"].items()},
            subjects={int(k): v for k, v in d["subjects"].items()},
            config=DatasetConfig.from_json(d["config"]),
        )

    def validate(self) -> None:
        """Check subject disjointness and that every referenced record exists and decodes."""
        seen: dict[int, str] = {}
        for name, entries in self.splits.items():
            for e in entries:
                if e.subject_id in seen:
                    raise FormatError(f"subject {e.subject_id} appears in splits {seen[e.subject_id]} and {name}")
                seen[e.subject_id] = name
                with open(self.root / e.file, "rb") as fh:
                    h, w, count, sid = read_header(fh.read(HEADER_BYTES))
                if count != len(e.offsets) or sid != e.subject_id or (h, w) != tuple(self.image_shape):
                    raise FormatError(f"{e.file}: header does not match manifest")
                rec = record_bytes(h, w)
                size = (self.root / e.file).stat().st_size
                if size != HEADER_BYTES + count * rec or e.offsets != [HEADER_BYTES + k * rec for k in range(count)]:
                    raise FormatError(f"{e.file}: {size} bytes on disk, manifest expects {count} records")
                for k, off in enumerate(e.offsets):
                    s = read_record(self.root / e.file, off, h, w)
                    if (s.subject_id, s.sample_id) != (e.subject_id, k):
                        raise FormatError(f"{e.file}: record {k} is labelled {s.subject_id}/{s.sample_id}")


# --------------------------------------------------------------------------
# records


def encode_record(subject_id: int, sample_id: int, pose: RigidTransform, pixels: np.ndarray) -> bytes:
    body = _RECORD_HEAD.pack(subject_id, sample_id, *pose.to_flat()) + np.asarray(pixels, dtype="<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_record(buf: bytes, h: int, w: int) -> Sample:
    if len(buf) != record_bytes(h, w):
        raise FormatError(f"record has {len(buf)} bytes, expected {record_bytes(h, w)}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("record checksum mismatch")
    head = _RECORD_HEAD.unpack_from(body)
    pixels = np.frombuffer(body, dtype="<f4", offset=_RECORD_HEAD.size).reshape(h, w).astype(np.float32)
    try:
        pose = Pose.from_transform(RigidTransform.from_flat(np.array(head[2:])))
    except ValueError as exc:
        raise FormatError(f"record pose invalid: {exc}") from None
    return Sample(pixels, pose, head[0], head[1])


def encode_header(h: int, w: int, count: int, subject_id: int) -> bytes:
    return _HEADER.pack(MAGIC, FORMAT_VERSION, h, w, count, subject_id).ljust(HEADER_BYTES, b"\0")


def read_header(buf: bytes) -> tuple[int, int, int, int]:
    if len(buf) != HEADER_BYTES:
        raise FormatError("truncated record-file header")
    magic, version, h, w, count, sid = _HEADER.unpack_from(buf)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise FormatError("bad record-file magic or version")
    return h, w, count, sid


def read_record(path: Path, offset: int, h: int, w: int) -> Sample:
    with open(path, "rb") as fh:
        fh.seek(offset)
        return decode_record(fh.read(record_bytes(h, w)), h, w)


# --------------------------------------------------------------------------
# generation


def generate_subject(config: DatasetConfig, subject_id: int, n_samples: int) -> tuple[AnatomyPhantom, list[Sample], RigidTransform]:
    phantom = subject_phantom(config, subject_id)
    t_mesh = mesh_frame(phantom, config.rotational_alignment)
    rng = np.random.default_rng(subject_seed(config.seed, subject_id, 1))
    samples = []
    for k in range(n_samples):
        pose_world = sample_pose(rng, phantom, config.pose)
        img = render_fan(
            phantom,
            pose_world,
            config.fan,
            noise_seed=subject_seed(config.seed, subject_id, 2 + k),
            speckle=config.speckle,
            patch=config.patch,
        )
        pose_mesh = Pose.from_transform(normalize_pose(pose_world, t_mesh))
        samples.append(Sample(img.pixels.astype(np.float32), pose_mesh, subject_id, k))
    return phantom, samples, t_mesh


def build_dataset(config: DatasetConfig, out_dir: str | Path) -> DatasetManifest:
    """Generate every subject, write record files and the manifest into ``out_dir``."""
    config.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "phantoms").mkdir(exist_ok=True)
    h, w = config.fan.image_h, config.fan.image_w
    rec = record_bytes(h, w)

    splits: dict[str, list[SplitEntry]] = {}
    subjects: dict[int, dict] = {}
    subject_id = 0
    for name, n_subj, n_samp in zip(SPLITS, config.subjects, config.samples):
        entries = []
        for n in _split_counts(n_samp, n_subj):
            phantom, samples, t_mesh = generate_subject(config, subject_id, n)
            fname = f"subject_{subject_id:04d}.bin"
            with open(root / fname, "wb") as fh:
                fh.write(encode_header(h, w, n, subject_id))
                for s in samples:
                    fh.write(encode_record(s.subject_id, s.sample_id, s.pose_mesh.as_transform(), s.image))
            (root / "phantoms" / f"subject_{subject_id:04d}.cfg").write_text(phantom_to_text(phantom))
            entries.append(SplitEntry(subject_id, fname, [HEADER_BYTES + k * rec for k in range(n)]))
            subjects[subject_id] = {
                "split": name,
                "file": fname,
                "phantom_seed": phantom.seed,
                "t_world_to_mesh": t_mesh.to_flat().tolist(),
            }
            subject_id += 1
        splits[name] = entries

    manifest = DatasetManifest(root, (h, w), splits, subjects, config)
    manifest.save()
    return manifest


# --------------------------------------------------------------------------
# loading


def load_samples(manifest: DatasetManifest, split: str, indices: Sequence[int]) -> list[Sample]:
    records = manifest.records(split)
    h, w = manifest.image_shape
    out = []
    for i in indices:
        i = int(i)
        if not 0 <= i < len(records):
            raise IndexError(f"index {i} out of range for split {split!r} of size {len(records)}")
        _, path, offset = records[i]
        out.append(read_record(path, offset, h, w))
    return out


def load_batch(
    manifest: DatasetManifest, split: str, indices: Sequence[int]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(images [B, H, W], positions [B, 3] mm, Rot6D targets [B, 6]) as float64 arrays."""
    samples = load_samples(manifest, split, indices)
    images = np.stack([s.image for s in samples]).astype(np.float64)
    positions = np.stack([s.pose_mesh.position for s in samples])
    rot6d = np.stack([encode_rot6d(s.pose_mesh.orientation) for s in samples])
    return images, positions, rot6d


def load_split(manifest: DatasetManifest, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return load_batch(manifest, split, range(manifest.split_size(split)))
