"""Rigid-body pose algebra, 6D rotation encoding and pose error metrics.

Conventions: rotations act on column vectors, ``compose(a, b)`` applies ``b``
first, translations are in millimetres. The transducer frame's columns are
(lateral x, centerline y, plane normal z).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegeneracyError, DimensionError

ORTHO_TOL = 1e-9
_DRIFT_TOL = 1e-12


def _as_rotation(r) -> np.ndarray:
    r = np.array(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise DimensionError(f"rotation must be 3x3, got {r.shape}")
    return r


def orthonormality_error(r: np.ndarray) -> float:
    return float(np.max(np.abs(r.T @ r - np.eye(3))))


def is_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    return orthonormality_error(r) < tol and abs(np.linalg.det(r) - 1.0) < tol


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation in the Frobenius sense (SVD projection)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation (mm). Validated on construction."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _as_rotation(self.rotation)
        t = np.array(self.translation, dtype=np.float64)
        if t.shape != (3,):
            raise DimensionError(f"translation must be a 3-vector, got {t.shape}")
        if not is_rotation(r):
            raise ContractError(
                f"not a rotation: orthonormality error {orthonormality_error(r):.3e}, det {np.linalg.det(r):.12f}"
            )
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), t)

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise DimensionError(f"homogeneous matrix must be 4x4, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Map points of shape [..., 3] through the transform."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def to_flat(self) -> np.ndarray:
        """12 numbers: rotation row-major, then translation."""
        return np.concatenate([self.rotation.reshape(-1), self.translation])

    @classmethod
    def from_flat(cls, v) -> RigidTransform:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (12,):
            raise DimensionError(f"flat transform needs 12 values, got {v.shape}")
        return cls(v[:9].reshape(3, 3), v[9:])

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def __repr__(self) -> str:
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class Pose:
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        tf = RigidTransform(self.orientation, self.position)
        object.__setattr__(self, "position", tf.translation)
        object.__setattr__(self, "orientation", tf.rotation)

    @classmethod
    def from_transform(cls, t: RigidTransform) -> Pose:
        return cls(t.translation, t.rotation)

    def as_transform(self) -> RigidTransform:
        return RigidTransform(self.orientation, self.position)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a ∘ b: apply ``b`` then ``a``."""
    r = a.rotation @ b.rotation
    if orthonormality_error(r) > _DRIFT_TOL:
        r = project_to_rotation(r)
    return RigidTransform(r, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -(rt @ t.translation))


def normalize_pose(s_world: RigidTransform, t_world_to_mesh: RigidTransform) -> RigidTransform:
    """Express a world-frame transducer pose relative to the anatomy frame.

    ``t_world_to_mesh`` places the anatomy (LA-centred) frame in world
    coordinates; the result is ``inverse(t_world_to_mesh) ∘ s_world``.
    """
    return compose(invert(t_world_to_mesh), s_world)


def denormalize_pose(s_mesh: RigidTransform, t_world_to_mesh: RigidTransform) -> RigidTransform:
    return compose(t_world_to_mesh, s_mesh)


# --------------------------------------------------------------------------
# rotations


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    k = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(k)
    if n == 0.0:
        raise DegeneracyError("rotation axis is zero")
    k = k / n
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (normalised Gaussian quaternion)."""
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_transform(rng: np.random.Generator, max_translation: float = 100.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-max_translation, max_translation, 3))


def encode_rot6d(r) -> np.ndarray:
    """First two columns of ``r``, concatenated: (r00, r10, r20, r01, r11, r21)."""
    r = _as_rotation(r)
    return np.concatenate([r[:, 0], r[:, 1]])


def decode_rot6d(v) -> np.ndarray:
    """Gram-Schmidt the two 3-vectors in ``v`` into a proper rotation.

    Scale invariant in each half. Raises ``DegeneracyError`` when the first
    column is zero or the second is parallel to it.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (6,):
        raise DimensionError(f"6D rotation needs 6 values, got {v.shape}")
    c1, c2 = v[:3], v[3:]
    n1 = np.linalg.norm(c1)
    if not np.isfinite(n1) or n1 == 0.0:
        raise DegeneracyError("6D rotation: first column is zero")
    b1 = c1 / n1
    u = c2 - (b1 @ c2) * b1
    n2 = np.linalg.norm(u)
    if not n2 > 1e-12 * np.linalg.norm(c2):
        raise DegeneracyError("6D rotation: second column is zero or parallel to the first")
    b2 = u / n2
    return np.column_stack([b1, b2, np.cross(b1, b2)])


# --------------------------------------------------------------------------
# errors


def per_axis_orientation_error(r_pred, r_true) -> np.ndarray:
    """Angle in degrees between corresponding basis axes (columns) of two rotations."""
    a, b = _as_rotation(r_pred), _as_rotation(r_true)
    cos = np.clip(np.sum(a * b, axis=0), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def position_error(p_pred, p_true) -> float:
    """Euclidean distance in mm."""
    d = np.asarray(p_pred, dtype=np.float64) - np.asarray(p_true, dtype=np.float64)
    if d.shape != (3,):
        raise DimensionError(f"positions must be 3-vectors, got {d.shape}")
    return float(np.linalg.norm(d))
