"""Skeletons, poses and forward kinematics.

Joint rotations are kept in two synchronized forms: unit quaternions
(x, y, z, w order, w >= 0) and intrinsic XYZ Euler DOF angles wrapped to
[-pi, pi]. Distances between poses are computed per DOF on the wrapped
Euler angles; clustering uses the quaternions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

TWO_PI = 2.0 * np.pi


def wrap_angles(a: np.ndarray) -> np.ndarray:
    """Wrap angles (radians) to [-pi, pi]."""
    return np.mod(np.asarray(a, dtype=np.float64) + np.pi, TWO_PI) - np.pi


def canonical_quats(q: np.ndarray) -> np.ndarray:
    """Flip quaternion signs so the scalar part is non-negative."""
    q = np.array(q, dtype=np.float64)
    flip = q[..., 3] < 0.0
    q[flip] *= -1.0
    return q


@dataclass(frozen=True)
class Skeleton:
    """Joint hierarchy in topological order (parents precede children)."""

    names: tuple[str, ...]
    parents: np.ndarray            # (J,) int32, -1 for the root
    offsets: np.ndarray            # (J, 3) rest offset from parent, meters

    def __post_init__(self):
        object.__setattr__(self, "parents",
                           np.ascontiguousarray(self.parents, dtype=np.int32))
        object.__setattr__(self, "offsets",
                           np.ascontiguousarray(self.offsets, dtype=np.float64))
        if len(self.names) != len(self.parents):
            raise ValueError("names and parents length mismatch")
        roots = int((self.parents < 0).sum())
        if roots != 1:
            raise ValueError(f"exactly one root required, found {roots}")
        for i, p in enumerate(self.parents):
            if p >= i:
                raise ValueError("parents must precede children")

    @property
    def n_joints(self) -> int:
        return len(self.names)

    @property
    def n_dofs(self) -> int:
        return 3 * len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def rest_joint_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for j in range(self.n_joints):
            p = self.parents[j]
            pos[j] = self.offsets[j] if p < 0 else pos[p] + self.offsets[j]
        return pos


class Pose:
    """Per-joint rotations; 3 DOF per joint, 3*N_L total.

    Immutable. Construct via from_dofs or from_quats.
    """

    __slots__ = ("dofs", "quats")

    def __init__(self, dofs: np.ndarray, quats: np.ndarray):
        self.dofs = np.ascontiguousarray(dofs, dtype=np.float64)
        self.quats = np.ascontiguousarray(quats, dtype=np.float64)
        if self.dofs.shape != (len(self.quats), 3) or self.quats.shape[1] != 4:
            raise ValueError("pose shape mismatch")

    @classmethod
    def from_dofs(cls, dofs: np.ndarray) -> "Pose":
        dofs = wrap_angles(np.asarray(dofs, dtype=np.float64).reshape(-1, 3))
        quats = canonical_quats(Rotation.from_euler("XYZ", dofs).as_quat())
        return cls(dofs, quats)

    @classmethod
    def from_quats(cls, quats: np.ndarray) -> "Pose":
        quats = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
        norms = np.linalg.norm(quats, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ValueError("zero-norm quaternion")
        quats = canonical_quats(quats / norms)
        dofs = wrap_angles(Rotation.from_quat(quats).as_euler("XYZ"))
        return cls(dofs, quats)

    @classmethod
    def identity(cls, n_joints: int) -> "Pose":
        q = np.zeros((n_joints, 4))
        q[:, 3] = 1.0
        return cls(np.zeros((n_joints, 3)), q)

    @property
    def n_joints(self) -> int:
        return len(self.quats)

    def dof_vector(self) -> np.ndarray:
        return self.dofs.reshape(-1)

    def rotation_distance(self, other: "Pose") -> float:
        """Max angular difference over joints, radians."""
        r = Rotation.from_quat(self.quats) * Rotation.from_quat(other.quats).inv()
        return float(np.max(r.magnitude())) if self.n_joints else 0.0

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.quats, other.quats)

    def __hash__(self):
        return hash(self.quats.tobytes())


def dof_difference(a: Pose, b: Pose) -> np.ndarray:
    """Per-DOF wrapped angle difference a - b, flat (3*N_L,)."""
    return wrap_angles(a.dof_vector() - b.dof_vector())


def forward_kinematics(skeleton: Skeleton, pose: Pose):
    """Global joint transforms (rotations (J,3,3), positions (J,3))."""
    if pose.n_joints != skeleton.n_joints:
        raise ValueError(
            f"pose has {pose.n_joints} joints, skeleton {skeleton.n_joints}")
    local = Rotation.from_quat(pose.quats).as_matrix()
    rot = np.empty_like(local)
    pos = np.empty((skeleton.n_joints, 3))
    for j in range(skeleton.n_joints):
        p = skeleton.parents[j]
        if p < 0:
            rot[j] = local[j]
            pos[j] = skeleton.offsets[j]
        else:
            rot[j] = rot[p] @ local[j]
            pos[j] = pos[p] + rot[p] @ skeleton.offsets[j]
    return rot, pos


def relative_bone_transforms(skeleton: Skeleton, pose_from: Pose,
                             pose_to: Pose) -> np.ndarray:
    """Per-bone rigid transport between two poses as (J, 3, 4) matrices.

    Applying the bone-b matrix to a point expressed in pose_from space
    moves it rigidly with bone b into pose_to space.
    """
    r0, p0 = forward_kinematics(skeleton, pose_from)
    r1, p1 = forward_kinematics(skeleton, pose_to)
    rel_r = np.einsum("jab,jcb->jac", r1, r0)
    rel_t = p1 - np.einsum("jab,jb->ja", rel_r, p0)
    mats = np.empty((skeleton.n_joints, 3, 4))
    mats[:, :, :3] = rel_r
    mats[:, :, 3] = rel_t
    return np.ascontiguousarray(mats)
