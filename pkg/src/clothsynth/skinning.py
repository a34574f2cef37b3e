"""Linear blend skinning and closest-vertex binding transfer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .mesh import TriMesh, VertexGrid
from .skeleton import Pose, Skeleton, relative_bone_transforms

MAX_INFLUENCES = 4


class SkinningError(ValueError):
    pass


@dataclass
class BoneWeights:
    """Per-vertex sparse bone influences, at most 4 per vertex.

    Stored in a fixed-width layout (index, weight) so the skinning
    kernels can run without indirection. Unused slots carry weight 0.
    """

    indices: np.ndarray            # (V, 4) int32
    weights: np.ndarray            # (V, 4) float64, rows sum to 1

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int32)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.indices.shape != self.weights.shape or self.indices.shape[1] != MAX_INFLUENCES:
            raise SkinningError("weights must be (V, 4)")
        if np.any(self.weights < -1e-12):
            raise SkinningError("negative bone weight")
        sums = self.weights.sum(axis=1)
        if self.indices.size and np.max(np.abs(sums - 1.0)) > 1e-6:
            raise SkinningError("bone weights must sum to 1 per vertex")

    @property
    def n_vertices(self) -> int:
        return len(self.indices)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "BoneWeights":
        """Build from a (V, n_bones) dense matrix, keeping the 4 largest
        influences per vertex and renormalizing."""
        dense = np.asarray(dense, dtype=np.float64)
        v, _ = dense.shape
        take = min(MAX_INFLUENCES, dense.shape[1])
        top = np.argsort(-dense, axis=1, kind="stable")[:, :take]
        idx = np.zeros((v, MAX_INFLUENCES), dtype=np.int32)
        w = np.zeros((v, MAX_INFLUENCES), dtype=np.float64)
        idx[:, :take] = top
        w[:, :take] = np.take_along_axis(dense, top, axis=1)
        w[w < 0.0] = 0.0
        s = w.sum(axis=1)
        if np.any(s <= 0.0):
            raise SkinningError("vertex with no positive bone weight")
        return cls(idx, w / s[:, None])

    def to_dense(self, n_bones: int) -> np.ndarray:
        dense = np.zeros((self.n_vertices, n_bones))
        rows = np.repeat(np.arange(self.n_vertices), MAX_INFLUENCES)
        np.add.at(dense, (rows, self.indices.reshape(-1)), self.weights.reshape(-1))
        return dense


PARALLEL = False   # flipped by the benchmark harness / CLOTHSYNTH_THREADS


def apply_bone_transforms(positions: np.ndarray, weights: BoneWeights,
                          mats: np.ndarray) -> np.ndarray:
    """Skin positions with per-bone (3, 4) rigid matrices."""
    if weights.n_vertices != len(positions):
        raise SkinningError(
            f"weights cover {weights.n_vertices} vertices, mesh has {len(positions)}")
    out = np.empty_like(positions)
    kern = _kernels.lbs_apply_par if PARALLEL else _kernels.lbs_apply
    kern(positions, weights.indices, weights.weights, mats, out)
    return out


def lbs_deform(mesh: TriMesh, weights: BoneWeights, pose_from: Pose,
               pose_to: Pose, skeleton: Skeleton) -> TriMesh:
    """Transport a mesh rigged in pose_from rigidly into pose_to."""
    mats = relative_bone_transforms(skeleton, pose_from, pose_to)
    return mesh.with_positions(apply_bone_transforms(mesh.positions, weights, mats))


def transfer_bindings(garment_positions: np.ndarray, body: TriMesh,
                      body_weights: BoneWeights,
                      grid: Optional[VertexGrid] = None):
    """Binding information update: bind each garment vertex to its closest
    body vertex and inherit that vertex's bone weights.

    Returns (BoneWeights for the garment, bound body vertex indices,
    clearances along the bound vertex normals).
    """
    if grid is None:
        grid = VertexGrid(body)
    idx, _ = grid.query(np.asarray(garment_positions, dtype=np.float64))
    bound = idx.astype(np.int32)
    weights = BoneWeights(body_weights.indices[bound], body_weights.weights[bound])
    normals = body.vertex_normals()
    delta = garment_positions - body.positions[bound]
    clearance = np.einsum("ij,ij->i", delta, normals[bound])
    return weights, bound, clearance
