"""Real-time example-based garment deformation.

Factorizes cloth deformation into a pose-dependent stream (a pluggable
pose model at the reference shape) and shape-dependent per-anchor
deltas, recombined by skinning-transported first-order expansion around
precomputed anchor poses.
"""

from __future__ import annotations

import os

__version__ = "0.1.0"


def thread_budget() -> int:
    """Worker cap for offline builds, from CLOTHSYNTH_THREADS."""
    raw = os.environ.get("CLOTHSYNTH_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return n


from .mesh import (TriMesh, VertexGrid, closest_vertex, load_obj,  # noqa: E402
                   poncho_garment, save_obj, tube_garment)
from .skeleton import Pose, Skeleton, forward_kinematics  # noqa: E402
from .skinning import BoneWeights, lbs_deform  # noqa: E402
from .body import (BodyTemplate, ShapeParams, body_mesh, build_body_template,  # noqa: E402
                   garment_start_positions, shape_distance_field,
                   training_shapes)
from .sim import ClothMaterial, drape, residual_norm, simulate_sequence  # noqa: E402

__all__ = [
    "TriMesh", "VertexGrid", "closest_vertex", "load_obj", "save_obj",
    "poncho_garment", "tube_garment",
    "Pose", "Skeleton", "forward_kinematics",
    "BoneWeights", "lbs_deform",
    "BodyTemplate", "ShapeParams", "body_mesh", "build_body_template",
    "garment_start_positions", "shape_distance_field", "training_shapes",
    "ClothMaterial", "drape", "residual_norm", "simulate_sequence",
    "thread_budget",
]
