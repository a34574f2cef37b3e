"""Procedural parametric body: capsule-built template, 4 shape axes, LBS posing.

The template surface is extracted once by marching cubes over a union of
per-bone capsules, so the mesh is a single watertight surface with
outward normals. Shape variation is four per-vertex offset fields
(height, girth, torso-vs-limb girth trade, shoulder width) applied
before posing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from skimage import measure

from .mesh import TriMesh
from .skeleton import Pose, Skeleton
from .skinning import BoneWeights, apply_bone_transforms
from .skeleton import relative_bone_transforms

N_SHAPE_PARAMS = 4
SHAPE_CLAMP = 3.0

# offset field gains, meters per unit beta
HEIGHT_GAIN = 0.05          # fraction of z, so +-2 is +-10% height
GIRTH_GAIN = 0.012          # radial, everywhere
TRADE_TORSO_GAIN = 0.010    # radial, torso only
TRADE_LIMB_GAIN = -0.008    # radial, limbs only
SHOULDER_GAIN = 0.035       # lateral shift of the shoulder/arm band
WEIGHT_BLEND_WIDTH = 0.05   # capsule membership blend distance, meters


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeParams:
    """4 body shape coefficients, nominal range [-2, 2]."""

    beta: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if b.shape != (N_SHAPE_PARAMS,):
            raise ShapeError(f"expected {N_SHAPE_PARAMS} shape coefficients")
        if not np.all(np.isfinite(b)):
            raise ShapeError("shape coefficients must be finite")
        if np.any(np.abs(b) > SHAPE_CLAMP):
            warnings.warn(f"shape coefficients clamped to [-{SHAPE_CLAMP}, {SHAPE_CLAMP}]",
                          stacklevel=2)
            b = np.clip(b, -SHAPE_CLAMP, SHAPE_CLAMP)
        object.__setattr__(self, "beta", b)

    @classmethod
    def zeros(cls) -> "ShapeParams":
        return cls(np.zeros(N_SHAPE_PARAMS))

    def __eq__(self, other):
        if not isinstance(other, ShapeParams):
            return NotImplemented
        return np.array_equal(self.beta, other.beta)

    def __hash__(self):
        return hash(self.beta.tobytes())


def training_shapes() -> list[ShapeParams]:
    """The 17 training shapes: per axis k, beta_k in {-2,-1,1,2} with the
    rest zero; the nominal all-zero shape comes last."""
    shapes = []
    for k in range(N_SHAPE_PARAMS):
        for v in (-2.0, -1.0, 1.0, 2.0):
            b = np.zeros(N_SHAPE_PARAMS)
            b[k] = v
            shapes.append(ShapeParams(b))
    shapes.append(ShapeParams.zeros())
    return shapes


# ---------------------------------------------------------------------------
# Template construction

# joint table: name, parent name (or None), T-pose world position
_JOINTS = [
    ("root",       None,         (0.00, 0.0, 1.00)),
    ("spine1",     "root",       (0.00, 0.0, 1.12)),
    ("spine2",     "spine1",     (0.00, 0.0, 1.24)),
    ("spine3",     "spine2",     (0.00, 0.0, 1.36)),
    ("neck",       "spine3",     (0.00, 0.0, 1.46)),
    ("head",       "neck",       (0.00, 0.0, 1.64)),
    ("shoulder_l", "spine3",     (0.17, 0.0, 1.42)),
    ("elbow_l",    "shoulder_l", (0.45, 0.0, 1.42)),
    ("wrist_l",    "elbow_l",    (0.70, 0.0, 1.42)),
    ("shoulder_r", "spine3",     (-0.17, 0.0, 1.42)),
    ("elbow_r",    "shoulder_r", (-0.45, 0.0, 1.42)),
    ("wrist_r",    "elbow_r",    (-0.70, 0.0, 1.42)),
    ("hip_l",      "root",       (0.09, 0.0, 0.96)),
    ("knee_l",     "hip_l",      (0.09, 0.0, 0.54)),
    ("ankle_l",    "knee_l",     (0.09, 0.0, 0.12)),
    ("hip_r",      "root",       (-0.09, 0.0, 0.96)),
    ("knee_r",     "hip_r",      (-0.09, 0.0, 0.54)),
    ("ankle_r",    "knee_r",     (-0.09, 0.0, 0.12)),
]

# surface capsules: (bone name, p0, p1, radius); bones may own several.
# segments may extend past the joints so the union welds into one body
_CAPSULES = [
    ("root",       (0.00, 0.0, 0.94), (0.00, 0.0, 1.06), 0.115),
    ("spine1",     (0.00, 0.0, 1.06), (0.00, 0.0, 1.18), 0.095),
    ("spine2",     (0.00, 0.0, 1.18), (0.00, 0.0, 1.30), 0.100),
    ("spine3",     (0.00, 0.0, 1.28), (0.00, 0.0, 1.36), 0.110),
    # the clavicle bar caps the chest with a near-horizontal shelf, the
    # way real shoulders do; without it the torso capsule ends in a
    # steep dome right where a collar needs support
    ("spine3",     (-0.12, 0.0, 1.43), (0.12, 0.0, 1.43), 0.055),
    ("neck",       (0.00, 0.0, 1.42), (0.00, 0.0, 1.56), 0.045),
    ("head",       (0.00, 0.0, 1.64), (0.00, 0.0, 1.72), 0.085),
    ("shoulder_l", (0.08, 0.0, 1.41), (0.45, 0.0, 1.42), 0.042),
    ("elbow_l",    (0.45, 0.0, 1.42), (0.70, 0.0, 1.42), 0.035),
    ("wrist_l",    (0.70, 0.0, 1.42), (0.80, 0.0, 1.42), 0.032),
    ("shoulder_r", (-0.08, 0.0, 1.41), (-0.45, 0.0, 1.42), 0.042),
    ("elbow_r",    (-0.45, 0.0, 1.42), (-0.70, 0.0, 1.42), 0.035),
    ("wrist_r",    (-0.70, 0.0, 1.42), (-0.80, 0.0, 1.42), 0.032),
    ("hip_l",      (0.09, 0.0, 0.96), (0.09, 0.0, 0.54), 0.072),
    ("knee_l",     (0.09, 0.0, 0.54), (0.09, 0.0, 0.12), 0.052),
    ("ankle_l",    (0.09, 0.0, 0.10), (0.09, 0.14, 0.06), 0.038),
    ("hip_r",      (-0.09, 0.0, 0.96), (-0.09, 0.0, 0.54), 0.072),
    ("knee_r",     (-0.09, 0.0, 0.54), (-0.09, 0.0, 0.12), 0.052),
    ("ankle_r",    (-0.09, 0.0, 0.10), (-0.09, 0.14, 0.06), 0.038),
]

TORSO_BONES = ("root", "spine1", "spine2", "spine3", "neck", "head")


@dataclass(frozen=True)
class BodyTemplate:
    """T-pose template mesh, skeleton, skin weights and 4 offset fields."""

    mesh: TriMesh
    skeleton: Skeleton
    weights: BoneWeights
    shape_offsets: np.ndarray      # (4, V, 3) meters per unit beta

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices


def _build_skeleton() -> Skeleton:
    names = tuple(j[0] for j in _JOINTS)
    index = {n: i for i, n in enumerate(names)}
    parents = np.array([-1 if j[1] is None else index[j[1]] for j in _JOINTS],
                       dtype=np.int32)
    world = np.array([j[2] for j in _JOINTS])
    offsets = np.empty_like(world)
    for i, p in enumerate(parents):
        offsets[i] = world[i] if p < 0 else world[i] - world[p]
    return Skeleton(names, parents, offsets)


def _capsule_geometry(points: np.ndarray):
    """Distance to each capsule axis segment (N, n_caps) and the unit
    radial direction off each axis (N, n_caps, 3)."""
    n = len(points)
    dists = np.empty((n, len(_CAPSULES)))
    units = np.empty((n, len(_CAPSULES), 3))
    for c, (_, p0, p1, _r) in enumerate(_CAPSULES):
        a = np.asarray(p0)
        d = np.asarray(p1) - a
        dd = float(d @ d)
        t = np.clip(((points - a) @ d) / dd, 0.0, 1.0) if dd > 0 else np.zeros(n)
        v = points - (a + t[:, None] * d)
        ln = np.maximum(np.linalg.norm(v, axis=1), 1e-12)
        dists[:, c] = ln
        units[:, c] = v / ln[:, None]
    return dists, units


def _segment_distances(points: np.ndarray) -> np.ndarray:
    """Distance from each point to each capsule axis segment, (N, n_caps)."""
    return _capsule_geometry(points)[0]


def _capsule_sdf(points: np.ndarray) -> np.ndarray:
    radii = np.array([c[3] for c in _CAPSULES])
    return (_segment_distances(points) - radii).min(axis=1)


def _offset_basis(points: np.ndarray):
    """Per-point ingredients for the radial shape offsets.

    Radial direction, torso fraction, and neck/head damping are all
    blended by soft capsule membership. A hard nearest-capsule switch
    would tear the warp at junctions (crotch, clavicle to shoulder)
    where the direction flips or the torso and limb gains disagree.

    Returns (radial (N, 3), torso_frac (N,), keep (N,)).
    """
    dists, units = _capsule_geometry(points)
    surf = dists - np.array([c[3] for c in _CAPSULES])
    raw = np.clip(1.0 - (surf - surf.min(axis=1, keepdims=True))
                  / WEIGHT_BLEND_WIDTH, 0.0, None)
    wsum = raw.sum(axis=1)
    torso_idx = [i for i, c in enumerate(_CAPSULES) if c[0] in TORSO_BONES]
    nh_idx = [i for i, c in enumerate(_CAPSULES) if c[0] in ("neck", "head")]
    torso_frac = raw[:, torso_idx].sum(axis=1) / wsum
    keep = 1.0 - raw[:, nh_idx].sum(axis=1) / wsum
    radial = np.einsum("nc,ncd->nd", raw, units)
    ln = np.maximum(np.linalg.norm(radial, axis=1), 1e-12)
    return radial / ln[:, None], torso_frac, keep


def _smoothstep(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    t = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _paint_weights(points: np.ndarray) -> BoneWeights:
    """Capsule-membership weights with smooth blending near boundaries."""
    surf = _segment_distances(points) - np.array([c[3] for c in _CAPSULES])
    best = surf.min(axis=1, keepdims=True)
    cap_raw = np.clip(1.0 - (surf - best) / WEIGHT_BLEND_WIDTH, 0.0, None)
    # a bone may own several capsules; its weight is the strongest of them
    names = [j[0] for j in _JOINTS]
    raw = np.zeros((len(points), len(names)))
    for c, cap in enumerate(_CAPSULES):
        b = names.index(cap[0])
        np.maximum(raw[:, b], cap_raw[:, c], out=raw[:, b])
    return BoneWeights.from_dense(raw)


def _shape_offset_fields(points: np.ndarray) -> np.ndarray:
    # neck and head keep their size across the radial axes so collar
    # openings fit every body the same way
    radial, torso_frac, keep = _offset_basis(points)
    trade = TRADE_TORSO_GAIN * torso_frac + TRADE_LIMB_GAIN * (1.0 - torso_frac)

    offsets = np.zeros((N_SHAPE_PARAMS, len(points), 3))
    offsets[0, :, 2] = HEIGHT_GAIN * points[:, 2]
    offsets[1] = GIRTH_GAIN * radial * keep[:, None]
    offsets[2] = trade[:, None] * radial * keep[:, None]
    band = _smoothstep(np.abs(points[:, 0]), 0.04, 0.16)
    offsets[3, :, 0] = SHOULDER_GAIN * band * np.sign(points[:, 0]) * keep
    return offsets


def build_body_template(voxel: float = 0.022) -> BodyTemplate:
    """Extract the template surface and derive weights and offset fields.

    voxel sets the marching-cubes resolution; the default lands near 4k
    vertices. Deterministic for a fixed voxel size.
    """
    pts = np.array([c[1] for c in _CAPSULES] + [c[2] for c in _CAPSULES])
    radii = np.array([c[3] for c in _CAPSULES] * 2)
    lo = (pts - radii[:, None]).min(axis=0) - 2 * voxel
    hi = (pts + radii[:, None]).max(axis=0) + 2 * voxel
    dims = np.ceil((hi - lo) / voxel).astype(int) + 1
    grid = np.stack(np.meshgrid(
        lo[0] + voxel * np.arange(dims[0]),
        lo[1] + voxel * np.arange(dims[1]),
        lo[2] + voxel * np.arange(dims[2]), indexing="ij"), axis=-1)
    sdf = _capsule_sdf(grid.reshape(-1, 3)).reshape(grid.shape[:3])
    verts, faces, _normals, _vals = measure.marching_cubes(
        sdf, level=0.0, spacing=(voxel, voxel, voxel))
    verts = verts + lo

    # drop degenerate faces so downstream normal math is safe
    p = verts
    areas = np.linalg.norm(np.cross(p[faces[:, 1]] - p[faces[:, 0]],
                                    p[faces[:, 2]] - p[faces[:, 0]]), axis=1)
    faces = faces[areas > 1e-14]

    mesh = TriMesh(verts, faces.astype(np.int32))
    # orient outward: signed volume of a closed surface should be positive
    vol = np.einsum("ij,ij->", np.cross(p[mesh.triangles[:, 0]],
                                        p[mesh.triangles[:, 1]]),
                    p[mesh.triangles[:, 2]]) / 6.0
    if vol < 0:
        mesh = TriMesh(verts, mesh.triangles[:, [0, 2, 1]])

    skeleton = _build_skeleton()
    weights = _paint_weights(mesh.positions)
    offsets = _shape_offset_fields(mesh.positions)
    return BodyTemplate(mesh, skeleton, weights, offsets)


def shaped_positions(template: BodyTemplate, shape: ShapeParams) -> np.ndarray:
    """T-pose positions at the given shape (template + blendshape offsets)."""
    pos = template.mesh.positions.copy()
    for k in range(N_SHAPE_PARAMS):
        b = shape.beta[k]
        if b != 0.0:
            pos += b * template.shape_offsets[k]
    return pos


def body_mesh(template: BodyTemplate, shape: ShapeParams, pose: Pose) -> TriMesh:
    """Posed, shaped body: LBS of the shaped T-pose positions."""
    pos = shaped_positions(template, shape)
    rest = Pose.identity(template.skeleton.n_joints)
    if pose == rest:
        # exact at the rest pose; LBS would only add rounding noise
        return TriMesh(pos, template.mesh.triangles)
    mats = relative_bone_transforms(template.skeleton, rest, pose)
    return TriMesh(apply_bone_transforms(pos, template.weights, mats),
                   template.mesh.triangles)


def shape_distance_field(template: BodyTemplate, shape: ShapeParams,
                         pose: Optional[Pose] = None):
    """Analytic signed distance and outward direction for a shaped,
    posed body.

    The body mesh is the nominal capsule union pushed through the shape
    offset rules, so inverting those rules and measuring against the
    bare capsules gives one continuous field over the same surface.
    Mesh-sampled normals disagree from vertex to vertex, and contacts
    settling into creases ratchet on the disagreement; a smooth field
    has nothing to ratchet against.

    Returns a callable mapping points (N, 3) to (signed distance (N,),
    outward unit direction (N, 3)). Distances are first-order exact
    near the surface, which is the regime collisions care about. Shape
    handling is exact at the rest pose; under a pose the shape rules
    run in each capsule's own rest frame, a blend-zone approximation,
    and the pipeline only drapes shaped bodies at rest or the nominal
    body posed.
    """
    beta = shape.beta
    s_h = 1.0 + HEIGHT_GAIN * beta[0]
    r0 = np.array([c[3] for c in _CAPSULES])
    radial_on = beta[1] != 0.0 or beta[2] != 0.0
    shoulder = SHOULDER_GAIN * beta[3]
    shaped = bool(np.any(beta != 0.0))
    warped = radial_on or shoulder != 0.0

    names = [j[0] for j in _JOINTS]
    bone = np.array([names.index(c[0]) for c in _CAPSULES])
    rot = trans = None
    if pose is not None and pose != Pose.identity(template.skeleton.n_joints):
        mats = relative_bone_transforms(
            template.skeleton, Pose.identity(template.skeleton.n_joints), pose)
        rot = mats[:, :3, :3]
        trans = mats[:, :3, 3]

    def _band(x0):
        t = np.clip((np.abs(x0) - 0.04) / 0.12, 0.0, 1.0)
        return t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t) / 0.12

    def _invert(y, iters=3):
        """Preimage of y under the offset rules, and membership there.

        z is linear in the height coefficient so it inverts exactly;
        the radial and lateral terms relax by fixed point, except the
        lateral shift, stiff at full coefficient, which gets a Newton
        solve per pass with membership held.
        """
        x = y.copy()
        x[:, 2] /= s_h
        keep = np.ones(len(y))
        if not warped:
            return x, keep
        for _ in range(iters):
            radial, torso_frac, keep = _offset_basis(x)
            off = np.zeros_like(y)
            if radial_on:
                g = GIRTH_GAIN * beta[1] + beta[2] * (
                    TRADE_TORSO_GAIN * torso_frac
                    + TRADE_LIMB_GAIN * (1.0 - torso_frac))
                off += (g * keep)[:, None] * radial
            x[:, 1] = y[:, 1] - off[:, 1]
            x[:, 2] = (y[:, 2] - off[:, 2]) / s_h
            if shoulder != 0.0:
                x0 = x[:, 0].copy()
                for _ in range(3):
                    band, slope = _band(x0)
                    f = x0 + shoulder * band * np.sign(x0) * keep \
                        - (y[:, 0] - off[:, 0])
                    x0 -= f / np.maximum(1.0 + shoulder * slope * keep, 0.05)
                x[:, 0] = x0
            else:
                x[:, 0] = y[:, 0] - off[:, 0]
        return x, keep

    def _capsule_h_dir(x, c):
        """Distance to one nominal capsule and the unit radial off it."""
        a = np.asarray(_CAPSULES[c][1])
        d = np.asarray(_CAPSULES[c][2]) - a
        dd = float(d @ d)
        t = np.clip(((x - a) @ d) / dd, 0.0, 1.0) if dd > 0 \
            else np.zeros(len(x))
        v = x - (a + t[:, None] * d)
        ln = np.maximum(np.linalg.norm(v, axis=1), 1e-12)
        return ln - r0[c], v / ln[:, None]

    def _metric(h, dirn, x, keep):
        """Map nominal-space distance and direction through the warp.

        For y = W(x) the true distance is h / |J^-T n| with n the
        nominal normal; the Jacobian keeps its diagonal height and
        lateral-shift terms, the radial growth's contribution along
        the normal being second order.
        """
        _, slope = _band(x[:, 0])
        jx = np.maximum(1.0 + shoulder * slope * keep, 0.05)
        m = np.stack([dirn[:, 0] / jx, dirn[:, 1], dirn[:, 2] / s_h], axis=1)
        ln = np.linalg.norm(m, axis=1)
        return h / ln, m / ln[:, None]

    def field(points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        n = len(pts)
        if rot is None:
            x, keep = _invert(pts) if shaped else (pts, np.ones(n))
            best_h = np.full(n, np.inf)
            best_dir = np.zeros((n, 3))
            for c in range(len(_CAPSULES)):
                h, dirn = _capsule_h_dir(x, c)
                h, dirn = _metric(h, dirn, x, keep)
                closer = h < best_h
                best_h[closer] = h[closer]
                best_dir[closer] = dirn[closer]
            return best_h, best_dir
        best_h = np.full(n, np.inf)
        best_dir = np.zeros((n, 3))
        for c in range(len(_CAPSULES)):
            b = bone[c]
            xl = (pts - trans[b]) @ rot[b]
            x, keep = _invert(xl) if shaped else (xl, np.ones(n))
            h, dirn = _capsule_h_dir(x, c)
            h, dirn = _metric(h, dirn, x, keep)
            closer = h < best_h
            best_h[closer] = h[closer]
            best_dir[closer] = dirn[closer] @ rot[b].T
        return best_h, best_dir

    return field


def garment_start_positions(rest_positions: np.ndarray,
                            shape: ShapeParams) -> np.ndarray:
    """Drape start positions for a garment over a shaped body.

    The garment rest mesh is authored against the nominal body; the height
    axis rescales the body in z, so a collar placed over the nominal neck
    would start inside a taller body's chest. Carrying the start positions
    through the same z scaling keeps the placement body-relative. The other
    axes leave z alone and need no correction. Rest lengths are unaffected:
    this only picks where the drape begins.
    """
    pos = np.array(rest_positions, dtype=np.float64, copy=True)
    pos[:, 2] *= 1.0 + HEIGHT_GAIN * shape.beta[0]
    return pos
