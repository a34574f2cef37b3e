"""Triangle meshes, nearest-vertex queries and OBJ round-trip."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels


class MeshError(ValueError):
    pass


@dataclass
class TriMesh:
    """Indexed triangle mesh. Positions are meters.

    Normals are optional and lazily computed; they are area-weighted
    vertex normals, unit length.
    """

    positions: np.ndarray            # (V, 3) float64
    triangles: np.ndarray            # (T, 3) int32, each index < V
    normals: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int32)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise MeshError("positions must be (V, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be (T, 3)")
        if self.triangles.size and self.triangles.max() >= len(self.positions):
            raise MeshError("triangle index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def with_positions(self, positions: np.ndarray) -> "TriMesh":
        """Same topology, new vertex positions. Normals are not carried over."""
        return TriMesh(positions, self.triangles)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals, recomputed on every call."""
        return vertex_normals(self.positions, self.triangles)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (E, 2) int array."""
        t = self.triangles
        raw = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        raw.sort(axis=1)
        return np.unique(raw, axis=0)

    def mean_edge_length(self) -> float:
        e = self.edges()
        d = self.positions[e[:, 0]] - self.positions[e[:, 1]]
        return float(np.linalg.norm(d, axis=1).mean())


def vertex_normals(positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals. Degenerate / isolated vertices get +z."""
    n = np.zeros_like(positions)
    p = positions
    t = triangles
    face_n = np.cross(p[t[:, 1]] - p[t[:, 0]], p[t[:, 2]] - p[t[:, 0]])
    # cross product magnitude is twice the face area, which is the weight we want
    np.add.at(n, t[:, 0], face_n)
    np.add.at(n, t[:, 1], face_n)
    np.add.at(n, t[:, 2], face_n)
    lengths = np.linalg.norm(n, axis=1)
    bad = lengths < 1e-20
    n[bad] = (0.0, 0.0, 1.0)
    lengths[bad] = 1.0
    return n / lengths[:, None]


def smoothed_vertex_normals(mesh: "TriMesh", rounds: int = 5) -> np.ndarray:
    """Vertex normals diffused over the 1-ring a few times.

    Marching-cubes surfaces carry voxel-scale normal noise; collision
    response against raw normals makes contacts hop between conflicting
    half-spaces on neighboring vertices. A few averaging rounds leave
    the large-scale field intact and settle the disagreements.
    """
    n = mesh.vertex_normals()
    e = mesh.edges()
    deg = np.zeros(mesh.n_vertices)
    np.add.at(deg, e[:, 0], 1.0)
    np.add.at(deg, e[:, 1], 1.0)
    deg = np.maximum(deg, 1.0)[:, None]
    for _ in range(rounds):
        acc = np.zeros_like(n)
        np.add.at(acc, e[:, 0], n[e[:, 1]])
        np.add.at(acc, e[:, 1], n[e[:, 0]])
        n = 0.5 * n + 0.5 * acc / deg
        lengths = np.maximum(np.linalg.norm(n, axis=1), 1e-20)
        n /= lengths[:, None]
    return n


class VertexGrid:
    """Uniform spatial hash over mesh vertices for nearest-vertex queries.

    Cell size defaults to 2x the mean edge length of the target mesh.
    Results are identical to a brute-force scan, ties broken by lowest
    vertex index.
    """

    def __init__(self, mesh: TriMesh, cell_size: Optional[float] = None):
        if mesh.n_vertices == 0:
            raise MeshError("empty target mesh")
        if cell_size is None:
            cell_size = 2.0 * mesh.mean_edge_length()
            if cell_size <= 0.0:
                cell_size = 1.0
        self.cell_size = float(cell_size)
        self.positions = mesh.positions
        self.origin = self.positions.min(axis=0)
        cells = np.floor((self.positions - self.origin) / self.cell_size).astype(np.int64)
        self.dims = cells.max(axis=0) + 1
        flat = (cells[:, 0] * self.dims[1] + cells[:, 1]) * self.dims[2] + cells[:, 2]
        order = np.argsort(flat, kind="stable")
        self._order = order.astype(np.int64)
        sorted_flat = flat[order]
        # bucket start offsets into _order, one slot per occupied cell
        uniq, starts = np.unique(sorted_flat, return_index=True)
        self._cell_ids = uniq
        self._cell_starts = np.append(starts, len(order)).astype(np.int64)

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest target vertex for each query point.

        Returns (indices, distances) arrays of length len(points).
        """
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        idx, dist = _kernels.grid_query(
            pts, self.positions, self.origin.astype(np.float64),
            np.asarray(self.dims, dtype=np.int64), self.cell_size,
            self._cell_ids, self._cell_starts, self._order)
        return idx, dist


def closest_vertex(query: np.ndarray, target: TriMesh,
                   grid: Optional[VertexGrid] = None) -> tuple[int, float]:
    """Index and distance of the target vertex nearest to a single point."""
    if target.n_vertices == 0:
        raise MeshError("empty target mesh")
    if grid is None:
        grid = VertexGrid(target)
    idx, dist = grid.query(np.asarray(query, dtype=np.float64).reshape(1, 3))
    return int(idx[0]), float(dist[0])


# ---------------------------------------------------------------------------
# OBJ round-trip (positions and faces only, ASCII, 1-based indices)

def save_obj(mesh: TriMesh, path_or_file) -> None:
    if hasattr(path_or_file, "write"):
        _write_obj(mesh, path_or_file)
    else:
        with open(path_or_file, "w") as fh:
            _write_obj(mesh, fh)


def _write_obj(mesh: TriMesh, fh) -> None:
    for p in mesh.positions:
        fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
    for t in mesh.triangles:
        fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_obj(path_or_file) -> TriMesh:
    if hasattr(path_or_file, "read"):
        text = path_or_file.read()
    else:
        with open(path_or_file) as fh:
            text = fh.read()
    positions = []
    triangles = []
    for lineno, line in enumerate(io.StringIO(text), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshError(f"line {lineno}: vertex needs 3 coordinates")
            positions.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise MeshError(f"line {lineno}: only triangle faces supported")
            # tolerate v/vt/vn references, keep the position index
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
            triangles.append(idx)
        # other directives (vn, vt, o, g, usemtl...) are ignored
    if not positions:
        raise MeshError("OBJ contains no vertices")
    return TriMesh(np.array(positions, dtype=np.float64),
                   np.array(triangles, dtype=np.int32).reshape(-1, 3))


# ---------------------------------------------------------------------------
# Procedural test/demo assets

def square_cloth(n: int, size: float, origin=(0.0, 0.0, 0.0)) -> TriMesh:
    """Flat n x n vertex cloth patch in the xy plane, lying at origin."""
    xs = np.linspace(0.0, size, n)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    pos = np.stack([gx.ravel() + origin[0],
                    gy.ravel() + origin[1],
                    np.full(n * n, origin[2])], axis=1)
    tris = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            b = a + 1
            c = a + n
            d = c + 1
            tris.append((a, b, c))
            tris.append((b, d, c))
    return TriMesh(pos, np.array(tris, dtype=np.int32))


def tube_garment(n_around: int = 24, n_height: int = 14,
                 radius: float = 0.125, z_min: float = 1.02,
                 z_max: float = 1.42) -> TriMesh:
    """Open cylinder around the torso axis. Binding and skinning test
    fixture; not a drape-stable garment (no shoulder support)."""
    angles = np.linspace(0.0, 2.0 * np.pi, n_around, endpoint=False)
    zs = np.linspace(z_min, z_max, n_height)
    pos = np.empty((n_height * n_around, 3))
    for r, z in enumerate(zs):
        base = r * n_around
        pos[base:base + n_around, 0] = radius * np.cos(angles)
        pos[base:base + n_around, 1] = radius * np.sin(angles)
        pos[base:base + n_around, 2] = z
    tris = []
    for r in range(n_height - 1):
        for c in range(n_around):
            a = r * n_around + c
            b = r * n_around + (c + 1) % n_around
            c2 = a + n_around
            d = b + n_around
            tris.append((a, b, c2))
            tris.append((b, d, c2))
    return TriMesh(pos, np.array(tris, dtype=np.int32))


def poncho_garment(n: int = 23, side: float = 0.55, hole_radius: float = 0.05,
                   z: float = 1.492) -> TriMesh:
    """Square cloth with a neck opening, the canonical drape garment.

    The collar rests on the clavicle shelf of the body with the neck
    through the opening, and the sheet drapes over the shoulder and
    upper-arm line. The opening clears the neck of every training
    shape but cannot pass the head or the clavicle bar, so the sheet
    is captive, and its support is near-horizontal, so the resting
    drape carries next to no stretch and settles cleanly from the rest
    start. The default height floats the sheet a few millimeters above
    the shelf: a short landing keeps the impact drift small enough for
    friction to catch it before it starts sliding. Start height assumes
    the nominal body; shaped bodies get the start remapped by
    garment_start_positions.
    """
    xs = np.linspace(-0.5 * side, 0.5 * side, n)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    flat = np.stack([gx.ravel(), gy.ravel(), np.full(n * n, z)], axis=1)
    keep = np.hypot(flat[:, 0], flat[:, 1]) >= hole_radius
    remap = np.full(n * n, -1, dtype=np.int64)
    remap[keep] = np.arange(keep.sum())
    tris = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            b = a + 1
            c = a + n
            d = c + 1
            for t in ((a, b, c), (b, d, c)):
                if keep[t[0]] and keep[t[1]] and keep[t[2]]:
                    tris.append((remap[t[0]], remap[t[1]], remap[t[2]]))
    return TriMesh(flat[keep], np.array(tris, dtype=np.int32))
