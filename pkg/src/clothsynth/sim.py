"""Quasi-static cloth oracle: implicit Euler on a mass-spring net.

The integrator is the local/global (block coordinate descent) form of
implicit Euler: spring targets are updated from the current iterate,
then a prefactored SPD system is solved per coordinate. Collision
against the body is per-vertex projection to a clearance margin with
Coulomb-style tangential damping. Everything is deterministic: fixed
iteration counts, fixed ordering, no RNG.

This simulator is the data generator and ground truth for the synthesis
pipeline; the pipeline itself never depends on its constitutive details.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu

from .mesh import TriMesh, VertexGrid, smoothed_vertex_normals

# maps query points (N, 3) to (signed distance (N,), outward unit (N, 3));
# bodies built from capsules provide one via shape_distance_field
DistanceField = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]

GRAVITY = np.array([0.0, 0.0, -9.81])
KE_STOP = 1e-6            # J per vertex, mean; quasi-static termination
MOVE_STOP = 5e-6          # m; positions must also have stopped moving
SOLVER_ITERATIONS = 8     # local/global rounds per implicit step
VELOCITY_DAMPING = 0.10   # per-step velocity scale-down, settles drapes
MIN_STEPS = 5             # never stop before the cloth has started moving
CALM_STEPS = 3            # consecutive below-threshold steps required


class SimulationError(RuntimeError):
    pass


@dataclass
class ClothMaterial:
    """Spring-net material. Defaults follow the reference setup."""

    stretch_stiffness: float = 30.0      # N/m, edge springs
    bend_stiffness: float = 1e-5         # N*m, scaled to cross-edge springs
    area_density: float = 0.1            # kg/m^2
    friction: float = 0.3                # Coulomb coefficient
    collision_margin: float = 2e-3       # meters, clearance kept off the body

    def __post_init__(self):
        vals = (self.stretch_stiffness, self.bend_stiffness,
                self.area_density, self.friction, self.collision_margin)
        if any(v < 0 for v in vals):
            raise ValueError("material parameters must be non-negative")


def _bend_pairs(mesh: TriMesh) -> np.ndarray:
    """Opposite-vertex pairs across each interior edge."""
    edge_map: dict[tuple[int, int], list[int]] = {}
    for t in mesh.triangles:
        for a, b, c in ((t[0], t[1], t[2]), (t[1], t[2], t[0]), (t[2], t[0], t[1])):
            key = (min(a, b), max(a, b))
            edge_map.setdefault(key, []).append(int(c))
    pairs = [tuple(sorted(ops)) for ops in edge_map.values() if len(ops) == 2]
    pairs = sorted(set(pairs))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def _vertex_masses(mesh: TriMesh, density: float) -> np.ndarray:
    p = mesh.positions
    t = mesh.triangles
    areas = 0.5 * np.linalg.norm(
        np.cross(p[t[:, 1]] - p[t[:, 0]], p[t[:, 2]] - p[t[:, 0]]), axis=1)
    m = np.zeros(mesh.n_vertices)
    share = areas * (density / 3.0)
    np.add.at(m, t[:, 0], share)
    np.add.at(m, t[:, 1], share)
    np.add.at(m, t[:, 2], share)
    m[m <= 0.0] = max(1e-8, m[m > 0].min() if np.any(m > 0) else 1e-8)
    return m


class ClothSim:
    """Stateful simulation of one garment against a (replaceable) body.

    The expensive caches (springs, masses, factorized global matrix)
    depend only on rest topology, material and dt.
    """

    def __init__(self, rest: TriMesh, material: ClothMaterial, dt: float,
                 pins: Optional[np.ndarray] = None):
        if not (0.0 < dt <= 0.01):
            raise ValueError("dt must be in (0, 0.01]")
        self.rest = rest
        self.material = material
        self.dt = float(dt)
        self.pins = np.zeros(0, dtype=np.int64) if pins is None \
            else np.asarray(pins, dtype=np.int64)

        edges = rest.edges().astype(np.int64)
        bends = _bend_pairs(rest)
        self.springs = np.concatenate([edges, bends]) if len(bends) else edges
        rest_d = rest.positions[self.springs[:, 0]] - rest.positions[self.springs[:, 1]]
        self.rest_lengths = np.linalg.norm(rest_d, axis=1)
        if np.any(self.rest_lengths <= 0.0):
            raise SimulationError("zero-length spring in rest mesh")
        k_edge = np.full(len(edges), material.stretch_stiffness)
        # bend stiffness carries N*m; dividing by length^2 yields a spring
        # constant so flat-mesh bending resistance scales like a hinge
        k_bend = material.bend_stiffness / self.rest_lengths[len(edges):] ** 2
        self.stiffness = np.concatenate([k_edge, k_bend])

        self.masses = _vertex_masses(rest, material.area_density)
        if len(self.pins):
            self.masses = self.masses.copy()
            self.masses[self.pins] = 1e9   # effectively immovable

        # global matrix M + dt^2 * L, one scalar system shared by x/y/z
        n = rest.n_vertices
        i = self.springs[:, 0]
        j = self.springs[:, 1]
        k = self.stiffness * self.dt * self.dt
        rows = np.concatenate([i, j, i, j])
        cols = np.concatenate([i, j, j, i])
        vals = np.concatenate([k, k, -k, -k])
        rows = np.concatenate([rows, np.arange(n)])
        cols = np.concatenate([cols, np.arange(n)])
        vals = np.concatenate([vals, self.masses])
        self._solver = splu(csc_matrix((vals, (rows, cols)), shape=(n, n)))

        # signed incidence (n x n_springs): scatter of per-spring vectors
        # onto endpoints as one sparse matmul instead of two add.at calls
        ns = len(self.springs)
        s_rows = np.concatenate([i, j])
        s_cols = np.concatenate([np.arange(ns), np.arange(ns)])
        s_vals = np.concatenate([np.ones(ns), -np.ones(ns)])
        self._incidence = csc_matrix((s_vals, (s_rows, s_cols)),
                                     shape=(n, ns)).tocsr()


        self.positions = rest.positions.copy()
        self.velocities = np.zeros_like(self.positions)
        self._body: Optional[TriMesh] = None
        self._body_grid: Optional[VertexGrid] = None
        self._body_normals: Optional[np.ndarray] = None
        self._body_field: Optional[DistanceField] = None
        self._step_index = 0
        self._last_move = np.inf   # max vertex displacement over last step

    def set_body(self, body: Optional[TriMesh],
                 field: Optional[DistanceField] = None) -> None:
        """Install the collision body, preferably with its distance field.

        With a field, projection uses exact distances and one continuous
        gradient. Falling back to the mesh alone means nearest-vertex
        half-space pushes, whose normals disagree across creases and let
        contacts ratchet; it exists so foreign body meshes still work.
        """
        self._body = body
        self._body_field = field if body is not None else None
        if body is None or field is not None:
            self._body_grid = None
            self._body_normals = None
        else:
            self._body_grid = VertexGrid(body)
            self._body_normals = smoothed_vertex_normals(body)

    def set_positions(self, positions: np.ndarray) -> None:
        if positions.shape != self.positions.shape:
            raise SimulationError("position array shape mismatch")
        self.positions = np.array(positions, dtype=np.float64)
        self.velocities[:] = 0.0

    def spring_forces(self, positions: np.ndarray) -> np.ndarray:
        d = positions[self.springs[:, 0]] - positions[self.springs[:, 1]]
        lengths = np.linalg.norm(d, axis=1)
        lengths = np.maximum(lengths, 1e-12)
        f = (self.stiffness * (self.rest_lengths - lengths) / lengths)[:, None] * d
        return self._incidence @ f

    def _project_onto_body(self, x: np.ndarray, passes: int = 1):
        """Push penetrating vertices to the clearance margin, in place.

        Returns (contact mask, contact normals, push); contact includes
        vertices already resting at the margin, and push is the normal
        correction each vertex received, the per-step stand-in for how
        hard it presses. No body, no contacts. More passes help the
        mesh fallback in concave regions where pushing along one body
        vertex's normal can land inside another's half-space.
        """
        n = len(x)
        if self._body is None:
            return np.zeros(n, dtype=bool), np.zeros((n, 3)), np.zeros(n)
        margin = self.material.collision_margin
        if self._body_field is not None:
            # distances are exact, but a vertex seated in a concave seam
            # can leave one wall's margin into the other's, so extra
            # passes re-evaluate where a push landed
            h, nrm = self._body_field(x)
            push = np.maximum(margin - h, 0.0)
            for p in range(passes):
                hit = h < margin
                if np.any(hit):
                    x[hit] += (margin - h[hit])[:, None] * nrm[hit]
                if p + 1 == passes or not np.any(hit):
                    break
                h, nrm = self._body_field(x)
                push += np.maximum(margin - h, 0.0)
            return h <= margin * 1.000001, nrm, push
        for _ in range(passes):
            idx, _ = self._body_grid.query(x)
            nrm = self._body_normals[idx]
            h = np.einsum("ij,ij->i", x - self._body.positions[idx], nrm)
            hit = h < margin
            if not np.any(hit):
                break
            x[hit] += (margin - h[hit])[:, None] * nrm[hit]
        return h <= margin * 1.000001, nrm, np.maximum(margin - h, 0.0)

    def _apply_friction(self, x: np.ndarray, prev: np.ndarray,
                        contact: np.ndarray, nrm: np.ndarray,
                        push: np.ndarray) -> None:
        """Coulomb friction on this step's tangential drift, in place.

        Position-level Coulomb rule: this step's normal correction is
        the per-step measure of normal load, so tangential drift within
        mu times it is undone in full (static) and drift beyond it is
        shortened by that budget (dynamic). Keeping the dynamic case a
        subtraction rather than a zeroing is what lets overstressed
        regions keep creeping toward equilibrium instead of freezing
        into whatever uneven stretch the first depenetration produced;
        the drift direction rotates toward the residual load as the
        rest relaxes, and the vertex sticks once inside the budget.
        """
        if not np.any(contact):
            return
        nc = nrm[contact]
        d = x[contact] - prev[contact]
        d_n = np.einsum("ij,ij->i", d, nc)[:, None] * nc
        d_t = d - d_n
        t_mag = np.linalg.norm(d_t, axis=1)
        budget = self.material.friction * push[contact]
        scale = np.zeros(len(d))
        moving = t_mag > 1e-15
        scale[moving] = np.maximum(0.0, 1.0 - budget[moving] / t_mag[moving])
        x[contact] = prev[contact] + d_n + scale[:, None] * d_t

    def step(self) -> None:
        """One implicit Euler step with contacts inside the solve loop.

        Collision projection runs inside the local/global iteration:
        with contacts applied only after the solve, a squeezed garment
        has no per-step fixed point (the solve pulls it through the body
        and projection pushes it back out, oscillating forever).
        Friction is applied once per step in the position domain, then a
        final projection restores the margin.
        """
        dt = self.dt
        m = self.masses[:, None]
        y = self.positions + dt * self.velocities + (dt * dt) * GRAVITY
        if len(self.pins):
            y[self.pins] = self.rest.positions[self.pins]

        prev = self.positions
        x = y.copy()
        contact, nrm, push_total = self._project_onto_body(x)
        self._apply_friction(x, prev, contact, nrm, push_total)
        i = self.springs[:, 0]
        j = self.springs[:, 1]
        kdt2 = (self.stiffness * dt * dt)[:, None]
        rhs_base = m * y
        for _ in range(SOLVER_ITERATIONS):
            d = x[i] - x[j]
            lengths = np.maximum(np.linalg.norm(d, axis=1), 1e-12)
            targets = (self.rest_lengths / lengths)[:, None] * d
            x = self._solver.solve(rhs_base + self._incidence @ (kdt2 * targets))
            if len(self.pins):
                x[self.pins] = self.rest.positions[self.pins]
            contact, nrm, push = self._project_onto_body(x)
            # the load a contact carries this step shows up as the sum of
            # the corrections that held the line, most of it in the first
            # projection after the gravity predictor
            push_total += push
            # friction must live inside the iteration: applied only after
            # the loop, the rewrite yanks contact vertices away from where
            # the solve left their neighbors, storing artificial stretch
            # that flings them off the surface next step
            self._apply_friction(x, prev, contact, nrm, push_total)
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"solver diverged at step {self._step_index}")

        contact, nrm, _ = self._project_onto_body(x, passes=3)
        if len(self.pins):
            x[self.pins] = self.rest.positions[self.pins]

        v = (x - prev) / dt * (1.0 - VELOCITY_DAMPING)
        if np.any(contact):
            # normal motion of a vertex held at the margin is projection
            # artifact; keeping it injects energy into the next step
            vn = np.einsum("ij,ij->i", v[contact], nrm[contact])
            v[contact] -= vn[:, None] * nrm[contact]
        self.positions = x
        self.velocities = v
        if len(self.pins):
            self.velocities[self.pins] = 0.0
        self._last_move = float(np.max(np.linalg.norm(x - prev, axis=1)))
        self._step_index += 1

    def mean_kinetic_energy(self) -> float:
        free = np.ones(len(self.masses), dtype=bool)
        free[self.pins] = False
        v2 = np.einsum("ij,ij->i", self.velocities[free], self.velocities[free])
        return float(0.5 * np.mean(self.masses[free] * v2))

    def run(self, duration: float) -> int:
        """Step until the stop rule fires; returns the step count.

        Stops once mean kinetic energy is below threshold AND positions
        have stopped drifting. The position check matters because
        collision projection moves vertices without giving them
        velocity. Drift is the net displacement across a short window:
        contact vertices caught between two competing body-vertex
        assignments hop a fraction of the margin forever, and those
        bounded cycles cancel over the window while real creep does not.
        """
        n_steps = max(1, int(round(duration / self.dt)))
        window: list[np.ndarray] = []
        for s in range(n_steps):
            self.step()
            window.append(self.positions.copy())
            if len(window) > CALM_STEPS + 1:
                window.pop(0)
            if len(window) == CALM_STEPS + 1 and s + 1 >= MIN_STEPS \
                    and self.mean_kinetic_energy() < KE_STOP:
                drift = np.max(np.linalg.norm(window[-1] - window[0], axis=1))
                if drift / CALM_STEPS < MOVE_STOP:
                    return s + 1
        return n_steps

    def mesh(self) -> TriMesh:
        return TriMesh(self.positions.copy(), self.rest.triangles)


def drape(garment_rest: TriMesh, material: ClothMaterial, body: Optional[TriMesh],
          duration: float = 1.0, dt: float = 0.01,
          pins: Optional[np.ndarray] = None,
          initial: Optional[np.ndarray] = None,
          field: Optional[DistanceField] = None) -> TriMesh:
    """Settle the garment on the body and return the equilibrated mesh.

    initial optionally warm-starts from a previously draped state while
    rest lengths still come from garment_rest. field is the body's
    analytic distance field when available; see ClothSim.set_body.
    """
    if garment_rest.n_vertices == 0:
        raise ValueError("empty garment")
    sim = ClothSim(garment_rest, material, dt, pins=pins)
    if initial is not None:
        sim.set_positions(np.asarray(initial, dtype=np.float64))
    sim.set_body(body, field=field)
    sim.run(duration)
    return sim.mesh()


def residual_norm(garment: TriMesh, material: ClothMaterial,
                  body: Optional[TriMesh], rest: TriMesh,
                  pins: Optional[np.ndarray] = None,
                  field: Optional[DistanceField] = None) -> float:
    """Norm of the net force on free vertices at this configuration.

    Contact reactions are accounted for in penalty style: where the
    garment presses into the body's clearance margin, the inward normal
    component is absorbed by the contact and tangential force up to the
    Coulomb budget is absorbed by friction. Zero exactly at the
    simulator's equilibria.
    """
    if garment.n_vertices != rest.n_vertices:
        raise ValueError("garment topology does not match rest caches")
    sim = ClothSim(rest, material, dt=0.01, pins=pins)
    forces = sim.spring_forces(garment.positions)
    forces += sim.masses[:, None] * GRAVITY

    if body is not None:
        if field is not None:
            h, nrm = field(garment.positions)
        else:
            grid = VertexGrid(body)
            idx, _ = grid.query(garment.positions)
            nrm = smoothed_vertex_normals(body)[idx]
            h = np.einsum("ij,ij->i", garment.positions - body.positions[idx], nrm)
        contact = h <= material.collision_margin * 1.01
        if np.any(contact):
            f = forces[contact]
            n = nrm[contact]
            fn = np.einsum("ij,ij->i", f, n)
            pressing = fn < 0.0
            # contact absorbs the inward normal load; friction absorbs
            # tangential load up to the Coulomb budget
            f_tan = f - np.where(pressing[:, None], fn[:, None] * n, 0.0)
            tan_mag = np.linalg.norm(f_tan, axis=1)
            budget = material.friction * np.abs(np.minimum(fn, 0.0))
            keep = np.ones(len(f))
            nz = tan_mag > 1e-12
            keep[nz] = np.maximum(0.0, 1.0 - budget[nz] / tan_mag[nz])
            forces[contact] = f_tan * keep[:, None]
    if pins is not None and len(pins):
        forces[np.asarray(pins, dtype=np.int64)] = 0.0
    return float(np.linalg.norm(forces.reshape(-1)))


def simulate_sequence(garment: TriMesh, material: ClothMaterial,
                      body_frames: Sequence[TriMesh], dt: float = 0.01,
                      frame_time: float = 1.0 / 24.0,
                      settle_first: float = 1.0,
                      fields: Optional[Sequence[DistanceField]] = None
                      ) -> list[TriMesh]:
    """Persistent-state simulation over a body motion; one mesh per frame.

    The first frame is settled for settle_first seconds so the sequence
    starts from a draped state rather than the rest placement. fields
    optionally carries one distance field per frame.
    """
    if len(body_frames) == 0:
        raise ValueError("need at least one body frame")
    if fields is not None and len(fields) != len(body_frames):
        raise ValueError("need one distance field per body frame")
    sim = ClothSim(garment, material, dt)
    out = []
    steps_per_frame = max(1, int(round(frame_time / dt)))
    for f, body in enumerate(body_frames):
        sim.set_body(body, field=None if fields is None else fields[f])
        if f == 0:
            sim.run(settle_first)
        else:
            for _ in range(steps_per_frame):
                sim.step()
        out.append(sim.mesh())
    return out
