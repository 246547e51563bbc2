"""Lat-lon grid, multi-level icosahedral mesh and the bipartite edge sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

MAX_LEVEL = 6


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Regular lat-lon grid at cell centres; latitudes run north to south."""

    n_lat: int
    n_lon: int
    lat: np.ndarray
    lon: np.ndarray
    land_mask: np.ndarray

    @classmethod
    def regular(cls, n_lat: int, n_lon: int, land_mask=None) -> "GridSpec":
        dlat = 180.0 / n_lat
        lat = 90.0 - dlat * (np.arange(n_lat) + 0.5)
        lon = (360.0 / n_lon) * (np.arange(n_lon) + 0.5)
        if land_mask is None:
            land_mask = np.zeros((n_lat, n_lon), dtype=bool)
        land_mask = np.asarray(land_mask, dtype=bool)
        if land_mask.shape != (n_lat, n_lon):
            raise GraphError(f"land mask shape {land_mask.shape} != ({n_lat}, {n_lon})")
        return cls(n_lat, n_lon, lat, lon, land_mask)

    def __post_init__(self):
        if len(self.lat) != self.n_lat or len(self.lon) != self.n_lon:
            raise GraphError("coordinate lengths do not match grid extents")
        if self.n_lat > 1 and not np.all(np.diff(self.lat) < 0):
            raise GraphError("latitudes must be strictly decreasing")

    @property
    def n_nodes(self) -> int:
        return self.n_lat * self.n_lon

    def positions(self) -> np.ndarray:
        """Unit 3-vectors of the cell centres in row-major (lat, lon) order."""
        lat, lon = np.meshgrid(np.radians(self.lat), np.radians(self.lon), indexing="ij")
        return latlon_to_xyz(lat.ravel(), lon.ravel())


def latlon_to_xyz(lat_rad, lon_rad) -> np.ndarray:
    c = np.cos(lat_rad)
    return np.stack([c * np.cos(lon_rad), c * np.sin(lon_rad), np.sin(lat_rad)], axis=-1)


@dataclass
class IcoMesh:
    level: int
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) of the finest level, counter-clockwise seen from outside
    level_edges: list[np.ndarray] = field(default_factory=list)  # per level, (E_l, 2) undirected, i < j

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return v, f


def _orient(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def _face_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def build_icosphere(level: int) -> IcoMesh:
    """Subdivide a regular icosahedron ``level`` times.

    Vertices created at coarse levels keep their indices, so every level's
    edge list is expressed in finest-level vertex indices.
    """
    if not (0 <= level <= MAX_LEVEL):
        raise GraphError(f"mesh level must be in [0, {MAX_LEVEL}], got {level}")
    verts, faces = _icosahedron()
    verts = list(verts)
    faces = _orient(np.array(verts), faces)
    level_edges = [_face_edges(faces)]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            idx = cache.get(key)
            if idx is None:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                idx = cache[key] = len(verts) - 1
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.array(new_faces, dtype=np.int64)
        level_edges.append(_face_edges(faces))
    return IcoMesh(level, np.array(verts), faces, level_edges)


@dataclass
class EdgeSet:
    senders: np.ndarray
    receivers: np.ndarray
    features: np.ndarray  # (E, 4): local displacement (3) + great-circle length

    def __post_init__(self):
        if len(self.senders) != len(self.receivers):
            raise GraphError("sender and receiver lists differ in length")

    def __len__(self) -> int:
        return len(self.senders)

    @property
    def lengths(self) -> np.ndarray:
        return self.features[:, 3]


def great_circle(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # atan2 form stays accurate near 0 and pi where arccos(dot) loses digits.
    cross = np.linalg.norm(np.cross(p, q), axis=-1)
    dot = np.einsum("...i,...i->...", p, q)
    return np.arctan2(cross, dot)


def local_frame(p: np.ndarray) -> np.ndarray:
    """(..., 3, 3) rows east, north, up at unit positions ``p``."""
    lon = np.arctan2(p[..., 1], p[..., 0])
    lat = np.arcsin(np.clip(p[..., 2], -1.0, 1.0))
    east = np.stack([-np.sin(lon), np.cos(lon), np.zeros_like(lon)], axis=-1)
    north = np.stack([-np.sin(lat) * np.cos(lon), -np.sin(lat) * np.sin(lon), np.cos(lat)], axis=-1)
    return np.stack([east, north, p], axis=-2)


def edge_geometry(senders, receivers, sender_pos: np.ndarray, receiver_pos: np.ndarray | None = None) -> np.ndarray:
    """Sender-minus-receiver displacement in the receiver's tangent frame, plus length."""
    if receiver_pos is None:
        receiver_pos = sender_pos
    ps = sender_pos[np.asarray(senders, dtype=np.int64)]
    pr = receiver_pos[np.asarray(receivers, dtype=np.int64)]
    frame = local_frame(pr)
    disp = np.einsum("eij,ej->ei", frame, ps - pr)
    length = great_circle(ps, pr)
    return np.concatenate([disp, length[:, None]], axis=1)


def build_multiscale_edges(mesh: IcoMesh) -> EdgeSet:
    """Directed union of every level's edges, deduplicated and sorted."""
    und = np.concatenate(mesh.level_edges)
    directed = np.concatenate([und, und[:, ::-1]])
    directed = np.unique(directed, axis=0)
    s, r = directed[:, 0], directed[:, 1]
    return EdgeSet(s, r, edge_geometry(s, r, mesh.vertices))


def mean_edge_length(mesh: IcoMesh) -> float:
    e = mesh.level_edges[-1]
    return float(great_circle(mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]).mean())


def build_g2m_edges(grid: GridSpec, mesh: IcoMesh, radius_factor: float = 0.6) -> EdgeSet:
    """Connect each grid node to all mesh nodes within the radius."""
    if radius_factor <= 0:
        raise GraphError("radius_factor must be positive")
    radius = radius_factor * mean_edge_length(mesh)
    gpos = grid.positions()
    tree = cKDTree(mesh.vertices)
    # Chord length equivalent of the great-circle radius, padded for round-off.
    chord = 2.0 * np.sin(min(radius, np.pi) / 2.0) + 1e-12
    hits = tree.query_ball_point(gpos, r=chord)
    senders, receivers = [], []
    for g, ms in enumerate(hits):
        if not ms:
            continue
        ms = np.array(sorted(ms), dtype=np.int64)
        d = great_circle(gpos[g][None, :], mesh.vertices[ms])
        ms = ms[d <= radius]
        senders.append(np.full(len(ms), g, dtype=np.int64))
        receivers.append(ms)
    senders = np.concatenate(senders) if senders else np.zeros(0, np.int64)
    receivers = np.concatenate(receivers) if receivers else np.zeros(0, np.int64)
    connected = np.zeros(grid.n_nodes, dtype=bool)
    connected[senders] = True
    isolated = np.flatnonzero(~connected & ~grid.land_mask.ravel())
    if isolated.size:
        raise GraphError(
            f"{isolated.size} ocean grid nodes have no mesh node within the radius "
            f"(first: {isolated[0]}); increase radius_factor above {radius_factor}"
        )
    return EdgeSet(senders, receivers, edge_geometry(senders, receivers, gpos, mesh.vertices))


def containing_faces(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Index of the lowest-numbered face containing each point, -1 if none."""
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    nab, nbc, nca = np.cross(a, b), np.cross(b, c), np.cross(c, a)
    tol = -1e-12
    out = np.full(len(points), -1, dtype=np.int64)
    for start in range(0, len(points), chunk):
        p = points[start:start + chunk]
        inside = (p @ nab.T >= tol) & (p @ nbc.T >= tol) & (p @ nca.T >= tol)
        # Exclude the antipodal face, which passes the sign test for p -> -p.
        inside &= (p @ (a + b + c).T) > 0
        has = inside.any(axis=1)
        first = np.argmax(inside, axis=1)
        out[start:start + chunk] = np.where(has, first, -1)
    return out


def build_m2g_edges(grid: GridSpec, mesh: IcoMesh) -> EdgeSet:
    """Each grid node receives from the three vertices of its containing face."""
    gpos = grid.positions()
    face = containing_faces(gpos, mesh.vertices, mesh.faces)
    if np.any(face < 0):
        raise GraphError(f"no containing mesh face for grid node {int(np.flatnonzero(face < 0)[0])}")
    senders = mesh.faces[face].reshape(-1)
    receivers = np.repeat(np.arange(grid.n_nodes, dtype=np.int64), 3)
    return EdgeSet(senders, receivers, edge_geometry(senders, receivers, mesh.vertices, gpos))


@dataclass
class MultiScaleGraph:
    grid: GridSpec
    mesh: IcoMesh
    mesh_edges: EdgeSet
    g2m: EdgeSet
    m2g: EdgeSet

    @property
    def n_grid(self) -> int:
        return self.grid.n_nodes

    @property
    def n_mesh(self) -> int:
        return self.mesh.n_vertices

    def mesh_node_features(self) -> np.ndarray:
        return self.mesh.vertices.copy()

    def summary(self) -> dict:
        return {
            "grid_nodes": self.n_grid,
            "mesh_level": self.mesh.level,
            "mesh_nodes": self.n_mesh,
            "mesh_faces": len(self.mesh.faces),
            "edges_per_level": [2 * len(e) for e in self.mesh.level_edges],
            "mesh_edges": len(self.mesh_edges),
            "g2m_edges": len(self.g2m),
            "m2g_edges": len(self.m2g),
        }


def build_graph(grid: GridSpec, level: int = 3, radius_factor: float = 0.6) -> MultiScaleGraph:
    mesh = build_icosphere(level)
    return MultiScaleGraph(
        grid=grid,
        mesh=mesh,
        mesh_edges=build_multiscale_edges(mesh),
        g2m=build_g2m_edges(grid, mesh, radius_factor),
        m2g=build_m2g_edges(grid, mesh),
    )


def write_edge_list(edges: EdgeSet, path) -> None:
    with open(path, "w") as fh:
        for s, r, length in zip(edges.senders, edges.receivers, edges.lengths):
            fh.write(f"{s} {r} {length:.9g}\n")
