"""Triangle meshes as graphs: adjacency, propagation operator, Laplacian,
coordinate normalization, multi-organ composition, and OBJ I/O.

Vertices are millimeters in the world frame. A mesh's graph edges are the
undirected triangle edges plus any explicit ``extra_edges`` (used for
inter-organ bridges, which no triangle can express). OBJ serialization
keeps bridge edges as ``l`` records and per-vertex organ labels in an
adjacent ``.labels`` sidecar (one integer per vertex line).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_VERTICES = 100_000


class MeshValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray            # (n, 3) float64, mm
    triangles: np.ndarray           # (m, 3) int64 vertex indices
    organ_id: np.ndarray            # (n,) int64, 0 for single-organ meshes
    extra_edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "organ_id", np.asarray(self.organ_id, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "extra_edges", np.asarray(self.extra_edges, dtype=np.int64).reshape(-1, 2))
        validate_mesh(self)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Same connectivity and labels, new positions."""
        return Mesh(np.asarray(vertices, dtype=np.float64), self.triangles, self.organ_id, self.extra_edges)

    def edges(self) -> np.ndarray:
        """Undirected edge list (k, 2), i < j, triangle edges + extra edges."""
        return _edge_set(self.triangles, self.extra_edges)

    def organ_count(self) -> int:
        return int(self.organ_id.max()) + 1 if len(self.organ_id) else 0

    def submesh(self, organ: int) -> tuple["Mesh", np.ndarray]:
        """Extract one organ's mesh; returns it plus its vertex indices."""
        idx = np.flatnonzero(self.organ_id == organ)
        if idx.size == 0:
            raise MeshValidationError(f"no vertices with organ_id {organ}")
        remap = -np.ones(self.n_vertices, dtype=np.int64)
        remap[idx] = np.arange(idx.size)
        keep = np.all(self.organ_id[self.triangles] == organ, axis=1)
        tris = remap[self.triangles[keep]]
        return Mesh(self.vertices[idx], tris, np.zeros(idx.size, dtype=np.int64)), idx


def validate_mesh(mesh: Mesh) -> None:
    n = len(mesh.vertices)
    if not 1 <= n <= MAX_VERTICES:
        raise MeshValidationError(f"vertex count {n} outside [1, {MAX_VERTICES}]")
    if len(mesh.organ_id) != n:
        raise MeshValidationError("organ_id length != vertex count")
    if not np.all(np.isfinite(mesh.vertices)):
        raise MeshValidationError("non-finite vertex coordinates")
    tris = mesh.triangles
    if len(tris):
        if tris.min() < 0 or tris.max() >= n:
            raise MeshValidationError("triangle index out of range")
        degenerate = (
            (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
        )
        if degenerate.any():
            raise MeshValidationError(f"degenerate triangle at row {int(np.flatnonzero(degenerate)[0])}")
    ee = mesh.extra_edges
    if len(ee):
        if ee.min() < 0 or ee.max() >= n:
            raise MeshValidationError("extra edge index out of range")
        if (ee[:, 0] == ee[:, 1]).any():
            raise MeshValidationError("self-loop extra edge")


def _edge_set(triangles: np.ndarray, extra_edges: np.ndarray) -> np.ndarray:
    pairs = []
    if len(triangles):
        pairs.append(triangles[:, [0, 1]])
        pairs.append(triangles[:, [1, 2]])
        pairs.append(triangles[:, [0, 2]])
    if len(extra_edges):
        pairs.append(extra_edges)
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate(pairs, axis=0)
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def adjacency_matrix(mesh: Mesh) -> np.ndarray:
    """Symmetric binary adjacency (n, n)."""
    n = mesh.n_vertices
    a = np.zeros((n, n), dtype=np.float64)
    e = mesh.edges()
    if len(e):
        a[e[:, 0], e[:, 1]] = 1.0
        a[e[:, 1], e[:, 0]] = 1.0
    return a


@dataclass(frozen=True)
class GraphOperator:
    """Self-loop renormalized propagation operator for graph convolutions.

    ``propagation`` is the dense symmetric matrix Dh^-1/2 (A + I) Dh^-1/2
    with Dh the degree matrix of A + I. ``neighbor_lists`` excludes the
    self loop.
    """

    propagation: np.ndarray          # (n, n) float64
    degree: np.ndarray               # (n,) int64, edge count per vertex (no self loop)
    neighbor_lists: list[np.ndarray]

    @property
    def n_vertices(self) -> int:
        return len(self.degree)


def build_graph_operator(mesh: Mesh) -> GraphOperator:
    a = adjacency_matrix(mesh)
    n = len(a)
    a_hat = a + np.eye(n)
    d_hat = a_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d_hat)
    propagation = a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]
    degree = a.sum(axis=1).astype(np.int64)
    neighbors = [np.flatnonzero(a[i]) for i in range(n)]
    return GraphOperator(propagation=propagation, degree=degree, neighbor_lists=neighbors)


def laplacian_matrix(mesh: Mesh) -> np.ndarray:
    """Uniform umbrella operator L with L @ positions giving the discrete
    Laplacian. Rows of isolated vertices are zero."""
    a = adjacency_matrix(mesh)
    deg = a.sum(axis=1)
    lap = np.zeros_like(a)
    connected = deg > 0
    lap[connected] = -a[connected] / deg[connected, None]
    lap[connected, connected] = 1.0
    return lap


def discrete_laplacian(mesh: Mesh, positions: np.ndarray) -> np.ndarray:
    """Per-vertex mean of (v_i - v_j) over 1-ring neighbors j."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (mesh.n_vertices, 3):
        raise MeshValidationError(
            f"positions shape {positions.shape} != ({mesh.n_vertices}, 3)"
        )
    return laplacian_matrix(mesh) @ positions


@dataclass(frozen=True)
class NormalizationBox:
    """Axis-aligned box mapped affinely onto [-1, 1]^3."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64).reshape(3))
        if not np.all(self.hi > self.lo):
            raise MeshValidationError(f"box extent must be positive on all axes: {self.lo} .. {self.hi}")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half_extent(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def normalize(self, positions: np.ndarray) -> np.ndarray:
        return (np.asarray(positions, dtype=np.float64) - self.center) / self.half_extent

    def denormalize(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords, dtype=np.float64) * self.half_extent + self.center

    def contains(self, positions: np.ndarray) -> bool:
        p = np.asarray(positions)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationBox":
        return cls(np.array(d["lo"]), np.array(d["hi"]))

    @classmethod
    def bounding(cls, *position_sets: np.ndarray, margin: float = 0.0) -> "NormalizationBox":
        pts = np.concatenate([np.asarray(p).reshape(-1, 3) for p in position_sets], axis=0)
        return cls(pts.min(axis=0) - margin, pts.max(axis=0) + margin)


def normalize_coordinates(mesh: Mesh, box: NormalizationBox) -> tuple[np.ndarray, NormalizationBox]:
    """Map vertices into [-1,1]^3; the box itself is the inverse record."""
    return box.normalize(mesh.vertices), box


def compose_multi_organ_graph(meshes: list[Mesh], k_bridge: int = 8) -> Mesh:
    """Concatenate organ meshes into one graph, assigning organ_id by list
    position and adding, per ordered organ pair, the k_bridge nearest
    cross-organ vertex pairs as bridge edges (deduplicated)."""
    if len(meshes) < 2:
        raise MeshValidationError("multi-organ composition requires >= 2 meshes")
    if k_bridge < 1:
        raise MeshValidationError("k_bridge must be >= 1")
    offsets = np.cumsum([0] + [m.n_vertices for m in meshes])
    vertices = np.concatenate([m.vertices for m in meshes], axis=0)
    triangles = np.concatenate(
        [m.triangles + offsets[i] for i, m in enumerate(meshes)], axis=0
    )
    organ_id = np.concatenate(
        [np.full(m.n_vertices, i, dtype=np.int64) for i, m in enumerate(meshes)]
    )
    intra = [m.extra_edges + offsets[i] for i, m in enumerate(meshes) if len(m.extra_edges)]

    bridges = []
    for i, mi in enumerate(meshes):
        for j, mj in enumerate(meshes):
            if i == j:
                continue
            d2 = np.sum((mi.vertices[:, None, :] - mj.vertices[None, :, :]) ** 2, axis=2)
            flat = np.argsort(d2, axis=None, kind="stable")[: min(k_bridge, d2.size)]
            vi, vj = np.unravel_index(flat, d2.shape)
            bridges.append(np.stack([vi + offsets[i], vj + offsets[j]], axis=1))
    extra = np.concatenate(intra + bridges, axis=0)
    extra = np.unique(np.sort(extra, axis=1), axis=0)
    return Mesh(vertices, triangles, organ_id, extra)


def save_obj(mesh: Mesh, path: str | Path) -> None:
    path = Path(path)
    lines = []
    for v in mesh.vertices:
        # shortest repr round-trips float64 exactly
        lines.append(f"v {v[0]!r} {v[1]!r} {v[2]!r}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    for e in mesh.extra_edges:
        lines.append(f"l {e[0] + 1} {e[1] + 1}")
    path.write_text("\n".join(lines) + "\n")
    label_path = path.with_suffix(".labels")
    label_path.write_text("\n".join(str(int(o)) for o in mesh.organ_id) + "\n")


def load_obj(path: str | Path) -> Mesh:
    path = Path(path)
    vertices = []
    triangles = []
    extra = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0] == "#":
            continue
        if parts[0] == "v":
            vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            if len(idx) != 3:
                raise MeshValidationError(f"{path}:{lineno}: non-triangular face with {len(idx)} vertices")
            triangles.append(idx)
        elif parts[0] == "l":
            idx = [int(p) - 1 for p in parts[1:]]
            for a, b in zip(idx[:-1], idx[1:]):
                extra.append([a, b])
    vertices = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    label_path = path.with_suffix(".labels")
    if label_path.exists():
        organ = np.array([int(s) for s in label_path.read_text().split()], dtype=np.int64)
    else:
        organ = np.zeros(len(vertices), dtype=np.int64)
    tris = np.array(triangles, dtype=np.int64).reshape(-1, 3)
    ee = np.array(extra, dtype=np.int64).reshape(-1, 2)
    return Mesh(vertices, tris, organ, ee)


def is_watertight(mesh: Mesh) -> bool:
    """Every triangle edge shared by exactly two triangles."""
    if not len(mesh.triangles):
        return False
    e = np.concatenate(
        [mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]], mesh.triangles[:, [0, 2]]], axis=0
    )
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))
