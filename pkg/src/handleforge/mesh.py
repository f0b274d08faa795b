"""Triangle meshes: OBJ I/O, normals, edges and vertex adjacency."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .validation import ContractError, check_points


class ObjParseError(ValueError):
    """Malformed OBJ record. ``lineno`` is 1-based."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class EdgeSet:
    """Unique undirected edges ``(i, j)`` with ``i < j`` and their rest lengths."""

    edges: np.ndarray
    rest_lengths: np.ndarray

    def __len__(self):
        return len(self.edges)


@dataclass(frozen=True)
class Mesh:
    """A rest-pose triangle mesh.

    Normals are always derived from the faces (area weighted); vertices that
    only touch zero-area faces get a zero normal and are listed in
    ``degenerate_normals``.
    """

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray = field(default=None, repr=False)
    degenerate_normals: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        vertices = check_points(self.vertices, "vertices")
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise ContractError("faces: vertex index out of range")
        repeated = ((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                    | (faces[:, 0] == faces[:, 2]))
        if repeated.any():
            raise ContractError(
                f"faces: face {int(np.flatnonzero(repeated)[0])} repeats a vertex index")
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)
        if self.normals is None:
            normals, degenerate = vertex_normals(vertices, faces)
            normals.setflags(write=False)
            object.__setattr__(self, "normals", normals)
            object.__setattr__(self, "degenerate_normals", degenerate)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def features(self):
        """Per-vertex input features: position followed by normal, ``(V, 6)``."""
        return np.hstack([self.vertices, self.normals])

    def with_vertices(self, vertices):
        return Mesh(np.asarray(vertices, dtype=np.float64), self.faces)


def vertex_normals(vertices, faces):
    """Area-weighted vertex normals. Returns ``(normals, degenerate_mask)``."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    # the cross product has length 2*area, so summing it area-weights for free
    face_n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    acc = np.zeros_like(v)
    for c in range(3):
        np.add.at(acc, f[:, c], face_n)
    norm = np.linalg.norm(acc, axis=1)
    degenerate = norm < 1e-12
    out = np.zeros_like(acc)
    out[~degenerate] = acc[~degenerate] / norm[~degenerate, None]
    return out, degenerate


def edge_set(mesh):
    """All undirected face edges, each exactly once, sorted lexicographically."""
    f = mesh.faces
    if len(f) == 0:
        return EdgeSet(np.zeros((0, 2), dtype=np.int64), np.zeros(0))
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    lengths = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    if np.any(lengths <= 0):
        raise ContractError("edge_set: zero-length edge (coincident vertices)")
    return EdgeSet(e, lengths)


def vertex_adjacency(mesh):
    """Symmetric 0/1 sparse adjacency matrix of the mesh graph (no self loops)."""
    V = mesh.n_vertices
    e = edge_set(mesh).edges if mesh.n_faces else np.zeros((0, 2), dtype=np.int64)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(V, V))


def normalized_adjacency(mesh):
    """``D^-1/2 (A + I) D^-1/2`` as a dense array."""
    A = vertex_adjacency(mesh).toarray() + np.eye(mesh.n_vertices)
    d = 1.0 / np.sqrt(A.sum(axis=1))
    return A * d[:, None] * d[None, :]


def normalize_unit_box(mesh):
    """Recenter the bounding box at the origin and scale its diagonal to 1."""
    v = mesh.vertices
    lo, hi = v.min(axis=0), v.max(axis=0)
    diag = np.linalg.norm(hi - lo)
    if diag == 0:
        raise ContractError("normalize_unit_box: mesh has zero extent")
    return mesh.with_vertices((v - (lo + hi) / 2) / diag)


def load_obj(path):
    """Read an ASCII OBJ. Polygons are fan-triangulated; ``vn``/``vt`` are ignored."""
    vertices, faces = [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ObjParseError(lineno, "vertex needs 3 coordinates")
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise ObjParseError(lineno, f"bad vertex coordinate ({exc})") from None
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjParseError(lineno, "face needs at least 3 vertices")
                idx = []
                for tok in parts[1:]:
                    try:
                        i = int(tok.split("/")[0])
                    except ValueError:
                        raise ObjParseError(lineno, f"bad face index {tok!r}") from None
                    # negative indices are relative to the vertices read so far
                    i = i - 1 if i > 0 else len(vertices) + i
                    if not 0 <= i < len(vertices):
                        raise ObjParseError(lineno, f"face index {tok} out of range")
                    idx.append(i)
                for a in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[a], idx[a + 1]))
    if not vertices:
        raise ObjParseError(0, "no vertices")
    try:
        return Mesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ContractError as exc:
        raise ObjParseError(0, str(exc)) from None


def format_obj(faces, positions):
    lines = ["v %.6f %.6f %.6f\n" % tuple(p) for p in positions]
    lines += ["f %d %d %d\n" % tuple(f + 1) for f in faces]
    return "".join(lines)


def save_obj(mesh, positions, path):
    """Write ``positions`` with ``mesh``'s faces using fixed ``%.6f`` formatting."""
    positions = check_points(positions, "positions", n_rows=mesh.n_vertices)
    # -0.000000 and 0.000000 must not differ between runs
    positions = np.where(np.abs(positions) < 5e-7, 0.0, positions)
    Path(path).write_text(format_obj(mesh.faces, positions))


# --- procedural meshes --------------------------------------------------------

def icosphere(subdivisions=1, radius=1.0):
    """Subdivided icosahedron (genus 0)."""
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9),
         (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2),
         (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10),
         (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = list(f)
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return Mesh(np.array(verts) * radius, np.array(faces))


def unit_cube():
    """Axis-aligned unit cube, 8 vertices and 12 outward-facing triangles."""
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                  [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.float64)
    f = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
                  [0, 1, 5], [0, 5, 4], [1, 2, 6], [1, 6, 5],
                  [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]])
    return Mesh(v, f)
