"""Triangle meshes: loading, synthetic fixtures, area normalization,
surface sampling and per-vertex tangent frames."""

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
import warnings

import numpy as np
from scipy import sparse
from scipy.spatial import Delaunay

from .errors import DomainError, MeshFormatError


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh with optional per-vertex fields.

    Parameters
    ----------
    vertices : array_like, shape (n_vertices, 3)
    faces : array_like, shape (n_faces, 3)
        Zero-based vertex indices.
    fields : dict of str -> array_like, shape (n_vertices, d)
        Named per-vertex channels. 1-D arrays are promoted to one channel.
    """

    vertices: np.ndarray
    faces: np.ndarray
    fields: dict = field(default_factory=dict)

    def __post_init__(self):
        verts = _frozen(self.vertices, float)
        faces = _frozen(self.faces, np.int64).reshape(-1, 3)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise DomainError("vertices must have shape (n, 3)")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            bad = int(np.nonzero((faces < 0).any(1) | (faces >= len(verts)).any(1))[0][0])
            raise DomainError(f"face {bad} references a vertex out of range")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        fields = {}
        for name, values in self.fields.items():
            values = _frozen(values, float)
            if values.ndim == 1:
                values = _frozen(values[:, None], float)
            if values.shape[0] != len(verts):
                raise DomainError(
                    f"field {name!r} has {values.shape[0]} rows for {len(verts)} vertices")
            fields[name] = values
        object.__setattr__(self, "fields", fields)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def with_fields(self, **fields):
        """Copy of the mesh with fields added or replaced."""
        return TriMesh(self.vertices, self.faces, {**self.fields, **fields})

    @cached_property
    def _face_cross(self):
        tri = self.vertices[self.faces]
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    @cached_property
    def face_areas(self):
        return 0.5 * np.linalg.norm(self._face_cross, axis=1)

    @cached_property
    def face_normals(self):
        norm = np.linalg.norm(self._face_cross, axis=1, keepdims=True)
        return self._face_cross / np.where(norm > 0, norm, 1.0)

    @property
    def total_area(self):
        return float(self.face_areas.sum())

    @cached_property
    def vertex_normals(self):
        """Area-weighted average of incident face normals (zero for isolated vertices)."""
        acc = np.zeros_like(self.vertices)
        # the raw cross product already carries twice the face area
        for c in range(3):
            np.add.at(acc, self.faces[:, c], self._face_cross)
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        return acc / np.where(norm > 0, norm, 1.0)

    @cached_property
    def edges(self):
        """Unique undirected edges, shape (n_edges, 2), sorted."""
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def edge_face_counts(self):
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    @cached_property
    def nonmanifold_edges(self):
        """Edges shared by more than two faces."""
        return self.edges[self.edge_face_counts > 2]

    @property
    def is_manifold(self):
        return len(self.nonmanifold_edges) == 0

    @property
    def euler_characteristic(self):
        return self.n_vertices - len(self.edges) + self.n_faces

    @cached_property
    def adjacency(self):
        """Symmetric vertex adjacency as CSR (1 where an edge exists)."""
        e = self.edges
        n = self.n_vertices
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))

    @cached_property
    def face_adjacency(self):
        """Pairs of face indices sharing an edge, shape (n_pairs, 2)."""
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        face_of = np.repeat(np.arange(self.n_faces), 3)
        order = np.lexsort((e[:, 1], e[:, 0]))
        e, face_of = e[order], face_of[order]
        pairs = []
        start = 0
        for stop in range(1, len(e) + 1):
            if stop == len(e) or (e[stop] != e[start]).any():
                group = face_of[start:stop]
                for a in range(len(group)):
                    for b in range(a + 1, len(group)):
                        pairs.append((group[a], group[b]))
                start = stop
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    @cached_property
    def face_vertex_adjacency(self):
        """Pairs of distinct faces sharing at least one vertex, shape (n_pairs, 2)."""
        inc = sparse.csr_matrix(
            (np.ones(self.faces.size), (np.repeat(np.arange(self.n_faces), 3), self.faces.ravel())),
            shape=(self.n_faces, self.n_vertices))
        shared = sparse.triu(inc @ inc.T, 1).tocoo()
        order = np.lexsort((shared.col, shared.row))
        return np.stack([shared.row[order], shared.col[order]], 1).astype(np.int64)

    def diameter_bbox(self):
        """Bounding-box diagonal; a cheap extent estimate."""
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


@dataclass(frozen=True)
class TangentFrame:
    origin: int
    normal: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    def to_local(self, vectors):
        """Coordinates of 3-vectors in the ``(e1, e2, normal)`` basis."""
        basis = np.stack([self.e1, self.e2, self.normal])
        return np.asarray(vectors) @ basis.T


def tangent_frame(mesh, vertex):
    """Orthonormal right-handed frame at ``vertex``.

    The reference direction ``e1`` is the edge toward the lowest-index
    neighbor projected onto the tangent plane; the next neighbor is tried
    when that projection degenerates.
    """
    if not 0 <= vertex < mesh.n_vertices:
        raise DomainError(f"vertex {vertex} out of range")
    normal = mesh.vertex_normals[vertex]
    if np.linalg.norm(normal) == 0:
        raise DomainError(f"vertex {vertex} has no incident faces")
    nbrs = np.sort(mesh.adjacency.indices[mesh.adjacency.indptr[vertex]:mesh.adjacency.indptr[vertex + 1]])
    origin = mesh.vertices[vertex]
    for nb in nbrs:
        d = mesh.vertices[nb] - origin
        d = d - d.dot(normal) * normal
        length = np.linalg.norm(d)
        if length > 1e-12 * max(1.0, np.linalg.norm(mesh.vertices[nb] - origin)):
            e1 = d / length
            e2 = np.cross(normal, e1)
            return TangentFrame(vertex, normal.copy(), e1, e2 / np.linalg.norm(e2))
    raise DomainError(f"vertex {vertex}: every neighbor edge is parallel to the normal")


def normalize_area(mesh, target_area):
    """Scale the mesh about the origin to a given total area.

    Returns
    -------
    mesh : TriMesh
    scale : float
        Linear scale factor applied to vertex positions.
    """
    if target_area <= 0:
        raise DomainError("target area must be positive")
    area = mesh.total_area
    if not area > 0:
        raise DomainError("mesh has zero area")
    scale = float(np.sqrt(target_area / area))
    return TriMesh(mesh.vertices * scale, mesh.faces, mesh.fields), scale


@dataclass(frozen=True)
class SurfaceSample:
    face: int
    barycentric: np.ndarray
    position: np.ndarray


@dataclass(frozen=True, eq=False)
class SurfaceSamples:
    """Struct-of-arrays set of points on mesh faces.

    ``fields`` holds each mesh field linearly interpolated to the samples.
    """

    face: np.ndarray
    barycentric: np.ndarray
    position: np.ndarray
    fields: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.face)

    def __getitem__(self, i):
        return SurfaceSample(int(self.face[i]), self.barycentric[i], self.position[i])

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 3)))

    @classmethod
    def from_barycentric(cls, mesh, face, barycentric):
        """Rebuild positions and interpolated fields from face + barycentric."""
        face = np.asarray(face, dtype=np.int64)
        bary = np.asarray(barycentric, dtype=float).reshape(-1, 3)
        corners = mesh.faces[face]
        position = np.einsum("sc,scx->sx", bary, mesh.vertices[corners])
        fields = {name: np.einsum("sc,scd->sd", bary, values[corners])
                  for name, values in mesh.fields.items()}
        return cls(face, bary, position, fields)


def uniform_sample_surface(mesh, count, seed):
    """Area-uniform random points on the surface.

    Faces are chosen with probability proportional to area; within a face
    the square-root barycentric trick gives a uniform density.
    """
    if count < 1:
        raise DomainError("sample count must be >= 1")
    areas = mesh.face_areas
    if not areas.sum() > 0:
        raise DomainError("mesh has zero area")
    rng = np.random.default_rng(seed)
    face = rng.choice(mesh.n_faces, size=count, p=areas / areas.sum())
    u = np.sqrt(rng.random(count))
    v = rng.random(count)
    bary = np.stack([1.0 - u, u * (1.0 - v), u * v], axis=1)
    return SurfaceSamples.from_barycentric(mesh, face, bary)


def remove_degenerate_faces(vertices, faces, tol=0.0):
    """Drop faces with area ``<= tol`` or repeated corners."""
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    tri = vertices[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    repeated = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    keep = (area > tol) & ~repeated
    return faces[keep], int((~keep).sum())


# ---------------------------------------------------------------------------
# file formats


def _tokens(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def _read_off(path):
    it = _tokens(path)
    try:
        lineno, tok = next(it)
    except StopIteration:
        raise MeshFormatError("empty OFF file", 1) from None
    if tok[0].upper() != "OFF":
        raise MeshFormatError("missing OFF header", lineno)
    tok = tok[1:]
    if not tok:
        try:
            lineno, tok = next(it)
        except StopIteration:
            raise MeshFormatError("missing element counts", lineno) from None
    try:
        nv, nf = int(tok[0]), int(tok[1])
    except (ValueError, IndexError):
        raise MeshFormatError("bad element counts", lineno) from None
    verts, faces = [], []
    for i in range(nv):
        try:
            lineno, tok = next(it)
            verts.append([float(t) for t in tok[:3]])
            if len(tok) < 3:
                raise ValueError
        except StopIteration:
            raise MeshFormatError(f"expected {nv} vertices, found {i}", lineno) from None
        except ValueError:
            raise MeshFormatError(f"bad vertex record {i}", lineno) from None
    for i in range(nf):
        try:
            lineno, tok = next(it)
        except StopIteration:
            raise MeshFormatError(f"expected {nf} faces, found {i}", lineno) from None
        try:
            count = int(tok[0])
            idx = [int(t) for t in tok[1:1 + count]]
        except ValueError:
            raise MeshFormatError(f"bad face record {i}", lineno) from None
        if count != 3 or len(idx) != 3:
            raise MeshFormatError(f"face {i} has {count} corners; triangles only", lineno)
        if min(idx) < 0 or max(idx) >= nv:
            raise MeshFormatError(f"face {i} references a vertex out of range", lineno)
        faces.append(idx)
    return verts, faces


def _read_obj(path):
    verts, faces = [], []
    for lineno, tok in _tokens(path):
        if tok[0] == "v":
            try:
                verts.append([float(t) for t in tok[1:4]])
                if len(tok) < 4:
                    raise ValueError
            except ValueError:
                raise MeshFormatError("bad vertex record", lineno) from None
        elif tok[0] == "f":
            if len(tok) != 4:
                raise MeshFormatError(
                    f"face {len(faces)} has {len(tok) - 1} corners; triangles only", lineno)
            try:
                idx = [int(t.split("/")[0]) for t in tok[1:]]
            except ValueError:
                raise MeshFormatError(f"bad face record {len(faces)}", lineno) from None
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            if min(idx) < 0 or max(idx) >= len(verts):
                raise MeshFormatError(
                    f"face {len(faces)} references a vertex out of range", lineno)
            faces.append(idx)
    return verts, faces


def load_mesh(path, format=None):
    """Read an OFF or OBJ triangle mesh.

    Degenerate faces are dropped with a warning.  Non-manifold edges are
    reported with a warning and remain queryable via
    :attr:`TriMesh.nonmanifold_edges`.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).upper()
    if fmt == "OFF":
        verts, faces = _read_off(path)
    elif fmt == "OBJ":
        verts, faces = _read_obj(path)
    else:
        raise MeshFormatError(f"unsupported mesh format {fmt!r}")
    verts = np.array(verts, dtype=float).reshape(-1, 3)
    faces, dropped = remove_degenerate_faces(verts, faces)
    if dropped:
        warnings.warn(f"{path.name}: dropped {dropped} degenerate faces", stacklevel=2)
    mesh = TriMesh(verts, faces)
    if not mesh.is_manifold:
        warnings.warn(
            f"{path.name}: {len(mesh.nonmanifold_edges)} non-manifold edges", stacklevel=2)
    return mesh


def save_mesh(mesh, path):
    """Write OFF or OBJ (by suffix) with round-trip float precision."""
    path = Path(path)
    fmt = path.suffix.lstrip(".").upper()
    lines = []
    if fmt == "OFF":
        lines.append("OFF")
        lines.append(f"{mesh.n_vertices} {mesh.n_faces} 0")
        lines += [" ".join(repr(float(x)) for x in v) for v in mesh.vertices]
        lines += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.faces]
    elif fmt == "OBJ":
        lines += ["v " + " ".join(repr(float(x)) for x in v) for v in mesh.vertices]
        lines += ["f " + " ".join(str(int(i) + 1) for i in f) for f in mesh.faces]
    else:
        raise MeshFormatError(f"unsupported mesh format {fmt!r}")
    path.write_text("\n".join(lines) + "\n")


def load_field_csv(path, n_vertices=None):
    """Read a per-vertex field file with header ``vertex_id,c0,...``.

    Rows may appear in any order but every vertex must appear exactly once.
    """
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "vertex_id":
            raise MeshFormatError("field CSV header must start with vertex_id", 1)
        width = len(header) - 1
        ids, rows = [], []
        for lineno, line in enumerate(fh, 2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != width + 1:
                raise MeshFormatError(f"expected {width + 1} columns", lineno)
            try:
                ids.append(int(parts[0]))
                rows.append([float(p) for p in parts[1:]])
            except ValueError:
                raise MeshFormatError("non-numeric field value", lineno) from None
    ids = np.array(ids, dtype=np.int64)
    n = n_vertices if n_vertices is not None else len(ids)
    if len(ids) != n or len(np.unique(ids)) != n or (n and (ids.min() < 0 or ids.max() >= n)):
        raise MeshFormatError(f"field must list each of {n} vertices exactly once")
    out = np.empty((n, width))
    out[ids] = rows
    return out


def save_field_csv(values, path):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    header = "vertex_id," + ",".join(f"c{i}" for i in range(values.shape[1]))
    lines = [header] + [f"{i}," + ",".join(repr(float(x)) for x in row)
                        for i, row in enumerate(values)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# synthetic fixtures


def icosphere(subdivisions=3):
    """Unit icosphere with ``10 * 4**s + 2`` vertices.

    Fields: ``xyz`` (analytic unit position) and ``spherical``
    (polar angle, azimuth).
    """
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts)
    spherical = np.stack([np.arccos(np.clip(v[:, 2], -1, 1)), np.arctan2(v[:, 1], v[:, 0])], 1)
    return TriMesh(v, faces, {"xyz": v.copy(), "spherical": spherical})


def torus(major=1.0, minor=0.3, res=(32, 16)):
    """Closed torus grid; ``fields['uv']`` holds the angular parameters."""
    nu, nv = (res, res) if np.isscalar(res) else res
    if nu < 3 or nv < 3 or major <= 0 or minor <= 0:
        raise DomainError("torus needs positive radii and resolution >= 3")
    u = 2 * np.pi * np.arange(nu) / nu
    v = 2 * np.pi * np.arange(nv) / nv
    uu, vv = np.meshgrid(u, v, indexing="ij")
    x = (major + minor * np.cos(vv)) * np.cos(uu)
    y = (major + minor * np.cos(vv)) * np.sin(uu)
    z = minor * np.sin(vv)
    verts = np.stack([x, y, z], -1).reshape(-1, 3)
    idx = np.arange(nu * nv).reshape(nu, nv)
    a = idx
    b = np.roll(idx, -1, axis=0)
    c = np.roll(np.roll(idx, -1, axis=0), -1, axis=1)
    d = np.roll(idx, -1, axis=1)
    faces = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3),
                            np.stack([a, c, d], -1).reshape(-1, 3)])
    return TriMesh(verts, faces, {"uv": np.stack([uu.ravel(), vv.ravel()], 1)})


def planar_disk(radius=1.0, res=16):
    """Flat disk in the ``z = 0`` plane built from concentric rings.

    Ring ``i`` carries ``6 * i`` vertices, giving near-equilateral
    triangles.  Faces are oriented so normals point to ``+z``.
    ``fields['xy']`` holds the analytic planar coordinates.
    """
    if radius <= 0 or res < 1:
        raise DomainError("disk needs positive radius and res >= 1")
    pts = [(0.0, 0.0)]
    for i in range(1, res + 1):
        ang = 2 * np.pi * np.arange(6 * i) / (6 * i)
        rr = radius * i / res
        pts += list(zip(rr * np.cos(ang), rr * np.sin(ang)))
    pts = np.array(pts)
    faces = Delaunay(pts).simplices.astype(np.int64)
    tri = pts[faces]
    signed = ((tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1])
              - (tri[:, 1, 1] - tri[:, 0, 1]) * (tri[:, 2, 0] - tri[:, 0, 0]))
    faces[signed < 0] = faces[signed < 0][:, [0, 2, 1]]
    faces, _ = remove_degenerate_faces(np.c_[pts, np.zeros(len(pts))], faces, tol=1e-14)
    verts = np.c_[pts, np.zeros(len(pts))]
    return TriMesh(verts, faces, {"xy": pts.copy()})


def generate_synthetic(kind, **params):
    """Build a fixture mesh by name: ``unit_sphere``, ``torus`` or ``planar_disk``."""
    allowed = {"unit_sphere": {"subdiv", "subdivisions"}, "torus": {"R", "r", "res"},
               "planar_disk": {"radius", "res"}}
    if kind in allowed and set(params) - allowed[kind]:
        raise DomainError(f"{kind}: unknown parameters {sorted(set(params) - allowed[kind])}")
    if kind == "unit_sphere":
        subdiv = params.get("subdiv", params.get("subdivisions", 3))
        if subdiv < 0:
            raise DomainError("subdivisions must be >= 0")
        return icosphere(subdiv)
    if kind == "torus":
        return torus(params.get("R", 1.0), params.get("r", 0.3), params.get("res", (32, 16)))
    if kind == "planar_disk":
        return planar_disk(params.get("radius", 1.0), params.get("res", 16))
    raise DomainError(f"unknown synthetic mesh kind {kind!r}")


def rotation_from_axis_angle(axis, angle):
    """3x3 rotation matrix (Rodrigues)."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k


def transform(mesh, matrix):
    """Apply a linear map to vertex positions; fields are kept as-is."""
    return TriMesh(mesh.vertices @ np.asarray(matrix).T, mesh.faces, mesh.fields)
