"""Segmented B-rep input: manifest loading, validation, normalization,
surface sampling, shape-diameter estimation and boundary frames.

The manifest is a JSON file

    { "version": 1,
      "patches": [ { "id": 3, "mesh": "rel/path.obj", "open": false,
                     "boundaries": [[ [x,y,z], ... ]] } ],
      "adjacency": [ { "a": 3, "b": 5, "type": "convex" } ] }

with mesh files in ASCII OBJ (v/f) or binary little-endian PLY.  Loading
normalizes the joint bounding box to [-1,1]^3 with a uniform scale.
"""

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .errors import (DanglingAdjacency, DegenerateMesh, IndexOutOfRange,
                     MissingFile, NotOpenPatch, SchemaViolation)
from .geometry import (MeshDistanceQuery, cone_directions, face_normals,
                       ray_mesh_first_hit, resample_polyline, triangle_areas)

DOMAIN_LO = np.array([-1.0, -1.0, -1.0])
DOMAIN_HI = np.array([1.0, 1.0, 1.0])
DOMAIN_DIAGONAL = float(np.linalg.norm(DOMAIN_HI - DOMAIN_LO))

CONVEX = "convex"
CONCAVE = "concave"

# shape-diameter estimator constants
DIAMETER_SAMPLES = 256
DIAMETER_RAYS = 16
DIAMETER_CONE_HALF_ANGLE = np.deg2rad(30.0)


@dataclass
class PatchInput:
    """One surface patch: an indexed triangle mesh plus open-boundary data."""

    id: int
    vertices: np.ndarray          # (n, 3)
    faces: np.ndarray             # (m, 3) int
    is_open: bool = False
    boundaries: list = field(default_factory=list)   # list of (k, 3) polylines
    samples: np.ndarray | None = None                # optional cached samples
    sample_normals: np.ndarray | None = None

    def bounds(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return lo, hi

    def area(self):
        return float(triangle_areas(self.vertices, self.faces).sum())


@dataclass
class SurfaceSamples:
    """A batch of surface samples with unit normals and patch attribution."""

    points: np.ndarray
    normals: np.ndarray
    patch_ids: np.ndarray


@dataclass
class SegmentedShape:
    """A segmented B-rep: patches plus labeled adjacency, in [-1,1]^3."""

    patches: list
    adjacency: list              # (id_a, id_b, "convex"|"concave"), a < b

    def patch(self, patch_id):
        for p in self.patches:
            if p.id == patch_id:
                return p
        raise KeyError(patch_id)

    def patch_ids(self):
        return [p.id for p in self.patches]


# ---------------------------------------------------------------------------
# Mesh files
# ---------------------------------------------------------------------------

def read_obj(path):
    vertices = []
    faces = []
    with open(path, "r") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                for k in range(1, len(idx) - 1):   # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return np.asarray(vertices, dtype=float).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def read_ply(path):
    """Binary little-endian PLY reader; returns vertices, faces and any
    per-face integer properties following the vertex-index list."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise SchemaViolation(f"{path}: not a PLY file")
        fmt = None
        elements = []   # (name, count, [(kind, ...)]) where kind is scalar/list
        while True:
            line = fh.readline()
            if not line:
                raise SchemaViolation(f"{path}: unterminated PLY header")
            tokens = line.decode("ascii").split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append([tokens[1], int(tokens[2]), []])
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    elements[-1][2].append(("list", _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]], tokens[4]))
                else:
                    elements[-1][2].append(("scalar", _PLY_TYPES[tokens[1]], tokens[2]))
            elif tokens[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise SchemaViolation(f"{path}: only binary little-endian PLY is supported")

        vertices = np.zeros((0, 3))
        faces = []
        face_props = {}
        for name, count, props in elements:
            if name == "vertex" and all(p[0] == "scalar" for p in props):
                dtype = np.dtype([(p[2], "<" + p[1]) for p in props])
                data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype)
                vertices = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(float)
            else:
                rows = {p[-1]: [] for p in props}
                for _ in range(count):
                    for p in props:
                        if p[0] == "list":
                            (n,) = struct.unpack("<" + p[1], fh.read(struct.calcsize(p[1])))
                            vals = struct.unpack("<" + str(n) + p[2], fh.read(n * struct.calcsize(p[2])))
                            rows[p[3]].append(vals)
                        else:
                            (val,) = struct.unpack("<" + p[1], fh.read(struct.calcsize(p[1])))
                            rows[p[2]].append(val)
                if name == "face":
                    key = "vertex_indices" if "vertex_indices" in rows else "vertex_index"
                    for poly in rows.get(key, []):
                        for k in range(1, len(poly) - 1):
                            faces.append([poly[0], poly[k], poly[k + 1]])
                    face_props = {k: np.asarray(v) for k, v in rows.items() if k not in (key,)}
    return vertices, np.asarray(faces, dtype=np.int64).reshape(-1, 3), face_props


def read_mesh_file(path):
    """Load an OBJ or PLY mesh; returns (vertices, faces)."""
    if not os.path.exists(path):
        raise MissingFile(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        return read_obj(path)
    if ext == ".ply":
        v, f, _ = read_ply(path)
        return v, f
    raise SchemaViolation(f"unsupported mesh format: {path}")


# ---------------------------------------------------------------------------
# Manifest load / save
# ---------------------------------------------------------------------------

def _require(cond, message):
    if not cond:
        raise SchemaViolation(message)


def load_manifest(path):
    """Load, validate and normalize a segmented shape manifest."""
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path, "r") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"{path}: invalid JSON ({exc})") from exc

    _require(isinstance(doc, dict), "manifest root must be an object")
    _require(doc.get("version") == 1, "manifest version must be 1")
    _require(isinstance(doc.get("patches"), list) and doc["patches"], "manifest needs a non-empty patches list")
    _require(isinstance(doc.get("adjacency", []), list), "adjacency must be a list")

    base = os.path.dirname(os.path.abspath(path))
    patches = []
    for entry in doc["patches"]:
        _require(isinstance(entry, dict), "patch entries must be objects")
        _require(isinstance(entry.get("id"), int), "patch id must be an integer")
        _require(isinstance(entry.get("mesh"), str), "patch mesh must be a path")
        mesh_path = os.path.join(base, entry["mesh"])
        vertices, faces = read_mesh_file(mesh_path)
        if len(faces) == 0 or triangle_areas(vertices, faces).sum() <= 0:
            raise DegenerateMesh(f"patch {entry['id']}: zero-area mesh")
        is_open = bool(entry.get("open", False))
        boundaries = [np.asarray(b, dtype=float).reshape(-1, 3) for b in entry.get("boundaries", [])]
        _require(is_open or not boundaries, f"patch {entry['id']}: boundaries given for a closed patch")
        _require(not is_open or boundaries, f"patch {entry['id']}: open patch needs boundary polylines")
        patches.append(PatchInput(id=entry["id"], vertices=vertices, faces=faces,
                                  is_open=is_open, boundaries=boundaries))

    ids = [p.id for p in patches]
    _require(len(set(ids)) == len(ids), "patch ids must be unique")
    id_set = set(ids)

    adjacency = []
    seen_pairs = set()
    for entry in doc.get("adjacency", []):
        _require(isinstance(entry, dict), "adjacency entries must be objects")
        a, b, kind = entry.get("a"), entry.get("b"), entry.get("type")
        _require(isinstance(a, int) and isinstance(b, int), "adjacency ids must be integers")
        _require(kind in (CONVEX, CONCAVE), f"adjacency type must be convex or concave, got {kind!r}")
        _require(a != b, f"self-adjacency on patch {a}")
        if a not in id_set or b not in id_set:
            raise DanglingAdjacency(f"adjacency ({a}, {b}) references an unknown patch id")
        pair = (min(a, b), max(a, b))
        _require(pair not in seen_pairs, f"duplicate adjacency {pair}")
        seen_pairs.add(pair)
        adjacency.append((pair[0], pair[1], kind))

    shape = SegmentedShape(patches=patches, adjacency=adjacency)
    shape = normalize_shape(shape)
    _validate_boundaries(shape)
    return shape


def normalize_shape(shape):
    """Map the joint bounding box to [-1,1]^3 with a uniform scale."""
    los, his = zip(*(p.bounds() for p in shape.patches))
    lo = np.min(np.stack(los), axis=0)
    hi = np.max(np.stack(his), axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise DegenerateMesh("shape bounding box has zero extent")
    center = 0.5 * (lo + hi)
    scale = 2.0 / extent
    patches = []
    for p in shape.patches:
        patches.append(replace(
            p,
            vertices=(p.vertices - center) * scale,
            boundaries=[(b - center) * scale for b in p.boundaries],
            samples=None if p.samples is None else (p.samples - center) * scale,
        ))
    return SegmentedShape(patches=patches, adjacency=list(shape.adjacency))


def _validate_boundaries(shape):
    for p in shape.patches:
        if not p.boundaries:
            continue
        query = MeshDistanceQuery(p.vertices, p.faces)
        for k, b in enumerate(p.boundaries):
            dist, _, _ = query.query(b)
            if dist.max() > 1e-5:
                raise SchemaViolation(
                    f"patch {p.id} boundary {k}: vertex off the mesh by {dist.max():.2e}")


def save_manifest(shape, path):
    """Write a (normalized) shape back out as manifest + OBJ meshes."""
    base = os.path.dirname(os.path.abspath(path))
    os.makedirs(base, exist_ok=True)
    doc = {"version": 1, "patches": [], "adjacency": [
        {"a": a, "b": b, "type": kind} for a, b, kind in shape.adjacency]}
    for p in shape.patches:
        mesh_name = f"patch_{p.id}.obj"
        with open(os.path.join(base, mesh_name), "w") as fh:
            for v in p.vertices:
                fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
            for f in p.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
        doc["patches"].append({
            "id": p.id, "mesh": mesh_name, "open": p.is_open,
            "boundaries": [b.tolist() for b in p.boundaries],
        })
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


# ---------------------------------------------------------------------------
# Sampling and local feature size
# ---------------------------------------------------------------------------

def sample_patch(patch, n, seed):
    """Draw n area-uniform surface samples with face normals."""
    if n < 1:
        raise ValueError("need at least one sample")
    areas = triangle_areas(patch.vertices, patch.faces)
    total = areas.sum()
    if total <= 0:
        raise DegenerateMesh(f"patch {patch.id}: zero total area")
    gen = rng.stream(seed, rng.SURFACE, patch.id)
    counts = gen.multinomial(n, areas / total)
    frame_ids = np.repeat(np.arange(len(patch.faces)), counts)
    u = gen.uniform(size=n)
    v = gen.uniform(size=n)
    su = np.sqrt(u)
    w0 = 1.0 - su
    w1 = su * (1.0 - v)
    w2 = su * v
    tri = patch.faces[frame_ids]
    pts = (w0[:, None] * patch.vertices[tri[:, 0]]
           + w1[:, None] * patch.vertices[tri[:, 1]]
           + w2[:, None] * patch.vertices[tri[:, 2]])
    normals = face_normals(patch.vertices, patch.faces)[frame_ids]
    return SurfaceSamples(points=pts, normals=normals,
                          patch_ids=np.full(n, patch.id, dtype=np.int64))


def average_shape_diameter(patch, shape, seed):
    """Mean local thickness of the shape as seen from this patch.

    At each of 256 surface samples, 16 rays are cast into the shape inside a
    30-degree half-angle cone around the inward normal and intersected with
    every patch mesh; the sample's estimate is the median of the hit
    distances.  Misses beyond the domain diagonal are dropped, and a sample
    whose rays all miss contributes the diagonal itself.
    """
    samples = sample_patch(patch, DIAMETER_SAMPLES, seed)
    all_v = np.concatenate([p.vertices for p in shape.patches])
    all_f = []
    offset = 0
    for p in shape.patches:
        all_f.append(p.faces + offset)
        offset += len(p.vertices)
    all_f = np.concatenate(all_f)

    gen = rng.stream(seed, rng.DIAMETER, patch.id)
    estimates = np.empty(len(samples.points))
    origins = np.repeat(samples.points, DIAMETER_RAYS, axis=0)
    directions = np.concatenate([
        cone_directions(-n, DIAMETER_CONE_HALF_ANGLE, DIAMETER_RAYS, gen)
        for n in samples.normals])
    hits = ray_mesh_first_hit(origins, directions, all_v, all_f,
                              t_min=1e-6, t_max=DOMAIN_DIAGONAL)
    hits = hits.reshape(-1, DIAMETER_RAYS)
    for i, row in enumerate(hits):
        kept = row[np.isfinite(row)]
        estimates[i] = np.median(kept) if len(kept) else DOMAIN_DIAGONAL
    return float(estimates.mean())


def boundary_frames(patch, polyline_index, n):
    """Arc-length-uniform boundary samples with surface normal and tangent."""
    if not patch.is_open:
        raise NotOpenPatch(f"patch {patch.id} is not open")
    if not 0 <= polyline_index < len(patch.boundaries):
        raise IndexOutOfRange(f"patch {patch.id} has no boundary {polyline_index}")
    points, tangents = resample_polyline(patch.boundaries[polyline_index], n)
    query = MeshDistanceQuery(patch.vertices, patch.faces)
    _, _, fid = query.query(points)
    normals = query.normals[fid]
    return points, normals, tangents
