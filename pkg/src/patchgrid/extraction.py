"""Mesh extraction from composed fields, trimming-patch masking, mesh I/O.

Each global component of the adjacency graph is extracted independently on
one shared uniform grid, so disconnected parts (thin plates, separate
shells) never interfere.  Marching cubes runs only on cells whose eight
corners are all covered by at least one participating patch volume and
whose smallest corner magnitude lies within a band of two grid steps, which
keeps open surfaces from inventing far-field geometry.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import EmptyLevelSet, IoError
from .mc_tables import EDGE_TABLE, TRI_TABLE
from .merge_grid import eval_component_field, global_components
from .shape_io import DOMAIN_HI, DOMAIN_LO

BAND_STEPS = 2.0
DEGENERATE_AREA = 1e-12

# cell edge k -> (corner offset of its low end, axis it runs along)
_EDGE_ANCHOR = np.array([
    [0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 0],
    [0, 0, 1], [1, 0, 1], [0, 1, 1], [0, 0, 1],
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
])
_EDGE_AXIS = np.array([0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2])


@dataclass
class Mesh:
    """Triangle mesh with per-triangle winner patch and component ids."""

    vertices: np.ndarray
    faces: np.ndarray
    winners: np.ndarray = None
    components: np.ndarray = None

    def __post_init__(self):
        if self.winners is None:
            self.winners = np.full(len(self.faces), -1, dtype=np.int64)
        if self.components is None:
            self.components = np.full(len(self.faces), -1, dtype=np.int64)

    def triangle_areas(self):
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def boundary_edges(self):
        """Edges used by exactly one triangle."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                            self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq[counts == 1]


def concatenate_meshes(meshes):
    if not meshes:
        return Mesh(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=np.int64))
    verts, faces, winners, comps = [], [], [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        winners.append(m.winners)
        comps.append(m.components)
        offset += len(m.vertices)
    return Mesh(vertices=np.concatenate(verts), faces=np.concatenate(faces),
                winners=np.concatenate(winners), components=np.concatenate(comps))


# ---------------------------------------------------------------------------
# Marching cubes kernel
# ---------------------------------------------------------------------------

def marching_cubes(values, coords, defined=None, band=None):
    """Standard marching cubes over a dense corner grid.

    values: (nx, ny, nz) field samples at corners; coords: per-axis corner
    coordinate arrays; defined: optional bool mask limiting cells to those
    with all 8 corners defined; band: optional |value| bound on each cell's
    smallest corner magnitude.  Vertices on shared cell edges are welded.
    Returns (vertices, faces) with outward orientation for negative-inside
    fields.
    """
    nx, ny, nz = values.shape
    if defined is None:
        defined = np.isfinite(values)
    inside = (values < 0.0) & defined

    cx, cy, cz = nx - 1, ny - 1, nz - 1
    # cell passes when all corners defined (and banded)
    ok = np.ones((cx, cy, cz), dtype=bool)
    low = np.full((cx, cy, cz), np.inf)
    cube = np.zeros((cx, cy, cz), dtype=np.int64)
    corner_bits = ((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
                   (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1))
    for bit, (dx, dy, dz) in enumerate(corner_bits):
        sl = (slice(dx, cx + dx), slice(dy, cy + dy), slice(dz, cz + dz))
        ok &= defined[sl]
        low = np.minimum(low, np.abs(values[sl]))
        cube |= inside[sl].astype(np.int64) << bit
    if band is not None:
        ok &= low < band
    ok &= (cube != 0) & (cube != 255)
    idx = np.argwhere(ok)
    if len(idx) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    cube = cube[ok]

    # per-cell edge vertices, welded through global edge ids
    tri_rows = TRI_TABLE[cube]                     # (m, 16)
    corner_lin = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]

    def edge_ids(cells):
        anchor = cells[:, None, :] + _EDGE_ANCHOR[None]
        lin = (anchor[..., 0] * ny + anchor[..., 1]) * nz + anchor[..., 2]
        return lin * 3 + _EDGE_AXIS[None, :]

    eids = edge_ids(idx)                           # (m, 12)
    used_mask = (EDGE_TABLE[cube][:, None] >> np.arange(12)[None, :]) & 1
    used = np.unique(eids[used_mask.astype(bool)])

    # interpolate all used edges once
    lin, axis = np.divmod(used, 3)
    gx, rem = np.divmod(lin, ny * nz)
    gy, gz = np.divmod(rem, nz)
    pa = np.stack([coords[0][gx], coords[1][gy], coords[2][gz]], axis=1)
    step = np.array([coords[0][1] - coords[0][0],
                     coords[1][1] - coords[1][0],
                     coords[2][1] - coords[2][0]])
    off = np.array([gx, gy, gz]).T
    other = off.copy()
    other[np.arange(len(axis)), axis] += 1
    va = values[gx, gy, gz]
    vb = values[other[:, 0], other[:, 1], other[:, 2]]
    denom = va - vb
    degen = np.abs(denom) < 1e-300
    t = np.where(degen, 0.5, va / np.where(degen, 1.0, denom))
    t = np.clip(t, 0.0, 1.0)
    pb = pa.copy()
    pb[np.arange(len(axis)), axis] += step[axis]
    verts = pa + t[:, None] * (pb - pa)

    cells_rep, slot = np.nonzero(tri_rows >= 0)
    edge_local = tri_rows[cells_rep, slot]
    vidx = np.searchsorted(used, eids[cells_rep, edge_local])
    faces = vidx.reshape(-1, 3)
    # the table's winding points into the solid; flip for outward normals
    faces = faces[:, [0, 2, 1]]
    return verts, faces


# ---------------------------------------------------------------------------
# Component extraction
# ---------------------------------------------------------------------------

_COARSE_STRIDE = 4


def _refinement_mask(defined3, pts, grid, fields, comp_ids, step):
    """Fine corners worth evaluating exactly.

    Samples the field on every _COARSE_STRIDE-th corner; a coarse cell is
    kept when a coarse corner value is within the band plus the coarse cell
    diagonal times a slope allowance, or when its corner definedness is
    mixed (a frontier could hide near-surface cells).  Surface-crossing fine
    cells always lie inside kept coarse cells, so skipping the rest cannot
    cut the mesh.
    """
    s = _COARSE_STRIDE
    shape3 = defined3.shape
    if min(shape3) <= 2 * s:
        return np.ones(shape3, dtype=bool)
    pts3 = pts.reshape(shape3 + (3,))
    ix = list(range(0, shape3[0], s)) + ([shape3[0] - 1] if (shape3[0] - 1) % s else [])
    iy = list(range(0, shape3[1], s)) + ([shape3[1] - 1] if (shape3[1] - 1) % s else [])
    iz = list(range(0, shape3[2], s)) + ([shape3[2] - 1] if (shape3[2] - 1) % s else [])
    gx, gy, gz = np.meshgrid(ix, iy, iz, indexing="ij")
    cpts = pts3[gx, gy, gz].reshape(-1, 3)
    cdef = defined3[gx, gy, gz].reshape(-1)
    cvals = np.full(len(cpts), np.inf)
    if cdef.any():
        v, _, d = eval_component_field(grid, fields, cpts[cdef],
                                       set(comp_ids), mode="local")
        idx = np.nonzero(cdef)[0]
        cvals[idx[d]] = v[d]
        cdef[idx[~d]] = False
    nx, ny, nz = len(ix), len(iy), len(iz)
    cvals = cvals.reshape(nx, ny, nz)
    cdef = cdef.reshape(nx, ny, nz)

    # threshold: band + half the coarse cell diagonal with a slope allowance
    # (fields are trained toward unit gradient; 1.6 leaves generous slack)
    thresh = (BAND_STEPS + 1.6 * 0.5 * np.sqrt(3.0) * s) * step
    keep_cell = np.zeros((nx - 1, ny - 1, nz - 1), dtype=bool)
    any_def = np.zeros_like(keep_cell)
    all_def = np.ones_like(keep_cell)
    near = np.zeros_like(keep_cell)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                sl = (slice(dx, nx - 1 + dx), slice(dy, ny - 1 + dy), slice(dz, nz - 1 + dz))
                any_def |= cdef[sl]
                all_def &= cdef[sl]
                near |= cdef[sl] & (np.abs(cvals[sl]) < thresh)
    keep_cell = (any_def & ~all_def) | near

    out = np.zeros(shape3, dtype=bool)
    ixa = np.asarray(ix)
    iya = np.asarray(iy)
    iza = np.asarray(iz)
    for cx, cy, cz in np.argwhere(keep_cell):
        out[ixa[cx]:ixa[cx + 1] + 1, iya[cy]:iya[cy + 1] + 1, iza[cz]:iza[cz + 1] + 1] = True
    return out


def _component_bounds(fields, comp_ids):
    los, his = [], []
    for pid in comp_ids:
        fv = getattr(fields, "feature_volumes", {}).get(pid)
        if fv is None:
            return None
        los.append(fv.volume.grid_lo)
        his.append(fv.volume.grid_hi)
    return np.min(los, axis=0), np.max(his, axis=0)


def extract_component(grid, fields, comp_ids, resolution, comp_index=0):
    """Banded marching cubes over one global component's merged field."""
    step = 2.0 / resolution
    coords_full = (np.arange(resolution + 3) - 1) * step - 1.0

    bounds = _component_bounds(fields, comp_ids)
    axes = []
    for k in range(3):
        c = coords_full
        if bounds is not None:
            keep = (c >= bounds[0][k] - step) & (c <= bounds[1][k] + step)
            c = c[keep]
        axes.append(c)
    if any(len(c) < 2 for c in axes):
        return Mesh(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=np.int64))

    shape3 = tuple(len(c) for c in axes)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    defined = np.zeros(len(pts), dtype=bool)
    for pid in comp_ids:
        defined |= fields.defined(pid, pts)

    # coarse-to-fine: only corners inside coarse cells that could touch the
    # band get exact values; everything else stays unevaluated (treated as
    # undefined, which can only exclude cells far outside the band)
    need = _refinement_mask(defined.reshape(shape3), pts, grid, fields,
                            comp_ids, step)
    values = np.full(len(pts), np.inf)
    sel = np.nonzero(defined & need.reshape(-1))[0]
    if len(sel):
        v, _, d = eval_component_field(grid, fields, pts[sel],
                                       set(comp_ids), mode="local")
        values[sel[d]] = v[d]
        defined[sel[~d]] = False
    defined &= need.reshape(-1)

    verts, faces = marching_cubes(values.reshape(shape3), axes,
                                  defined=defined.reshape(shape3),
                                  band=BAND_STEPS * step)
    if len(faces) == 0:
        return Mesh(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=np.int64))

    # clamp the tiny overshoot beyond the domain, then weld vertices that the
    # clamp made coincident so dropping collapsed faces cannot open holes
    np.clip(verts, DOMAIN_LO, DOMAIN_HI, out=verts)
    uniq, remap = np.unique(verts, axis=0, return_inverse=True)
    verts, faces = _collapse_degenerate(uniq, remap[faces])

    centroids = verts[faces].mean(axis=1)
    _, winners, d = eval_component_field(grid, fields, centroids,
                                         set(comp_ids), mode="local")
    winners[~d] = comp_ids[0]
    return Mesh(vertices=verts, faces=faces, winners=winners,
                components=np.full(len(faces), comp_index, dtype=np.int64))


def _collapse_degenerate(verts, faces, max_rounds=8):
    """Remove degenerate faces without opening holes.

    Faces with repeated indices are dropped outright; sliver faces at or
    below the area tolerance have their two closest vertices merged, which
    collapses the sliver to an edge and keeps the neighbours consistent.
    """
    for _ in range(max_rounds):
        distinct = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
                    & (faces[:, 0] != faces[:, 2]))
        faces = faces[distinct]
        if len(faces) == 0:
            break
        areas = Mesh(vertices=verts, faces=faces).triangle_areas()
        bad = np.nonzero(areas <= DEGENERATE_AREA)[0]
        if len(bad) == 0:
            break
        merge = np.arange(len(verts))
        for b in bad:
            tri = faces[b]
            p = verts[tri]
            d = [np.linalg.norm(p[0] - p[1]), np.linalg.norm(p[1] - p[2]),
                 np.linalg.norm(p[2] - p[0])]
            pairs = [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])]
            a, b2 = pairs[int(np.argmin(d))]
            lo, hi = min(a, b2), max(a, b2)
            merge[hi] = lo
        # resolve chains
        for _ in range(4):
            merge = merge[merge]
        faces = merge[faces]
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return verts[used], remap[faces]


def extract_mesh(model, resolution):
    """Extract the full shape: every global component independently."""
    if resolution < 16:
        raise ValueError("resolution must be at least 16")
    fields = model.fields()
    meshes = []
    comps = global_components(sorted(model.feature_volumes), model.merge_grid.adjacency)
    for ci, comp in enumerate(comps):
        meshes.append(extract_component(model.merge_grid, fields, list(comp),
                                        resolution, comp_index=ci))
    out = concatenate_meshes(meshes)
    if len(out.faces) == 0:
        raise EmptyLevelSet("no surface found at the zero level")
    return out


def extract_from_fields(grid, fields, components, resolution):
    """Extraction driven by an explicit field provider (e.g. analytic SDFs)."""
    meshes = [extract_component(grid, fields, list(comp), resolution, comp_index=ci)
              for ci, comp in enumerate(components)]
    out = concatenate_meshes(meshes)
    if len(out.faces) == 0:
        raise EmptyLevelSet("no surface found at the zero level")
    return out


# ---------------------------------------------------------------------------
# Trimming mask
# ---------------------------------------------------------------------------

def _gradient_fd(fields, pid, pts, h=1e-5):
    g = np.zeros((len(pts), 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (fields.values_extended(pid, pts + e)
                   - fields.values_extended(pid, pts - e)) / (2 * h)
    return g


def mask_virtual(mesh, model_or_fields, snap=True, snap_step=None):
    """Remove triangles won by virtual trimming patches.

    Orphaned vertices are dropped and indices rebuilt.  With ``snap``, the
    vertices of the fresh cut boundary are projected onto the trimming
    surface (staying on the parent surface), which pins the open boundary
    to the trim curve rather than to the marching-cubes cell it fell in.
    """
    fields = model_or_fields.fields() if hasattr(model_or_fields, "fields") else model_or_fields
    virtual = np.array([fields.is_virtual(int(w)) for w in mesh.winners], dtype=bool)
    keep = ~virtual
    faces = mesh.faces[keep]
    winners = mesh.winners[keep]
    components = mesh.components[keep]
    vertices = mesh.vertices

    if snap and virtual.any() and keep.any():
        # cut edges: shared by one kept and one removed triangle
        def edge_set(f):
            e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
            return np.sort(e, axis=1)

        kept_edges = edge_set(faces)
        removed = mesh.faces[virtual]
        removed_edges = edge_set(removed)
        kept_keys = {tuple(e) for e in kept_edges}
        cut_vertices = set()
        trim_of = {}
        removed_winner = np.repeat(mesh.winners[virtual], 3)
        for e, w in zip(removed_edges, removed_winner):
            key = (int(e[0]), int(e[1]))
            if key in kept_keys:
                cut_vertices.update(key)
                trim_of[key[0]] = int(w)
                trim_of[key[1]] = int(w)
        if cut_vertices:
            vertices = vertices.copy()
            vt = np.array(sorted(cut_vertices))
            parent = {}
            for f, w in zip(faces, winners):
                for v in f:
                    parent.setdefault(int(v), int(w))
            max_move = snap_step if snap_step is not None else np.inf
            for v in vt:
                pid = parent.get(int(v))
                tid = trim_of.get(int(v))
                if pid is None or tid is None:
                    continue
                x = vertices[v].copy()
                x0 = x.copy()
                for _ in range(3):
                    fp = fields.values_extended(pid, x[None])[0]
                    ft = fields.values_extended(tid, x[None])[0]
                    gp = _gradient_fd(fields, pid, x[None])[0]
                    gt = _gradient_fd(fields, tid, x[None])[0]
                    jac = np.stack([gp, gt])
                    try:
                        dx = np.linalg.lstsq(jac, -np.array([fp, ft]), rcond=None)[0]
                    except np.linalg.LinAlgError:
                        break
                    x = x + dx
                if np.linalg.norm(x - x0) <= max_move and np.all(np.isfinite(x)):
                    vertices[v] = np.clip(x, DOMAIN_LO, DOMAIN_HI)

    used = np.unique(faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    out = Mesh(vertices=vertices[used], faces=remap[faces],
               winners=winners, components=components)
    keep2 = out.triangle_areas() > DEGENERATE_AREA
    return Mesh(vertices=out.vertices, faces=out.faces[keep2],
                winners=out.winners[keep2], components=out.components[keep2])


# ---------------------------------------------------------------------------
# Mesh files
# ---------------------------------------------------------------------------

def write_mesh(mesh, path, fmt=None):
    """Write OBJ (plain v/f) or binary little-endian PLY with face ids."""
    fmt = fmt or (str(path).rsplit(".", 1)[-1].lower() if "." in str(path) else "obj")
    if fmt not in ("obj", "ply"):
        raise IoError(f"unsupported mesh format {fmt!r}")
    try:
        if fmt == "obj":
            with open(path, "w") as fh:
                for v in mesh.vertices:
                    fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
                for f in mesh.faces:
                    fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
        else:
            with open(path, "wb") as fh:
                header = (
                    "ply\nformat binary_little_endian 1.0\n"
                    f"element vertex {len(mesh.vertices)}\n"
                    "property float x\nproperty float y\nproperty float z\n"
                    f"element face {len(mesh.faces)}\n"
                    "property list uchar int vertex_indices\n"
                    "property int patch_id\nproperty int component_id\n"
                    "end_header\n")
                fh.write(header.encode("ascii"))
                fh.write(mesh.vertices.astype("<f4").tobytes())
                for f, w, c in zip(mesh.faces, mesh.winners, mesh.components):
                    fh.write(struct.pack("<B3i2i", 3, int(f[0]), int(f[1]),
                                         int(f[2]), int(w), int(c)))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_mesh(path):
    """Read a mesh written by write_mesh (or any OBJ / binary-LE PLY)."""
    from .shape_io import read_obj, read_ply
    ext = str(path).rsplit(".", 1)[-1].lower()
    try:
        if ext == "obj":
            v, f = read_obj(path)
            return Mesh(vertices=v, faces=f)
        v, f, props = read_ply(path)
        winners = props.get("patch_id")
        comps = props.get("component_id")
        return Mesh(vertices=v, faces=f,
                    winners=None if winners is None else winners.astype(np.int64),
                    components=None if comps is None else comps.astype(np.int64))
    except FileNotFoundError as exc:
        raise IoError(str(exc)) from exc
