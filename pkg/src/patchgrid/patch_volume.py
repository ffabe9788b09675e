"""Per-patch occupancy grids with learnable feature vectors at grid points.

A patch volume is a uniform grid over the patch's bounding box, expanded by
half a cell on every side so the field always straddles the surface, with
only the cells that actually touch the patch marked occupied.  Cell boxes are
half-open from above: a point on a shared face belongs to the lower cell,
which makes every lookup deterministic.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import DegenerateMesh, EmptyVolume, OutsideVolume
from .geometry import tri_box_overlap

MIN_CELLS = 2
MAX_CELLS = 64
DIAMETER_FACTOR = 2.5
OCCUPANCY_DILATION = 1e-4

# corner c = dx + 2*dy + 4*dz
CORNER_OFFSETS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])


@dataclass
class PatchVolume:
    """Occupied-cell grid bounding one patch."""

    patch_id: int
    origin: np.ndarray           # (3,) lower corner of the grid
    cell_size: float
    dims: np.ndarray             # (3,) cell counts per axis
    occupancy: np.ndarray        # (nx, ny, nz) bool
    occupied_cells: np.ndarray = field(default=None)   # (C, 3) int, sorted by linear index
    cell_ordinal: np.ndarray = field(default=None)     # (nx, ny, nz) int, -1 where empty

    def __post_init__(self):
        if self.occupied_cells is None:
            idx = np.argwhere(self.occupancy)
            linear = idx[:, 0] + self.dims[0] * (idx[:, 1] + self.dims[1] * idx[:, 2])
            order = np.argsort(linear)
            self.occupied_cells = idx[order]
        if self.cell_ordinal is None:
            self.cell_ordinal = np.full(tuple(self.dims), -1, dtype=np.int64)
            self.cell_ordinal[tuple(self.occupied_cells.T)] = np.arange(len(self.occupied_cells))

    @property
    def grid_lo(self):
        return self.origin

    @property
    def grid_hi(self):
        return self.origin + self.cell_size * self.dims

    def cell_index(self, pts):
        """Grid cell of each point under the upper-closed convention.

        Returns (idx (n,3) int, inside_grid (n,) bool).  A point on a shared
        cell face maps to the lower cell; the grid's own lower faces are
        closed so the full grid box is covered.
        """
        pts = np.atleast_2d(pts)
        t = (pts - self.origin) / self.cell_size
        idx = np.ceil(t).astype(np.int64) - 1
        idx[(idx < 0) & (t >= 0.0)] = 0
        inside = np.all((idx >= 0) & (idx < self.dims), axis=1)
        return idx, inside

    def contains_many(self, pts):
        idx, inside = self.cell_index(pts)
        out = np.zeros(len(idx), dtype=bool)
        if inside.any():
            sub = idx[inside]
            out[inside] = self.occupancy[sub[:, 0], sub[:, 1], sub[:, 2]]
        return out

    def cell_box(self, idx):
        lo = self.origin + idx * self.cell_size
        return lo, lo + self.cell_size


def contains(volume, x):
    """True iff x lies in an occupied cell of the volume."""
    return bool(volume.contains_many(np.asarray(x, dtype=float)[None])[0])


def build_patch_volume(patch, diameter):
    """Adaptive grid around one patch.

    The cell size is capped at 2.5x the patch's average shape diameter and at
    half the largest bounding-box extent, then raised just enough to keep
    every axis within 64 cells.  The grid is the bounding box padded by half
    a cell per side; cells overlapping a triangle (dilated by 1e-4) are
    occupied.
    """
    if diameter <= 0:
        raise ValueError("diameter must be positive")
    lo, hi = patch.bounds()
    extent = hi - lo
    max_extent = float(extent.max())
    if max_extent <= 0:
        raise DegenerateMesh(f"patch {patch.id}: degenerate bounding box")
    h = min(DIAMETER_FACTOR * diameter, max_extent / 2.0)
    h = max(h, max_extent / (MAX_CELLS - 1))
    dims = np.clip(np.ceil((extent + h) / h).astype(np.int64), MIN_CELLS, MAX_CELLS)
    origin = lo - 0.5 * h

    occupancy = np.zeros(tuple(dims), dtype=bool)
    v0 = patch.vertices[patch.faces[:, 0]]
    v1 = patch.vertices[patch.faces[:, 1]]
    v2 = patch.vertices[patch.faces[:, 2]]
    tmin = np.minimum(np.minimum(v0, v1), v2)
    tmax = np.maximum(np.maximum(v0, v1), v2)
    half = np.full(3, 0.5 * h + OCCUPANCY_DILATION)
    for t in range(len(patch.faces)):
        c_lo = np.floor((tmin[t] - OCCUPANCY_DILATION - origin) / h).astype(np.int64)
        c_hi = np.floor((tmax[t] + OCCUPANCY_DILATION - origin) / h).astype(np.int64)
        c_lo = np.clip(c_lo, 0, dims - 1)
        c_hi = np.clip(c_hi, 0, dims - 1)
        cells = np.stack(np.meshgrid(
            np.arange(c_lo[0], c_hi[0] + 1),
            np.arange(c_lo[1], c_hi[1] + 1),
            np.arange(c_lo[2], c_hi[2] + 1), indexing="ij"), axis=-1).reshape(-1, 3)
        if occupancy[tuple(cells.T)].all():
            continue
        centers = origin + (cells + 0.5) * h
        hit = _tri_cells_overlap(v0[t], v1[t], v2[t], centers, half)
        occupancy[tuple(cells[hit].T)] = True
    if not occupancy.any():
        raise DegenerateMesh(f"patch {patch.id}: no occupied cells")
    return PatchVolume(patch_id=patch.id, origin=origin, cell_size=float(h),
                       dims=dims, occupancy=occupancy)


def _tri_cells_overlap(a, b, c, centers, half):
    """SAT test of one triangle against many same-size boxes."""
    n = len(centers)
    return tri_box_overlap(np.broadcast_to(a, (n, 3)) - centers,
                           np.broadcast_to(b, (n, 3)) - centers,
                           np.broadcast_to(c, (n, 3)) - centers,
                           np.zeros(3), half)


def clamp_to_volume(volume, x):
    """Nearest point to x in the union of occupied cells, plus the gap."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    clamped, residual = clamp_to_volume_many(volume, np.atleast_2d(pts))
    if single:
        return clamped[0], float(residual[0])
    return clamped, residual


def clamp_to_volume_many(volume, pts):
    if len(volume.occupied_cells) == 0:
        raise EmptyVolume(f"patch {volume.patch_id}: empty volume")
    h = volume.cell_size
    # fast path: clip to the grid box and accept if that lands in occupancy
    clipped = np.clip(pts, volume.grid_lo, volume.grid_hi)
    idx, _ = volume.cell_index(clipped)
    idx = np.clip(idx, 0, volume.dims - 1)
    fast = volume.occupancy[idx[:, 0], idx[:, 1], idx[:, 2]]
    out = np.where(fast[:, None], clipped, 0.0)

    rest = np.nonzero(~fast)[0]
    if len(rest):
        cell_lo = volume.origin + volume.occupied_cells * h
        chunk = max(1, int(2e6 / max(len(cell_lo), 1)))
        for s in range(0, len(rest), chunk):
            sel = rest[s:s + chunk]
            p = pts[sel][:, None, :]
            cand = np.clip(p, cell_lo[None], cell_lo[None] + h)
            d2 = np.einsum("ncK,ncK->nc", p - cand, p - cand)
            best = np.argmin(d2, axis=1)
            out[sel] = cand[np.arange(len(sel)), best]
    residual = np.linalg.norm(pts - out, axis=1)
    return out, residual


@dataclass
class PatchFeatureVolume:
    """Feature vectors at the grid points of a patch volume.

    Only points incident to occupied cells are stored; ``features`` rows are
    ordered by ascending grid-point linear index.
    """

    volume: PatchVolume
    dim: int
    features: np.ndarray          # (R, D)
    point_ids: np.ndarray         # (R,) grid-point linear ids, sorted
    cell_corner_rows: np.ndarray  # (C, 8) row into features per occupied cell

    def point_coords(self):
        """World coordinates of the stored grid points."""
        n = self.volume.dims + 1
        k, rem = np.divmod(self.point_ids, n[0] * n[1])
        j, i = np.divmod(rem, n[0])
        ijk = np.stack([i, j, k], axis=1)
        return self.volume.origin + ijk * self.volume.cell_size


def init_features(volume, dim, seed):
    """Gaussian(0, 0.01) features at every corner of every occupied cell."""
    if dim < 1:
        raise ValueError("feature dimension must be positive")
    n = volume.dims + 1
    corners = (volume.occupied_cells[:, None, :] + CORNER_OFFSETS[None]).reshape(-1, 3)
    ids = corners[:, 0] + n[0] * (corners[:, 1] + n[1] * corners[:, 2])
    point_ids = np.unique(ids)
    gen = rng.stream(seed, rng.FEATURES, volume.patch_id)
    features = gen.normal(0.0, 0.01, size=(len(point_ids), dim))
    features = features.astype(np.float32).astype(np.float64)
    rows = np.searchsorted(point_ids, ids.reshape(-1, 8))
    return PatchFeatureVolume(volume=volume, dim=dim, features=features,
                              point_ids=point_ids, cell_corner_rows=rows)


def interpolation_data(fv, pts):
    """Rows, trilinear weights and weight gradients for a batch of points.

    Points must lie inside occupied cells.  Returns (rows (n,8) int,
    w (n,8), dw (n,8,3)); dw is the spatial gradient of each weight.
    """
    vol = fv.volume
    idx, inside = vol.cell_index(pts)
    if not inside.all():
        raise OutsideVolume("point outside the grid")
    ordinal = vol.cell_ordinal[idx[:, 0], idx[:, 1], idx[:, 2]]
    if (ordinal < 0).any():
        raise OutsideVolume("point in an unoccupied cell")
    rows = fv.cell_corner_rows[ordinal]
    h = vol.cell_size
    u = (pts - (vol.origin + idx * h)) / h          # (n, 3) in [0, 1]
    w = np.empty((len(pts), 8))
    dw = np.empty((len(pts), 8, 3))
    for c, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        fx = u[:, 0] if dx else 1.0 - u[:, 0]
        fy = u[:, 1] if dy else 1.0 - u[:, 1]
        fz = u[:, 2] if dz else 1.0 - u[:, 2]
        w[:, c] = fx * fy * fz
        sx = 1.0 if dx else -1.0
        sy = 1.0 if dy else -1.0
        sz = 1.0 if dz else -1.0
        dw[:, c, 0] = sx * fy * fz / h
        dw[:, c, 1] = sy * fx * fz / h
        dw[:, c, 2] = sz * fx * fy / h
    return rows, w, dw


def features_at_many(fv, pts):
    rows, w, _ = interpolation_data(fv, pts)
    return np.einsum("nc,ncd->nd", w, fv.features[rows])


def feature_at(fv, x):
    """Trilinear feature at x; x must lie in an occupied cell."""
    return features_at_many(fv, np.asarray(x, dtype=float)[None])[0]


def feature_jacobian(fv, x):
    """Exact spatial Jacobian (D, 3) of the trilinear feature field at x.

    On a shared cell face the lower cell's one-sided Jacobian is returned.
    """
    rows, _, dw = interpolation_data(fv, np.asarray(x, dtype=float)[None])
    return np.einsum("ck,cd->dk", dw[0], fv.features[rows[0]])
