"""Virtual trimming patches that cut open-boundary patches to size.

A trimming patch is an implicit surface passing through a boundary polyline.
Its pseudo-normals point away from the parent patch's interior, so composing
parent and trimming field with max keeps the interior and removes the
extraneous extension beyond the boundary.  Trimming patches train through
the ordinary patch loss, using their supervision points as surface samples.
"""

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import DegenerateBoundary, NotOpenPatch
from .geometry import point_to_polyline_distance
from .patch_volume import PatchVolume
from .shape_io import boundary_frames, sample_patch

BAND_CELLS = 2          # half-width of the trimming volume in parent cells


@dataclass
class TrimmingPatch:
    """Supervision and volume for one boundary polyline of an open patch."""

    id: int
    parent_patch: int
    points: np.ndarray            # (n, 3) on-curve supervision points
    pseudo_normals: np.ndarray    # (n, 3) unit vectors, away from the interior
    volume: PatchVolume
    polyline_index: int = 0
    virtual: bool = True


def build_trimming_patch(patch, polyline_index, shape, n, trim_id=None,
                         cell_size=None, seed=0):
    """Construct the trimming patch for one boundary polyline.

    Pseudo-normals are normalize(N_n x N_t) with the sign chosen per sample
    so that the nearest interior surface sample lies on the negative side.
    The volume is a band of the given cell size around the polyline, two
    cells to each side.
    """
    if not patch.is_open:
        raise NotOpenPatch(f"patch {patch.id} is not open")
    polyline = patch.boundaries[polyline_index]
    if np.linalg.norm(np.diff(polyline, axis=0), axis=1).sum() <= 0:
        raise DegenerateBoundary(f"patch {patch.id} boundary {polyline_index} has zero length")

    points, n_surface, n_tangent = boundary_frames(patch, polyline_index, n)
    ns = np.cross(n_surface, n_tangent)
    norms = np.linalg.norm(ns, axis=1)
    if norms.min() <= 1e-12:
        raise DegenerateBoundary(f"patch {patch.id} boundary {polyline_index}: degenerate frame")
    ns /= norms[:, None]

    if cell_size is None:
        lo, hi = patch.bounds()
        cell_size = max(float((hi - lo).max()) / 8.0, 1e-3)

    # orient away from the interior, probing surface samples well off the rim
    interior = sample_patch(patch, max(512, 4 * n), seed)
    rim_dist = point_to_polyline_distance(interior.points, polyline)
    keep = rim_dist > 0.25 * cell_size
    probe = interior.points[keep] if keep.any() else interior.points
    from scipy.spatial import cKDTree
    tree = cKDTree(probe)
    _, nearest = tree.query(points)
    toward_interior = probe[nearest] - points
    flip = np.einsum("ij,ij->i", toward_interior, ns) > 0
    ns[flip] *= -1.0

    volume = _band_volume(polyline, cell_size, trim_id if trim_id is not None else -1)
    return TrimmingPatch(id=trim_id if trim_id is not None else -1,
                         parent_patch=patch.id, points=points,
                         pseudo_normals=ns, volume=volume,
                         polyline_index=polyline_index)


def _band_volume(polyline, h, patch_id):
    """Occupied cells within BAND_CELLS * h of the polyline."""
    lo = polyline.min(axis=0) - (BAND_CELLS + 0.5) * h
    hi = polyline.max(axis=0) + (BAND_CELLS + 0.5) * h
    dims = np.maximum(np.ceil((hi - lo) / h).astype(np.int64), 2)
    grid = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=-1)
    cells = grid.reshape(-1, 3)
    centers = lo + (cells + 0.5) * h
    near = point_to_polyline_distance(centers, polyline) <= BAND_CELLS * h
    occupancy = np.zeros(tuple(dims), dtype=bool)
    occupancy[tuple(cells[near].T)] = True
    return PatchVolume(patch_id=patch_id, origin=lo, cell_size=float(h),
                       dims=dims, occupancy=occupancy)


def trim_supervision_as_patch_loss(trim, model, config):
    """Patch-style loss evaluated on the trimming supervision.

    Surface and normal terms at the on-curve points, pseudo-SDF and gradient
    terms at offsets along the pseudo-normals; identical machinery to the
    per-patch loss so trimming patches train through the same path.
    """
    from .training import patch_terms_for_samples
    gen = rng.stream(config.seed, rng.TRIM, trim.id)
    terms, _ = patch_terms_for_samples(
        model.decoder, model.feature_volumes[trim.id],
        trim.points, trim.pseudo_normals, off_points=None, config=config, gen=gen)
    return terms
