"""Per-patch field providers consumed by the CSG evaluator and extractor.

Two implementations share one small interface: the learned fields of a
fitted model, and analytic stand-ins (exact SDFs defined everywhere) used by
verification against closed-form geometry.
"""

import numpy as np

from .decoder import decode_points, forward
from .patch_volume import clamp_to_volume_many, features_at_many


class LearnedFields:
    """Field views over a decoder plus a dict of feature volumes."""

    def __init__(self, decoder, feature_volumes, virtual_ids=()):
        self.decoder = decoder
        self.feature_volumes = feature_volumes
        self.virtual_ids = frozenset(virtual_ids)

    def patch_ids(self):
        return sorted(self.feature_volumes)

    def is_virtual(self, patch_id):
        return patch_id in self.virtual_ids

    def defined(self, patch_id, pts):
        return self.feature_volumes[patch_id].volume.contains_many(pts)

    def values(self, patch_id, pts):
        """Field values at points known to lie inside the patch volume."""
        if len(pts) == 0:
            return np.zeros(0)
        return decode_points(self.decoder, self.feature_volumes[patch_id], pts)

    def values_extended(self, patch_id, pts):
        """Clamp-extended values: f(nearest in-volume point) + distance."""
        if len(pts) == 0:
            return np.zeros(0)
        fv = self.feature_volumes[patch_id]
        clamped, residual = clamp_to_volume_many(fv.volume, pts)
        return decode_points(self.decoder, fv, clamped) + residual


class AnalyticFields:
    """Closed-form fields defined on the whole domain."""

    def __init__(self, functions, virtual_ids=()):
        self.functions = functions            # patch_id -> callable (n,3)->(n,)
        self.virtual_ids = frozenset(virtual_ids)

    def patch_ids(self):
        return sorted(self.functions)

    def is_virtual(self, patch_id):
        return patch_id in self.virtual_ids

    def defined(self, patch_id, pts):
        return np.ones(len(pts), dtype=bool)

    def values(self, patch_id, pts):
        if len(pts) == 0:
            return np.zeros(0)
        return np.asarray(self.functions[patch_id](np.atleast_2d(pts)), dtype=float)

    values_extended = values
