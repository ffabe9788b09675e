"""Reconstruction metrics: Chamfer, Hausdorff, normal consistency, F-score.

Both meshes are sampled with 300k area-uniform points; distances are exact
two-sided closest point-to-surface queries.  NC is reported as 1 - |cos|
between a sample's normal and the face normal at its closest point (lower is
better).  The F-score is the percentage of pooled samples within 0.001.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import EmptyMesh
from .geometry import MeshDistanceQuery, face_normals, triangle_areas

SAMPLES_PER_SIDE = 300_000
F_SCORE_TAU = 1e-3


@dataclass
class MetricReport:
    cd: float                 # mean two-sided distance
    hd: float                 # max two-sided distance
    nc: float                 # mean (1 - |cos|), symmetrized
    f_score: float            # percent of pooled samples below tau
    sample_count: int = SAMPLES_PER_SIDE
    seed: int = 0
    tau: float = F_SCORE_TAU

    def scaled(self):
        """Reporting units: CD x1e4, HD x1e3, NC x1e2."""
        return {"cd_x1e4": self.cd * 1e4, "hd_x1e3": self.hd * 1e3,
                "nc_x1e2": self.nc * 1e2, "f_score": self.f_score}

    def as_dict(self):
        out = {"cd": self.cd, "hd": self.hd, "nc": self.nc,
               "f_score": self.f_score, "sample_count": self.sample_count,
               "seed": self.seed, "tau": self.tau}
        out.update(self.scaled())
        return out


def sample_mesh_surface(vertices, faces, n, seed, tag=0):
    """Area-uniform samples with face normals."""
    areas = triangle_areas(vertices, faces)
    total = areas.sum()
    if total <= 0 or len(faces) == 0:
        raise EmptyMesh("mesh has no area to sample")
    gen = rng.stream(seed, rng.METRICS, tag)
    counts = gen.multinomial(n, areas / total)
    fid = np.repeat(np.arange(len(faces)), counts)
    u = gen.uniform(size=n)
    v = gen.uniform(size=n)
    su = np.sqrt(u)
    w0, w1, w2 = 1.0 - su, su * (1.0 - v), su * v
    tri = faces[fid]
    pts = (w0[:, None] * vertices[tri[:, 0]] + w1[:, None] * vertices[tri[:, 1]]
           + w2[:, None] * vertices[tri[:, 2]])
    normals = face_normals(vertices, faces)[fid]
    return pts, normals


def _one_side(points, normals, other_query):
    dist, _, fid = other_query.query(points)
    cos = np.abs(np.einsum("ij,ij->i", normals, other_query.normals[fid]))
    return dist, 1.0 - np.clip(cos, 0.0, 1.0)


def evaluate(mesh, gt_mesh, seed=0, samples=SAMPLES_PER_SIDE, tau=F_SCORE_TAU):
    """Two-sided metrics between an extracted mesh and ground truth.

    Accepts extraction.Mesh objects or (vertices, faces) pairs.
    """
    va, fa = _as_arrays(mesh)
    vb, fb = _as_arrays(gt_mesh)
    if len(fa) == 0 or len(fb) == 0:
        raise EmptyMesh("cannot evaluate an empty mesh")
    pa, na = sample_mesh_surface(va, fa, samples, seed, tag=1)
    pb, nb = sample_mesh_surface(vb, fb, samples, seed, tag=2)
    qa = MeshDistanceQuery(va, fa)
    qb = MeshDistanceQuery(vb, fb)
    d_ab, nc_ab = _one_side(pa, na, qb)
    d_ba, nc_ba = _one_side(pb, nb, qa)
    pooled = np.concatenate([d_ab, d_ba])
    return MetricReport(
        cd=float(0.5 * (d_ab.mean() + d_ba.mean())),
        hd=float(max(d_ab.max(), d_ba.max())),
        nc=float(0.5 * (nc_ab.mean() + nc_ba.mean())),
        f_score=float(100.0 * (pooled < tau).mean()),
        sample_count=samples, seed=seed, tau=tau)


def _as_arrays(mesh):
    if hasattr(mesh, "vertices"):
        return np.asarray(mesh.vertices, dtype=float), np.asarray(mesh.faces)
    v, f = mesh
    return np.asarray(v, dtype=float), np.asarray(f)
