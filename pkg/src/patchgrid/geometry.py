"""Low-level mesh geometry kernels shared across the package.

Everything here is pure numpy over float64 arrays: triangle measures,
triangle/box overlap (separating axis test), ray casting, exact
point-to-triangle distances with a centroid-tree accelerated closest-point
query, and polyline resampling.
"""

import numpy as np
from scipy.spatial import cKDTree


def triangle_areas(vertices, faces):
    """Areas of each face of an indexed triangle mesh."""
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def face_normals(vertices, faces):
    """Unit normals per face; zero-area faces get a zero normal."""
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    n = np.cross(b - a, c - a)
    norms = np.linalg.norm(n, axis=1)
    ok = norms > 0
    n[ok] /= norms[ok, None]
    return n


# ---------------------------------------------------------------------------
# Triangle / box overlap (separating axis test)
# ---------------------------------------------------------------------------

def tri_box_overlap(v0, v1, v2, center, half):
    """SAT overlap test between triangles and one axis-aligned box.

    v0, v1, v2: (n, 3) triangle corners; center, half: (3,) box center and
    half extents.  Returns (n,) bool.  Touching counts as overlap.
    """
    a = v0 - center
    b = v1 - center
    c = v2 - center
    ok = np.ones(len(a), dtype=bool)

    # box face axes
    for k in range(3):
        lo = np.minimum(np.minimum(a[:, k], b[:, k]), c[:, k])
        hi = np.maximum(np.maximum(a[:, k], b[:, k]), c[:, k])
        ok &= (lo <= half[k]) & (hi >= -half[k])
    if not ok.any():
        return ok

    edges = (b - a, c - b, a - c)
    # 9 cross-product axes: e_i x unit_k
    for e in edges:
        for k in range(3):
            axis = np.zeros((len(a), 3))
            k1, k2 = (k + 1) % 3, (k + 2) % 3
            axis[:, k1] = -e[:, k2]
            axis[:, k2] = e[:, k1]
            pa = np.einsum("ij,ij->i", a, axis)
            pb = np.einsum("ij,ij->i", b, axis)
            pc = np.einsum("ij,ij->i", c, axis)
            r = half[0] * np.abs(axis[:, 0]) + half[1] * np.abs(axis[:, 1]) + half[2] * np.abs(axis[:, 2])
            lo = np.minimum(np.minimum(pa, pb), pc)
            hi = np.maximum(np.maximum(pa, pb), pc)
            ok &= (lo <= r) & (hi >= -r)

    # triangle plane axis
    n = np.cross(edges[0], edges[1])
    d = np.einsum("ij,ij->i", n, a)
    r = half[0] * np.abs(n[:, 0]) + half[1] * np.abs(n[:, 1]) + half[2] * np.abs(n[:, 2])
    ok &= np.abs(d) <= r
    return ok


def tris_overlapping_box(vertices, faces, lo, hi, dilate=0.0):
    """Indices of faces overlapping the box [lo, hi] dilated by ``dilate``."""
    lo = np.asarray(lo, dtype=float) - dilate
    hi = np.asarray(hi, dtype=float) + dilate
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    tmin = np.minimum(np.minimum(v0, v1), v2)
    tmax = np.maximum(np.maximum(v0, v1), v2)
    cand = np.nonzero(np.all(tmin <= hi, axis=1) & np.all(tmax >= lo, axis=1))[0]
    if len(cand) == 0:
        return cand
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    hit = tri_box_overlap(v0[cand], v1[cand], v2[cand], center, half)
    return cand[hit]


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------

def ray_mesh_first_hit(origins, directions, vertices, faces, t_min=1e-6, t_max=np.inf):
    """First ray/mesh intersection distance for each ray.

    Brute-force Moller-Trumbore of every ray against every face, chunked over
    rays.  Returns (n,) distances with np.inf where no hit lies in
    (t_min, t_max].
    """
    v0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - v0
    e2 = vertices[faces[:, 2]] - v0
    best = np.full(len(origins), np.inf)
    chunk = max(1, int(4e6 / max(len(faces), 1)))
    for s in range(0, len(origins), chunk):
        o = origins[s:s + chunk][:, None, :]
        d = directions[s:s + chunk][:, None, :]
        p = np.cross(d, e2[None])
        det = np.einsum("rfk,fk->rf", p, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(np.abs(det) > 1e-12, 1.0 / det, 0.0)
            tv = o - v0[None]
            u = np.einsum("rfk,rfk->rf", tv, p) * inv
            q = np.cross(tv, e1[None])
            v = np.einsum("rfk,rk->rf", q, directions[s:s + chunk]) * inv
            t = np.einsum("rfk,fk->rf", q, e2) * inv
        hit = (np.abs(det) > 1e-12) & (u >= -1e-9) & (v >= -1e-9) & (u + v <= 1 + 1e-9)
        hit &= (t > t_min) & (t <= t_max)
        t = np.where(hit, t, np.inf)
        best[s:s + chunk] = t.min(axis=1)
    return best


def cone_directions(axis, half_angle, count, gen):
    """Directions uniform over the spherical cap of half-angle around axis."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    # orthonormal frame
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    cos_t = gen.uniform(np.cos(half_angle), 1.0, size=count)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t ** 2))
    phi = gen.uniform(0.0, 2 * np.pi, size=count)
    return (cos_t[:, None] * axis[None]
            + (sin_t * np.cos(phi))[:, None] * u[None]
            + (sin_t * np.sin(phi))[:, None] * v[None])


# ---------------------------------------------------------------------------
# Point / triangle distances
# ---------------------------------------------------------------------------

def closest_point_on_triangles(points, v0, v1, v2):
    """Closest point on triangle i to point i, pairwise over (n, 3) arrays.

    Standard region classification on the triangle's barycentric plane.
    Returns (closest (n,3), squared distance (n,)).
    """
    ab = v1 - v0
    ac = v2 - v0
    ap = points - v0
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = points - v1
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = points - v2
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    out = np.empty_like(points)
    done = np.zeros(len(points), dtype=bool)

    def assign(mask, value):
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done[m] = True

    assign((d1 <= 0) & (d2 <= 0), v0)                       # vertex A
    assign((d3 >= 0) & (d4 <= d3), v1)                      # vertex B
    assign((d6 >= 0) & (d5 <= d6), v2)                      # vertex C

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), v0 + t_ab[:, None] * ab)
        t_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), v0 + t_ac[:, None] * ac)
        den_bc = (d4 - d3) + (d5 - d6)
        t_bc = np.where(den_bc != 0, (d4 - d3) / den_bc, 0.0)
        assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), v1 + t_bc[:, None] * (v2 - v1))

    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
    assign(np.ones(len(points), dtype=bool), v0 + v[:, None] * ab + w[:, None] * ac)

    d2_out = np.einsum("ij,ij->i", points - out, points - out)
    return out, d2_out


class MeshDistanceQuery:
    """Exact closest-point queries against a triangle mesh.

    Candidate triangles come from a k-NN search over triangle centroids; the
    candidate set is provably sufficient once the k-th centroid distance minus
    the largest triangle radius exceeds the best exact distance found.
    """

    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=float)
        self.faces = np.asarray(faces, dtype=np.int64)
        if len(self.faces) == 0:
            raise ValueError("mesh has no faces")
        self.v0 = self.vertices[self.faces[:, 0]]
        self.v1 = self.vertices[self.faces[:, 1]]
        self.v2 = self.vertices[self.faces[:, 2]]
        self.centroids = (self.v0 + self.v1 + self.v2) / 3.0
        spread = np.stack([self.v0, self.v1, self.v2]) - self.centroids[None]
        self.radius = float(np.sqrt(np.einsum("sij,sij->si", spread, spread).max())) if len(self.faces) else 0.0
        self.tree = cKDTree(self.centroids)
        self.normals = face_normals(self.vertices, self.faces)

    def query(self, points, chunk=20000):
        """Distances, closest points and closest-face ids for each query."""
        points = np.asarray(points, dtype=float)
        n = len(points)
        dist = np.empty(n)
        closest = np.empty((n, 3))
        fid = np.empty(n, dtype=np.int64)
        nf = len(self.faces)
        for s in range(0, n, chunk):
            p = points[s:s + chunk]
            k = min(8, nf)
            while True:
                cd, ci = self.tree.query(p, k=k)
                if k == 1:
                    cd = cd[:, None]
                    ci = ci[:, None]
                m = len(p)
                flat_i = ci.reshape(-1)
                flat_p = np.repeat(p, k, axis=0)
                cp, d2 = closest_point_on_triangles(flat_p, self.v0[flat_i], self.v1[flat_i], self.v2[flat_i])
                d2 = d2.reshape(m, k)
                best = np.argmin(d2, axis=1)
                rows = np.arange(m)
                best_d = np.sqrt(d2[rows, best])
                # provably exact unless a non-candidate could still be closer
                if k == nf or np.all(best_d <= cd[:, -1] - self.radius + 1e-12):
                    dist[s:s + m] = best_d
                    closest[s:s + m] = cp.reshape(m, k, 3)[rows, best]
                    fid[s:s + m] = ci[rows, best]
                    break
                k = min(k * 4, nf)
        return dist, closest, fid


# ---------------------------------------------------------------------------
# Polylines
# ---------------------------------------------------------------------------

def polyline_is_closed(points, tol=1e-12):
    return len(points) > 2 and np.linalg.norm(points[0] - points[-1]) <= tol


def resample_polyline(points, n):
    """n arc-length-uniform samples with unit tangents.

    Closed polylines (first == last vertex) get spacing L/n starting at the
    first vertex; open ones include both endpoints with spacing L/(n-1).
    """
    points = np.asarray(points, dtype=float)
    seg = np.diff(points, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    total = seg_len.sum()
    if total <= 0:
        raise ValueError("zero-length polyline")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    closed = polyline_is_closed(points)
    if closed:
        s = np.arange(n) * total / n
    else:
        s = np.linspace(0.0, total, n)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[idx]) / np.where(seg_len[idx] > 0, seg_len[idx], 1.0)
    samples = points[idx] + frac[:, None] * seg[idx]
    tangents = seg[idx] / np.where(seg_len[idx] > 0, seg_len[idx], 1.0)[:, None]
    return samples, tangents


def point_to_box_distance(points, lo, hi):
    """Distance from points to the box [lo, hi] (0 inside)."""
    d = np.maximum(np.maximum(lo - points, 0.0), points - hi)
    return np.linalg.norm(d, axis=-1)


def point_to_polyline_distance(points, polyline):
    """Distance from each point to the nearest polyline segment."""
    points = np.atleast_2d(points)
    a = polyline[:-1]
    d = polyline[1:] - a
    len2 = np.einsum("ij,ij->i", d, d)
    len2 = np.where(len2 > 0, len2, 1.0)
    best = np.full(len(points), np.inf)
    chunk = max(1, int(2e6 / max(len(a), 1)))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk][:, None, :]
        t = np.clip(np.einsum("nsk,sk->ns", p - a, d) / len2, 0.0, 1.0)
        proj = a[None] + t[:, :, None] * d[None]
        dist2 = np.einsum("nsk,nsk->ns", p - proj, p - proj)
        best[s:s + chunk] = np.sqrt(dist2.min(axis=1))
    return best
