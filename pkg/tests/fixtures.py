"""Procedural test shapes.

All fixtures are constructed directly in normalized coordinates, so
``normalize_shape`` is the identity on them (asserted in the tests).  Faces
are wound so that cross(v1-v0, v2-v0) points out of the solid.
"""

import numpy as np

from patchgrid.shape_io import CONCAVE, CONVEX, PatchInput, SegmentedShape
from patchgrid.geometry import face_normals


def _planar_polygon(points3d, outward):
    """Fan-triangulate a convex planar polygon with a requested outward normal."""
    pts = np.asarray(points3d, dtype=float)
    faces = np.array([[0, i, i + 1] for i in range(1, len(pts) - 1)], dtype=np.int64)
    n = face_normals(pts, faces)
    if np.dot(n.mean(axis=0), outward) < 0:
        faces = faces[:, ::-1]
    return pts, faces


def _quad(a, b, c, d, outward):
    return _planar_polygon([a, b, c, d], outward)


def _subdivide_quad(a, b, c, d, outward, n=4):
    """A quad split into an n x n grid of smaller quads."""
    a, b, c, d = (np.asarray(p, dtype=float) for p in (a, b, c, d))
    verts = []
    for j in range(n + 1):
        for i in range(n + 1):
            u, v = i / n, j / n
            verts.append((1 - u) * (1 - v) * a + u * (1 - v) * b + u * v * c + (1 - u) * v * d)
    verts = np.asarray(verts)
    faces = []
    for j in range(n):
        for i in range(n):
            p0 = j * (n + 1) + i
            p1 = p0 + 1
            p2 = p0 + n + 2
            p3 = p0 + n + 1
            faces.extend([[p0, p1, p2], [p0, p2, p3]])
    faces = np.asarray(faces, dtype=np.int64)
    nrm = face_normals(verts, faces)
    if np.dot(nrm.mean(axis=0), outward) < 0:
        faces = faces[:, ::-1]
    return verts, faces


def make_cube(side=2.0, subdiv=2):
    """Axis-aligned cube of the given side about the origin; 6 patches."""
    s = side / 2.0
    specs = [
        # (corner loop, outward)
        ([(s, -s, -s), (s, s, -s), (s, s, s), (s, -s, s)], (1, 0, 0)),
        ([(-s, -s, -s), (-s, s, -s), (-s, s, s), (-s, -s, s)], (-1, 0, 0)),
        ([(-s, s, -s), (s, s, -s), (s, s, s), (-s, s, s)], (0, 1, 0)),
        ([(-s, -s, -s), (s, -s, -s), (s, -s, s), (-s, -s, s)], (0, -1, 0)),
        ([(-s, -s, s), (s, -s, s), (s, s, s), (-s, s, s)], (0, 0, 1)),
        ([(-s, -s, -s), (s, -s, -s), (s, s, -s), (-s, s, -s)], (0, 0, -1)),
    ]
    patches = []
    for pid, (loop, outward) in enumerate(specs):
        v, f = _subdivide_quad(*loop, np.asarray(outward, dtype=float), n=subdiv)
        patches.append(PatchInput(id=pid, vertices=v, faces=f))
    adjacency = [(0, 2, CONVEX), (0, 3, CONVEX), (0, 4, CONVEX), (0, 5, CONVEX),
                 (1, 2, CONVEX), (1, 3, CONVEX), (1, 4, CONVEX), (1, 5, CONVEX),
                 (2, 4, CONVEX), (2, 5, CONVEX), (3, 4, CONVEX), (3, 5, CONVEX)]
    return SegmentedShape(patches=patches, adjacency=adjacency)


def make_chamfered_box(s=1.0, chamfer=0.5):
    """Box [-s,s]^3 with the edge at x=s, z=s chamfered at 45 degrees."""
    c = chamfer
    patches = []

    def add(pid, pts, outward):
        v, f = _planar_polygon(pts, np.asarray(outward, dtype=float))
        patches.append(PatchInput(id=pid, vertices=v, faces=f))

    add(0, [(-s, -s, s), (s - c, -s, s), (s - c, s, s), (-s, s, s)], (0, 0, 1))      # top
    add(1, [(s, -s, -s), (s, s, -s), (s, s, s - c), (s, -s, s - c)], (1, 0, 0))      # front
    add(2, [(s - c, -s, s), (s, -s, s - c), (s, s, s - c), (s - c, s, s)], (1, 0, 1))  # chamfer
    add(3, [(-s, -s, -s), (-s, s, -s), (-s, s, s), (-s, -s, s)], (-1, 0, 0))         # back
    add(4, [(-s, -s, -s), (s, -s, -s), (s, s, -s), (-s, s, -s)], (0, 0, -1))         # bottom
    add(5, [(-s, s, -s), (s, s, -s), (s, s, s - c), (s - c, s, s), (-s, s, s)], (0, 1, 0))
    add(6, [(-s, -s, -s), (s, -s, -s), (s, -s, s - c), (s - c, -s, s), (-s, -s, s)], (0, -1, 0))
    adjacency = [
        (0, 2, CONVEX), (0, 3, CONVEX), (0, 5, CONVEX), (0, 6, CONVEX),
        (1, 2, CONVEX), (1, 4, CONVEX), (1, 5, CONVEX), (1, 6, CONVEX),
        (2, 5, CONVEX), (2, 6, CONVEX),
        (3, 4, CONVEX), (3, 5, CONVEX), (3, 6, CONVEX),
        (4, 5, CONVEX), (4, 6, CONVEX),
    ]
    return SegmentedShape(patches=patches, adjacency=adjacency)


def _arc_points(radius, a0, a1, n):
    t = np.linspace(a0, a1, n)
    return np.stack([radius * np.cos(t), radius * np.sin(t)], axis=1)


def make_cylinder_slot(radius=0.75, half_height=0.8, slot_hx=0.5, slot_hy=0.15,
                       slot_floor=0.3, segments=48):
    """Solid cylinder (axis z) with a blind rectangular pocket in the top."""
    r, hz = radius, half_height
    patches = []

    # 0: lateral wall
    t = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    ring = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    v = np.concatenate([np.column_stack([ring, np.full(segments, -hz)]),
                        np.column_stack([ring, np.full(segments, hz)])])
    f = []
    for i in range(segments):
        j = (i + 1) % segments
        f.extend([[i, j, segments + j], [i, segments + j, segments + i]])
    patches.append(PatchInput(id=0, vertices=v, faces=np.asarray(f, dtype=np.int64)))

    # 1: bottom disk
    v = np.concatenate([np.column_stack([ring, np.full(segments, -hz)]), [[0, 0, -hz]]])
    f = np.asarray([[i, segments, (i + 1) % segments] for i in range(segments)], dtype=np.int64)
    patches.append(PatchInput(id=1, vertices=v, faces=f))

    # 2: top ring (circle with the pocket rectangle removed)
    corners = np.array([[slot_hx, slot_hy], [-slot_hx, slot_hy],
                        [-slot_hx, -slot_hy], [slot_hx, -slot_hy]])
    angles = np.arctan2(corners[:, 1], corners[:, 0])          # corner directions
    verts = []
    faces = []
    arc_n = max(4, segments // 4)
    order = [(3, 0), (0, 1), (1, 2), (2, 3)]                    # corner index pairs per side
    for i0, i1 in order:
        a0, a1 = angles[i0], angles[i1]
        if a1 <= a0:
            a1 += 2 * np.pi
        arc = _arc_points(r, a0, a1, arc_n + 1)
        base = len(verts)
        verts.extend([[corners[i0][0], corners[i0][1], hz],
                      [corners[i1][0], corners[i1][1], hz]])
        verts.extend([[p[0], p[1], hz] for p in arc])
        s0, s1 = base, base + 1
        for k in range(arc_n):
            faces.append([s0, base + 2 + k, base + 2 + k + 1])
        faces.append([s0, base + 2 + arc_n, s1])
    v = np.asarray(verts)
    f = np.asarray(faces, dtype=np.int64)
    n = face_normals(v, f)
    if n.mean(axis=0)[2] < 0:
        f = f[:, ::-1]
    patches.append(PatchInput(id=2, vertices=v, faces=f))

    # 3-6: pocket walls (outward normals point into the pocket void)
    z0, z1 = slot_floor, hz
    wall_specs = [
        ([(slot_hx, -slot_hy, z0), (slot_hx, slot_hy, z0), (slot_hx, slot_hy, z1), (slot_hx, -slot_hy, z1)], (-1, 0, 0)),
        ([(-slot_hx, -slot_hy, z0), (-slot_hx, slot_hy, z0), (-slot_hx, slot_hy, z1), (-slot_hx, -slot_hy, z1)], (1, 0, 0)),
        ([(-slot_hx, slot_hy, z0), (slot_hx, slot_hy, z0), (slot_hx, slot_hy, z1), (-slot_hx, slot_hy, z1)], (0, -1, 0)),
        ([(-slot_hx, -slot_hy, z0), (slot_hx, -slot_hy, z0), (slot_hx, -slot_hy, z1), (-slot_hx, -slot_hy, z1)], (0, 1, 0)),
    ]
    for k, (pts, outward) in enumerate(wall_specs):
        vv, ff = _quad(*pts, np.asarray(outward, dtype=float))
        patches.append(PatchInput(id=3 + k, vertices=vv, faces=ff))

    # 7: pocket floor
    vv, ff = _quad((-slot_hx, -slot_hy, z0), (slot_hx, -slot_hy, z0),
                   (slot_hx, slot_hy, z0), (-slot_hx, slot_hy, z0),
                   np.array([0.0, 0.0, 1.0]))
    patches.append(PatchInput(id=7, vertices=vv, faces=ff))

    adjacency = [
        (0, 1, CONVEX), (0, 2, CONVEX),
        (2, 3, CONVEX), (2, 4, CONVEX), (2, 5, CONVEX), (2, 6, CONVEX),
        (3, 7, CONCAVE), (4, 7, CONCAVE), (5, 7, CONCAVE), (6, 7, CONCAVE),
        (3, 5, CONCAVE), (3, 6, CONCAVE), (4, 5, CONCAVE), (4, 6, CONCAVE),
    ]
    return SegmentedShape(patches=patches, adjacency=adjacency)


def _box_patches(lo, hi, first_id, subdiv=2):
    """Six quad patches of an axis-aligned box, plus their adjacency."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    specs = [
        ([(x1, y0, z0), (x1, y1, z0), (x1, y1, z1), (x1, y0, z1)], (1, 0, 0)),
        ([(x0, y0, z0), (x0, y1, z0), (x0, y1, z1), (x0, y0, z1)], (-1, 0, 0)),
        ([(x0, y1, z0), (x1, y1, z0), (x1, y1, z1), (x0, y1, z1)], (0, 1, 0)),
        ([(x0, y0, z0), (x1, y0, z0), (x1, y0, z1), (x0, y0, z1)], (0, -1, 0)),
        ([(x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1)], (0, 0, 1)),
        ([(x0, y0, z0), (x1, y0, z0), (x1, y1, z0), (x0, y1, z0)], (0, 0, -1)),
    ]
    patches = []
    for k, (loop, outward) in enumerate(specs):
        v, f = _subdivide_quad(*loop, np.asarray(outward, dtype=float), n=subdiv)
        patches.append(PatchInput(id=first_id + k, vertices=v, faces=f))
    rel = [(0, 2), (0, 3), (0, 4), (0, 5), (1, 2), (1, 3), (1, 4), (1, 5),
           (2, 4), (2, 5), (3, 4), (3, 5)]
    adjacency = [(first_id + a, first_id + b, CONVEX) for a, b in rel]
    return patches, adjacency


def make_plates(gap=0.02, thickness=0.1, half_extent=1.0):
    """Two parallel closed plates with the given gap between inner faces."""
    g = gap / 2.0
    pa, aa = _box_patches((-half_extent, -half_extent, g),
                          (half_extent, half_extent, g + thickness), 0)
    pb, ab = _box_patches((-half_extent, -half_extent, -g - thickness),
                          (half_extent, half_extent, -g), 6)
    return SegmentedShape(patches=pa + pb, adjacency=aa + ab)


def make_open_disk(segments=64, rings=4):
    """A flat open unit disk in the z=0 plane with its rim as boundary."""
    verts = [[0.0, 0.0, 0.0]]
    for ring in range(1, rings + 1):
        rr = ring / rings
        t = np.linspace(0, 2 * np.pi, segments, endpoint=False)
        verts.extend(np.column_stack([rr * np.cos(t), rr * np.sin(t), np.zeros(segments)]))
    verts = np.asarray(verts)
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces.append([0, 1 + i, 1 + j])
    for ring in range(1, rings):
        b0 = 1 + (ring - 1) * segments
        b1 = 1 + ring * segments
        for i in range(segments):
            j = (i + 1) % segments
            faces.extend([[b0 + i, b1 + i, b1 + j], [b0 + i, b1 + j, b0 + j]])
    faces = np.asarray(faces, dtype=np.int64)
    rim = verts[1 + (rings - 1) * segments:]
    boundary = np.concatenate([rim, rim[:1]])
    patch = PatchInput(id=0, vertices=verts, faces=faces, is_open=True,
                       boundaries=[boundary])
    return SegmentedShape(patches=[patch], adjacency=[])


def make_sphere(radius=1.0, rings=12, segments=24):
    """A UV sphere as one closed patch."""
    verts = [[0.0, 0.0, radius]]
    for i in range(1, rings):
        phi = np.pi * i / rings
        for j in range(segments):
            th = 2 * np.pi * j / segments
            verts.append([radius * np.sin(phi) * np.cos(th),
                          radius * np.sin(phi) * np.sin(th),
                          radius * np.cos(phi)])
    verts.append([0.0, 0.0, -radius])
    verts = np.asarray(verts)
    last = len(verts) - 1
    faces = []
    for j in range(segments):
        faces.append([0, 1 + j, 1 + (j + 1) % segments])
    for i in range(rings - 2):
        r0 = 1 + i * segments
        r1 = r0 + segments
        for j in range(segments):
            k = (j + 1) % segments
            faces.extend([[r0 + j, r1 + j, r1 + k], [r0 + j, r1 + k, r0 + k]])
    r0 = 1 + (rings - 2) * segments
    for j in range(segments):
        faces.append([last, r0 + (j + 1) % segments, r0 + j])
    faces = np.asarray(faces, dtype=np.int64)
    return SegmentedShape(patches=[PatchInput(id=0, vertices=verts, faces=faces)],
                          adjacency=[])


def make_wedge():
    """Two rectangles meeting at 90 degrees along x = z = 0.5 (convex edge).

    Stand-in SDFs for the enclosed solid are f0 = z - 0.5, f1 = x - 0.5.
    """
    v0, f0 = _quad((-0.5, -1, 0.5), (0.5, -1, 0.5), (0.5, 1, 0.5), (-0.5, 1, 0.5),
                   np.array([0.0, 0.0, 1.0]))
    v1, f1 = _quad((0.5, -1, -0.5), (0.5, 1, -0.5), (0.5, 1, 0.5), (0.5, -1, 0.5),
                   np.array([1.0, 0.0, 0.0]))
    patches = [PatchInput(id=0, vertices=v0, faces=f0),
               PatchInput(id=1, vertices=v1, faces=f1)]
    return SegmentedShape(patches=patches, adjacency=[(0, 1, CONVEX)])


def combined_mesh(shape):
    """Concatenated ground-truth mesh of all patches."""
    verts = []
    faces = []
    offset = 0
    for p in shape.patches:
        verts.append(p.vertices)
        faces.append(p.faces + offset)
        offset += len(p.vertices)
    return np.concatenate(verts), np.concatenate(faces)


def cube_sdf(pts, s=1.0):
    """Exact SDF of the cube [-s, s]^3."""
    q = np.abs(np.atleast_2d(pts)) - s
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def sphere_sdf(pts, radius=0.6, center=(0.0, 0.0, 0.0)):
    return np.linalg.norm(np.atleast_2d(pts) - np.asarray(center), axis=1) - radius
