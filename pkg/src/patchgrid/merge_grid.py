"""Adaptive merge octree: where and how patch fields get CSG-composed.

The octree covers [-1,1]^3.  It is first subdivided uniformly until the cell
size matches the finest patch-volume cell, then any non-empty leaf whose
adjacency subgraph has a connected component that is not a clique keeps
splitting, up to a maximal depth.  Each leaf stores its patch set, the
adjacency edges among those patches, the connected components, and one CSG
tree per component: patches joined by concave edges are unioned with min,
and the resulting groups are intersected with max.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyLeaf, OutOfDomain, UnknownPatch
from .geometry import tri_box_overlap
from .shape_io import CONCAVE, CONVEX, DOMAIN_HI, DOMAIN_LO

DEFAULT_MAX_DEPTH = 7
LEAF_DILATION = 1e-4

MIN_OP = "min"
MAX_OP = "max"


# ---------------------------------------------------------------------------
# CSG trees
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CSGLeaf:
    patch_id: int


@dataclass(frozen=True)
class CSGOp:
    op: str                       # "min" (union) or "max" (intersection)
    children: tuple


def csg_patch_ids(tree):
    if isinstance(tree, CSGLeaf):
        return [tree.patch_id]
    out = []
    for c in tree.children:
        out.extend(csg_patch_ids(c))
    return out


def build_csg(component_ids, edges):
    """CSG tree for one clique (or best-effort non-clique) component.

    Concave-connected groups become min nodes; the groups, ordered by their
    smallest patch id, are folded together with max.
    """
    ids = sorted(int(i) for i in component_ids)
    concave = {}
    for a, b, kind in edges:
        if kind == CONCAVE and a in component_ids and b in component_ids:
            concave.setdefault(a, set()).add(b)
            concave.setdefault(b, set()).add(a)
    groups = []
    seen = set()
    for start in ids:
        if start in seen:
            continue
        stack = [start]
        group = []
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            group.append(cur)
            stack.extend(sorted(concave.get(cur, ()), reverse=True))
        groups.append(sorted(group))
    groups.sort(key=lambda g: g[0])
    subtrees = [CSGLeaf(g[0]) if len(g) == 1 else CSGOp(MIN_OP, tuple(CSGLeaf(i) for i in g))
                for g in groups]
    if len(subtrees) == 1:
        return subtrees[0]
    return CSGOp(MAX_OP, tuple(subtrees))


def is_clique(component_ids, edges):
    """True iff every pair in the component is connected by an edge."""
    ids = set(component_ids)
    if not ids:
        raise ValueError("empty component")
    present = {(min(a, b), max(a, b)) for a, b, _ in edges if a in ids and b in ids}
    n = len(ids)
    return len(present) == n * (n - 1) // 2


def connected_components(ids, edges):
    """Components of the subgraph on ``ids``, each sorted, ordered by min id."""
    ids = sorted(set(int(i) for i in ids))
    neigh = {i: set() for i in ids}
    for a, b, _ in edges:
        if a in neigh and b in neigh:
            neigh[a].add(b)
            neigh[b].add(a)
    out = []
    seen = set()
    for start in ids:
        if start in seen:
            continue
        stack = [start]
        comp = []
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            comp.append(cur)
            stack.extend(neigh[cur])
        out.append(sorted(comp))
    out.sort(key=lambda c: c[0])
    return out


# ---------------------------------------------------------------------------
# Overlap primitives (triangles for real patches, cell boxes for virtual)
# ---------------------------------------------------------------------------

class TrianglePrims:
    def __init__(self, vertices, faces):
        self.v0 = vertices[faces[:, 0]]
        self.v1 = vertices[faces[:, 1]]
        self.v2 = vertices[faces[:, 2]]
        self.lo = np.minimum(np.minimum(self.v0, self.v1), self.v2)
        self.hi = np.maximum(np.maximum(self.v0, self.v1), self.v2)

    def __len__(self):
        return len(self.v0)

    def overlapping(self, idx, lo, hi):
        cand = idx[np.all(self.lo[idx] <= hi, axis=1) & np.all(self.hi[idx] >= lo, axis=1)]
        if len(cand) == 0:
            return cand
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        hit = tri_box_overlap(self.v0[cand], self.v1[cand], self.v2[cand], center, half)
        return cand[hit]


class BoxPrims:
    """Axis-aligned boxes (occupied cells of a virtual patch's volume)."""

    def __init__(self, lo, hi):
        self.lo = lo
        self.hi = hi

    def __len__(self):
        return len(self.lo)

    def overlapping(self, idx, lo, hi):
        return idx[np.all(self.lo[idx] <= hi, axis=1) & np.all(self.hi[idx] >= lo, axis=1)]


def shape_overlap_prims(shape, virtual_volumes=None):
    """Overlap primitives for every patch id (real meshes + virtual cells)."""
    prims = {p.id: TrianglePrims(p.vertices, p.faces) for p in shape.patches}
    for pid, vol in (virtual_volumes or {}).items():
        cell_lo = vol.origin + vol.occupied_cells * vol.cell_size
        prims[pid] = BoxPrims(cell_lo, cell_lo + vol.cell_size)
    return prims


# ---------------------------------------------------------------------------
# Octree
# ---------------------------------------------------------------------------

@dataclass
class MergeLeaf:
    lo: np.ndarray
    hi: np.ndarray
    depth: int
    patch_ids: tuple = ()
    edges: tuple = ()             # (a, b, kind) with a < b
    components: tuple = ()        # tuple of tuples of patch ids
    trees: tuple = ()             # one CSG tree per component
    approximate: bool = False

    @property
    def is_leaf(self):
        return True

    def component_of(self, patch_id):
        for comp, tree in zip(self.components, self.trees):
            if patch_id in comp:
                return comp, tree
        raise UnknownPatch(f"patch {patch_id} not in this leaf")


@dataclass
class MergeInner:
    lo: np.ndarray
    hi: np.ndarray
    depth: int
    children: list = field(default_factory=list)   # 8 nodes, index ix+2*iy+4*iz

    @property
    def is_leaf(self):
        return False


@dataclass
class MergeGrid:
    root: object
    d_max: int
    initial_depth: int
    adjacency: list               # full shape adjacency incl. virtual edges

    def leaves(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                yield node
            else:
                stack.extend(reversed(node.children))

    def nonempty_leaves(self):
        return [leaf for leaf in self.leaves() if leaf.patch_ids]


def _make_leaf(lo, hi, depth, present, edges, d_max):
    if not present:
        return MergeLeaf(lo=lo, hi=hi, depth=depth)
    comps = connected_components(present, edges)
    trees = tuple(build_csg(c, edges) for c in comps)
    approx = any(not is_clique(c, edges) for c in comps)
    return MergeLeaf(lo=lo, hi=hi, depth=depth, patch_ids=tuple(sorted(present)),
                     edges=tuple(edges), components=tuple(tuple(c) for c in comps),
                     trees=trees, approximate=approx)


def _build_node(lo, hi, depth, candidates, prims, adjacency, d0, d_max):
    # candidates: {patch_id: primitive index array}
    survivors = {}
    for pid, idx in candidates.items():
        kept = prims[pid].overlapping(idx, lo - LEAF_DILATION, hi + LEAF_DILATION)
        if len(kept):
            survivors[pid] = kept
    present = sorted(survivors)
    if not present:
        return MergeLeaf(lo=lo, hi=hi, depth=depth)
    edges = [(a, b, k) for a, b, k in adjacency if a in survivors and b in survivors]

    need_split = depth < d0
    if not need_split and depth < d_max:
        comps = connected_components(present, edges)
        need_split = any(not is_clique(c, edges) for c in comps)
    if not need_split:
        return _make_leaf(lo, hi, depth, present, edges, d_max)

    mid = 0.5 * (lo + hi)
    children = []
    for iz in (0, 1):
        for iy in (0, 1):
            for ix in (0, 1):
                sel = np.array([ix, iy, iz])
                c_lo = np.where(sel == 0, lo, mid)
                c_hi = np.where(sel == 0, mid, hi)
                children.append(_build_node(c_lo, c_hi, depth + 1, survivors,
                                            prims, adjacency, d0, d_max))
    return MergeInner(lo=lo, hi=hi, depth=depth, children=children)


def initial_depth_for(volumes, d_max=DEFAULT_MAX_DEPTH):
    """Depth whose cell size matches the finest patch-volume cell."""
    h_min = min(v.cell_size for v in volumes.values())
    if h_min >= 2.0:
        return 0
    return int(min(d_max, np.ceil(np.log2(2.0 / h_min))))


def build_merge_grid(shape, volumes, d_max=DEFAULT_MAX_DEPTH, virtual_volumes=None,
                     adjacency=None):
    """Construct the merge octree for a shape whose volumes are built.

    ``virtual_volumes`` maps trimming-patch ids to their volumes, and
    ``adjacency`` (default: the shape's) may include virtual edges.
    """
    adjacency = list(shape.adjacency) if adjacency is None else list(adjacency)
    all_volumes = dict(volumes)
    all_volumes.update(virtual_volumes or {})
    d0 = initial_depth_for(all_volumes, d_max)
    prims = shape_overlap_prims(shape, virtual_volumes)
    candidates = {pid: np.arange(len(p)) for pid, p in prims.items()}
    root = _build_node(DOMAIN_LO.copy(), DOMAIN_HI.copy(), 0, candidates,
                       prims, adjacency, d0, d_max)
    return MergeGrid(root=root, d_max=d_max, initial_depth=d0, adjacency=adjacency)


# ---------------------------------------------------------------------------
# Point location
# ---------------------------------------------------------------------------

def locate_leaf(grid, x):
    """Leaf whose box contains x; shared faces go to the lower-side leaf."""
    x = np.asarray(x, dtype=float)
    if np.any(x < DOMAIN_LO) or np.any(x > DOMAIN_HI):
        raise OutOfDomain(f"{x} outside the domain")
    node = grid.root
    while not node.is_leaf:
        mid = 0.5 * (node.lo + node.hi)
        idx = 0
        for k in range(3):
            if x[k] > mid[k]:
                idx += 1 << k
        node = node.children[idx]
    return node


def locate_leaves_many(grid, pts):
    """Group point indices by containing leaf: list of (leaf, index array)."""
    pts = np.atleast_2d(pts)
    out = []

    def descend(node, idx):
        if len(idx) == 0:
            return
        if node.is_leaf:
            out.append((node, idx))
            return
        mid = 0.5 * (node.lo + node.hi)
        side = (pts[idx] > mid).astype(np.int64)
        child = side[:, 0] + 2 * side[:, 1] + 4 * side[:, 2]
        for c in range(8):
            descend(node.children[c], idx[child == c])

    descend(grid.root, np.arange(len(pts)))
    return out


# ---------------------------------------------------------------------------
# CSG evaluation
# ---------------------------------------------------------------------------

@dataclass
class MergedValue:
    value: float
    winner: int


def _fold_tree(tree, values, defined):
    """Evaluate a CSG tree over per-patch (values, defined) arrays.

    Children are combined left to right in construction order (ascending
    patch id).  Undefined children are dropped; ties prefer the lower patch
    id.  Returns (value, winner, defined) arrays.
    """
    if isinstance(tree, CSGLeaf):
        return (values[tree.patch_id],
                np.full(len(defined[tree.patch_id]), tree.patch_id, dtype=np.int64),
                defined[tree.patch_id])
    best_v, best_w, best_d = _fold_tree(tree.children[0], values, defined)
    best_v = best_v.copy()
    best_w = best_w.copy()
    best_d = best_d.copy()
    for child in tree.children[1:]:
        cv, cw, cd = _fold_tree(child, values, defined)
        if tree.op == MAX_OP:
            better = cv > best_v
        else:
            better = cv < best_v
        tie = cd & best_d & (cv == best_v) & (cw < best_w)
        take = (cd & ~best_d) | (cd & best_d & better) | tie
        best_v = np.where(take, cv, best_v)
        best_w = np.where(take, cw, best_w)
        best_d = best_d | cd
    return best_v, best_w, best_d


def eval_tree_many(tree, fields, pts, mode="local"):
    """Evaluate one leaf tree at many points.

    mode "local" drops patches whose volume does not contain the point;
    mode "extended" evaluates every patch via the clamp extension, so the
    result is defined everywhere.
    """
    values = {}
    defined = {}
    for pid in sorted(set(csg_patch_ids(tree))):
        if mode == "extended":
            values[pid] = fields.values_extended(pid, pts)
            defined[pid] = np.ones(len(pts), dtype=bool)
        else:
            mask = fields.defined(pid, pts)
            vals = np.zeros(len(pts))
            if mask.any():
                vals[mask] = fields.values(pid, pts[mask])
            values[pid] = vals
            defined[pid] = mask
    return _fold_tree(tree, values, defined)


def eval_merged(grid, fields, x, component_patch, mode="extended"):
    """Merged value and winning patch at x for one leaf component.

    The component is selected as the one containing ``component_patch`` in
    x's leaf.  The default mode uses clamp-extended values for patches whose
    volume misses x, matching the brute-force tree semantics; "local" mode
    drops those patches instead.
    """
    x = np.asarray(x, dtype=float)
    leaf = locate_leaf(grid, x)
    if not leaf.patch_ids:
        raise EmptyLeaf(f"leaf at {x} is empty")
    _, tree = leaf.component_of(component_patch)
    v, w, d = eval_tree_many(tree, fields, x[None], mode=mode)
    if not d[0]:
        raise EmptyLeaf(f"no patch volume covers {x}")
    return MergedValue(value=float(v[0]), winner=int(w[0]))


def eval_component_field(grid, fields, pts, component_ids, mode="local"):
    """Field of one global component at many points.

    ``component_ids`` is the set of patch ids in the component.  Within each
    leaf, every leaf-level component made of those patches is evaluated and
    the results are combined with min (a union: parts of one component that
    meet in a leaf without adjacency edges are separate boundary pieces).
    Returns (values, winners, defined).
    """
    pts = np.atleast_2d(pts)
    n = len(pts)
    values = np.full(n, np.inf)
    winners = np.full(n, -1, dtype=np.int64)
    defined = np.zeros(n, dtype=bool)
    clipped = np.clip(pts, DOMAIN_LO, DOMAIN_HI)
    for leaf, idx in locate_leaves_many(grid, clipped):
        if not leaf.patch_ids:
            continue
        sub = pts[idx]
        for comp, tree in zip(leaf.components, leaf.trees):
            if comp[0] not in component_ids:
                continue
            v, w, d = eval_tree_many(tree, fields, sub, mode=mode)
            better = d & (~defined[idx] | (v < values[idx]) |
                          ((v == values[idx]) & (w < winners[idx])))
            tgt = idx[better]
            values[tgt] = v[better]
            winners[tgt] = w[better]
            defined[tgt] = True
    return values, winners, defined


def global_components(patch_ids, adjacency):
    """Connected components of the whole-shape adjacency graph."""
    return connected_components(patch_ids, [(a, b, k) for a, b, k in adjacency])


# ---------------------------------------------------------------------------
# Local rebuild
# ---------------------------------------------------------------------------

def _boxes_intersect(lo1, hi1, lo2, hi2):
    return bool(np.all(lo1 <= hi2) and np.all(hi1 >= lo2))


def volume_bounds(volume):
    """Tight bounds of a volume's occupied cells."""
    lo_cell = volume.occupied_cells.min(axis=0)
    hi_cell = volume.occupied_cells.max(axis=0)
    return (volume.origin + lo_cell * volume.cell_size,
            volume.origin + (hi_cell + 1) * volume.cell_size)


def rebuild_region(grid, shape, volumes, dirty_ids, old_bounds,
                   virtual_volumes=None, adjacency=None):
    """Rebuild the subtrees touched by edited patches.

    ``old_bounds`` maps dirty patch ids to the (lo, hi) box of their previous
    volume (None for patches that are new); the new boxes come from
    ``volumes``.  Every initial-depth subtree intersecting any of those
    regions is rebuilt from scratch with the new geometry; all other nodes
    are shared with the input grid.  Returns (new grid, affected patch ids),
    where the affected set collects patches sharing a rebuilt leaf with a
    dirty patch.
    """
    if not dirty_ids:
        raise UnknownPatch("no dirty patches given")
    adjacency = list(grid.adjacency) if adjacency is None else list(adjacency)
    regions = []
    for pid in dirty_ids:
        vol = volumes.get(pid) or (virtual_volumes or {}).get(pid)
        old = old_bounds.get(pid)
        if vol is None and old is None:
            raise UnknownPatch(f"unknown dirty patch {pid}")
        if old is not None:
            regions.append(old)
        if vol is not None:
            regions.append(volume_bounds(vol))
    regions = [(np.asarray(lo) - LEAF_DILATION, np.asarray(hi) + LEAF_DILATION)
               for lo, hi in regions]

    prims = shape_overlap_prims(shape, virtual_volumes)
    d0 = grid.initial_depth
    dirty = set(dirty_ids)
    affected = set()

    def hit(node):
        return any(_boxes_intersect(node.lo, node.hi, lo, hi) for lo, hi in regions)

    def collect_affected(node):
        if node.is_leaf:
            if node.patch_ids and dirty & set(node.patch_ids):
                affected.update(node.patch_ids)
        else:
            for c in node.children:
                collect_affected(c)

    def rebuild(node):
        if not hit(node):
            return node
        if node.depth >= d0 or node.is_leaf:
            candidates = {pid: np.arange(len(p)) for pid, p in prims.items()}
            fresh = _build_node(node.lo, node.hi, node.depth, candidates,
                                prims, adjacency, d0, grid.d_max)
            collect_affected(fresh)
            return fresh
        out = MergeInner(lo=node.lo, hi=node.hi, depth=node.depth,
                         children=[rebuild(c) for c in node.children])
        return out

    new_root = rebuild(grid.root)
    new_grid = MergeGrid(root=new_root, d_max=grid.d_max,
                         initial_depth=d0, adjacency=adjacency)
    return new_grid, sorted(affected)


def grids_equal(a, b):
    """Structural equality of two merge grids (boxes, leaves, trees)."""

    def nodes_equal(x, y):
        if x.is_leaf != y.is_leaf:
            return False
        if not (np.allclose(x.lo, y.lo) and np.allclose(x.hi, y.hi) and x.depth == y.depth):
            return False
        if x.is_leaf:
            return (x.patch_ids == y.patch_ids and x.edges == y.edges
                    and x.components == y.components and x.trees == y.trees
                    and x.approximate == y.approximate)
        return all(nodes_equal(cx, cy) for cx, cy in zip(x.children, y.children))

    return (a.d_max == b.d_max and a.initial_depth == b.initial_depth
            and nodes_equal(a.root, b.root))
