"""C1 blending of the local merged field with a coarse global field.

The local field is exact near the surface but undefined away from the patch
volumes; a single coarse feature grid decoded by the shared decoder covers
the whole domain.  Between the bands |F_local| = delta1 and delta2 the two
are mixed with Hermite weights, which keeps the zero set (and its sharp
features) exactly equal to the local field's while making the blend C1 and
globally defined.
"""

from dataclasses import dataclass

import numpy as np

from . import rng
from .decoder import backward, decode_points, feature_contrib, forward
from .errors import DomainError, EmptyLevelSet, NonFiniteLoss, OutOfDomain
from .extraction import BAND_STEPS, Mesh, _collapse_degenerate, marching_cubes
from .merge_grid import eval_component_field, global_components
from .patch_volume import PatchVolume, init_features, interpolation_data
from .shape_io import DOMAIN_HI, DOMAIN_LO, sample_patch
from .training import adam_step, new_optimizer

DELTA1 = 0.001
DELTA2 = 0.03
GLOBAL_GRID_CELLS = 32


def hermite_weight(s):
    """The smoothstep 3s^2 - 2s^3 on [0, 1]."""
    arr = np.asarray(s, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError("hermite weight argument outside [0, 1]")
    out = 3.0 * arr ** 2 - 2.0 * arr ** 3
    return float(out) if np.isscalar(s) else out


@dataclass
class GlobalField:
    """One coarse feature grid over the whole domain plus the shared decoder."""

    decoder: object
    fv: object

    def evaluate(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        vol = self.fv.volume
        eps = 1e-9 * vol.cell_size
        clipped = np.clip(pts, vol.grid_lo + eps, vol.grid_hi - eps)
        return decode_points(self.decoder, self.fv, clipped)


def make_global_volume(cells=GLOBAL_GRID_CELLS):
    """A fully-occupied grid covering the domain plus a one-cell margin."""
    h = 2.0 / cells
    dims = np.array([cells + 2] * 3)
    return PatchVolume(patch_id=-1, origin=DOMAIN_LO - h, cell_size=h,
                       dims=dims, occupancy=np.ones(tuple(dims), dtype=bool))


def fit_global_field(shape, decoder, config, cells=GLOBAL_GRID_CELLS, progress=None):
    """Train the coarse grid's features against the whole shape.

    Only surface, normal, off-surface and Eikonal terms are used; the
    decoder is kept fixed.
    """
    volume = make_global_volume(cells)
    fv = init_features(volume, decoder.in_dim, config.seed)
    state = new_optimizer([fv.features])
    areas = np.array([p.area() for p in shape.patches])
    for it in range(config.iterations):
        lr = config.lr_at(it)
        gen = rng.stream(config.seed, rng.OFF_SURFACE, it, -1)
        counts = rng.stream(config.seed, rng.SURFACE, it, 1).multinomial(
            config.surface_samples, areas / areas.sum())
        pts, normals = [], []
        for p, n in zip(shape.patches, counts):
            if n == 0:
                continue
            s = sample_patch(p, int(n), config.seed * 1_000_003 + it + 1)
            pts.append(s.points)
            normals.append(s.normals)
        surf = np.concatenate(pts)
        nrm = np.concatenate(normals)
        omega = gen.uniform(DOMAIN_LO, DOMAIN_HI, size=(config.off_samples, 3))

        allp = np.concatenate([surf, omega])
        rows, w, dw = interpolation_data(fv, allp)
        corner = fv.features[rows]
        q = (w[:, None, :] @ corner)[:, 0, :]
        qdot = corner.transpose(0, 2, 1) @ dw
        cache = forward(decoder, q, qdot)
        y, g = cache["y"], cache["g"]
        i1 = len(surf)
        ys, gs = y[:i1], g[:i1]
        yo, go = y[i1:], g[i1:]
        n_o = max(len(yo), 1)
        inv_s = 1.0 / max(i1, 1)

        r_n = gs - nrm
        nrm_n = np.linalg.norm(r_n, axis=1)
        go_nrm = np.linalg.norm(go, axis=1)
        off_val = np.exp(-config.alpha_off * np.abs(yo))
        loss = (config.lambda_surface * np.abs(ys).sum() * inv_s
                + config.lambda_normal * nrm_n.sum() * inv_s
                + config.lambda_off * off_val.sum() / n_o
                + config.lambda_eikonal * np.abs(go_nrm - 1.0).sum() / n_o)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"global field iteration {it}: loss is {loss}")

        dy = np.zeros(len(allp))
        dg = np.zeros((len(allp), 3))
        dy[:i1] = config.lambda_surface * np.sign(ys) * inv_s
        safe = np.where(nrm_n > 1e-15, nrm_n, 1.0)
        dg[:i1] = config.lambda_normal * inv_s * r_n / safe[:, None]
        dy[i1:] = -config.lambda_off * config.alpha_off * np.sign(yo) * off_val / n_o
        safe = np.where(go_nrm > 1e-15, go_nrm, 1.0)
        dg[i1:] = (config.lambda_eikonal / n_o
                   * np.sign(go_nrm - 1.0)[:, None] * go / safe[:, None])

        _, dq, dqdot = backward(decoder, cache, dy, dg)
        fgrad = np.zeros_like(fv.features)
        np.add.at(fgrad, rows, feature_contrib(w, dq, dw, dqdot))
        adam_step(state, [fv.features], [fgrad], lr)
        if progress:
            progress({"iter": it, "total": float(loss), "lr": lr})
    return GlobalField(decoder=decoder, fv=fv)


# ---------------------------------------------------------------------------
# Blended evaluation
# ---------------------------------------------------------------------------

@dataclass
class BlendedField:
    """Composite of a banded local field and a globally defined one.

    ``local`` maps (n, 3) points to (values, defined) arrays; ``global_field``
    is a GlobalField or any object with ``evaluate``.
    """

    local: object
    global_field: object
    delta1: float = DELTA1
    delta2: float = DELTA2

    def __post_init__(self):
        if not 0.0 < self.delta1 < self.delta2:
            raise DomainError("need 0 < delta1 < delta2")


def local_field_of_model(model):
    """Local evaluator: min over the merged fields of all global components."""
    grid = model.merge_grid
    fields = model.fields()
    comps = global_components(sorted(model.feature_volumes), grid.adjacency)

    def local(pts):
        pts = np.atleast_2d(pts)
        values = np.full(len(pts), np.inf)
        defined = np.zeros(len(pts), dtype=bool)
        for comp in comps:
            v, _, d = eval_component_field(grid, fields, pts, set(comp), mode="local")
            better = d & (~defined | (v < values))
            values[better] = v[better]
            defined |= d
        return values, defined

    return local


def blended_field_of_model(model, global_field=None, delta1=DELTA1, delta2=DELTA2):
    gf = global_field or model.global_field
    if gf is None:
        raise DomainError("model has no global field; fit one first")
    return BlendedField(local=local_field_of_model(model), global_field=gf,
                        delta1=delta1, delta2=delta2)


def eval_blended(field, x):
    """Blended value(s) at x (a point or an (n, 3) array) inside the domain."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if np.any(pts < DOMAIN_LO - 1e-12) or np.any(pts > DOMAIN_HI + 1e-12):
        raise OutOfDomain("blended field query outside the domain")
    fl, defined = field.local(pts)
    fo = field.global_field.evaluate(pts)
    out = fo.copy()
    mag = np.abs(fl)
    inner = defined & (mag < field.delta1)
    out[inner] = fl[inner]
    mid = defined & ~inner & (mag <= field.delta2)
    if mid.any():
        s = (mag[mid] - field.delta1) / (field.delta2 - field.delta1)
        w1 = hermite_weight(s)
        out[mid] = (1.0 - w1) * fl[mid] + w1 * fo[mid]
    return float(out[0]) if single else out


def offset_level_set(field, t, resolution=128):
    """Extract the level set {blended field = t} over the whole domain."""
    if not abs(t) < 1.0:
        raise ValueError("offset must satisfy |t| < 1")
    step = 2.0 / resolution
    coords = [(np.arange(resolution + 1)) * step - 1.0] * 3
    pts = np.stack(np.meshgrid(*coords, indexing="ij"), axis=-1).reshape(-1, 3)
    values = eval_blended(field, pts) - t
    shape3 = (resolution + 1,) * 3
    verts, faces = marching_cubes(values.reshape(shape3), coords)
    if len(faces) == 0:
        raise EmptyLevelSet(f"level set {t} is empty")
    np.clip(verts, DOMAIN_LO, DOMAIN_HI, out=verts)
    uniq, remap = np.unique(verts, axis=0, return_inverse=True)
    verts, faces = _collapse_degenerate(uniq, remap[faces])
    return Mesh(vertices=verts, faces=faces)
