"""Training: loss terms, batch sampling, the Adam loop, decoder pretraining
and fast local updates after edits.

The total objective is the mean over patches of the per-patch loss plus a
weighted merge term over the non-empty merge-grid leaves.  Per-patch sums
are divided by the patch's surface batch size so the balance weights stay
scale-free; the merge term is averaged per leaf for the same reason (see the
``merge_reduction`` knob).
"""

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .decoder import (backward, feature_contrib, forward, freeze,
                      interp_features, interp_tangents, new_decoder,
                      zero_param_grads)
from .errors import (DecoderNotFrozen, EmptyCorpus, EmptyShape, NonFiniteLoss,
                     ShapeMismatch, UnknownPatch)
from .fields import LearnedFields
from .merge_grid import (build_merge_grid, eval_tree_many, global_components,
                         locate_leaves_many, rebuild_region, volume_bounds)
from .patch_volume import (PatchVolume, build_patch_volume, init_features,
                           interpolation_data)
from .shape_io import (CONVEX, DOMAIN_HI, DOMAIN_LO, SegmentedShape,
                       average_shape_diameter, sample_patch)
from .trimming import build_trimming_patch

TERM_NAMES = ("surface", "normal", "sdf", "gradient", "off", "eikonal", "code", "merge")


@dataclass
class TrainConfig:
    lambda_surface: float = 150.0
    lambda_normal: float = 50.0
    lambda_sdf: float = 50.0
    lambda_gradient: float = 12.0
    lambda_off: float = 9.0
    lambda_eikonal: float = 12.0
    lambda_code: float = 1.0
    lambda_merge: float = 8.0
    iterations: int = 300
    lr: float = 1e-3
    lr_decay: float = 0.3
    decay_iterations: tuple = (270, 285)
    update_iterations: int = 80
    update_decay_iterations: tuple = (65, 72)
    surface_samples: int = 10000
    off_samples: int = 10000
    offset_fraction: tuple = (0.0, 0.1)
    alpha_off: float = 100.0
    seed: int = 0
    feature_dim: int = 16
    hidden_width: int = 32
    max_depth: int = 7
    trim_boundary_samples: int = 256
    merge_reduction: str = "leaf_mean"    # or "leaf_sum"
    pretrain_crops: int = 500
    pretrain_iterations: int = 300
    pretrain_grid_cells: int = 8
    telemetry_path: str = None
    deterministic: bool = True

    def lr_at(self, iteration, milestones=None):
        milestones = self.decay_iterations if milestones is None else milestones
        lr = self.lr
        for m in milestones:
            if iteration >= m:
                lr *= self.lr_decay
        return lr


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def new_optimizer(params):
    return OptimizerState(m=[np.zeros_like(p) for p in params],
                          v=[np.zeros_like(p) for p in params])


def adam_step(state, params, grads, lr):
    """Bias-corrected Adam update; parameters are updated in place."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeMismatch("parameter/gradient shapes differ")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        # keep values float32-representable so checkpoints round-trip exactly
        p[...] = p.astype(np.float32).astype(np.float64)
    return params, state


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class Model:
    decoder: object
    feature_volumes: dict          # patch id -> PatchFeatureVolume (incl. virtual)
    merge_grid: object
    config: TrainConfig
    shape: SegmentedShape
    trims: dict = field(default_factory=dict)         # trim id -> TrimmingPatch
    diameters: dict = field(default_factory=dict)
    global_field: object = None    # optional blending.GlobalField
    telemetry: list = field(default_factory=list)

    @property
    def virtual_ids(self):
        return frozenset(self.trims)

    def fields(self):
        return LearnedFields(self.decoder, self.feature_volumes, self.virtual_ids)

    def components(self):
        return global_components(sorted(self.feature_volumes), self.merge_grid.adjacency)


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------

@dataclass
class TrainingBatch:
    surface: dict                  # pid -> (points, normals)
    off: dict                      # pid -> points
    merge: list                    # (leaf, points, patch_ids)
    iteration: int = 0


def _mix(seed, iteration):
    return seed * 1_000_003 + iteration + 1


def _trim_weight(trim):
    seg = np.diff(trim.points, axis=0)
    return float(np.linalg.norm(seg, axis=1).sum() * trim.volume.cell_size)


def sample_batch(shape, volumes, grid, config, iteration, trims=None, restrict=None):
    """Draw the per-iteration training batch.

    Surface samples are allocated across patches by area (trimming patches
    by boundary length times cell size) and off-surface samples by occupied
    volume; each allocation and draw has its own counter-based stream, so the
    batch depends only on (seed, iteration).  ``restrict`` limits sampling to
    a patch subset, scaling counts by the subset's weight share.
    """
    trims = trims or {}
    pids = sorted(volumes)
    area = {}
    for pid in pids:
        if pid in trims:
            area[pid] = _trim_weight(trims[pid])
        else:
            area[pid] = shape.patch(pid).area()
    vol_w = {pid: len(volumes[pid].volume.occupied_cells) * volumes[pid].volume.cell_size ** 3
             for pid in pids}

    if restrict is not None:
        keep = set(restrict)
        frac_a = sum(area[p] for p in pids if p in keep) / max(sum(area.values()), 1e-30)
        frac_v = sum(vol_w[p] for p in pids if p in keep) / max(sum(vol_w.values()), 1e-30)
        area = {p: (area[p] if p in keep else 0.0) for p in pids}
        vol_w = {p: (vol_w[p] if p in keep else 0.0) for p in pids}
        n_surface = int(round(config.surface_samples * frac_a))
        n_off = int(round(config.off_samples * frac_v))
    else:
        n_surface = config.surface_samples
        n_off = config.off_samples

    w = np.array([area[p] for p in pids])
    counts = rng.stream(config.seed, rng.SURFACE, iteration).multinomial(n_surface, w / w.sum())
    surface = {}
    for pid, n in zip(pids, counts):
        if n == 0:
            continue
        if pid in trims:
            trim = trims[pid]
            gen = rng.stream(config.seed, rng.TRIM, iteration, pid)
            idx = gen.integers(0, len(trim.points), size=n)
            surface[pid] = (trim.points[idx], trim.pseudo_normals[idx])
        else:
            s = sample_patch(shape.patch(pid), int(n), _mix(config.seed, iteration))
            surface[pid] = (s.points, s.normals)

    w = np.array([vol_w[p] for p in pids])
    counts = rng.stream(config.seed, rng.OFF_SURFACE, iteration).multinomial(n_off, w / w.sum())
    off = {}
    for pid, n in zip(pids, counts):
        if n == 0:
            continue
        vol = volumes[pid].volume
        gen = rng.stream(config.seed, rng.OFF_SURFACE, iteration, pid)
        cells = vol.occupied_cells[gen.integers(0, len(vol.occupied_cells), size=n)]
        off[pid] = vol.origin + (cells + gen.uniform(size=(int(n), 3))) * vol.cell_size

    merge = []
    if surface:
        all_pts = np.concatenate([surface[p][0] for p in sorted(surface)])
        all_pids = np.concatenate([np.full(len(surface[p][0]), p, dtype=np.int64)
                                   for p in sorted(surface)])
        clipped = np.clip(all_pts, DOMAIN_LO, DOMAIN_HI)
        for leaf, idx in locate_leaves_many(grid, clipped):
            if leaf.patch_ids:
                merge.append((leaf, all_pts[idx], all_pids[idx]))
    return TrainingBatch(surface=surface, off=off, merge=merge, iteration=iteration)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def patch_terms_for_samples(decoder, fv, surf_points, surf_normals, off_points,
                            config, gen, two_sided_offsets=False):
    """Per-patch loss terms and their backprop payload.

    Returns (terms, payload) where terms maps term name to its value (sums
    over the four supervised terms divided by the surface batch size, means
    for the volume terms) and payload is (points, d_value, d_grad) carrying
    the upstream derivatives of the weighted per-patch loss.
    """
    vol = fv.volume
    n_s = len(surf_points)
    lo, hi = config.offset_fraction
    d = gen.uniform(lo, hi, size=n_s) * vol.cell_size
    off_pts = surf_points + d[:, None] * surf_normals
    targets = d
    if two_sided_offsets:
        off_pts = np.concatenate([off_pts, surf_points - d[:, None] * surf_normals])
        targets = np.concatenate([d, -d])
        normals2 = np.concatenate([surf_normals, surf_normals])
    else:
        normals2 = surf_normals
    keep = vol.contains_many(off_pts)
    off_pts = off_pts[keep]
    targets = targets[keep]
    normals2 = normals2[keep]

    omega = off_points if off_points is not None else np.zeros((0, 3))
    pts = np.concatenate([surf_points, off_pts, omega])
    rows, w, dw = interpolation_data(fv, pts)
    corner = fv.features[rows]
    q = interp_features(w, corner)
    qdot = interp_tangents(dw, corner)
    cache = forward(decoder, q, qdot)
    y = cache["y"]
    g = cache["g"]

    i1 = n_s
    i2 = n_s + len(off_pts)
    ys, gs = y[:i1], g[:i1]
    yd, gd = y[i1:i2], g[i1:i2]
    yo, go = y[i2:], g[i2:]
    n_o = max(len(yo), 1)
    inv_s = 1.0 / max(n_s, 1)

    r_n = gs - surf_normals
    nrm_n = np.linalg.norm(r_n, axis=1)
    r_g = gd - normals2
    nrm_g = np.linalg.norm(r_g, axis=1)
    go_nrm = np.linalg.norm(go, axis=1)
    off_val = np.exp(-config.alpha_off * np.abs(yo))

    terms = {
        "surface": np.abs(ys).sum() * inv_s,
        "normal": nrm_n.sum() * inv_s,
        "sdf": np.abs(yd - targets).sum() * inv_s,
        "gradient": nrm_g.sum() * inv_s,
        "off": off_val.sum() / n_o,
        "eikonal": np.abs(go_nrm - 1.0).sum() / n_o,
        "code": float((fv.features ** 2).sum() / len(fv.features)),
    }

    dy = np.zeros(len(pts))
    dg = np.zeros((len(pts), 3))
    dy[:i1] = config.lambda_surface * np.sign(ys) * inv_s
    safe = np.where(nrm_n > 1e-15, nrm_n, 1.0)
    dg[:i1] = config.lambda_normal * inv_s * r_n / safe[:, None]
    dg[:i1][nrm_n <= 1e-15] = 0.0
    dy[i1:i2] = config.lambda_sdf * np.sign(yd - targets) * inv_s
    safe = np.where(nrm_g > 1e-15, nrm_g, 1.0)
    dg[i1:i2] = config.lambda_gradient * inv_s * r_g / safe[:, None]
    dg[i1:i2][nrm_g <= 1e-15] = 0.0
    dy[i2:] = -config.lambda_off * config.alpha_off * np.sign(yo) * off_val / n_o
    safe = np.where(go_nrm > 1e-15, go_nrm, 1.0)
    dg[i2:] = config.lambda_eikonal / n_o * np.sign(go_nrm - 1.0)[:, None] * go / safe[:, None]
    dg[i2:][go_nrm <= 1e-15] = 0.0

    payload = (pts, dy, dg, cache, rows, w, dw)
    return terms, payload


def _weighted_patch_loss(terms, config):
    return (config.lambda_surface * terms["surface"]
            + config.lambda_normal * terms["normal"]
            + config.lambda_sdf * terms["sdf"]
            + config.lambda_gradient * terms["gradient"]
            + config.lambda_off * terms["off"]
            + config.lambda_eikonal * terms["eikonal"]
            + config.lambda_code * terms["code"])


def patch_loss(model, batch, config):
    """Mean per-patch loss over the batch, with a per-term breakdown."""
    total = 0.0
    breakdown = {name: 0.0 for name in TERM_NAMES if name != "merge"}
    pids = sorted(batch.surface)
    for pid in pids:
        pts, normals = batch.surface[pid]
        gen = rng.stream(config.seed, rng.OFFSETS, batch.iteration, pid)
        terms, _ = patch_terms_for_samples(
            model.decoder, model.feature_volumes[pid], pts, normals,
            batch.off.get(pid), config, gen, two_sided_offsets=pid in model.trims)
        total += _weighted_patch_loss(terms, config)
        for name, val in terms.items():
            breakdown[name] += val
    k = max(len(pids), 1)
    total /= k
    if not np.isfinite(total):
        raise NonFiniteLoss("patch loss is not finite")
    breakdown = {name: val / k for name, val in breakdown.items()}
    return total, breakdown


def merge_loss(model, merge_buckets, reduction=None):
    """Merge penalty over bucketed surface samples.

    Each sample contributes |merged field| for the leaf component containing
    its patch; leaf totals ("leaf_sum", the literal per-leaf sum) or leaf
    means ("leaf_mean") are averaged over the grid's non-empty leaves.
    """
    reduction = reduction or model.config.merge_reduction
    fields = model.fields()
    n_leaves = sum(1 for leaf in model.merge_grid.leaves() if leaf.patch_ids)
    if n_leaves == 0:
        return 0.0
    total = 0.0
    for leaf, pts, pids in merge_buckets:
        leaf_sum = 0.0
        count = 0
        for comp, tree in zip(leaf.components, leaf.trees):
            sel = np.isin(pids, comp)
            if not sel.any():
                continue
            v, _, defined = eval_tree_many(tree, fields, pts[sel], mode="local")
            leaf_sum += np.abs(v[defined]).sum()
            count += int(defined.sum())
        if count:
            total += leaf_sum / (count if reduction == "leaf_mean" else 1.0)
    return total / n_leaves


def total_loss(model, batch, config):
    """Mean patch loss plus the weighted merge term (with breakdown)."""
    patch_part, breakdown = patch_loss(model, batch, config)
    merge_part = merge_loss(model, batch.merge)
    breakdown["merge"] = merge_part
    return patch_part + config.lambda_merge * merge_part, breakdown


# ---------------------------------------------------------------------------
# One training step (loss + gradients + Adam)
# ---------------------------------------------------------------------------

def _merge_upstreams(model, merge_buckets, config, train_ids):
    """Winner points and upstream d_value of the merge term, per patch."""
    fields = model.fields()
    n_leaves = sum(1 for leaf in model.merge_grid.leaves() if leaf.patch_ids)
    per_patch = {pid: ([], []) for pid in train_ids}
    value = 0.0
    if n_leaves == 0:
        return value, per_patch
    leaf_mean = config.merge_reduction == "leaf_mean"
    for leaf, pts, pids in merge_buckets:
        groups = []
        count = 0
        for comp, tree in zip(leaf.components, leaf.trees):
            sel = np.isin(pids, comp)
            if not sel.any():
                continue
            v, wnr, defined = eval_tree_many(tree, fields, pts[sel], mode="local")
            groups.append((pts[sel], v, wnr, defined))
            count += int(defined.sum())
        if count == 0:
            continue
        scale = 1.0 / (n_leaves * (count if leaf_mean else 1.0))
        for sub, v, wnr, defined in groups:
            value += np.abs(v[defined]).sum() * scale
            for pid in np.unique(wnr[defined]):
                if pid not in per_patch:
                    continue
                sel = defined & (wnr == pid)
                per_patch[pid][0].append(sub[sel])
                per_patch[pid][1].append(config.lambda_merge * scale * np.sign(v[sel]))
    return value, per_patch


def training_step(model, optimizer_states, iteration, lr, config, train_ids=None):
    """One full loss/gradient/Adam step.  Returns the telemetry row."""
    volumes = model.feature_volumes
    train_ids = sorted(volumes) if train_ids is None else sorted(train_ids)
    restrict = None if set(train_ids) == set(volumes) else train_ids
    batch = sample_batch(model.shape, volumes, model.merge_grid, config,
                         iteration, trims=model.trims, restrict=restrict)

    merge_value, merge_up = _merge_upstreams(model, batch.merge, config, set(train_ids))

    k = max(len([p for p in train_ids if p in batch.surface]), 1)
    inv_k = 1.0 / k
    breakdown = {name: 0.0 for name in TERM_NAMES}
    breakdown["merge"] = merge_value
    total = config.lambda_merge * merge_value
    param_grads = zero_param_grads(model.decoder)
    feature_grads = {}

    for pid in train_ids:
        if pid not in batch.surface:
            continue
        fv = volumes[pid]
        pts, normals = batch.surface[pid]
        gen = rng.stream(config.seed, rng.OFFSETS, iteration, pid)
        terms, payload = patch_terms_for_samples(
            model.decoder, fv, pts, normals, batch.off.get(pid), config, gen,
            two_sided_offsets=pid in model.trims)
        all_pts, dy, dg, cache, rows, w, dw = payload
        dy = dy * inv_k
        dg = dg * inv_k

        extra_pts, extra_dy = merge_up.get(pid, ([], []))
        if extra_pts:
            ep = np.concatenate(extra_pts)
            ed = np.concatenate(extra_dy)
            erows, ew, edw = interpolation_data(fv, ep)
            rows = np.concatenate([rows, erows])
            w = np.concatenate([w, ew])
            dw = np.concatenate([dw, edw])
            corner = fv.features[erows]
            q = interp_features(ew, corner)
            qdot = interp_tangents(edw, corner)
            ecache = forward(model.decoder, q, qdot)
            cache = {key: np.concatenate([cache[key], ecache[key]])
                     for key in cache}
            dy = np.concatenate([dy, ed])
            dg = np.concatenate([dg, np.zeros((len(ep), 3))])

        pgrads, dq, dqdot = backward(model.decoder, cache, dy, dg)
        contrib = w[:, :, None] * dq[:, None, :]
        if dqdot is not None:
            contrib = contrib + dw @ dqdot.transpose(0, 2, 1)
        fgrad = np.zeros_like(fv.features)
        np.add.at(fgrad, rows, contrib)
        fgrad += inv_k * config.lambda_code * 2.0 * fv.features / len(fv.features)
        feature_grads[pid] = fgrad
        if not model.decoder.frozen:
            for acc, pg in zip(param_grads, pgrads):
                acc += pg
        total += inv_k * _weighted_patch_loss(terms, config)
        for name, val in terms.items():
            breakdown[name] += val * inv_k

    if not np.isfinite(total):
        raise NonFiniteLoss(f"iteration {iteration}: loss is {total}")

    if not model.decoder.frozen:
        adam_step(optimizer_states["decoder"], model.decoder.parameters(), param_grads, lr)
    for pid, fgrad in feature_grads.items():
        adam_step(optimizer_states[pid], [volumes[pid].features], [fgrad], lr)

    row = {"iter": iteration, "total": total}
    row.update({name: breakdown.get(name, 0.0) for name in TERM_NAMES})
    row["lr"] = lr
    return row


def _write_telemetry(path, rows):
    if not path:
        return
    exists = os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if not exists:
            writer.writerow(["iter", "total", *TERM_NAMES, "lr"])
        for r in rows:
            writer.writerow([r["iter"], r["total"], *[r[n] for n in TERM_NAMES], r["lr"]])


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def build_model(shape, config, decoder=None):
    """Volumes, trimming patches, features and merge grid for a shape."""
    if not shape.patches:
        raise EmptyShape("shape has no patches")
    diameters = {}
    volumes = {}
    for p in shape.patches:
        diameters[p.id] = average_shape_diameter(p, shape, config.seed)
        volumes[p.id] = build_patch_volume(p, diameters[p.id])

    trims = {}
    adjacency = list(shape.adjacency)
    next_id = max(p.id for p in shape.patches) + 1
    for p in shape.patches:
        if not p.is_open:
            continue
        for k in range(len(p.boundaries)):
            trim = build_trimming_patch(p, k, shape, config.trim_boundary_samples,
                                        trim_id=next_id,
                                        cell_size=volumes[p.id].cell_size,
                                        seed=config.seed)
            trims[next_id] = trim
            adjacency.append((p.id, next_id, CONVEX))
            next_id += 1

    virtual_volumes = {tid: t.volume for tid, t in trims.items()}
    grid = build_merge_grid(shape, volumes, d_max=config.max_depth,
                            virtual_volumes=virtual_volumes, adjacency=adjacency)

    feature_volumes = {}
    for pid, vol in volumes.items():
        feature_volumes[pid] = init_features(vol, config.feature_dim, config.seed)
    for tid, vol in virtual_volumes.items():
        feature_volumes[tid] = init_features(vol, config.feature_dim, config.seed)

    if decoder is None:
        decoder = new_decoder(config.feature_dim, config.hidden_width, config.seed)
    return Model(decoder=decoder, feature_volumes=feature_volumes, merge_grid=grid,
                 config=config, shape=shape, trims=trims, diameters=diameters)


def fit(shape, config=None, pretrained=None, progress=None):
    """Fit the representation to a shape.

    With ``pretrained`` given, the decoder is frozen and only the feature
    volumes are optimized.  Raises NonFiniteLoss with the last healthy model
    attached as ``exc.model`` if the loss diverges.
    """
    config = config or TrainConfig()
    decoder = freeze(pretrained) if pretrained is not None else None
    model = build_model(shape, config, decoder=decoder)

    states = {"decoder": new_optimizer(model.decoder.parameters())}
    for pid, fv in model.feature_volumes.items():
        states[pid] = new_optimizer([fv.features])

    rollback = None
    for it in range(config.iterations):
        lr = config.lr_at(it)
        rollback = {pid: fv.features.copy() for pid, fv in model.feature_volumes.items()}
        rollback["__decoder__"] = [p.copy() for p in model.decoder.parameters()]
        try:
            row = training_step(model, states, it, lr, config)
        except NonFiniteLoss as exc:
            for pid, fv in model.feature_volumes.items():
                fv.features[...] = rollback[pid]
            for p, saved in zip(model.decoder.parameters(), rollback["__decoder__"]):
                p[...] = saved
            exc.model = model
            raise
        model.telemetry.append(row)
        if progress:
            progress(row)
    _write_telemetry(config.telemetry_path, model.telemetry)
    return model


# ---------------------------------------------------------------------------
# Decoder pretraining
# ---------------------------------------------------------------------------

@dataclass
class _Crop:
    fv: object
    points: np.ndarray
    normals: np.ndarray


def _crop_volume(vertices, faces, center, side, cells):
    from .geometry import tri_box_overlap
    h = side / cells
    origin = center - side / 2.0
    dims = np.array([cells] * 3)
    occupancy = np.zeros((cells, cells, cells), dtype=bool)
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    tmin = np.minimum(np.minimum(v0, v1), v2)
    tmax = np.maximum(np.maximum(v0, v1), v2)
    near = np.nonzero(np.all(tmin <= origin + side, axis=1)
                      & np.all(tmax >= origin, axis=1))[0]
    half = np.full(3, 0.5 * h)
    for t in near:
        c_lo = np.clip(np.floor((tmin[t] - origin) / h).astype(np.int64), 0, dims - 1)
        c_hi = np.clip(np.floor((tmax[t] - origin) / h).astype(np.int64), 0, dims - 1)
        span = np.stack(np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(c_lo, c_hi)],
                                    indexing="ij"), axis=-1).reshape(-1, 3)
        if occupancy[tuple(span.T)].all():
            continue
        centers = origin + (span + 0.5) * h
        n = len(centers)
        hit = tri_box_overlap(np.broadcast_to(v0[t], (n, 3)) - centers,
                              np.broadcast_to(v1[t], (n, 3)) - centers,
                              np.broadcast_to(v2[t], (n, 3)) - centers,
                              np.zeros(3), half)
        occupancy[tuple(span[hit].T)] = True
    if not occupancy.any():
        return None
    return PatchVolume(patch_id=-1, origin=origin, cell_size=float(h),
                       dims=dims, occupancy=occupancy)


def pretrain_decoder(corpus, config=None, progress=None):
    """Train a decoder on random cubic crops of the corpus shapes.

    Crops are assigned to shapes round-robin, each gets a fixed-resolution
    feature grid over its cube, and decoder plus all crop features are
    optimized jointly with the per-patch loss (no merge term).
    """
    config = config or TrainConfig()
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("no shapes to pretrain on")
    gen = rng.stream(config.seed, rng.PRETRAIN)
    decoder = new_decoder(config.feature_dim, config.hidden_width, config.seed)

    pools = []
    for shape in corpus:
        pts, nrm, pid = [], [], []
        for p in shape.patches:
            s = sample_patch(p, max(2000, 40000 // max(len(shape.patches), 1)), config.seed)
            pts.append(s.points)
            nrm.append(s.normals)
        pools.append((np.concatenate(pts), np.concatenate(nrm)))

    crops = []
    per_shape = int(np.ceil(config.pretrain_crops / len(corpus)))
    crop_seed = 0
    for si, shape in enumerate(corpus):
        verts = np.concatenate([p.vertices for p in shape.patches])
        fcs = []
        off = 0
        for p in shape.patches:
            fcs.append(p.faces + off)
            off += len(p.vertices)
        fcs = np.concatenate(fcs)
        pool_pts, pool_nrm = pools[si]
        made = 0
        attempts = 0
        while made < per_shape and len(crops) < config.pretrain_crops and attempts < per_shape * 10:
            attempts += 1
            center = pool_pts[gen.integers(0, len(pool_pts))]
            side = gen.uniform(0.3, 0.8)
            inside = np.all(np.abs(pool_pts - center) <= side / 2.0, axis=1)
            if inside.sum() < 32:
                continue
            vol = _crop_volume(verts, fcs, center, side, config.pretrain_grid_cells)
            if vol is None:
                continue
            fv = init_features(vol, config.feature_dim, _mix(config.seed, crop_seed))
            crop_seed += 1
            keep = vol.contains_many(pool_pts[inside])
            pts = pool_pts[inside][keep]
            nrm = pool_nrm[inside][keep]
            if len(pts) < 32:
                continue
            crops.append(_Crop(fv=fv, points=pts, normals=nrm))
            made += 1
    if not crops:
        raise EmptyCorpus("no usable crops found")

    params = decoder.parameters()
    dec_state = new_optimizer(params)
    crop_states = [new_optimizer([c.fv.features]) for c in crops]
    n_per = max(16, config.surface_samples // len(crops))

    for it in range(config.pretrain_iterations):
        lr = config.lr_at(it, milestones=tuple(
            int(m * config.pretrain_iterations / config.iterations)
            for m in config.decay_iterations))
        param_grads = zero_param_grads(decoder)
        total = 0.0
        inv_k = 1.0 / len(crops)
        for ci, crop in enumerate(crops):
            gen_it = rng.stream(config.seed, rng.PRETRAIN, it, ci)
            idx = gen_it.integers(0, len(crop.points), size=min(n_per, len(crop.points)))
            vol = crop.fv.volume
            cells = vol.occupied_cells[gen_it.integers(0, len(vol.occupied_cells), size=len(idx))]
            omega = vol.origin + (cells + gen_it.uniform(size=(len(idx), 3))) * vol.cell_size
            terms, payload = patch_terms_for_samples(
                decoder, crop.fv, crop.points[idx], crop.normals[idx], omega,
                config, gen_it)
            pts, dy, dg, cache, rows, w, dw = payload
            pgrads, dq, dqdot = backward(decoder, cache, dy * inv_k, dg * inv_k)
            contrib = feature_contrib(w, dq, dw, dqdot)
            fgrad = np.zeros_like(crop.fv.features)
            np.add.at(fgrad, rows, contrib)
            fgrad += inv_k * config.lambda_code * 2.0 * crop.fv.features / len(crop.fv.features)
            adam_step(crop_states[ci], [crop.fv.features], [fgrad], lr)
            for acc, pg in zip(param_grads, pgrads):
                acc += pg
            total += inv_k * _weighted_patch_loss(terms, config)
        if not np.isfinite(total):
            raise NonFiniteLoss(f"pretraining iteration {it}: loss is {total}")
        adam_step(dec_state, params, param_grads, lr)
        if progress:
            progress({"iter": it, "total": total, "lr": lr})
    return decoder


# ---------------------------------------------------------------------------
# Local update
# ---------------------------------------------------------------------------

def local_update(model, edited, config=None, removed=(), added=(), added_adjacency=()):
    """Re-fit only the feature volumes touched by a shape edit.

    ``edited`` maps patch ids to replacement PatchInput geometry; ``removed``
    and ``added`` handle deleted and fresh patches (``added_adjacency`` lists
    their new edges).  The decoder must be frozen.  Returns a new model;
    untouched feature volumes are shared (hence bit-identical).
    """
    config = config or model.config
    if not model.decoder.frozen:
        raise DecoderNotFrozen("local update requires a frozen (pretrained) decoder")
    known = set(model.feature_volumes)
    for pid in list(edited) + list(removed):
        if pid not in known:
            raise UnknownPatch(f"patch {pid} is not part of the model")

    removed = set(removed)
    new_patches = []
    for p in model.shape.patches:
        if p.id in removed:
            continue
        new_patches.append(edited.get(p.id, p))
    new_patches.extend(added)
    keep_ids = {p.id for p in new_patches}
    new_adjacency = [(a, b, k) for a, b, k in model.shape.adjacency
                     if a in keep_ids and b in keep_ids]
    new_adjacency += [tuple(e) for e in added_adjacency]
    new_shape = SegmentedShape(patches=new_patches, adjacency=new_adjacency)

    dirty = set(edited) | removed | {p.id for p in added}
    # trimming patches of dirty parents are dirty too
    dirty_trims = {tid for tid, t in model.trims.items() if t.parent_patch in dirty}
    old_bounds = {}
    for pid in dirty | dirty_trims:
        if pid in model.feature_volumes:
            old_bounds[pid] = volume_bounds(model.feature_volumes[pid].volume)
        else:
            old_bounds[pid] = None

    volumes = {pid: fv.volume for pid, fv in model.feature_volumes.items()
               if pid not in model.trims}
    feature_volumes = dict(model.feature_volumes)
    trims = dict(model.trims)
    diameters = dict(model.diameters)
    for pid in removed | dirty_trims:
        volumes.pop(pid, None)
        feature_volumes.pop(pid, None)
        trims.pop(pid, None)

    next_id = max(keep_ids | set(trims)) + 1
    grid_adjacency = [e for e in new_adjacency]
    grid_adjacency += [(trims[t].parent_patch, t, CONVEX) for t in sorted(trims)]
    fresh = sorted((set(edited) - removed) | {p.id for p in added})
    for pid in fresh:
        patch = new_shape.patch(pid)
        diameters[pid] = average_shape_diameter(patch, new_shape, config.seed)
        volumes[pid] = build_patch_volume(patch, diameters[pid])
        feature_volumes[pid] = init_features(volumes[pid], config.feature_dim, config.seed)
        if patch.is_open:
            for k in range(len(patch.boundaries)):
                trim = build_trimming_patch(patch, k, new_shape,
                                            config.trim_boundary_samples,
                                            trim_id=next_id,
                                            cell_size=volumes[pid].cell_size,
                                            seed=config.seed)
                trims[next_id] = trim
                feature_volumes[next_id] = init_features(
                    trim.volume, config.feature_dim, config.seed)
                grid_adjacency.append((pid, next_id, CONVEX))
                dirty_trims.add(next_id)
                next_id += 1

    real_volumes = {pid: v for pid, v in volumes.items() if pid not in trims}
    virtual_volumes = {tid: trims[tid].volume for tid in trims}
    grid, affected = rebuild_region(
        model.merge_grid, new_shape, real_volumes,
        sorted(dirty | dirty_trims), old_bounds,
        virtual_volumes=virtual_volumes, adjacency=grid_adjacency)

    train_ids = sorted((set(affected) | set(fresh) | dirty_trims) & set(feature_volumes))
    for pid in train_ids:
        fv = feature_volumes[pid]
        feature_volumes[pid] = replace(fv, features=fv.features.copy())

    out = Model(decoder=model.decoder, feature_volumes=feature_volumes,
                merge_grid=grid, config=config, shape=new_shape, trims=trims,
                diameters=diameters, global_field=model.global_field)

    states = {"decoder": new_optimizer(out.decoder.parameters())}
    for pid in train_ids:
        states[pid] = new_optimizer([feature_volumes[pid].features])

    for it in range(config.update_iterations):
        lr = config.lr_at(it, milestones=config.update_decay_iterations)
        row = training_step(out, states, it, lr, config, train_ids=train_ids)
        out.telemetry.append(row)
    return out
