"""Shared MLP decoder mapping interpolated features to signed distance.

Three affine layers with SiLU after the first two.  Spatial gradients are
computed by pushing the three columns of the feature-field Jacobian through
the network as forward-mode tangents; parameter and feature gradients of
losses that depend on those spatial gradients are computed by reverse mode
over the tangent computation, so everything stays exact.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .errors import NonFiniteLoss, OutsideVolume
from .patch_volume import interpolation_data

DEFAULT_FEATURE_DIM = 16
DEFAULT_HIDDEN = 32


from scipy.special import expit as _sigmoid


def _silu(z):
    s = _sigmoid(z)
    return z * s, s


def _silu_d1(z, s):
    return s * (1.0 + z * (1.0 - s))


def _silu_d2(z, s):
    return s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))


def _quantize(a):
    # parameters are kept exactly float32-representable so that checkpoints
    # (which store float32) round-trip without changing any evaluation
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def interp_features(w, corner):
    """(n,8) weights x (n,8,D) corner features -> (n,D)."""
    return (w[:, None, :] @ corner)[:, 0, :]


def interp_tangents(dw, corner):
    """(n,8,3) weight gradients x (n,8,D) corner features -> (n,D,3)."""
    return corner.transpose(0, 2, 1) @ dw


def feature_contrib(w, dq, dw=None, dqdot=None):
    """Per-corner feature gradient contributions (n,8,D)."""
    c = w[:, :, None] * dq[:, None, :]
    if dqdot is not None:
        c = c + dw @ dqdot.transpose(0, 2, 1)
    return c


@dataclass
class Decoder:
    """Weights and biases of the 3-layer network; optionally frozen."""

    weights: list                 # [(W, D), (W, W), (1, W)]
    biases: list                  # [(W,), (W,), (1,)]
    frozen: bool = False

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def hidden(self):
        return self.weights[0].shape[0]

    def copy(self):
        return Decoder(weights=[w.copy() for w in self.weights],
                       biases=[b.copy() for b in self.biases],
                       frozen=self.frozen)

    def parameters(self):
        """Flat list of parameter arrays in a fixed order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def new_decoder(in_dim=DEFAULT_FEATURE_DIM, hidden=DEFAULT_HIDDEN, seed=0):
    """Uniform(+-1/sqrt(fan_in)) initialization for weights and biases."""
    gen = rng.stream(seed, rng.DECODER)
    dims = [(hidden, in_dim), (hidden, hidden), (1, hidden)]
    weights, biases = [], []
    for rows, cols in dims:
        bound = 1.0 / np.sqrt(cols)
        weights.append(_quantize(gen.uniform(-bound, bound, size=(rows, cols))))
        biases.append(_quantize(gen.uniform(-bound, bound, size=rows)))
    return Decoder(weights=weights, biases=biases)


def freeze(dec):
    """A frozen copy: losses report zero parameter gradients for it."""
    out = dec.copy()
    out.frozen = True
    return out


def zero_param_grads(dec):
    return [np.zeros_like(p) for p in dec.parameters()]


# ---------------------------------------------------------------------------
# Forward / backward kernels
# ---------------------------------------------------------------------------

def forward(dec, q, qdot=None):
    """Evaluate the network on features q (n, D).

    qdot (n, D, 3), when given, carries spatial tangents of the feature
    field; the returned cache then contains the spatial gradient ``g``.
    """
    W1, W2, W3 = dec.weights
    b1, b2, b3 = dec.biases
    z1 = q @ W1.T + b1
    a1, s1 = _silu(z1)
    z2 = a1 @ W2.T + b2
    a2, s2 = _silu(z2)
    y = a2 @ W3.T + b3
    cache = {"q": q, "z1": z1, "s1": s1, "a1": a1,
             "z2": z2, "s2": s2, "a2": a2, "y": y[:, 0]}
    if qdot is not None:
        p1 = _silu_d1(z1, s1)
        p2 = _silu_d1(z2, s2)
        zd1 = (qdot.transpose(0, 2, 1) @ W1.T).transpose(0, 2, 1)   # (n, W, 3)
        ad1 = p1[:, :, None] * zd1
        zd2 = (ad1.transpose(0, 2, 1) @ W2.T).transpose(0, 2, 1)
        ad2 = p2[:, :, None] * zd2
        g = ad2.transpose(0, 2, 1) @ W3[0]                          # (n, 3)
        cache.update({"qdot": qdot, "p1": p1, "p2": p2,
                      "zd1": zd1, "ad1": ad1, "zd2": zd2, "ad2": ad2, "g": g})
    return cache


def backward(dec, cache, dy, dg=None):
    """Reverse pass for a scalar loss with upstream dy (n,) and dg (n, 3).

    Returns (param_grads in Decoder.parameters() order, dq (n, D),
    dqdot (n, D, 3) or None).  Gradients flow through both the primal and
    the tangent computation, which is what makes losses on the spatial
    gradient differentiable with respect to parameters and features.
    """
    W1, W2, W3 = dec.weights
    q, z1, s1, a1 = cache["q"], cache["z1"], cache["s1"], cache["a1"]
    z2, s2, a2 = cache["z2"], cache["s2"], cache["a2"]

    gW3_t = np.zeros_like(W3[0])
    dz2_t = 0.0
    dz1_t = 0.0
    gW2_t = 0.0
    gW1_t = 0.0
    dqdot = None
    if dg is not None and cache.get("zd1") is not None:
        p1, p2 = cache["p1"], cache["p2"]
        zd1, ad1, zd2, ad2 = cache["zd1"], cache["ad1"], cache["zd2"], cache["ad2"]
        pp1 = _silu_d2(z1, s1)
        pp2 = _silu_d2(z2, s2)
        dad2 = W3[0][None, :, None] * dg[:, None, :]
        gW3_t = (ad2 @ dg[:, :, None])[:, :, 0].sum(axis=0)
        dzd2 = p2[:, :, None] * dad2
        dz2_t = ((pp2[:, :, None] * zd2) * dad2).sum(axis=2)
        w_cols = ad1.shape[1]
        gW2_t = dzd2.transpose(0, 2, 1).reshape(-1, dzd2.shape[1]).T @ \
            ad1.transpose(0, 2, 1).reshape(-1, w_cols)
        dad1 = (dzd2.transpose(0, 2, 1) @ W2).transpose(0, 2, 1)
        dzd1 = p1[:, :, None] * dad1
        dz1_t = ((pp1[:, :, None] * zd1) * dad1).sum(axis=2)
        qdot = cache["qdot"]
        gW1_t = dzd1.transpose(0, 2, 1).reshape(-1, dzd1.shape[1]).T @ \
            qdot.transpose(0, 2, 1).reshape(-1, qdot.shape[1])
        dqdot = (dzd1.transpose(0, 2, 1) @ W1).transpose(0, 2, 1)

    p1 = cache.get("p1")
    p2 = cache.get("p2")
    if p1 is None:
        p1 = _silu_d1(z1, s1)
        p2 = _silu_d1(z2, s2)

    gW3 = (gW3_t + dy @ a2)[None, :]
    gb3 = np.array([dy.sum()])
    da2 = dy[:, None] * W3[0][None, :]
    dz2 = dz2_t + p2 * da2
    gW2 = gW2_t + dz2.T @ a1
    gb2 = dz2.sum(axis=0)
    da1 = dz2 @ W2
    dz1 = dz1_t + p1 * da1
    gW1 = gW1_t + dz1.T @ q
    gb1 = dz1.sum(axis=0)
    dq = dz1 @ W1
    return [gW1, gb1, gW2, gb2, gW3, gb3], dq, dqdot


# ---------------------------------------------------------------------------
# Evaluation against feature volumes
# ---------------------------------------------------------------------------

def decode(dec, feat):
    """Signed distance for one feature vector."""
    feat = np.asarray(feat, dtype=float)
    return float(forward(dec, feat[None])["y"][0])


def decode_many(dec, feats):
    return forward(dec, np.asarray(feats, dtype=float))["y"]


def decode_points(dec, fv, pts, with_gradient=False):
    """Decode the feature field at points inside the volume.

    Returns values (n,) or (values, spatial gradients (n, 3)).
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    rows, w, dw = interpolation_data(fv, pts)
    corner = fv.features[rows]                      # (n, 8, D)
    q = interp_features(w, corner)
    if not with_gradient:
        return forward(dec, q)["y"]
    qdot = interp_tangents(dw, corner)
    cache = forward(dec, q, qdot)
    return cache["y"], cache["g"]


@dataclass
class GradientBundle:
    """Value and spatial gradient at a point, plus optional loss gradients."""

    value: float
    grad_x: np.ndarray
    grad_params: list = None
    grad_features: np.ndarray = None


def decode_with_spatial_gradient(dec, fv, x):
    x = np.asarray(x, dtype=float)
    values, grads = decode_points(dec, fv, x[None], with_gradient=True)
    return GradientBundle(value=float(values[0]), grad_x=grads[0])


def backprop_points(dec, fv, pts, d_value, d_grad=None):
    """Parameter and feature gradients for upstream (d_value, d_grad).

    d_value is (n,); d_grad (n, 3) or None.  Returns (param_grads,
    feature_grads) with feature_grads aligned to fv.features.  Frozen
    decoders get zero parameter gradients.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    rows, w, dw = interpolation_data(fv, pts)
    corner = fv.features[rows]
    q = interp_features(w, corner)
    need_tangent = d_grad is not None
    qdot = interp_tangents(dw, corner) if need_tangent else None
    cache = forward(dec, q, qdot)
    param_grads, dq, dqdot = backward(dec, cache, d_value, d_grad if need_tangent else None)
    contrib = w[:, :, None] * dq[:, None, :]
    if dqdot is not None:
        contrib = contrib + dw @ dqdot.transpose(0, 2, 1)
    fgrad = np.zeros_like(fv.features)
    np.add.at(fgrad, rows, contrib)
    if dec.frozen:
        param_grads = zero_param_grads(dec)
    return param_grads, fgrad


# ---------------------------------------------------------------------------
# Generic loss backprop (the public differentiation contract)
# ---------------------------------------------------------------------------

@dataclass
class LossTerm:
    """One term of a point loss.

    kind: value_abs | value_sq | sdf_abs | grad_norm | grad_sq | off_exp |
    eikonal.  sdf_abs reads per-point targets; grad terms read per-point
    normals; off_exp uses ``alpha``.
    """

    kind: str
    weight: float = 1.0
    alpha: float = 100.0


@dataclass
class LossSpec:
    terms: list
    reduction: str = "mean"       # "mean" or "sum" over the batch points


@dataclass
class PointBatch:
    """Points for one feature volume, with optional supervision arrays."""

    patch_id: int
    points: np.ndarray
    normals: np.ndarray = None
    targets: np.ndarray = None


def _term_value_and_upstream(term, y, g, normals, targets):
    n = len(y)
    dy = np.zeros(n)
    dg = None
    if term.kind == "value_abs":
        val = np.abs(y)
        dy = np.sign(y)
    elif term.kind == "value_sq":
        val = y ** 2
        dy = 2.0 * y
    elif term.kind == "sdf_abs":
        r = y - targets
        val = np.abs(r)
        dy = np.sign(r)
    elif term.kind == "off_exp":
        val = np.exp(-term.alpha * np.abs(y))
        dy = -term.alpha * np.sign(y) * val
    elif term.kind == "grad_norm":
        r = g - normals
        nrm = np.linalg.norm(r, axis=1)
        val = nrm
        safe = np.where(nrm > 1e-15, nrm, 1.0)
        dg = r / safe[:, None]
        dg[nrm <= 1e-15] = 0.0
    elif term.kind == "grad_sq":
        r = g - normals
        val = np.einsum("ij,ij->i", r, r)
        dg = 2.0 * r
    elif term.kind == "eikonal":
        nrm = np.linalg.norm(g, axis=1)
        val = np.abs(nrm - 1.0)
        safe = np.where(nrm > 1e-15, nrm, 1.0)
        dg = np.sign(nrm - 1.0)[:, None] * g / safe[:, None]
        dg[nrm <= 1e-15] = 0.0
    else:
        raise ValueError(f"unknown loss term kind {term.kind!r}")
    return val, dy, dg


def backprop_loss(dec, fvs, batch, loss_spec):
    """Exact gradients of a scalar loss over point batches.

    fvs: dict patch_id -> PatchFeatureVolume; batch: list of PointBatch.
    Returns (loss, param_grads, {patch_id: feature_grads}).  Raises
    NonFiniteLoss on any NaN or infinity.
    """
    total = 0.0
    param_grads = zero_param_grads(dec)
    feature_grads = {pid: np.zeros_like(fv.features) for pid, fv in fvs.items()}
    needs_grad = any(t.kind in ("grad_norm", "grad_sq", "eikonal") for t in loss_spec.terms)
    for entry in batch:
        fv = fvs[entry.patch_id]
        pts = np.atleast_2d(entry.points)
        if len(pts) == 0:
            continue
        rows, w, dw = interpolation_data(fv, pts)
        corner = fv.features[rows]
        q = interp_features(w, corner)
        qdot = interp_tangents(dw, corner) if needs_grad else None
        cache = forward(dec, q, qdot)
        y = cache["y"]
        g = cache.get("g")
        scale = 1.0 / len(pts) if loss_spec.reduction == "mean" else 1.0
        dy_sum = np.zeros(len(pts))
        dg_sum = np.zeros((len(pts), 3)) if needs_grad else None
        for term in loss_spec.terms:
            val, dy, dg = _term_value_and_upstream(term, y, g, entry.normals, entry.targets)
            total += term.weight * scale * val.sum()
            dy_sum += term.weight * scale * dy
            if dg is not None:
                dg_sum += term.weight * scale * dg
        pgrads, dq, dqdot = backward(dec, cache, dy_sum, dg_sum)
        contrib = w[:, :, None] * dq[:, None, :]
        if dqdot is not None:
            contrib = contrib + dw @ dqdot.transpose(0, 2, 1)
        np.add.at(feature_grads[entry.patch_id], rows, contrib)
        if not dec.frozen:
            for acc, pg in zip(param_grads, pgrads):
                acc += pg
    if not np.isfinite(total):
        raise NonFiniteLoss(f"loss is {total}")
    if dec.frozen:
        param_grads = zero_param_grads(dec)
    return float(total), param_grads, feature_grads
