"""Loss terms for training the sector surrogate.

All terms take tensors with a leading batch axis, are unsquared Euclidean
norms per item and are averaged over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .sim import RelPerm, face_transmissibility
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    trans: float = 1.0
    flux: float = 0.1
    well: float = 1.0

    def __post_init__(self):
        for name in ("trans", "flux", "well"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    rec: float
    pred: float
    trans: float
    flux: float
    well: float
    total: float
    tensor: Tensor = None  # differentiable total

    def as_row(self):
        return {k: getattr(self, k) for k in ("rec", "pred", "trans", "flux", "well", "total")}


def _tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def batch_norm_mean(diff):
    """Mean over the leading axis of per-item Euclidean norms."""
    return T.mean(T.l2_norm(diff, batched=True))


def _diff_loss(a, b, name):
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")
    return batch_norm_mean(T.sub(a, b))


def rec_loss(x, x_hat):
    return _diff_loss(x, x_hat, "rec_loss")


def pred_loss(x_next, x_next_hat):
    return _diff_loss(x_next, x_next_hat, "pred_loss")


def trans_loss(z_next, z_next_hat):
    return _diff_loss(z_next, z_next_hat, "trans_loss")


def well_loss(y, y_hat, mask=None):
    """Rate mismatch; ``mask`` (same shape, 0/1) drops producers outside the sector window."""
    y, y_hat = _tensor(y), _tensor(y_hat)
    if y.shape != y_hat.shape:
        raise DimensionError(f"well_loss: shapes {y.shape} and {y_hat.shape} differ")
    diff = T.sub(y, y_hat)
    if mask is not None:
        mask = np.asarray(mask, dtype=diff.data.dtype)
        if mask.shape != diff.shape:
            raise DimensionError(f"well_loss: mask {mask.shape} vs rates {diff.shape}")
        diff = T.mul(diff, Tensor(mask))
    return batch_norm_mean(diff)


# ---------------------------------------------------------------- flux

def relperm_tensor(sw, model: RelPerm):
    """Corey ``(k_rw, k_ro)`` on a tensor, matching :func:`lle2c.sim.relative_permeability`."""
    span = 1.0 - model.swc - model.sor
    s = T.clip(T.scale_shift(sw, 1.0 / span, -model.swc / span), 0.0, 1.0)
    return T.power(s, model.a), T.power(T.scale_shift(s, -1.0, 1.0), model.b)


def _axis_pairs(x, axis):
    """Slices of ``x`` (N, H, W) at the low and high cell of every face along ``axis``."""
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return T.getitem(x, tuple(lo)), T.getitem(x, tuple(hi))


def _face_terms(state, model):
    """Per-face ``(kr_o + kr_w) * dp`` for x and y faces of a ``(N, 2, H, W)`` state.

    Face relative permeability is the mean of the two adjacent cells.
    """
    p = T.getitem(state, (slice(None), 0))
    krw, kro = relperm_tensor(T.getitem(state, (slice(None), 1)), model)
    kr = T.add(krw, kro)
    out = []
    for axis in (1, 2):
        p_lo, p_hi = _axis_pairs(p, axis)
        k_lo, k_hi = _axis_pairs(kr, axis)
        out.append(T.mul(T.scale_shift(T.add(k_lo, k_hi), 0.5), T.sub(p_hi, p_lo)))
    return out


def _weighted_stack(true, pred, weights, model):
    parts = []
    for ft, fp, w in zip(_face_terms(true, model), _face_terms(pred, model), weights):
        f = T.mul(T.sub(ft, fp), Tensor(w))
        parts.append(T.reshape(f, (f.shape[0], -1)))
    return T.concat(parts, axis=1)


def flux_loss(true_t, pred_t, true_next, pred_next, k_faces, model: RelPerm, masks=None):
    """``mean ||k F_rec|| + mean ||k F_pred||`` over faces of ``(N, 2, H, W)`` sector states.

    ``k_faces`` is ``(kx, ky)`` with shapes ``(N, H-1, W)`` and ``(N, H, W-1)``
    (or without the batch axis, shared); ``masks`` optionally selects the
    faces that count (core faces during training).
    """
    true_t, pred_t, true_next, pred_next = (_tensor(a) for a in (true_t, pred_t, true_next, pred_next))
    shape = true_t.shape
    if len(shape) != 4 or shape[1] != 2:
        raise DimensionError(f"flux_loss expects (N, 2, H, W) states, got {shape}")
    for a in (pred_t, true_next, pred_next):
        if a.shape != shape:
            raise DimensionError(f"flux_loss: shapes {shape} and {a.shape} differ")
    n, _, h, w = shape
    weights = []
    for k, face_shape, m in zip(k_faces, ((h - 1, w), (h, w - 1)), masks if masks is not None else (None, None)):
        k = np.asarray(k, dtype=true_t.data.dtype)
        if np.any(~(k > 0)):
            raise ConfigError("flux_loss: face permeability must be positive")
        k = np.broadcast_to(k, (n,) + face_shape)
        if m is not None:
            k = k * np.broadcast_to(np.asarray(m, dtype=k.dtype), k.shape)
        weights.append(np.ascontiguousarray(k))
    rec = batch_norm_mean(_weighted_stack(true_t, pred_t, weights, model))
    pred = batch_norm_mean(_weighted_stack(true_next, pred_next, weights, model))
    return T.add(rec, pred)


def face_weights(perm, k_ref=1.0):
    """Face transmissibility of a permeability window, scaled by ``k_ref`` (same harmonic mean as the simulator)."""
    tx, ty = face_transmissibility(perm)
    return tx / k_ref, ty / k_ref


def core_face_masks(shape, core_offset, core_shape):
    """0/1 masks for faces with both cells inside the core of a ``shape`` window."""
    inside = np.zeros(shape, dtype=bool)
    cx, cy = core_offset
    inside[cx:cx + core_shape[0], cy:cy + core_shape[1]] = True
    mx = inside[:-1, :] & inside[1:, :]
    my = inside[:, :-1] & inside[:, 1:]
    return mx.astype(np.float64), my.astype(np.float64)


# ---------------------------------------------------------------- composition

def combine(terms, weights: LossWeights, e2co=False):
    """Weighted total of named loss tensors (``rec``, ``pred``, ``trans``, ``flux``, optional ``well``)."""
    if "well" in terms and terms["well"] is not None and not e2co:
        raise UsageError("well loss supplied but the observation head is disabled")
    if e2co and terms.get("well") is None:
        raise UsageError("e2co training needs a well loss")
    zero = Tensor(np.zeros((), dtype=terms["rec"].data.dtype))
    parts = {k: terms.get(k) if terms.get(k) is not None else zero for k in ("rec", "pred", "trans", "flux", "well")}
    total = T.add(parts["rec"], parts["pred"])
    for k, theta in (("trans", weights.trans), ("flux", weights.flux), ("well", weights.well)):
        if k == "well" and not e2co:
            continue
        if theta != 0:
            total = T.add(total, T.scale_shift(parts[k], theta))
    vals = {k: float(v.data) for k, v in parts.items()}
    return LossBreakdown(total=float(total.data), tensor=total, **vals)
