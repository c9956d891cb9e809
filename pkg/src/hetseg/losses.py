"""Segmentation losses.

Three families live here:

* numpy reference losses on a single probability field ``(C, x, y, z)``:
  :func:`cross_entropy`, :func:`adaptive_cross_entropy`,
  :func:`soft_dice_loss`, evaluated in float64;
* their closed-form gradients with respect to pre-softmax logits, checked
  against central finite differences by :func:`numeric_gradient_check`;
* torch versions for mini-batches (:func:`batch_loss`) used during
  training, where each patch carries its own complement set.

The adaptive loss is cross entropy except on background voxels of
lesion-annotated samples. There the background label only says "not a
lesion", so the voxel is rewarded for the total probability of all
non-lesion labels, ``-log(sum_j p_j)``, with the sum taken inside the log.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch

from . import kernels
from .errors import InvalidComplement, NonFiniteLoss, ShapeError, ValidationError
from .labelspace import BACKGROUND_ID

EPS = 1e-7
DICE_SMOOTH = 1.0


@dataclass
class LossValue:
    value: float
    per_voxel: np.ndarray | None = None


def _as_arrays(pred, target):
    probs = np.asarray(getattr(pred, "probs", pred), dtype=np.float64)
    tgt = np.asarray(getattr(target, "data", target))
    if probs.ndim < 2:
        raise ShapeError(f"pred must be (C, ...) with C >= 2, got {probs.shape}")
    if probs.shape[1:] != tgt.shape:
        raise ShapeError(f"pred spatial shape {probs.shape[1:]} != target shape {tgt.shape}")
    n_classes = probs.shape[0]
    flat_t = tgt.reshape(-1).astype(np.int64)
    if flat_t.size and (flat_t.min() < 0 or flat_t.max() >= n_classes):
        raise ValidationError(f"target labels must lie in [0, {n_classes})")
    return probs.reshape(n_classes, -1), flat_t, tgt.shape


def _result(terms, shape, per_voxel):
    value = float(terms.mean()) if terms.size else 0.0
    return LossValue(value, terms.reshape(shape) if per_voxel else None)


def _complement_mask(complement, lesion_labels, n_classes):
    comp = np.zeros(n_classes, dtype=np.bool_)
    les = np.zeros(n_classes, dtype=np.bool_)
    for j in complement:
        if not 0 <= j < n_classes:
            raise InvalidComplement(f"complement label {j} outside [0, {n_classes})")
        comp[j] = True
    for j in lesion_labels:
        if not 0 <= j < n_classes:
            raise InvalidComplement(f"lesion label {j} outside [0, {n_classes})")
        les[j] = True
    if not comp[BACKGROUND_ID]:
        raise InvalidComplement("complement set must contain the background label")
    if (comp & les).any() or not (comp | les).all():
        raise InvalidComplement("complement and lesion labels must partition the label space")
    return comp, les


def cross_entropy(pred, target, per_voxel: bool = False) -> LossValue:
    """Mean voxel-wise categorical cross entropy, log argument clamped to [EPS, 1]."""
    probs, t, shape = _as_arrays(pred, target)
    comp = np.ones(probs.shape[0], dtype=np.bool_)
    terms = kernels.ace_terms(np.ascontiguousarray(probs), t, comp, False, EPS)
    return _result(terms, shape, per_voxel)


def adaptive_cross_entropy(
    pred,
    target,
    complement: Iterable[int],
    lesion_labels: Iterable[int],
    per_voxel: bool = False,
    lesion_sourced: bool | None = None,
) -> LossValue:
    """Mean adaptive cross entropy of one sample.

    ``complement`` and ``lesion_labels`` partition the label ids. Unless
    ``lesion_sourced`` says otherwise, a sample counts as lesion-annotated
    exactly when its complement is not the full label space.
    """
    probs, t, shape = _as_arrays(pred, target)
    comp, les = _complement_mask(set(complement), set(lesion_labels), probs.shape[0])
    if lesion_sourced is None:
        lesion_sourced = not comp.all()
    terms = kernels.ace_terms(np.ascontiguousarray(probs), t, comp, bool(lesion_sourced), EPS)
    return _result(terms, shape, per_voxel)


def soft_dice_loss(pred, target, smooth: float = DICE_SMOOTH) -> LossValue:
    """``1 - mean_c (2 I_c + s) / (P_c + G_c + s)`` over all classes, background included."""
    probs, t, _ = _as_arrays(pred, target)
    n_classes = probs.shape[0]
    onehot = np.zeros_like(probs)
    onehot[t, np.arange(t.size)] = 1.0
    inter = (probs * onehot).sum(axis=1)
    denom = probs.sum(axis=1) + onehot.sum(axis=1) + smooth
    return LossValue(float(1.0 - np.mean((2 * inter + smooth) / denom)))


# --------------------------------------------------------------------------
# gradients with respect to logits
# --------------------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _ce_logit_grad(logits, target, **_):
    probs = softmax(np.asarray(logits, dtype=np.float64))
    c = probs.shape[0]
    p2 = np.ascontiguousarray(probs.reshape(c, -1))
    t = np.asarray(target).reshape(-1).astype(np.int64)
    g = kernels.ace_logit_grad(p2, t, np.ones(c, dtype=np.bool_), False, EPS)
    return (g / t.size).reshape(probs.shape)


def _ace_logit_grad(logits, target, complement, lesion_labels, lesion_sourced=None, **_):
    probs = softmax(np.asarray(logits, dtype=np.float64))
    c = probs.shape[0]
    comp, _ = _complement_mask(set(complement), set(lesion_labels), c)
    if lesion_sourced is None:
        lesion_sourced = not comp.all()
    p2 = np.ascontiguousarray(probs.reshape(c, -1))
    t = np.asarray(target).reshape(-1).astype(np.int64)
    g = kernels.ace_logit_grad(p2, t, comp, bool(lesion_sourced), EPS)
    return (g / t.size).reshape(probs.shape)


def _dice_logit_grad(logits, target, smooth=DICE_SMOOTH, **_):
    probs = softmax(np.asarray(logits, dtype=np.float64))
    c = probs.shape[0]
    p = probs.reshape(c, -1)
    t = np.asarray(target).reshape(-1).astype(np.int64)
    g = np.zeros_like(p)
    g[t, np.arange(t.size)] = 1.0
    num = 2 * (p * g).sum(axis=1) + smooth
    den = p.sum(axis=1) + g.sum(axis=1) + smooth
    # d loss / d p_ci = -(1/C) (2 g_ci den_c - num_c) / den_c^2
    dp = -(2 * g * den[:, None] - num[:, None]) / (den[:, None] ** 2) / c
    dz = p * (dp - (dp * p).sum(axis=0, keepdims=True))
    return dz.reshape(probs.shape)


_ANALYTIC: dict[Callable, Callable] = {
    cross_entropy: _ce_logit_grad,
    adaptive_cross_entropy: _ace_logit_grad,
    soft_dice_loss: _dice_logit_grad,
}
LOSSES = {"ce": cross_entropy, "ace": adaptive_cross_entropy, "dice": soft_dice_loss}


def logit_gradient(loss_fn, logits, target, **kwargs) -> np.ndarray:
    """Closed-form gradient of ``loss_fn(softmax(logits), target)``."""
    loss_fn = LOSSES.get(loss_fn, loss_fn)
    return _ANALYTIC[loss_fn](logits, target, **kwargs)


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def numeric_gradient_check(
    loss_fn,
    logits,
    target,
    tolerance: float = 1e-4,
    step: float = 1e-3,
    floor: float = 1e-8,
    **loss_kwargs,
) -> GradCheckReport:
    """Compare the analytic logit gradient with central differences.

    Everything runs on a float64 copy. The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps exactly flat
    directions from dividing by zero.
    """
    loss_fn = LOSSES.get(loss_fn, loss_fn)
    z = np.array(logits, dtype=np.float64)
    if z.size > 5 * 6**3:
        raise ValidationError("gradient checks are limited to C <= 5 and 6^3 voxels")

    def f(zz):
        v = loss_fn(softmax(zz), target, **loss_kwargs).value
        if not np.isfinite(v):
            raise NonFiniteLoss(f"loss is {v} at the evaluation point")
        return v

    f(z)
    analytic = logit_gradient(loss_fn, z, target, **loss_kwargs)
    numeric = np.empty_like(z)
    flat = z.reshape(-1)
    out = numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = f(z)
        flat[k] = orig - step
        fm = f(z)
        flat[k] = orig
        out[k] = (fp - fm) / (2 * step)
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return GradCheckReport(float((diff / denom).max()), float(diff.max()), int(z.size), tolerance)


# --------------------------------------------------------------------------
# torch mini-batch losses
# --------------------------------------------------------------------------


def _per_patch_ce(probs, labels, complement_masks, lesion_sourced, eps):
    picked = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp(eps, 1.0)).flatten(1).mean(1)


def _per_patch_ace(probs, labels, complement_masks, lesion_sourced, eps):
    if not bool(complement_masks[:, BACKGROUND_ID].all()):
        raise InvalidComplement("every complement set must contain the background label")
    picked = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    weights = complement_masks.to(probs.dtype)[:, :, None, None, None]
    pooled = (probs * weights).sum(1)
    use_pool = lesion_sourced[:, None, None, None] & (labels == BACKGROUND_ID)
    arg = torch.where(use_pool, pooled, picked)
    return -torch.log(arg.clamp(eps, 1.0)).flatten(1).mean(1)


def _per_patch_dice(probs, labels, complement_masks, lesion_sourced, eps, smooth=DICE_SMOOTH):
    n_classes = probs.shape[1]
    onehot = torch.nn.functional.one_hot(labels, n_classes).movedim(-1, 1).to(probs.dtype)
    dims = tuple(range(2, probs.ndim))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims) + smooth
    return 1.0 - ((2 * inter + smooth) / denom).mean(1)


_BATCH = {"ce": _per_patch_ce, "ace": _per_patch_ace, "dice": _per_patch_dice}


def batch_loss(
    kind: str,
    probs: torch.Tensor,
    labels: torch.Tensor,
    complement_masks: torch.Tensor | None = None,
    lesion_sourced: torch.Tensor | None = None,
    eps: float = EPS,
) -> torch.Tensor:
    """Mean over patches of the per-patch loss.

    ``probs`` is (B, C, x, y, z), ``labels`` (B, x, y, z) int64,
    ``complement_masks`` (B, C) bool and ``lesion_sourced`` (B,) bool.
    """
    if kind not in _BATCH:
        raise ValidationError(f"unknown loss {kind!r}; choose from {sorted(_BATCH)}")
    if probs.shape[0] != labels.shape[0] or probs.shape[2:] != labels.shape[1:]:
        raise ShapeError(f"probs {tuple(probs.shape)} vs labels {tuple(labels.shape)}")
    b, c = probs.shape[:2]
    if complement_masks is None:
        complement_masks = torch.ones((b, c), dtype=torch.bool, device=probs.device)
    if lesion_sourced is None:
        lesion_sourced = ~complement_masks.all(1)
    return _BATCH[kind](probs, labels.long(), complement_masks, lesion_sourced, eps).mean()


def gradcheck_suite(
    loss: str,
    seed: int,
    n_instances: int = 20,
    n_classes: int = 5,
    size: int = 4,
    tolerance: float = 1e-4,
) -> list[GradCheckReport]:
    """Seeded random instances for :func:`numeric_gradient_check`.

    For ``ace`` the last class plays the lesion and targets mix background
    and lesion voxels, so both branches of the loss are exercised.
    """
    if loss not in LOSSES:
        raise ValidationError(f"unknown loss {loss!r}; choose from {sorted(LOSSES)}")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    shape = (size, size, size)
    reports = []
    for _ in range(n_instances):
        logits = rng.normal(0.0, 1.5, (n_classes, *shape))
        kwargs = {}
        if loss == "ace":
            lesion = n_classes - 1
            target = np.where(rng.random(shape) < 0.5, 0, lesion)
            target.flat[0], target.flat[1] = 0, lesion
            kwargs = {"complement": set(range(lesion)), "lesion_labels": {lesion}}
        else:
            target = rng.integers(0, n_classes, shape)
        reports.append(numeric_gradient_check(loss, logits, target, tolerance, **kwargs))
    return reports
