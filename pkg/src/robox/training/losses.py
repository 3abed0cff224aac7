"""Mask, box-offset and point losses as differentiable tensor expressions."""

from __future__ import annotations

import numpy as np

from .. import numerics as nx
from ..geometry import Box, match_points_batch
from ..numerics import Tensor

DICE_EPS = 1.0
# keeps the gradient finite at zero distance while biasing distances by ~1e-12
_DIST_EPS = 1e-24


def _target(gt, like: Tensor) -> np.ndarray:
    g = np.asarray(gt, dtype=np.float64)
    if g.shape != like.shape[-g.ndim:]:
        g = np.broadcast_to(g, like.shape)
    return g


def bce_map(logits: Tensor, gt) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against {0,1} targets."""
    g = _target(gt, logits)
    return nx.softplus(logits) - logits * g


def loss_ce(logits: Tensor, gt_mask) -> Tensor:
    logits = nx.as_tensor(logits)
    if np.shape(gt_mask) != logits.shape:
        raise nx.ShapeError(f"loss_ce: logits {logits.shape} vs mask {np.shape(gt_mask)}")
    return bce_map(logits, gt_mask).mean()


def loss_dice(logits: Tensor, gt_mask) -> Tensor:
    logits = nx.as_tensor(logits)
    if np.shape(gt_mask) != logits.shape:
        raise nx.ShapeError(f"loss_dice: logits {logits.shape} vs mask {np.shape(gt_mask)}")
    p = nx.sigmoid(logits)
    g = np.asarray(gt_mask, dtype=np.float64)
    return 1.0 - (2.0 * (p * g).sum() + DICE_EPS) / (p.sum() + float(g.sum()) + DICE_EPS)


def mask_losses(logits: Tensor, gt_masks) -> tuple[Tensor, Tensor]:
    """Per-(sample, mask) CE and dice loss for logits (B, K, H, W) and masks (B, H, W)."""
    g = np.asarray(gt_masks, dtype=np.float64)[:, None]
    ce = bce_map(logits, np.broadcast_to(g, logits.shape)).mean(axis=(2, 3))
    p = nx.sigmoid(logits)
    inter = (p * g).sum(axis=(2, 3))
    denom = p.sum(axis=(2, 3)) + g.sum(axis=(2, 3))
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    return ce, dice


def select_per_sample(values: Tensor, choice: np.ndarray) -> Tensor:
    """values (B, K) -> (B,) picking column ``choice[b]`` per row."""
    return nx.getitem(values, (np.arange(values.shape[0]), np.asarray(choice)))


def loss_offsets(p_c_star, p_gt, image_size: float = 64.0) -> Tensor:
    """Mean absolute error between boxes in normalised coordinates."""
    if isinstance(p_c_star, Box):
        p_c_star = p_c_star.as_array()
    if isinstance(p_gt, Box):
        p_gt = p_gt.as_array()
    pred = nx.as_tensor(p_c_star)
    gt = np.asarray(p_gt, dtype=np.float64)
    return nx.absolute((pred - gt) * (1.0 / image_size)).mean()


def loss_points(pred, gt, skip, image_size: float = 64.0, reduction: str = "mean",
                squared: bool = False) -> Tensor:
    """Matched-point distance loss.

    ``pred`` (B, n, 2) and ``gt`` (B, n, 2) are pixel coordinates; rows with
    ``skip`` set (empty negative region) are excluded from the average. The
    assignment minimising summed distance is found exhaustively and held fixed
    for differentiation. ``reduction`` sums or averages over matched pairs.
    """
    pred = nx.as_tensor(pred)
    if pred.ndim == 2:
        pred = pred.reshape(1, *pred.shape)
        gt = np.asarray(gt, dtype=np.float64)[None]
        skip = np.asarray([skip])
    skip = np.asarray(skip, dtype=bool).reshape(-1)
    keep = np.flatnonzero(~skip)
    if keep.size == 0:
        return nx.Tensor(0.0)
    scale = 1.0 / image_size
    p = nx.getitem(pred, keep) * scale
    g = np.asarray(gt, dtype=np.float64)[keep] * scale
    perms, _ = match_points_batch(p.data, g)
    g_matched = np.take_along_axis(g, perms[:, :, None], axis=1)
    d2 = ((p - g_matched) ** 2).sum(axis=-1)
    dist = d2 if squared else nx.sqrt(d2 + _DIST_EPS) - np.sqrt(_DIST_EPS)
    per_sample = dist.sum(axis=1) if reduction == "sum" else dist.mean(axis=1)
    return per_sample.mean()
