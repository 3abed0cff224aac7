"""Toy promptable segmenter with box-refinement, point and prior heads."""

from .blocks import Attention, cross_attention
from .config import ModelConfig
from .core import BASE_PREFIXES, HEAD_PREFIXES, RoBoxModel
from .sam import DecodeOutput, bilinear_matrix


def select_mask(out: DecodeOutput, index: int = 0):
    """Highest predicted-IoU mask (ties -> lowest index), thresholded at 0.

    ``index`` picks the batch element. Returns ``(mask, mask_index, score)``.
    """
    import numpy as np

    scores = out.iou_scores.data[index]
    k = int(np.argmax(scores))
    return out.masks.data[index, k] > 0.0, k, float(scores[k])
