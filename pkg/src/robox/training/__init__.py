"""Synthetic data, losses and the two-phase training schedule."""

from .data import Sample, SplitData, gen_dataset, load_split, make_example, prior_stacks
from .losses import loss_ce, loss_dice, loss_offsets, loss_points, mask_losses
from .train import (
    DivergenceError,
    FrozenParameterError,
    PretrainConfig,
    TrainConfig,
    gt_prompt_dice,
    pretrain,
    robox_loss,
    train_robox,
)
