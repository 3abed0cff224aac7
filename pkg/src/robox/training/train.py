"""Base pretraining and frozen-base head training."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .. import numerics as nx
from ..geometry import NEGATIVE, Box, dice, mask_iou, negative_region, perturb_box, uniform_sample_points
from ..model import RoBoxModel
from ..pipeline import Flags, Pipeline
from .data import SplitData
from .losses import loss_offsets, loss_points, mask_losses, select_per_sample

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class FrozenParameterError(RuntimeError):
    pass


def _from_dict(cls, d):
    names = {f.name for f in fields(cls)}
    unknown = set(d or {}) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**(d or {}))


@dataclass(frozen=True)
class PretrainConfig:
    batch: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    max_epochs: int = 40
    target_dice: float = 0.85
    w_ce: float = 1.0
    w_dice: float = 1.0
    w_iou: float = 1.0
    # fraction of batches that also carry negative point prompts
    point_prob: float = 0.5
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 16
    lr: float = 1e-4
    epochs: int = 20
    w_ce: float = 1.0
    w_dice: float = 1.0
    w_o: float = 1.0
    w_p: float = 1.0
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    shift_range: tuple = (0.0, 0.3)
    # "min": best of the three masks per sample; "selected": highest predicted IoU
    mask_supervision: str = "min"
    lp_reduction: str = "mean"
    lp_squared: bool = False
    freeze_point_targets: bool = False
    # L_o averaged over this many chained refinements (detached between steps)
    offset_steps: int = 1
    # refined box re-enters the prompt encoder as a constant, so offsets are
    # supervised by L_o alone
    detach_refined_box: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch <= 0 or self.epochs <= 0:
            raise ValueError("lr, batch and epochs must be positive")
        if self.offset_steps < 1:
            raise ValueError("offset_steps must be >= 1")

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


def _write_log(path, records) -> None:
    if path is None:
        return
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _check_finite(value: float, what: str, epoch: int, step: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {what} at epoch {epoch} step {step}: {value}")


def encode_all(model: RoBoxModel, images: np.ndarray, batch: int = 64) -> np.ndarray:
    with nx.no_grad():
        return np.concatenate([model.encode_image(images[i:i + batch]).data
                               for i in range(0, len(images), batch)])


def gt_prompt_dice(model: RoBoxModel, data: SplitData, batch: int = 64) -> float:
    """Mean DICE with tight-box prompts and no heads."""
    pipe = Pipeline(model)
    scores = []
    for i in range(0, len(data), batch):
        masks, _ = pipe.segment_batch(data.images[i:i + batch], data.boxes[i:i + batch], Flags())
        scores += [dice(m, g) for m, g in zip(masks, data.masks[i:i + batch])]
    return float(np.mean(scores))


def _negative_points(rng, gt_box: np.ndarray, mask: np.ndarray, n: int) -> np.ndarray:
    a = perturb_box(Box.from_array(gt_box), (0.0, 0.3), rng, mask.shape)
    pts, skip = uniform_sample_points(negative_region(a, Box.from_array(gt_box), mask), n)
    if skip:
        rows, cols = np.nonzero(~mask)
        idx = rng.choice(len(rows), size=n)
        pts = list(zip(cols[idx], rows[idx]))
    return np.asarray(pts, dtype=np.float64)


def _mask_loss(logits: nx.Tensor, gt: np.ndarray, iou_pred: nx.Tensor | None,
               w_ce: float, w_dice: float, mode: str = "min") -> tuple[nx.Tensor, dict]:
    ce, dl = mask_losses(logits, gt)
    per = ce * w_ce + dl * w_dice
    if mode == "selected" and iou_pred is not None:
        choice = np.argmax(iou_pred.data, axis=1)
    else:
        choice = np.argmin(per.data, axis=1)
    loss = select_per_sample(per, choice).mean()
    stats = {"ce": float(select_per_sample(ce, choice).data.mean()),
             "dice": float(select_per_sample(dl, choice).data.mean())}
    return loss, stats


def pretrain(model: RoBoxModel, train: SplitData, val: SplitData, cfg: PretrainConfig,
             log_path=None) -> list[dict]:
    """Train encoder, prompt encoder and decoder with tight-box prompts.

    Stops once validation DICE reaches ``cfg.target_dice`` or after
    ``cfg.max_epochs``. Returns the per-epoch log records.
    """
    params = [p for _, p in model.base_parameters() if p.requires_grad]
    opt = nx.AdamW(params, lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    n_pts = model.cfg.n_points
    records = []
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        order = rng.permutation(len(train))
        sums = {"loss": 0.0, "ce": 0.0, "dice": 0.0, "iou": 0.0}
        steps = 0
        for step, start in enumerate(range(0, len(order), cfg.batch)):
            idx = order[start:start + cfg.batch]
            imgs, gts, boxes = train.images[idx], train.masks[idx], train.boxes[idx]
            if rng.random() < cfg.point_prob:
                pts = np.stack([_negative_points(rng, boxes[j], gts[j], n_pts) for j in range(len(idx))])
                prompt = model.encode_prompts(boxes, pts, np.full(pts.shape[:2], NEGATIVE))
            else:
                prompt = model.encode_prompts(boxes)
            out = model.decode(model.encode_image(imgs), prompt)
            seg, stats = _mask_loss(out.masks, gts, None, cfg.w_ce, cfg.w_dice)
            actual = np.array([[mask_iou(out.masks.data[b, k] > 0, gts[b])
                                for k in range(out.masks.shape[1])] for b in range(len(idx))])
            iou_loss = ((out.iou_scores - actual) ** 2).mean()
            loss = seg + iou_loss * cfg.w_iou
            _check_finite(loss.item(), "loss", epoch, step)
            opt.zero_grad()
            nx.backward(loss)
            opt.step()
            sums["loss"] += loss.item()
            sums["ce"] += stats["ce"]
            sums["dice"] += stats["dice"]
            sums["iou"] += iou_loss.item()
            steps += 1
        val_dice = gt_prompt_dice(model, val)
        rec = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}, "val_dice": val_dice}
        records.append(rec)
        log.info("pretrain epoch %d loss %.4f val_dice %.4f", epoch, rec["loss"], val_dice)
        _write_log(log_path, records)
        if val_dice >= cfg.target_dice:
            break
    return records


def _canonical_clamped(boxes0: np.ndarray, d: nx.Tensor, size: int) -> nx.Tensor:
    """Differentiable apply_offsets: add, canonicalise, clamp to the image."""
    # offsets arrive as dx1, dx2, dy1, dy2; boxes are x1, y1, x2, y2
    raw = nx.Tensor(boxes0) + d[:, [0, 2, 1, 3]]
    x1, y1, x2, y2 = raw[:, 0], raw[:, 1], raw[:, 2], raw[:, 3]
    coords = [nx.minimum(x1, x2), nx.minimum(y1, y2), nx.maximum(x2, x1), nx.maximum(y2, y1)]
    coords = [nx.clip(c, 0.0, size - 1.0) for c in coords]
    return nx.stack(coords, axis=1)


@dataclass
class HeadBatch:
    f_img: np.ndarray
    boxes0: np.ndarray
    gt_boxes: np.ndarray
    masks: np.ndarray
    stacks: np.ndarray


def robox_loss(model: RoBoxModel, batch: HeadBatch, cfg: TrainConfig,
               frozen_b: np.ndarray | None = None) -> tuple[nx.Tensor, dict, np.ndarray]:
    """Full three-stage forward with all four loss terms.

    Returns ``(loss, stats, refined_boxes)``.
    """
    size = model.cfg.image_size
    f_img = nx.Tensor(batch.f_img)
    with nx.no_grad():
        f_p0 = model.encode_prompts(batch.boxes0)
    f_star, d = model.prm_forward(f_img, f_p0, batch.boxes0)
    box1 = _canonical_clamped(batch.boxes0, d, size)
    l_o = loss_offsets(box1, batch.gt_boxes, size)
    prompt_box = box1.data if cfg.detach_refined_box else box1
    box1 = box1.data
    box = box1
    for _ in range(cfg.offset_steps - 1):
        with nx.no_grad():
            f_pk = model.encode_prompts(box)
        _, dk = model.prm_forward(f_img, f_pk, box)
        nxt = _canonical_clamped(box, dk, size)
        l_o = l_o + loss_offsets(nxt, batch.gt_boxes, size)
        box = nxt.data
    l_o = l_o * (1.0 / cfg.offset_steps)

    f_r_star = model.prm_attend(f_img, model.encode_prompts(prompt_box))
    pts = model.pem_forward(f_star, f_r_star)

    b_boxes = box1 if frozen_b is None else frozen_b
    targets, skips = [], []
    for j in range(len(batch.boxes0)):
        region = negative_region(Box.from_array(batch.boxes0[j]), Box.from_array(b_boxes[j]), batch.masks[j])
        p, skip = uniform_sample_points(region, model.cfg.n_points)
        targets.append(p if not skip else [(0, 0)] * model.cfg.n_points)
        skips.append(skip)
    l_p = loss_points(pts, np.asarray(targets, dtype=np.float64), np.asarray(skips), size,
                      reduction=cfg.lp_reduction, squared=cfg.lp_squared)

    emb = f_r_star + model.sie_forward(batch.stacks)
    prompt = model.encode_prompts(prompt_box, pts, np.full(pts.shape[:2], NEGATIVE))
    out = model.decode(emb, prompt)
    seg, stats = _mask_loss(out.masks, batch.masks, out.iou_scores, cfg.w_ce, cfg.w_dice,
                            cfg.mask_supervision)
    loss = seg + l_o * cfg.w_o + l_p * cfg.w_p
    stats.update(l_o=l_o.item(), l_p=l_p.item(), skipped=int(np.sum(skips)))
    return loss, stats, box1


def _perturbed_boxes(seed: int, epoch: int, offset: int, data: SplitData, shift_range) -> np.ndarray:
    out = np.empty_like(data.boxes)
    for i in range(len(data)):
        rng = np.random.default_rng([seed, 2, epoch, offset + i])
        out[i] = perturb_box(Box.from_array(data.boxes[i]), shift_range, rng, data.masks.shape[1:]).as_array()
    return out


def evaluate_heads(model: RoBoxModel, data: SplitData, f_img: np.ndarray, stacks: np.ndarray,
                   boxes0: np.ndarray, cfg: TrainConfig, batch: int = 50) -> dict:
    """Validation losses (no gradient) and single-pass full-pipeline DICE."""
    l_o, l_p, n = 0.0, 0.0, 0
    pipe = Pipeline(model)
    dices = []
    with nx.no_grad():
        for s in range(0, len(data), batch):
            sl = slice(s, s + batch)
            hb = HeadBatch(f_img[sl], boxes0[sl], data.boxes[sl], data.masks[sl], stacks[sl])
            _, st, _ = robox_loss(model, hb, cfg)
            k = len(data.ids[sl])
            l_o += st["l_o"] * k
            l_p += st["l_p"] * k
            n += k
            masks, _ = pipe.segment_batch(data.images[sl], boxes0[sl], ABLATION_FULL, stacks[sl],
                                          nx.Tensor(f_img[sl]))
            dices += [dice(m, g) for m, g in zip(masks, data.masks[sl])]
    return {"val_l_o": l_o / n, "val_l_p": l_p / n, "val_dice": float(np.mean(dices))}


ABLATION_FULL = Flags(use_prm=True, use_pem=True, use_sie=True)


def train_robox(model: RoBoxModel, train: SplitData, val: SplitData, train_stacks: np.ndarray,
                val_stacks: np.ndarray, cfg: TrainConfig, log_path=None) -> list[dict]:
    """Train PRM, PEM and SIE on top of a frozen base.

    Base parameters never enter the optimizer and are checked bit-for-bit
    after training.
    """
    base = model.base_parameters()
    snapshot = {n: p.data.copy() for n, p in base}
    for _, p in base:
        p.requires_grad = False
    heads = model.head_parameters()
    base_names = {n for n, _ in base}
    if base_names & {n for n, _ in heads}:
        raise FrozenParameterError("head and base parameter sets overlap")
    opt = nx.AdamW([p for _, p in heads if p.requires_grad], lr=cfg.lr, betas=tuple(cfg.betas),
                   weight_decay=cfg.weight_decay)

    f_train = encode_all(model, train.images)
    f_val = encode_all(model, val.images)
    val_boxes = _perturbed_boxes(cfg.seed, 0, 10**6, val, cfg.shift_range)
    frozen: dict[int, np.ndarray] = {}
    records = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            rng = np.random.default_rng([cfg.seed, 3, epoch])
            order = rng.permutation(len(train))
            boxes0 = _perturbed_boxes(cfg.seed, epoch, 0, train, cfg.shift_range)
            if cfg.freeze_point_targets and epoch > 1:
                boxes0 = _perturbed_boxes(cfg.seed, 1, 0, train, cfg.shift_range)
            sums: dict[str, float] = {}
            steps = 0
            for step, s in enumerate(range(0, len(order), cfg.batch)):
                idx = order[s:s + cfg.batch]
                hb = HeadBatch(f_train[idx], boxes0[idx], train.boxes[idx], train.masks[idx], train_stacks[idx])
                fb = None
                if cfg.freeze_point_targets and epoch > 1:
                    fb = np.stack([frozen[i] for i in idx])
                loss, stats, refined = robox_loss(model, hb, cfg, fb)
                if cfg.freeze_point_targets and epoch == 1:
                    for j, i in enumerate(idx):
                        frozen[int(i)] = refined[j]
                _check_finite(loss.item(), "loss", epoch, step)
                opt.zero_grad()
                nx.backward(loss)
                opt.step()
                stats["loss"] = loss.item()
                for k, v in stats.items():
                    sums[k] = sums.get(k, 0.0) + v
                steps += 1
            rec = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
            rec.update(evaluate_heads(model, val, f_val, val_stacks, val_boxes, cfg))
            records.append(rec)
            log.info("train epoch %d loss %.4f val_l_o %.4f val_dice %.4f", epoch, rec["loss"],
                     rec["val_l_o"], rec["val_dice"])
            _write_log(log_path, records)
    finally:
        for _, p in base:
            p.requires_grad = True
    for n, p in base:
        if not np.array_equal(p.data, snapshot[n]):
            raise FrozenParameterError(f"frozen parameter {n} changed during head training")
    return records
