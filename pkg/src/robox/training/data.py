"""Synthetic single-target dataset with nearby distractors, and manifest I/O."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ..geometry import Box, tight_box
from ..imageprior import PriorConfig, build_stack

IMAGE_SIZE = 64
AREA_RANGE = (0.05, 0.40)
MIN_CONTRAST = 0.2
NOISE_SIGMA = 0.05
SPLIT_RATIO = (6, 1, 3)
SHAPES = ("ellipse", "rounded_rect", "polygon")
# unlabelled look-alike shapes placed close to the target
DISTRACTORS = (1, 3)
DISTRACTOR_AREA = (0.02, 0.08)
DISTRACTOR_GAP = (2.0, 6.0)


@dataclass
class Sample:
    image: np.ndarray
    gt_mask: np.ndarray
    gt_box: Box
    perturbed_box: Box | None = None
    sampled_gt_points: list = field(default_factory=list)
    skip: bool = True
    fallback: bool = False


@dataclass
class SplitData:
    ids: list[str]
    images: np.ndarray  # (N, H, W) float64 in [0, 1]
    masks: np.ndarray  # (N, H, W) bool
    boxes: np.ndarray  # (N, 4) tight boxes x1, y1, x2, y2
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> SplitData:
        idx = np.asarray(idx)
        return SplitData([self.ids[i] for i in idx], self.images[idx], self.masks[idx],
                         self.boxes[idx], self.root)


def _shape_mask(kind: str, rng: np.random.Generator, area: float, n: int,
                centre_range: tuple[float, float] = (0.3, 0.7)) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    target = area * n * n
    cx, cy = rng.uniform(centre_range[0] * n, centre_range[1] * n, size=2)
    theta = rng.uniform(0, np.pi)
    ct, st = math.cos(theta), math.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    if kind == "ellipse":
        aspect = rng.uniform(0.5, 1.0)
        rx = math.sqrt(target / (math.pi * aspect))
        ry = rx * aspect
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if kind == "rounded_rect":
        aspect = rng.uniform(0.5, 1.0)
        hx = math.sqrt(target / (4 * aspect))
        hy = hx * aspect
        r = rng.uniform(0.15, 0.45) * hy
        qx, qy = np.abs(u) - (hx - r), np.abs(v) - (hy - r)
        outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
        inside = np.minimum(np.maximum(qx, qy), 0)
        return outside + inside - r <= 0.0
    # smoothed star-shaped random polygon
    k = int(rng.integers(5, 9))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
    radii = rng.uniform(0.7, 1.25, size=k)
    base_r = math.sqrt(target / (math.pi * np.mean(radii**2)))
    phi = np.arctan2(yy - cy, xx - cx) % (2 * np.pi)
    a_ext = np.concatenate([angles - 2 * np.pi, angles, angles + 2 * np.pi])
    r_ext = np.tile(radii, 3)
    boundary = np.interp(phi, a_ext, r_ext) * base_r
    raw = np.hypot(xx - cx, yy - cy) <= boundary
    return ndimage.gaussian_filter(raw.astype(np.float64), 1.5) >= 0.5


def _background(rng: np.random.Generator, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n
    tex = np.zeros((n, n))
    for _ in range(3):
        fx, fy = rng.uniform(-2.0, 2.0, size=2)
        tex += rng.uniform(0.02, 0.05) * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    return tex


def _touches_border(m: np.ndarray) -> bool:
    return bool(m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any())


def _distractors(rng: np.random.Generator, mask: np.ndarray, n: int) -> np.ndarray:
    """Union of small shapes sitting a few pixels away from ``mask``."""
    dist_target = ndimage.distance_transform_edt(~mask)
    out = np.zeros_like(mask)
    want = int(rng.integers(DISTRACTORS[0], DISTRACTORS[1] + 1))
    for _ in range(want):
        for _attempt in range(30):
            kind = SHAPES[int(rng.integers(len(SHAPES)))]
            d = _shape_mask(kind, rng, rng.uniform(*DISTRACTOR_AREA), n, centre_range=(0.1, 0.9))
            if not d.any() or _touches_border(d):
                continue
            gap = dist_target[d].min()
            if not DISTRACTOR_GAP[0] <= gap <= DISTRACTOR_GAP[1]:
                continue
            if out.any() and ndimage.distance_transform_edt(~out)[d].min() < DISTRACTOR_GAP[0]:
                continue
            out |= d
            break
    return out


def make_example(seed: int, index: int, n: int = IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray, str]:
    """Return ``(image_uint8, mask_bool, shape_kind)`` for one sample."""
    rng = np.random.default_rng([seed, index])
    while True:
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        area = rng.uniform(0.07, 0.33)
        mask = _shape_mask(kind, rng, area, n)
        frac = mask.mean()
        if not AREA_RANGE[0] <= frac <= AREA_RANGE[1]:
            continue
        if _touches_border(mask):
            continue
        if ndimage.label(mask)[1] != 1:
            continue
        b = tight_box(mask)
        if not AREA_RANGE[0] <= b.area / (n * n) <= AREA_RANGE[1]:
            continue
        if not AREA_RANGE[0] <= (b.width + 1) * (b.height + 1) / (n * n) <= AREA_RANGE[1]:
            continue
        break
    bg = rng.uniform(0.15, 0.85)
    contrast = rng.uniform(0.25, 0.5)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    if not 0.05 <= bg + sign * contrast <= 0.95:
        sign = -sign
    fg = float(np.clip(bg + sign * contrast, 0.05, 0.95))
    clutter = _distractors(rng, mask, n)
    fg_d = float(np.clip(bg + sign * contrast * rng.uniform(0.8, 1.2), 0.0, 1.0))
    img = np.where(mask, fg, np.where(clutter, fg_d, bg)) + _background(rng, n) + rng.normal(0.0, NOISE_SIGMA, size=(n, n))
    img8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return img8, mask, kind


def _split_counts(count: int) -> tuple[int, int, int]:
    tot = sum(SPLIT_RATIO)
    n_train = round(count * SPLIT_RATIO[0] / tot)
    n_val = round(count * SPLIT_RATIO[1] / tot)
    return n_train, n_val, count - n_train - n_val


def gen_dataset(out_dir, count: int, seed: int = 0) -> Path:
    """Write ``count`` samples split 6:1:3 plus ``manifest.json``; returns the manifest path."""
    if count < 10:
        raise ValueError("count must be >= 10")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    n_train, n_val, _ = _split_counts(count)
    samples = []
    for i in range(count):
        img8, mask, kind = make_example(seed, i)
        sid = f"s{i:05d}"
        Image.fromarray(img8, mode="L").save(out / "images" / f"{sid}.png")
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(out / "masks" / f"{sid}.png")
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        b = tight_box(mask)
        samples.append({
            "id": sid, "split": split, "image": f"images/{sid}.png", "mask": f"masks/{sid}.png",
            "shape": kind, "height": IMAGE_SIZE, "width": IMAGE_SIZE,
            "area": int(mask.sum()), "box": [b.x1, b.y1, b.x2, b.y2],
        })
    manifest = {"version": 1, "seed": seed, "count": count, "samples": samples}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_split(manifest_path, split: str | None) -> SplitData:
    """Load every sample of ``split`` (or all samples when ``split`` is None)."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    rows = [s for s in manifest["samples"] if split is None or s["split"] == split]
    if not rows:
        raise ValueError(f"no samples for split {split!r} in {manifest_path}")
    images, masks, boxes = [], [], []
    for s in rows:
        img = np.asarray(Image.open(root / s["image"]).convert("L"), dtype=np.float64) / 255.0
        m = np.asarray(Image.open(root / s["mask"]).convert("L")) > 127
        images.append(img)
        masks.append(m)
        boxes.append(tight_box(m).as_array())
    return SplitData([s["id"] for s in rows], np.stack(images), np.stack(masks), np.stack(boxes), root)


def prior_stacks(data: SplitData, cfg: PriorConfig | None = None, cache: bool = True) -> np.ndarray:
    """(N, 3, H, W) prior stacks, cached next to the manifest when possible."""
    cfg = cfg or PriorConfig()
    key = hashlib.sha256(
        json.dumps([cfg.__dict__, data.ids], sort_keys=True).encode() + data.images.tobytes()
    ).hexdigest()[:16]
    path = data.root / "cache" / f"priors_{key}.npy" if (cache and data.root is not None) else None
    if path is not None and path.exists():
        return np.load(path)
    out = np.stack([build_stack(img, cfg).as_array() for img in data.images])
    if path is not None:
        path.parent.mkdir(exist_ok=True)
        np.save(path, out)
    return out
