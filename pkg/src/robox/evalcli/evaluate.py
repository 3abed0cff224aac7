"""Prompt-perturbation evaluation: DICE and prompt robustness per bucket and method."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np

from .. import numerics as nx
from ..geometry import Box, dice, perturb_box_with_status, rasterize
from ..imageprior import PriorConfig
from ..model import RoBoxModel
from ..pipeline import ABLATIONS, Flags, Pipeline
from ..training.data import SplitData, prior_stacks
from ..training.train import encode_all

DEFAULT_BUCKETS = {"GT": None, "0-10%": (0.0, 0.1), "10-20%": (0.1, 0.2), "20-30%": (0.2, 0.3)}


def pr_metric(masks) -> float:
    """Mean DICE of each trial mask against the union of all trial masks, in percent."""
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if len(masks) < 2:
        raise ValueError("pr_metric needs at least two masks")
    if any(m.shape != masks[0].shape for m in masks):
        raise ValueError("pr_metric: masks differ in shape")
    union = np.logical_or.reduce(masks)
    return 100.0 * float(np.mean([dice(m, union) for m in masks]))


class Predictor(Protocol):
    def __call__(self, indices: np.ndarray, boxes: np.ndarray, flags: Flags) -> np.ndarray: ...


class PipelinePredictor:
    """Adapts a model to the predictor protocol, caching embeddings and priors."""

    def __init__(self, model: RoBoxModel, data: SplitData, prior_cfg: PriorConfig | None = None,
                 stacks: np.ndarray | None = None):
        self.pipe = Pipeline(model, prior_cfg)
        self.data = data
        self.prior_cfg = prior_cfg
        self._stacks = stacks
        self.f_img = encode_all(model, data.images)

    @property
    def stacks(self) -> np.ndarray:
        if self._stacks is None:
            self._stacks = prior_stacks(self.data, self.prior_cfg)
        return self._stacks

    def __call__(self, indices, boxes, flags):
        stacks = self.stacks[indices] if flags.use_sie else None
        masks, _ = self.pipe.segment_batch(self.data.images[indices], boxes, flags, stacks,
                                           nx.Tensor(self.f_img[indices]))
        return masks


def oracle_predictor(data: SplitData) -> Callable:
    return lambda indices, boxes, flags: data.masks[indices]


def box_predictor(data: SplitData) -> Callable:
    shape = data.masks.shape[1:]
    return lambda indices, boxes, flags: np.stack([rasterize(Box.from_array(b), shape) for b in boxes])


@dataclass
class EvalConfig:
    buckets: dict = field(default_factory=lambda: dict(DEFAULT_BUCKETS))
    trials: int = 5
    methods: list = field(default_factory=lambda: list(ABLATIONS))
    seed: int = 0
    batch: int = 100

    def __post_init__(self):
        if self.trials < 2:
            raise ValueError("trials must be >= 2 (PR is undefined for one trial)")
        for name, rng in self.buckets.items():
            if rng is not None and not 0.0 <= rng[0] <= rng[1] <= 0.3:
                raise ValueError(f"bucket {name} outside [0, 0.3]: {rng}")
        unknown = set(self.methods) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict | None) -> EvalConfig:
        d = dict(d or {})
        if "buckets" in d:
            d["buckets"] = {k: (tuple(v) if v is not None else None) for k, v in d["buckets"].items()}
        return cls(**d)


@dataclass
class EvalReport:
    config: dict
    aggregates: list[dict]
    records: list[dict]
    runtime: dict = field(default_factory=dict)

    def to_json(self) -> str:
        """Deterministic serialisation (runtime statistics excluded)."""
        return json.dumps({"config": self.config, "aggregates": self.aggregates, "records": self.records},
                          sort_keys=True, indent=1)

    def aggregate(self, method: str, bucket: str) -> dict:
        for a in self.aggregates:
            if a["method"] == method and a["bucket"] == bucket:
                return a
        raise KeyError((method, bucket))

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        d = json.loads(text)
        return cls(d["config"], d["aggregates"], d["records"])


def draw_boxes(data: SplitData, bucket_index: int, shift, trials: int, seed: int):
    """Per-image perturbed boxes (N, trials, 4) and fallback flags, from per-image streams."""
    n = len(data)
    if shift is None:
        return np.repeat(data.boxes[:, None], 1, axis=1), np.zeros((n, 1), dtype=bool)
    boxes = np.empty((n, trials, 4))
    fb = np.zeros((n, trials), dtype=bool)
    shape = data.masks.shape[1:]
    for i in range(n):
        rng = np.random.default_rng([seed, i, bucket_index])
        for t in range(trials):
            b, f = perturb_box_with_status(Box.from_array(data.boxes[i]), shift, rng, shape)
            boxes[i, t] = b.as_array()
            fb[i, t] = f
    return boxes, fb


def evaluate(predictor: Predictor, data: SplitData, cfg: EvalConfig) -> EvalReport:
    t_start = time.perf_counter()
    records: list[dict] = []
    aggregates: list[dict] = []
    timings: dict[str, float] = {}
    drawn = {name: draw_boxes(data, bi, shift, cfg.trials, cfg.seed)
             for bi, (name, shift) in enumerate(cfg.buckets.items())}
    for method in cfg.methods:
        flags = ABLATIONS[method]
        t0 = time.perf_counter()
        for bucket, (boxes, fallback) in drawn.items():
            n_trials = boxes.shape[1]
            dices = np.zeros((len(data), n_trials))
            masks = np.zeros((n_trials,) + data.masks.shape, dtype=bool)
            for t in range(n_trials):
                for s in range(0, len(data), cfg.batch):
                    idx = np.arange(s, min(s + cfg.batch, len(data)))
                    masks[t, idx] = predictor(idx, boxes[idx, t], flags)
                dices[:, t] = [dice(masks[t, i], data.masks[i]) for i in range(len(data))]
            prs = [pr_metric(masks[:, i]) if n_trials > 1 else None for i in range(len(data))]
            for i in range(len(data)):
                records.append({
                    "id": data.ids[i], "method": method, "bucket": bucket,
                    "dice": [round(100.0 * v, 10) for v in dices[i]],
                    "pr": None if prs[i] is None else round(prs[i], 10),
                    "fallbacks": int(fallback[i].sum()),
                })
            aggregates.append({
                "method": method, "bucket": bucket,
                "dice": float(np.mean([np.mean(r["dice"]) for r in records[-len(data):]])),
                "pr": None if n_trials == 1 else float(np.mean([r["pr"] for r in records[-len(data):]])),
                "fallbacks": int(fallback.sum()), "images": len(data), "trials": n_trials,
            })
        timings[method] = time.perf_counter() - t0
    config = asdict(cfg)
    config["buckets"] = {k: (list(v) if v is not None else None) for k, v in cfg.buckets.items()}
    runtime = {"total_seconds": time.perf_counter() - t_start, "per_method_seconds": timings}
    return EvalReport(config, aggregates, records, runtime)
