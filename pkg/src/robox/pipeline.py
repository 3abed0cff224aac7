"""Three-stage inference: box refinement, negative points, prior-fused decoding."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .geometry import NEGATIVE, Box, BoxOffsets, LabeledPoint, apply_offsets
from .imageprior import PriorConfig, build_stack
from .model import RoBoxModel, select_mask

# Σ|Δ| below half a pixel cannot move a rasterised box.
STOP_TOLERANCE = 0.5

OffsetFn = Callable[[np.ndarray, nx.Tensor], np.ndarray]


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause!r}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class Flags:
    use_prm: bool = False
    use_pem: bool = False
    use_sie: bool = False
    iterate: bool = False


ABLATIONS = {
    "Baseline": Flags(),
    "Baseline+PRM": Flags(use_prm=True),
    "Baseline+PRM+PEM": Flags(use_prm=True, use_pem=True),
    "RoBox": Flags(use_prm=True, use_pem=True, use_sie=True),
    "RoBox (Iter)": Flags(use_prm=True, use_pem=True, use_sie=True, iterate=True),
}


@dataclass
class InferenceTrace:
    initial_box: list[float]
    boxes: list[list[float]] = field(default_factory=list)
    offsets: list[list[float]] = field(default_factory=list)
    offset_l1: list[float] = field(default_factory=list)
    iterations: int = 0
    converged_at: int = 0
    points: list[list[float]] = field(default_factory=list)
    selected_index: int = -1
    score: float = float("nan")
    embedding_source: str = "f_img"
    flags: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def final_box(self) -> Box:
        return Box.from_array(self.boxes[-1] if self.boxes else self.initial_box)

    def to_json(self, with_timing: bool = True) -> str:
        d = asdict(self)
        if not with_timing:
            d.pop("timing")
        return json.dumps(d, sort_keys=True)


@dataclass
class _Refinement:
    boxes: np.ndarray  # (B, 4) final boxes
    f_star: nx.Tensor  # attention features of the original box
    f_r_star: nx.Tensor  # attention features of the final box
    traces: list[InferenceTrace]


class Pipeline:
    """Runs the staged inference for a model.

    ``offset_fn`` replaces the refinement head's offset regression; it receives
    the current boxes (B, 4) and the attention features and must return
    (B, 4) offsets ordered dx1, dx2, dy1, dy2.
    """

    def __init__(self, model: RoBoxModel, prior_cfg: PriorConfig | None = None,
                 offset_fn: OffsetFn | None = None):
        self.model = model
        self.prior_cfg = prior_cfg or PriorConfig()
        self.offset_fn = offset_fn

    @property
    def image_shape(self) -> tuple[int, int]:
        s = self.model.cfg.image_size
        return s, s

    # -- stage 1 -------------------------------------------------------------
    def _attend(self, f_img: nx.Tensor, boxes: np.ndarray) -> nx.Tensor:
        return self.model.prm_attend(f_img, self.model.encode_prompts(boxes))

    def _offsets(self, boxes: np.ndarray, f_star: nx.Tensor) -> np.ndarray:
        if self.offset_fn is not None:
            return np.asarray(self.offset_fn(boxes, f_star), dtype=np.float64).reshape(-1, 4)
        return self.model.prm.offsets(f_star, boxes).data

    def _refine(self, f_img: nx.Tensor, boxes: np.ndarray, iterate: bool) -> _Refinement:
        boxes = np.asarray(boxes, dtype=np.float64).copy()
        n = len(boxes)
        traces = [InferenceTrace(initial_box=boxes[i].tolist()) for i in range(n)]
        f_star = self._attend(f_img, boxes)
        limit = self.model.cfg.k_iters if iterate else 1
        active = np.arange(n)
        feats = f_star
        for it in range(1, limit + 1):
            d = self._offsets(boxes[active], feats)
            still = []
            for row, i in enumerate(active):
                off = BoxOffsets.from_array(d[row])
                new = apply_offsets(Box.from_array(boxes[i]), off, self.image_shape)
                moved = not np.array_equal(new.as_array(), boxes[i])
                boxes[i] = new.as_array()
                tr = traces[i]
                tr.boxes.append(boxes[i].tolist())
                tr.offsets.append(off.as_array().tolist())
                tr.offset_l1.append(off.l1())
                tr.iterations = it
                if moved:
                    tr.converged_at = it
                if off.l1() >= STOP_TOLERANCE:
                    still.append(i)
            active = np.asarray(still, dtype=np.int64)
            if active.size == 0 or it == limit:
                break
            feats = self._attend(nx.getitem(f_img, active), boxes[active])
        f_r_star = self._attend(f_img, boxes)
        return _Refinement(boxes, f_star, f_r_star, traces)

    def refine_box(self, img, box: Box, iterate: bool = False, f_img: nx.Tensor | None = None):
        """Returns ``(refined_box, trace)`` for a single image."""
        with nx.no_grad():
            f_img = f_img if f_img is not None else self.model.encode_image(np.asarray(img)[None])
            ref = self._refine(f_img, box.as_array()[None], iterate)
        return Box.from_array(ref.boxes[0]), ref.traces[0]

    # -- stage 2 -------------------------------------------------------------
    def _points(self, f_star: nx.Tensor, f_r_star: nx.Tensor) -> np.ndarray:
        return self.model.pem_forward(f_star, f_r_star).data

    def generate_points(self, img, original_box: Box, refined_box: Box,
                        f_img: nx.Tensor | None = None) -> list[LabeledPoint]:
        with nx.no_grad():
            f_img = f_img if f_img is not None else self.model.encode_image(np.asarray(img)[None])
            f_star = self._attend(f_img, original_box.as_array()[None])
            f_r_star = self._attend(f_img, refined_box.as_array()[None])
            pts = self._points(f_star, f_r_star)[0]
        return [LabeledPoint(float(x), float(y), NEGATIVE) for x, y in pts]

    # -- full pipeline -------------------------------------------------------
    def segment_batch(self, images, boxes, flags: Flags, stacks: np.ndarray | None = None,
                      f_img: nx.Tensor | None = None) -> tuple[np.ndarray, list[InferenceTrace]]:
        """Segment a batch. Returns boolean masks (B, H, W) and one trace per image."""
        model = self.model
        images = np.asarray(images, dtype=np.float64)
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        n = len(boxes)
        timing: dict[str, float] = {}
        with nx.no_grad():
            t0 = time.perf_counter()
            try:
                if f_img is None:
                    f_img = model.encode_image(images)
            except Exception as exc:  # noqa: BLE001
                raise StageError("encode", exc) from exc
            timing["encode"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            try:
                if flags.use_prm:
                    ref = self._refine(f_img, boxes, flags.iterate)
                    final_boxes, traces = ref.boxes, ref.traces
                    f_star, f_r_star = ref.f_star, ref.f_r_star
                else:
                    final_boxes = boxes.copy()
                    traces = [InferenceTrace(initial_box=b.tolist(), boxes=[b.tolist()]) for b in boxes]
                    f_star = f_r_star = None
                    if flags.use_pem or flags.use_sie:
                        f_star = f_r_star = self._attend(f_img, boxes)
            except Exception as exc:  # noqa: BLE001
                raise StageError("refine", exc) from exc
            timing["refine"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            points = None
            try:
                if flags.use_pem:
                    points = self._points(f_star, f_r_star)
            except Exception as exc:  # noqa: BLE001
                raise StageError("points", exc) from exc
            timing["points"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            try:
                if points is not None:
                    labels = np.full(points.shape[:2], NEGATIVE)
                    prompt = model.encode_prompts(final_boxes, points, labels)
                else:
                    prompt = model.encode_prompts(final_boxes)
                # any enabled head decodes from the attention feature of the
                # final box, as in training; all flags off is the plain decode
                embedding = f_img if f_r_star is None else f_r_star
                if flags.use_sie:
                    if stacks is None:
                        stacks = np.stack([build_stack(im, self.prior_cfg).as_array() for im in images])
                    embedding = embedding + model.sie_forward(stacks)
                out = model.decode(embedding, prompt)
            except Exception as exc:  # noqa: BLE001
                raise StageError("decode", exc) from exc
            timing["decode"] = time.perf_counter() - t0

        masks = np.zeros((n,) + images.shape[1:], dtype=bool)
        for i in range(n):
            m, k, score = select_mask(out, i)
            masks[i] = m
            tr = traces[i]
            tr.selected_index = k
            tr.score = score
            tr.flags = asdict(flags)
            tr.embedding_source = ("f_img" if f_r_star is None else "f_r_star") + ("+f_s" if flags.use_sie else "")
            if points is not None:
                tr.points = points[i].tolist()
            tr.timing = {k_: v / n for k_, v in timing.items()}
        return masks, traces

    def segment(self, img, box: Box, flags: Flags, stack: np.ndarray | None = None):
        """Single-image :meth:`segment_batch`; returns ``(mask, trace)``."""
        img = np.asarray(img, dtype=np.float64)
        stacks = None if stack is None else np.asarray(stack)[None]
        masks, traces = self.segment_batch(img[None], box.as_array()[None], flags, stacks)
        return masks[0], traces[0]
