from __future__ import annotations

import numpy as np

from .. import numerics as nx
from ..geometry import NEGATIVE, Box, LabeledPoint
from ..numerics import Module, Tensor
from .config import ModelConfig
from .heads import PointGenerator, PriorEncoder, PromptRefiner
from .sam import DecodeOutput, ImageEncoder, MaskDecoder, PromptEncoder

BASE_PREFIXES = ("encoder.", "prompt.", "decoder.")
HEAD_PREFIXES = ("prm.", "pem.", "sie.")


class RoBoxModel(Module):
    """Base segmenter plus the three robustness heads.

    Parameters under ``encoder.``, ``prompt.`` and ``decoder.`` form the base;
    ``prm.``, ``pem.`` and ``sie.`` are the heads trained on top of a frozen base.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        sub = lambda k: np.random.default_rng([cfg.seed, k])  # noqa: E731
        self.encoder = ImageEncoder(cfg, sub(1))
        self.prompt = PromptEncoder(cfg, sub(2))
        self.decoder = MaskDecoder(cfg, sub(3))
        self.prm = PromptRefiner(cfg, sub(4))
        self.pem = PointGenerator(cfg, sub(5))
        self.sie = PriorEncoder(cfg, sub(6))

    # -- parameter partition -------------------------------------------------
    def base_parameters(self) -> list[tuple[str, nx.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith(BASE_PREFIXES)]

    def head_parameters(self) -> list[tuple[str, nx.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith(HEAD_PREFIXES)]

    def reset_heads(self, seed: int) -> None:
        cfg = self.cfg
        sub = lambda k: np.random.default_rng([seed, 100 + k])  # noqa: E731
        self.prm = PromptRefiner(cfg, sub(4))
        self.pem = PointGenerator(cfg, sub(5))
        self.sie = PriorEncoder(cfg, sub(6))

    def zero_heads(self) -> None:
        for _, p in self.head_parameters():
            p.data[:] = 0.0

    # -- forward pieces --------------------------------------------------------
    def encode_image(self, images) -> Tensor:
        return self.encoder(images)

    def encode_prompts(self, boxes, points=None, labels=None) -> Tensor:
        if isinstance(boxes, Box):
            boxes = boxes.as_array()[None]
        if points is not None and len(points) and isinstance(points[0], LabeledPoint):
            labels = np.array([[p.label for p in points]])
            points = np.array([[[p.x, p.y] for p in points]], dtype=np.float64)
        elif points is not None and labels is None:
            labels = np.full(nx.as_tensor(points).shape[:2], NEGATIVE)
        return self.prompt(boxes, points, labels)

    def decode(self, embedding: Tensor, prompt_tokens: Tensor) -> DecodeOutput:
        return self.decoder(embedding, self.prompt.dense_pe(), prompt_tokens)

    def prm_attend(self, f_img: Tensor, f_p: Tensor) -> Tensor:
        return self.prm.attend(f_img, f_p, self.prompt.dense_pe())

    def prm_forward(self, f_img: Tensor, f_p: Tensor, boxes) -> tuple[Tensor, Tensor]:
        """``boxes`` are the (B, 4) prompts that produced ``f_p``."""
        return self.prm(f_img, f_p, boxes, self.prompt.dense_pe())

    def pem_forward(self, f_star: Tensor, f_r_star: Tensor) -> Tensor:
        return self.pem(f_star, f_r_star)

    def sie_forward(self, stack) -> Tensor:
        return self.sie(stack)
