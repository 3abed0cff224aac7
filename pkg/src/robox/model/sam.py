"""The base promptable segmenter: image encoder, prompt encoder, mask decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import numerics as nx
from ..numerics import MLP, LayerNorm, Linear, Module, ModuleList, Parameter, Tensor
from .blocks import Attention, EncoderBlock, TwoWayLayer
from .config import ModelConfig

# rows of PromptEncoder.type_embed
CORNER1, CORNER2, NEGATIVE_POINT, POSITIVE_POINT = range(4)


@dataclass
class DecodeOutput:
    masks: Tensor  # (B, 3, H, W) logits
    iou_scores: Tensor  # (B, 3)
    final_embedding: Tensor  # (B, 4g*4g, d)


class ImageEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch * cfg.patch, cfg.dim, rng)
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, size=(cfg.tokens, cfg.dim)))
        hidden = cfg.dim * cfg.mlp_ratio
        self.blocks = ModuleList([EncoderBlock(cfg.dim, cfg.heads, hidden, rng)
                                  for _ in range(cfg.encoder_blocks)])
        self.neck = LayerNorm(cfg.dim)

    def __call__(self, images) -> Tensor:
        cfg = self.cfg
        x = nx.as_tensor(images)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        b, h, w = x.shape
        if (h, w) != (cfg.image_size, cfg.image_size):
            raise ValueError(f"image size {(h, w)} does not match config {cfg.image_size}")
        g, p = cfg.grid, cfg.patch
        patches = x.reshape(b, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(b, g * g, p * p)
        x = self.patch_embed(patches) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.neck(x)


class PromptEncoder(Module):
    """Random Fourier features of normalised coordinates, projected to ``dim``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        # frozen random frequency matrix, drawn float32-exact: its rounding
        # error would otherwise be scaled by pixel coordinates in the phase
        freqs = rng.normal(0.0, cfg.fourier_scale, size=(2, cfg.fourier_bands))
        self.freqs = Parameter(freqs.astype(np.float32).astype(np.float64), requires_grad=False)
        self.proj = Linear(2 * cfg.fourier_bands, cfg.dim, rng)
        self.type_embed = Parameter(rng.normal(0.0, 0.5, size=(4, cfg.dim)))

    def fourier(self, coords) -> Tensor:
        """coords (..., 2) in pixel units -> (..., dim)."""
        c = (nx.as_tensor(coords) + 0.5) * (1.0 / self.cfg.image_size)
        z = nx.matmul(c, nx.Tensor(self.freqs.data)) * (2.0 * np.pi)
        return self.proj(nx.concat([nx.sin(z), nx.cos(z)], axis=-1))

    def dense_pe(self) -> Tensor:
        g, p = self.cfg.grid, self.cfg.patch
        centers = (np.arange(g) + 0.5) * p - 0.5
        yy, xx = np.meshgrid(centers, centers, indexing="ij")
        coords = np.stack([xx.ravel(), yy.ravel()], axis=1)
        return self.fourier(coords.reshape(1, g * g, 2))

    def __call__(self, boxes, points=None, labels=None) -> Tensor:
        """boxes (B, 4) as x1,y1,x2,y2; points (B, n, 2) as x,y; labels (B, n)."""
        boxes = nx.as_tensor(boxes)
        b = boxes.shape[0]
        corners = boxes.reshape(b, 2, 2)
        tokens = self.fourier(corners) + self.type_embed[CORNER1:CORNER2 + 1]
        if points is None:
            return tokens
        points = nx.as_tensor(points)
        labels = np.asarray(labels, dtype=np.int64).reshape(b, -1)
        if points.shape[1] == 0:
            return tokens
        rows = np.where(labels > 0, POSITIVE_POINT, NEGATIVE_POINT)
        pt = self.fourier(points) + nx.getitem(self.type_embed, rows)
        return nx.concat([tokens, pt], axis=1)


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centres."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    return m


class UpBlock(Module):
    """2x upscaling: per-pixel linear to 2x2 sub-pixels plus a nearest-neighbour skip."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.expand = Linear(dim, 4 * dim, rng)
        self.norm = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, d = x.shape
        y = self.expand(x).reshape(b, h, w, 2, 2, d) + x.reshape(b, h, w, 1, 1, d)
        y = y.transpose(0, 1, 3, 2, 4, 5).reshape(b, 2 * h, 2 * w, d)
        return nx.gelu(self.norm(y))


class MaskDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.iou_token = Parameter(rng.normal(0.0, 1.0, size=(1, d)))
        self.mask_tokens = Parameter(rng.normal(0.0, 1.0, size=(cfg.mask_tokens, d)))
        hidden = d * cfg.mlp_ratio
        self.layers = ModuleList([TwoWayLayer(d, cfg.heads, hidden, rng) for _ in range(cfg.decoder_layers)])
        self.final_attn = Attention(d, cfg.heads, rng)
        self.final_norm = LayerNorm(d)
        self.up1 = UpBlock(d, rng)
        self.up2 = UpBlock(d, rng)
        self.hyper = ModuleList([MLP([d, d, d], rng) for _ in range(cfg.mask_tokens)])
        self.iou_head = MLP([d, d, cfg.mask_tokens], rng)
        side = 4 * cfg.grid
        self._resize = bilinear_matrix(cfg.image_size, side)

    def __call__(self, image_embedding: Tensor, dense_pe: Tensor, prompt_tokens: Tensor) -> DecodeOutput:
        cfg = self.cfg
        b = prompt_tokens.shape[0]
        if image_embedding.shape[0] != b:
            raise nx.ShapeError(f"decode: batch mismatch {image_embedding.shape} vs {prompt_tokens.shape}")
        out_tokens = nx.concat([self.iou_token, self.mask_tokens], axis=0)
        out_tokens = nx.broadcast_to(out_tokens.reshape(1, *out_tokens.shape), (b, *out_tokens.shape))
        tokens = nx.concat([out_tokens, prompt_tokens], axis=1)
        queries, keys = tokens, image_embedding
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, dense_pe)
        q = queries + tokens
        queries = self.final_norm(queries + self.final_attn(q, keys + dense_pe, keys))

        g = cfg.grid
        feats = self.up2(self.up1(keys.reshape(b, g, g, cfg.dim)))
        side = 4 * g
        feats = feats.reshape(b, side * side, cfg.dim)
        hyper = nx.stack([mlp(queries[:, 1 + i]) for i, mlp in enumerate(self.hyper)], axis=1)
        low = nx.matmul(hyper, nx.swapaxes(feats, 1, 2)).reshape(b, cfg.mask_tokens, side, side)
        r = nx.Tensor(self._resize)
        masks = nx.matmul(nx.matmul(r, low), nx.Tensor(self._resize.T))
        iou = self.iou_head(queries[:, 0])
        return DecodeOutput(masks=masks, iou_scores=iou, final_embedding=feats)
