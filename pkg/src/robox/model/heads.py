"""Box refinement (PRM), negative-point (PEM) and prior-fusion (SIE) heads.

Each head is two convolutions with ReLU followed by a linear projection.
"""

from __future__ import annotations

import numpy as np

from .. import numerics as nx
from ..numerics import Conv2d, Linear, Module, Tensor
from .blocks import Attention
from .config import ModelConfig


def to_grid(x: Tensor, grid: int) -> Tensor:
    """(B, g*g, d) tokens -> (B, d, g, g) feature map."""
    b, _, d = x.shape
    return x.reshape(b, grid, grid, d).transpose(0, 3, 1, 2)


def _border_points(n: int) -> np.ndarray:
    """n normalised (x, y) points on a ring 5% inside the image border."""
    t = 2.0 * np.pi * (np.arange(n) + 0.5) / n
    return 0.5 + 0.45 * np.stack([np.cos(t), np.sin(t)], axis=1) / np.maximum(
        np.abs(np.cos(t)), np.abs(np.sin(t)))[:, None]


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


class PromptRefiner(Module):
    """Attends image tokens to prompt tokens and regresses four box offsets.

    Each box side gets a heatmap over the token grid and a per-token shift
    within half a patch; the refined side is the heatmap's expectation of
    token centre plus shift. The logits carry a Gaussian prior centred on the
    current side (one patch wide), and the offset is measured against the
    prior's own expectation, so zero weights give exactly zero offsets.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c = cfg.head_channels
        self.attn = Attention(cfg.dim, cfg.heads, rng)
        self.conv1 = Conv2d(cfg.dim, c, 3, rng, padding=1)
        self.conv2 = Conv2d(c, c, 3, rng, padding=1)
        # 4 side logits followed by 4 sub-patch shifts per token
        self.fc = Linear(c, 8, rng)
        # start as the identity refinement with f* = f_img, so fresh heads
        # leave the frozen decoder's input untouched
        self.fc.weight.data[:] = 0.0
        self.attn.out.weight.data[:] = 0.0
        centres = (np.arange(cfg.grid) + 0.5) * cfg.patch - 0.5
        ys, xs = (a.ravel() for a in np.meshgrid(centres, centres, indexing="ij"))
        # token-centre coordinate seen by each side, ordered x1, x2, y1, y2
        self._coords = np.stack([xs, xs, ys, ys])

    def attend(self, f_img: Tensor, f_p: Tensor, pe: Tensor | None = None) -> Tensor:
        """f* = f_img + C_Att(f_img, f_p); ``pe`` is added to the queries only."""
        q = f_img if pe is None else f_img + pe
        return f_img + self.attn(q, f_p, f_p)

    def _expect(self, logits: Tensor, coords) -> Tensor:
        return (nx.softmax(logits, axis=-1) * coords).sum(axis=-1)

    def offsets(self, f_star: Tensor, boxes) -> Tensor:
        """(B, 4) pixel offsets ordered dx1, dx2, dy1, dy2 for (B, 4) x1,y1,x2,y2 boxes."""
        g = self.cfg.grid
        h = nx.relu(self.conv1(to_grid(f_star, g)))
        h = nx.relu(self.conv2(h))
        b, c = h.shape[:2]
        out = self.fc(h.transpose(0, 2, 3, 1).reshape(b, g * g, c)).transpose(0, 2, 1)
        logits, shift = out[:, :4], nx.tanh(out[:, 4:]) * (0.5 * self.cfg.patch)
        sides = np.asarray(boxes, dtype=np.float64).reshape(b, 4)[:, [0, 2, 1, 3]]
        prior = Tensor(-((self._coords[None] - sides[:, :, None]) ** 2) / (2.0 * self.cfg.patch ** 2))
        coords = Tensor(self._coords)
        return self._expect(logits + prior, coords + shift) - self._expect(prior, coords)

    def __call__(self, f_img: Tensor, f_p: Tensor, boxes, pe: Tensor | None = None) -> tuple[Tensor, Tensor]:
        f_star = self.attend(f_img, f_p, pe)
        return f_star, self.offsets(f_star, boxes)


class PointGenerator(Module):
    """Maps the change in attention features to ``n_points`` negative points."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c = cfg.head_channels
        self.conv1 = Conv2d(cfg.dim, c, 3, rng, padding=1)
        self.conv2 = Conv2d(c, c, 3, rng, padding=1)
        self.fc = Linear(c, 2 * cfg.n_points, rng)
        # untrained points sit near the image border, away from any target
        self.fc.bias.data[:] = _logit(_border_points(cfg.n_points)).ravel()

    def __call__(self, f_star: Tensor, f_r_star: Tensor) -> Tensor:
        if f_star.shape != f_r_star.shape:
            raise nx.ShapeError(f"pem: feature shapes differ {f_star.shape} vs {f_r_star.shape}")
        h = nx.relu(self.conv1(to_grid(f_r_star - f_star, self.cfg.grid)))
        h = nx.relu(self.conv2(h))
        xy = nx.sigmoid(self.fc(h.mean(axis=(2, 3)))) * float(self.cfg.image_size)
        return xy.reshape(xy.shape[0], self.cfg.n_points, 2)


class PriorEncoder(Module):
    """Encodes the 3-channel prior stack to image-token shape (B, g*g, d)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c = cfg.head_channels
        k = cfg.patch // 2
        self.conv1 = Conv2d(3, c, k, rng, stride=k)
        self.conv2 = Conv2d(c, c, 3, rng, stride=2, padding=1)
        self.proj = Linear(c, cfg.dim, rng)
        # start with f_s = 0 so fusion begins as the identity
        self.proj.weight.data[:] = 0.0

    def __call__(self, stack) -> Tensor:
        x = nx.as_tensor(stack)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.shape[1:] != (3, self.cfg.image_size, self.cfg.image_size):
            raise ValueError(f"prior stack shape {x.shape[1:]} does not match image size")
        h = nx.relu(self.conv1(x))
        h = nx.relu(self.conv2(h))
        b, c, g, _ = h.shape
        return self.proj(h.transpose(0, 2, 3, 1).reshape(b, g * g, c))
