from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    dim: int = 64
    heads: int = 4
    encoder_blocks: int = 2
    decoder_layers: int = 2
    mask_tokens: int = 3
    fourier_bands: int = 16
    fourier_scale: float = 4.0
    mlp_ratio: int = 2
    head_channels: int = 32
    n_points: int = 5
    k_iters: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.patch % 2:
            raise ValueError("patch must be even (the prior encoder downsamples by patch/2 then 2)")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def d_k(self) -> int:
        return self.dim // self.heads

    @property
    def reference_defaults(self) -> bool:
        return (self.decoder_layers, self.mask_tokens, self.n_points, self.k_iters) == (2, 3, 5, 5)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (d or {}).items() if k in names})

    @classmethod
    def reduced(cls, **kw) -> ModelConfig:
        """16x16 configuration used for finite-difference checks."""
        base = dict(image_size=16, patch=8, dim=8, heads=2, encoder_blocks=1, head_channels=4,
                    fourier_bands=4)
        base.update(kw)
        return cls(**base)
