"""Plain-ViT encoder, multi-scale feature pyramid, and layer-wise lr decay factors.

The encoder is a standard ViT with global attention in every block and a
learnable position embedding stored at a fixed base grid, interpolated to the
actual token grid each forward. Storing at a fixed grid keeps parameter shapes
independent of image size, so checkpoints transfer across training stages that
use different resolutions.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError

PYRAMID_STRIDES = (8, 16, 32, 64)


@dataclass
class ViTConfig:
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 6
    num_heads: int = 3
    mlp_ratio: float = 4.0
    pos_embed_grid: int = 8
    pixel_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    pixel_std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )


@dataclass
class FeaturePyramid:
    """Ordered multi-resolution maps with fixed strides and a shared channel count.

    maps[i] has shape [B, C, ceil(H_pad/s_i), ceil(W_pad/s_i)] for stride s_i.
    valid_sizes[i] gives the unpadded (h, w) extent per level; cells at or past
    it correspond to image padding.
    """

    maps: list[torch.Tensor]
    strides: tuple[int, ...] = PYRAMID_STRIDES
    valid_sizes: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        channels = {m.shape[1] for m in self.maps}
        if len(channels) > 1:
            raise ValueError(f"pyramid levels disagree on channel count: {channels}")

    @property
    def channels(self) -> int:
        return self.maps[0].shape[1]

    def padding_masks(self) -> list[torch.Tensor]:
        """Boolean [B, H_s, W_s] per level, True at padded cells."""
        out = []
        for m, (vh, vw) in zip(self.maps, self.valid_sizes or [(m.shape[2], m.shape[3]) for m in self.maps]):
            b, _, h, w = m.shape
            mask = torch.zeros(b, h, w, dtype=torch.bool, device=m.device)
            mask[:, vh:, :] = True
            mask[:, :, vw:] = True
            out.append(mask)
        return out


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm1(x)
        h, _ = self.attn(h, h, h, key_padding_mask=key_padding_mask, need_weights=False)
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x


class ViTEncoder(nn.Module):
    """Single-stride (patch_size) ViT producing a stride-16 feature map."""

    def __init__(self, cfg: ViTConfig | None = None):
        super().__init__()
        self.cfg = cfg or ViTConfig()
        c = self.cfg
        self.patch_embed = nn.Conv2d(3, c.embed_dim, kernel_size=c.patch_size, stride=c.patch_size)
        self.pos_embed = nn.Parameter(
            torch.zeros(1, c.embed_dim, c.pos_embed_grid, c.pos_embed_grid)
        )
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(c.embed_dim, c.num_heads, c.mlp_ratio) for _ in range(c.depth)
        )
        self.norm = nn.LayerNorm(c.embed_dim)

    def _check_padded(self, image: torch.Tensor) -> tuple[int, int]:
        h, w = image.shape[-2], image.shape[-1]
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ValueError(f"image sides ({h}, {w}) must be multiples of patch size {p}")
        return h // p, w // p

    def _pos_for_grid(self, gh: int, gw: int, dtype: torch.dtype) -> torch.Tensor:
        pos = self.pos_embed.to(dtype)
        if pos.shape[2] != gh or pos.shape[3] != gw:
            pos = F.interpolate(pos, size=(gh, gw), mode="bicubic", align_corners=False)
        return pos.flatten(2).transpose(1, 2)  # [1, gh*gw, C]

    def patchify(self, image: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
        """Image [B, 3, H, W] -> token sequence [B, HW/p^2, C] with position embedding, plus grid shape."""
        gh, gw = self._check_padded(image)
        tokens = self.patch_embed(image).flatten(2).transpose(1, 2)
        return tokens + self._pos_for_grid(gh, gw, tokens.dtype), (gh, gw)

    def forward(self, image: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Encode to a stride-patch_size map [B, C, H/p, W/p].

        pad_mask: optional [B, H, W] bool, True on padded pixels; downsampled to
        a token key-padding mask.
        """
        tokens, (gh, gw) = self.patchify(image)
        key_padding = None
        if pad_mask is not None:
            p = self.cfg.patch_size
            # a token is padding when its whole patch is padding
            key_padding = pad_mask.view(pad_mask.shape[0], gh, p, gw, p).all(-1).all(2).flatten(1)
            if key_padding.all(dim=1).any():
                raise ValueError("an image in the batch is entirely padding")
        for blk in self.blocks:
            tokens = blk(tokens, key_padding_mask=key_padding)
        tokens = self.norm(tokens)
        return tokens.transpose(1, 2).reshape(tokens.shape[0], -1, gh, gw)

    encode = forward


class FeaturePyramidNeck(nn.Module):
    """ViTDet-style pyramid from a single stride-16 map.

    Stride 8 via a learned 2x deconvolution, 16 via identity, 32 via one
    stride-2 conv, 64 via two. Every level is then projected to a common
    channel count.
    """

    def __init__(self, in_channels: int, out_channels: int | None = None):
        super().__init__()
        c = out_channels or in_channels
        self.up2 = nn.ConvTranspose2d(in_channels, in_channels, kernel_size=2, stride=2)
        self.down2 = nn.Conv2d(in_channels, in_channels, kernel_size=3, stride=2, padding=1)
        self.down4a = nn.Conv2d(in_channels, in_channels, kernel_size=3, stride=2, padding=1)
        self.down4b = nn.Conv2d(in_channels, in_channels, kernel_size=3, stride=2, padding=1)
        self.proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(in_channels, c, kernel_size=1), nn.GroupNorm(1, c))
            for _ in PYRAMID_STRIDES
        )
        self.out_channels = c

    def forward(self, f16: torch.Tensor, valid_hw: tuple[int, int] | None = None) -> FeaturePyramid:
        levels = [
            self.up2(f16),
            f16,
            self.down2(f16),
            self.down4b(F.gelu(self.down4a(f16))),
        ]
        maps = [p(x) for p, x in zip(self.proj, levels)]
        if valid_hw is None:
            valid_hw = (f16.shape[2] * 16, f16.shape[3] * 16)
        h, w = valid_hw
        valid = [(min(math.ceil(h / s), m.shape[2]), min(math.ceil(w / s), m.shape[3]))
                 for s, m in zip(PYRAMID_STRIDES, maps)]
        return FeaturePyramid(maps=maps, valid_sizes=valid)


def build_pyramid(neck: FeaturePyramidNeck, f16: torch.Tensor) -> FeaturePyramid:
    return neck(f16)


@dataclass
class LayerDecaySpec:
    decay_rate: float
    depth: int

    def __post_init__(self):
        if not 0.0 < self.decay_rate <= 1.0:
            raise ConfigurationError(f"decay_rate must lie in (0, 1], got {self.decay_rate}")


_BLOCK_RE = re.compile(r"(?:^|\.)blocks\.(\d+)\.")


def layer_decay_multipliers(spec: LayerDecaySpec) -> dict[str, float]:
    """Per-group lr multipliers: stem r^L, block i r^(L-i), everything else 1.

    The trailing encoder norm rides with the last block (r^1).
    """
    groups = {"stem": spec.decay_rate**spec.depth}
    for i in range(spec.depth):
        groups[f"block_{i}"] = spec.decay_rate ** (spec.depth - i)
    groups["encoder_norm"] = spec.decay_rate
    groups["head"] = 1.0
    return groups


def classify_parameter(name: str, depth: int, encoder_prefix: str = "encoder.") -> str:
    """Map a model parameter name to its layer-decay group key.

    Raises ConfigurationError for encoder parameters that match no known
    pattern, so renames fail fast instead of silently training at full lr.
    """
    if not name.startswith(encoder_prefix):
        return "head"
    rest = name[len(encoder_prefix):]
    if rest.startswith("patch_embed") or rest.startswith("pos_embed"):
        return "stem"
    m = _BLOCK_RE.search(rest)
    if m:
        i = int(m.group(1))
        if i >= depth:
            raise ConfigurationError(f"block index {i} out of range for depth {depth}: {name}")
        return f"block_{i}"
    if rest.startswith("norm"):
        return "encoder_norm"
    raise ConfigurationError(f"unrecognized encoder parameter name: {name}")
