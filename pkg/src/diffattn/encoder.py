"""Hierarchical image encoders emitting a four-level feature pyramid.

Level i has ``C_e * 2**i`` channels at stride ``2**(i + 2)``. Two backbones
share that contract: a small trainable windowed-attention network and an
adapter around an opaque pretrained module.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractViolation, ShapeError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class EncoderConfig:
    kind: str = "toy"  # toy | pretrained
    C_e: int = 16
    input_size: tuple[int, int] = (64, 64)
    depth: int = 1
    window: int = 4
    heads: int = 2
    checkpoint: str | None = None

    def __post_init__(self):
        H, W = self.input_size
        if H % 32 or W % 32:
            raise ShapeError(f"input size {H}x{W} must be divisible by 32")
        if self.kind not in ("toy", "pretrained"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")


def pyramid_shapes(C_e: int, H: int, W: int) -> list[tuple[int, int, int]]:
    return [(C_e * 2**i, H // 2 ** (i + 2), W // 2 ** (i + 2)) for i in range(4)]


def check_pyramid(levels, C_e: int, H: int, W: int) -> None:
    if len(levels) != 4:
        raise ContractViolation(f"expected 4 pyramid levels, got {len(levels)}")
    for i, (x, want) in enumerate(zip(levels, pyramid_shapes(C_e, H, W))):
        if tuple(x.shape[-3:]) != want:
            raise ContractViolation(f"level {i}: expected (C, h, w) = {want}, got {tuple(x.shape[-3:])}")


def _fit_window(size: int, h: int, w: int) -> int:
    win = min(size, h, w)
    while h % win or w % win:
        win -= 1
    return win


class WindowAttention(nn.Module):
    """Multi-head self-attention restricted to non-overlapping windows.

    Odd blocks roll the map by half a window first (cyclic shift, no mask).
    """

    def __init__(self, dim: int, heads: int, window: int, shift: bool = False):
        super().__init__()
        if dim % heads:
            heads = 1
        self.heads = heads
        self.window = window
        self.shift = shift
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):  # x: (B, H, W, C)
        B, H, W, C = x.shape
        win = _fit_window(self.window, H, W)
        s = win // 2 if (self.shift and win > 1) else 0
        if s:
            x = torch.roll(x, shifts=(-s, -s), dims=(1, 2))
        t = x.reshape(B, H // win, win, W // win, win, C).permute(0, 1, 3, 2, 4, 5).reshape(-1, win * win, C)
        qkv = self.qkv(t).reshape(t.shape[0], win * win, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        out = out.transpose(1, 2).reshape(t.shape[0], win * win, C)
        out = self.proj(out)
        out = out.reshape(B, H // win, W // win, win, win, C).permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, C)
        if s:
            out = torch.roll(out, shifts=(s, s), dims=(1, 2))
        return out


class MixingBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, shift: bool):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, shift)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ToyEncoder(nn.Module):
    """Patch embedding (stride 4) then four stages of merge + windowed mixing."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.C_e
        self.stem = nn.Conv2d(3, C, kernel_size=4, stride=4)
        self.merges = nn.ModuleList(
            [nn.Identity()] + [nn.Conv2d(C * 2 ** (i - 1), C * 2**i, kernel_size=2, stride=2) for i in range(1, 4)]
        )
        self.stages = nn.ModuleList(
            nn.Sequential(*[MixingBlock(C * 2**i, cfg.heads, cfg.window, shift=bool(d % 2)) for d in range(cfg.depth)])
            for i in range(4)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(C * 2**i) for i in range(4))

    def forward(self, image):
        B, _, H, W = image.shape
        if H % 32 or W % 32:
            raise ShapeError(f"image {H}x{W} not divisible by 32")
        x = self.stem(image)
        levels = []
        for merge, stage, norm in zip(self.merges, self.stages, self.norms):
            x = merge(x)
            y = stage(x.permute(0, 2, 3, 1))
            x = norm(y).permute(0, 3, 1, 2).contiguous()
            levels.append(x)
        check_pyramid(levels, self.cfg.C_e, H, W)
        return levels


class PretrainedAdapter(nn.Module):
    """Wrap a frozen backbone so its outputs obey the pyramid contract.

    ``backbone(image)`` must return four maps, either (B, C, h, w) or
    channels-last (B, h, w, C) as Swin implementations usually emit.
    """

    def __init__(self, backbone: nn.Module, cfg: EncoderConfig,
                 mean=IMAGENET_MEAN, std=IMAGENET_STD):
        super().__init__()
        self.cfg = cfg
        self.backbone = backbone
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.backbone.eval()
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    def forward(self, image):
        B, _, H, W = image.shape
        if H % 32 or W % 32:
            raise ShapeError(f"image {H}x{W} not divisible by 32")
        with torch.no_grad():
            raw = list(self.backbone((image - self.mean) / self.std))
        shapes = pyramid_shapes(self.cfg.C_e, H, W)
        levels = []
        for x, (c, h, w) in zip(raw, shapes):
            if x.dim() == 4 and tuple(x.shape[1:]) == (h, w, c) and x.shape[1] != c:
                x = x.permute(0, 3, 1, 2)
            levels.append(x.contiguous())
        check_pyramid(levels, self.cfg.C_e, H, W)
        return levels


def load_pretrained(cfg: EncoderConfig, factory=None) -> PretrainedAdapter:
    """Build the adapter from a local checkpoint.

    A TorchScript archive is loaded directly; otherwise ``factory()`` must
    build the module that receives the stored state dict.
    """
    if cfg.checkpoint is None:
        raise ConfigError("pretrained encoder requires a checkpoint path")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DeprecationWarning)
            backbone = torch.jit.load(cfg.checkpoint, map_location="cpu")
    except (RuntimeError, ValueError):
        if factory is None:
            raise ConfigError("state-dict checkpoint needs a backbone factory") from None
        backbone = factory()
        backbone.load_state_dict(torch.load(cfg.checkpoint, map_location="cpu"))
    return PretrainedAdapter(backbone, cfg)


def build_encoder(cfg: EncoderConfig, factory=None) -> nn.Module:
    if cfg.kind == "toy":
        return ToyEncoder(cfg)
    return load_pretrained(cfg, factory)


def encode(image, encoder: nn.Module):
    """Encode one 3 x H x W image; returns the four unbatched levels."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a 3 x H x W image, got {tuple(image.shape)}")
    return [x[0] for x in encoder(image.unsqueeze(0))]
