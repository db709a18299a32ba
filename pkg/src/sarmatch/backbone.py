"""Siamese ResNet-FPN producing full-resolution and 1/8-resolution features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

OPTICAL = "optical"
SAR = "sar"

LUMA = (0.299, 0.587, 0.114)

# zero padding marks image borders, which lets self-training lock onto border features
PADDING_MODES = ("replicate", "zeros")


@dataclass
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    fpn_channels_shallow: int = 16
    fpn_channels_deep: int = 64
    blocks_per_stage: int = 1
    padding_mode: str = "replicate"

    def __post_init__(self):
        if self.padding_mode not in PADDING_MODES:
            raise ValueError(f"padding_mode must be one of {PADDING_MODES}, got {self.padding_mode!r}")
        if len(self.stage_channels) != 4:
            raise ValueError(f"need 4 stages (strides 1, 2, 4, 8), got {len(self.stage_channels)}")
        values = [self.stem_channels, *self.stage_channels, self.fpn_channels_shallow,
                  self.fpn_channels_deep, self.blocks_per_stage]
        if any(v <= 0 for v in values):
            raise ValueError(f"backbone widths must be positive: {self}")


@dataclass
class FeaturePair:
    shallow: torch.Tensor
    deep: torch.Tensor
    modality: str


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """RGB ``[H,W,3]`` to luma; 2-D input passes through."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[-1] in (3, 4):
        return image[..., :3] @ np.asarray(LUMA, dtype=np.float32)
    raise ValueError(f"cannot convert image of shape {image.shape} to grayscale")


class Affine(nn.Module):
    """Per-channel scale and shift; stands in for batch norm."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def conv3x3(c_in, c_out, stride=1):
    return nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)


def conv1x1(c_in, c_out, stride=1):
    return nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False)


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = conv3x3(c_in, c_out, stride)
        self.aff1 = Affine(c_out)
        self.conv2 = conv3x3(c_out, c_out)
        self.aff2 = Affine(c_out)
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(conv1x1(c_in, c_out, stride), Affine(c_out))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        y = F.elu(self.aff1(self.conv1(x)))
        y = self.aff2(self.conv2(y))
        return F.elu(y + self.shortcut(x))


def _up2(x):
    # half-pixel aligned so features stay translation covariant
    return F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False)


class ResNetFPN(nn.Module):
    """Bottom-up stages at strides 1/2/4/8 and a top-down pathway back to stride 1.

    The first stage keeps full resolution; its output feeds an extra lateral
    connection so the top-down pathway ends at the input resolution.
    """

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = cfg = config or BackboneConfig()
        c1, c2, c3, c4 = cfg.stage_channels
        self.stem = nn.Sequential(conv3x3(1, cfg.stem_channels), Affine(cfg.stem_channels), nn.ELU())
        self.stages = nn.ModuleList()
        c_prev = cfg.stem_channels
        for i, c in enumerate(cfg.stage_channels):
            blocks = [BasicBlock(c_prev, c, stride=1 if i == 0 else 2)]
            blocks += [BasicBlock(c, c) for _ in range(cfg.blocks_per_stage - 1)]
            self.stages.append(nn.Sequential(*blocks))
            c_prev = c

        d = cfg.fpn_channels_deep
        self.lat4 = conv1x1(c4, d)
        self.lat3 = conv1x1(c3, d)
        self.out3 = nn.Sequential(conv3x3(d, c3), Affine(c3), nn.ELU())
        self.lat2 = conv1x1(c2, c3)
        self.out2 = nn.Sequential(conv3x3(c3, c2), Affine(c2), nn.ELU())
        self.lat1 = conv1x1(c1, c2)
        self.out1 = nn.Sequential(conv3x3(c2, c2), Affine(c2), nn.ELU(), conv1x1(c2, cfg.fpn_channels_shallow))
        set_padding(self, cfg.padding_mode)

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``image`` is ``[B,1,H,W]``; returns ``(shallow [B,C_s,H,W], deep [B,C_d,H/8,W/8])``."""
        if image.dim() != 4 or image.shape[1] != 1:
            raise ValueError(f"expected [B,1,H,W] image, got {tuple(image.shape)}")
        H, W = image.shape[-2:]
        if H % 8 or W % 8:
            raise ValueError(f"image dims {H}x{W} must be divisible by 8")
        x = self.stem(image)
        x1 = self.stages[0](x)
        x2 = self.stages[1](x1)
        x3 = self.stages[2](x2)
        x4 = self.stages[3](x3)

        deep = self.lat4(x4)
        f3 = self.out3(self.lat3(x3) + _up2(deep))
        f2 = self.out2(self.lat2(x2) + _up2(f3))
        shallow = self.out1(self.lat1(x1) + _up2(f2))
        return shallow, deep


def extract(image: torch.Tensor, model: ResNetFPN, modality: str = OPTICAL) -> FeaturePair:
    """Features for one ``[1,H,W]`` image (or a ``[B,1,H,W]`` batch)."""
    batched = image.dim() == 4
    shallow, deep = model(image if batched else image.unsqueeze(0))
    if not batched:
        shallow, deep = shallow[0], deep[0]
    return FeaturePair(shallow, deep, modality)


def extract_pair(optical: torch.Tensor, sar: torch.Tensor, model: ResNetFPN) -> tuple[FeaturePair, FeaturePair]:
    """Run both modalities through the same weights."""
    return extract(optical, model, OPTICAL), extract(sar, model, SAR)


def build_backbone(config: BackboneConfig | None = None, seed: int = 0) -> ResNetFPN:
    """Deterministically initialized backbone."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ResNetFPN(config)
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
    return model


def set_padding(model: nn.Module, mode: str) -> None:
    for m in model.modules():
        if isinstance(m, nn.Conv2d) and m.padding != (0, 0):
            m.padding_mode = mode
