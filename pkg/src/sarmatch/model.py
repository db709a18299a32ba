"""The full matcher: shared backbone, per-level enhancement, NCC heatmaps."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .backbone import BackboneConfig, ResNetFPN
from .enhance import AttentionConfig, EnhancedPair, EnhanceModule
from .fftncc import DEEP, SHALLOW, Heatmap, fuse_heatmaps, ncc_heatmap


def _default_deep_attention():
    return AttentionConfig(heads=4, head_dim=16)


def _default_shallow_attention():
    return AttentionConfig(heads=2, head_dim=8, pool_tokens=True)


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    deep_attention: AttentionConfig = field(default_factory=_default_deep_attention)
    shallow_attention: AttentionConfig = field(default_factory=_default_shallow_attention)
    enhance: bool = True
    shallow_only: bool = False
    ncc_mode: str = "joint"
    upscale_mode: str = "bilinear"

    def __post_init__(self):
        if self.enhance:
            if self.deep_attention.channels != self.backbone.fpn_channels_deep:
                raise ValueError("deep attention heads*head_dim must equal fpn_channels_deep")
            if self.shallow_attention.channels != self.backbone.fpn_channels_shallow:
                raise ValueError("shallow attention heads*head_dim must equal fpn_channels_shallow")

    def set_blocks(self, n: int) -> None:
        self.deep_attention.blocks_n = n
        self.shallow_attention.blocks_n = n
        self.enhance = n > 0

    def to_kv(self) -> dict[str, str]:
        out = {}
        for name, value in _flatten(dataclasses.asdict(self)).items():
            out[name] = ",".join(map(str, value)) if isinstance(value, list) else str(value)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        def sub(prefix, klass):
            kwargs = {}
            for f in dataclasses.fields(klass):
                key = f"{prefix}.{f.name}"
                if key in kv:
                    kwargs[f.name] = _parse(kv[key], getattr(klass(), f.name))
            return klass(**kwargs)
        kwargs = dict(
            backbone=sub("backbone", BackboneConfig),
            deep_attention=sub("deep_attention", AttentionConfig),
            shallow_attention=sub("shallow_attention", AttentionConfig),
        )
        for name in ("enhance", "shallow_only", "ncc_mode", "upscale_mode"):
            if name in kv:
                kwargs[name] = _parse(kv[name], getattr(cls(), name))
        return cls(**kwargs)


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _parse(text: str, like):
    if isinstance(like, bool):
        if text not in ("True", "False"):
            raise ValueError(f"expected True/False, got {text!r}")
        return text == "True"
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, list):
        return [int(v) for v in text.split(",") if v]
    return text


@dataclass
class MatchOutput:
    deep: Heatmap | None
    shallow: Heatmap
    enhanced_deep: EnhancedPair | None = None
    enhanced_shallow: EnhancedPair | None = None
    feature_ms: float = 0.0
    correlation_ms: float = 0.0

    def fused(self, upscale_mode: str = "bilinear") -> Heatmap:
        if self.deep is None:
            return self.shallow
        return fuse_heatmaps(self.deep, self.shallow, upscale_mode)


def standardize(image: torch.Tensor) -> torch.Tensor:
    """Zero-mean, unit-variance per image; intensity scales differ across sensors."""
    mean = image.mean(dim=(-2, -1), keepdim=True)
    std = image.std(dim=(-2, -1), keepdim=True)
    return (image - mean) / (std + 1e-6)


class Matcher(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        self.backbone = ResNetFPN(cfg.backbone)
        if cfg.enhance:
            self.enhance_deep = EnhanceModule(cfg.deep_attention)
            self.enhance_shallow = EnhanceModule(cfg.shallow_attention)
        else:
            self.enhance_deep = self.enhance_shallow = None

    def forward(self, optical: torch.Tensor, sar: torch.Tensor) -> MatchOutput:
        """``optical`` ``[B,1,H,W]`` reference, ``sar`` ``[B,1,h,w]`` template."""
        if optical.shape[0] != sar.shape[0]:
            raise ValueError(f"batch sizes differ: {optical.shape[0]} vs {sar.shape[0]}")
        t0 = time.perf_counter()
        s_opt, d_opt = self.backbone(standardize(optical))
        s_sar, d_sar = self.backbone(standardize(sar))
        enh_d = enh_s = None
        if self.enhance_shallow is not None:
            enh_s = self.enhance_shallow(s_opt, s_sar)
            s_opt, s_sar = enh_s.shared_opt, enh_s.shared_sar
            if not self.config.shallow_only:
                enh_d = self.enhance_deep(d_opt, d_sar)
                d_opt, d_sar = enh_d.shared_opt, enh_d.shared_sar
        t1 = time.perf_counter()
        m_s = ncc_heatmap(s_sar, s_opt, self.config.ncc_mode, SHALLOW)
        m_d = None if self.config.shallow_only else ncc_heatmap(d_sar, d_opt, self.config.ncc_mode, DEEP)
        t2 = time.perf_counter()
        return MatchOutput(m_d, m_s, enh_d, enh_s, (t1 - t0) * 1e3, (t2 - t1) * 1e3)


def build_matcher(config: ModelConfig | None = None, seed: int = 0) -> Matcher:
    """Deterministic initialization from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Matcher(config)
        for m in model.backbone.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
    return model
