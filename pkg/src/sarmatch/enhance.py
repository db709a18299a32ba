"""Cross-modal feature enhancement with multi-head linear attention.

Each enhancement block removes what per-modality self-attention extracts
(modality-specific content), then adds what cross-attention between the two
modalities extracts (shared content). The difference between a module's input
and its enhanced output is the modality-specific map fed to the MI loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class AttentionConfig:
    heads: int = 4
    head_dim: int = 16
    normalize_linear_attention: bool = True
    blocks_n: int = 1
    pool_tokens: bool = False
    mi_tap: str = "after"

    def __post_init__(self):
        if self.heads <= 0 or self.head_dim <= 0 or self.blocks_n < 0:
            raise ValueError(f"invalid attention config {self}")
        if self.mi_tap not in ("after", "before"):
            raise ValueError(f"mi_tap must be 'after' or 'before', got {self.mi_tap!r}")

    @property
    def channels(self) -> int:
        return self.heads * self.head_dim


@dataclass
class EnhancedPair:
    shared_opt: torch.Tensor
    shared_sar: torch.Tensor
    specific_opt: torch.Tensor
    specific_sar: torch.Tensor
    # shared maps paired with the specific ones in the MI loss; equal to
    # shared_* unless the pre-convolution tap is selected
    tap_opt: torch.Tensor | None = None
    tap_sar: torch.Tensor | None = None

    def __post_init__(self):
        if self.tap_opt is None:
            self.tap_opt = self.shared_opt
        if self.tap_sar is None:
            self.tap_sar = self.shared_sar


def elu_feature_map(x):
    return F.elu(x) + 1


def linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int = 1,
                     normalize: bool = True, eps: float = 1e-6) -> torch.Tensor:
    """Kernelized attention ``phi(Q) (phi(K)^T V)`` with ``phi = elu + 1``.

    ``q`` is ``[..., N, C]``, ``k`` and ``v`` are ``[..., S, C]``. With
    ``normalize`` each output row is divided by ``phi(q) . sum_s phi(k_s)``.
    Cost is linear in ``N`` and ``S``.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise ValueError(f"channel dims differ: q {q.shape[-1]}, k {k.shape[-1]}, v {v.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value lengths differ: {k.shape[-2]} vs {v.shape[-2]}")
    C = q.shape[-1]
    if C % heads:
        raise ValueError(f"{C} channels not divisible by {heads} heads")
    d = C // heads
    qh = elu_feature_map(q).unflatten(-1, (heads, d))
    kh = elu_feature_map(k).unflatten(-1, (heads, d))
    vh = v.unflatten(-1, (heads, d))
    kv = torch.einsum("...shd,...she->...hde", kh, vh)
    out = torch.einsum("...nhd,...hde->...nhe", qh, kv)
    if normalize:
        z = torch.einsum("...nhd,...hd->...nh", qh, kh.sum(dim=-3))
        out = out / (z.unsqueeze(-1) + eps)
    return out.flatten(-2)


class MultiscaleConvBlock(nn.Module):
    """Parallel 1x1, 3x3 and 5x5 convolutions, summed, ELU, plus identity."""

    def __init__(self, channels: int):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels, channels, k, padding=k // 2, bias=False) for k in (1, 3, 5))
        for conv in self.convs:
            nn.init.normal_(conv.weight, std=0.1 / (channels * conv.kernel_size[0] ** 2) ** 0.5)

    def forward(self, x):
        return x + F.elu(sum(conv(x) for conv in self.convs))


def _tokens(x):
    return x.flatten(-2).transpose(-1, -2)


def _untokens(t, hw):
    return t.transpose(-1, -2).unflatten(-1, hw)


class _Attention(nn.Module):
    def __init__(self, channels: int, heads: int, normalize: bool, pool_tokens: bool):
        super().__init__()
        self.heads = heads
        self.normalize = normalize
        self.pool_tokens = pool_tokens
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        for lin in (self.q, self.k, self.v):
            nn.init.zeros_(lin.bias)

    def _pool(self, x):
        if self.pool_tokens and x.shape[-2] % 2 == 0 and x.shape[-1] % 2 == 0:
            return F.avg_pool2d(x, 2), True
        return x, False

    def attend(self, query_map, source_map):
        """Attention output on ``query_map``'s grid, keys/values from ``source_map``."""
        full_hw = query_map.shape[-2:]
        qm, pooled = self._pool(query_map)
        sm, _ = self._pool(source_map)
        tq, ts = _tokens(qm), _tokens(sm)
        out = linear_attention(self.q(tq), self.k(ts), self.v(ts), self.heads, self.normalize)
        out = _untokens(out, qm.shape[-2:])
        if pooled:
            out = F.interpolate(out, size=full_hw, mode="bilinear", align_corners=False)
        return out


def _batched(fn):
    def wrapper(self, *maps):
        single = maps[0].dim() == 3
        if single:
            maps = [m.unsqueeze(0) for m in maps]
        out = fn(self, *maps)
        return tuple(o[0] for o in out) if single else out
    return wrapper


class SelfAttentionBlock(nn.Module):
    """Extract ``F_self`` from one modality and subtract it."""

    def __init__(self, channels: int, heads: int, normalize: bool = True, pool_tokens: bool = False):
        super().__init__()
        self.attn = _Attention(channels, heads, normalize, pool_tokens)
        self.msconv = MultiscaleConvBlock(channels)

    @_batched
    def forward(self, x):
        """Returns ``(msconv(x - F_self), F_self)``."""
        extracted = self.attn.attend(x, x)
        return self.msconv(x - extracted), extracted


class CrossAttentionBlock(nn.Module):
    """Each map queries the other; the results are added back (shared weights)."""

    def __init__(self, channels: int, heads: int, normalize: bool = True, pool_tokens: bool = False):
        super().__init__()
        self.channels = channels
        self.attn = _Attention(channels, heads, normalize, pool_tokens)
        self.msconv = MultiscaleConvBlock(channels)

    def forward(self, f1, f2, return_pre: bool = False):
        if f1.shape[-3] != f2.shape[-3]:
            raise ValueError(f"channel mismatch: {f1.shape[-3]} vs {f2.shape[-3]}")
        single = f1.dim() == 3
        if single:
            f1, f2 = f1.unsqueeze(0), f2.unsqueeze(0)
        pre1 = f1 + self.attn.attend(f1, f2)
        pre2 = f2 + self.attn.attend(f2, f1)
        out = (self.msconv(pre1), self.msconv(pre2))
        if return_pre:
            out = out + (pre1, pre2)
        return tuple(o[0] for o in out) if single else out


class EnhanceBlock(nn.Module):
    """Two self-attention blocks (one per modality) and one shared cross-attention block."""

    def __init__(self, channels: int, heads: int, normalize: bool = True, pool_tokens: bool = False):
        super().__init__()
        self.self_opt = SelfAttentionBlock(channels, heads, normalize, pool_tokens)
        self.self_sar = SelfAttentionBlock(channels, heads, normalize, pool_tokens)
        self.cross = CrossAttentionBlock(channels, heads, normalize, pool_tokens)

    def forward(self, f_opt, f_sar):
        """Returns ``(shared_opt, shared_sar, pre_conv_opt, pre_conv_sar)``."""
        r_opt, _ = self.self_opt(f_opt)
        r_sar, _ = self.self_sar(f_sar)
        return self.cross(r_opt, r_sar, return_pre=True)


class EnhanceModule(nn.Module):
    """``blocks_n`` enhancement blocks applied in sequence."""

    def __init__(self, config: AttentionConfig):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(
            EnhanceBlock(config.channels, config.heads, config.normalize_linear_attention, config.pool_tokens)
            for _ in range(config.blocks_n))

    def forward(self, f_opt: torch.Tensor, f_sar: torch.Tensor) -> EnhancedPair:
        if f_opt.shape[-3] != self.config.channels or f_sar.shape[-3] != self.config.channels:
            raise ValueError(
                f"expected {self.config.channels} channels, got {f_opt.shape[-3]} and {f_sar.shape[-3]}")
        x_opt, x_sar = f_opt, f_sar
        pre_opt, pre_sar = f_opt, f_sar
        for block in self.blocks:
            x_opt, x_sar, pre_opt, pre_sar = block(x_opt, x_sar)
        if self.config.mi_tap == "before":
            tap_opt, tap_sar = pre_opt, pre_sar
        else:
            tap_opt, tap_sar = x_opt, x_sar
        return EnhancedPair(x_opt, x_sar, f_opt - tap_opt, f_sar - tap_sar, tap_opt, tap_sar)
