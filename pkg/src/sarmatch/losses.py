"""Heatmap cross-entropy, pseudo-labels and the soft-histogram MI loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .fftncc import DEEP, DEEP_STRIDE, SHALLOW, Heatmap, fuse_heatmaps
from .numerics import log_softmax_flat, softmax_flat

DEFAULT_LOGIT_SCALE = 10.0
MI_BINS = 16
MI_EPS = 1e-8
MI_MAX_SAMPLES = 8192


@dataclass
class LossBundle:
    ce_deep: float = 0.0
    ce_shallow: float = 0.0
    pce: float = 0.0
    cmi_sar: float = 0.0
    cmi_opt: float = 0.0
    cmi_deep: float = 0.0
    cmi_shallow: float = 0.0
    sup_total: float = 0.0
    unsup_total: float = 0.0
    semi_total: float = 0.0

    @property
    def cmi(self) -> float:
        return self.cmi_deep + self.cmi_shallow

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruthHeatmap:
    level: str
    one_hot: torch.Tensor
    position: tuple[int, int]


DEEP_LABEL_RULES = ("floor", "round")


def _deep_index(v, rule: str):
    if rule == "floor":
        return v // DEEP_STRIDE
    if rule == "round":
        # nearest deep cell under the 8*d upscale alignment, ties rounded up
        return (v + DEEP_STRIDE // 2) // DEEP_STRIDE
    raise ValueError(f"deep label rule must be one of {DEEP_LABEL_RULES}, got {rule!r}")


def make_gt_heatmaps(p_gt: tuple[int, int], shallow_dims: tuple[int, int], deep_dims: tuple[int, int],
                     rule: str = "floor") -> tuple[GroundTruthHeatmap, GroundTruthHeatmap]:
    """One-hot targets; the deep cell is ``(row // 8, col // 8)`` clamped into the deep grid.

    ``rule="round"`` picks the nearest deep cell instead.
    """
    row, col = int(p_gt[0]), int(p_gt[1])
    if not (0 <= row < shallow_dims[0] and 0 <= col < shallow_dims[1]):
        raise ValueError(f"ground truth {p_gt} outside shallow heatmap {shallow_dims}")
    deep_pos = (min(_deep_index(row, rule), deep_dims[0] - 1), min(_deep_index(col, rule), deep_dims[1] - 1))
    shallow = torch.zeros(shallow_dims)
    shallow[row, col] = 1.0
    deep = torch.zeros(deep_dims)
    deep[deep_pos] = 1.0
    return GroundTruthHeatmap(SHALLOW, shallow, (row, col)), GroundTruthHeatmap(DEEP, deep, deep_pos)


def deep_positions(positions: torch.Tensor, deep_dims: tuple[int, int], rule: str = "floor") -> torch.Tensor:
    """Batched version of the deep-cell mapping for ``[B,2]`` positions."""
    limit = torch.tensor(deep_dims, device=positions.device) - 1
    return torch.minimum(_deep_index(positions, rule), limit)


def _values(m):
    return m.values if isinstance(m, Heatmap) else m


def _positions(target, dims) -> torch.Tensor:
    if isinstance(target, GroundTruthHeatmap):
        target = target.position
    pos = torch.as_tensor(target, dtype=torch.long)
    if pos.dim() == 1:
        pos = pos.unsqueeze(0)
    if (pos < 0).any() or (pos[:, 0] >= dims[0]).any() or (pos[:, 1] >= dims[1]).any():
        raise ValueError(f"target positions outside heatmap of shape {dims}")
    return pos


def heatmap_ce(m, target, scale: float = DEFAULT_LOGIT_SCALE) -> torch.Tensor:
    """``-log softmax(scale * M)[P_gt]``, averaged over the batch.

    ``target`` is a :class:`GroundTruthHeatmap`, a ``(row, col)`` pair or a
    ``[B,2]`` tensor of positions.
    """
    values = _values(m)
    if isinstance(target, GroundTruthHeatmap) and tuple(target.one_hot.shape) != tuple(values.shape[-2:]):
        raise ValueError(f"target dims {tuple(target.one_hot.shape)} != heatmap dims {tuple(values.shape[-2:])}")
    batched = values.dim() == 3
    v = values if batched else values.unsqueeze(0)
    H, W = v.shape[-2:]
    pos = _positions(target, (H, W))
    if pos.shape[0] != v.shape[0]:
        raise ValueError(f"{pos.shape[0]} targets for {v.shape[0]} heatmaps")
    logp = log_softmax_flat(v * scale, dims=2).reshape(v.shape[0], -1)
    flat = pos[:, 0] * W + pos[:, 1]
    return -logp.gather(1, flat[:, None].to(logp.device)).mean()


def make_pseudo_label(m_deep: Heatmap, m_shallow: Heatmap, mode: str = "hard",
                      scale: float = DEFAULT_LOGIT_SCALE, upscale_mode: str = "bilinear") -> torch.Tensor:
    """Target distribution over the shallow grid from the fused heatmaps (no gradient)."""
    with torch.no_grad():
        fused = fuse_heatmaps(m_deep.detach(), m_shallow.detach(), upscale_mode).values
        if mode == "soft":
            return softmax_flat(fused * scale, dims=2)
        if mode != "hard":
            raise ValueError(f"unknown pseudo-label mode {mode!r}")
        flat = fused.reshape(*fused.shape[:-2], -1)
        target = torch.zeros_like(flat)
        target.scatter_(-1, flat.argmax(dim=-1, keepdim=True), 1.0)
        return target.reshape(fused.shape)


def pseudo_ce(m_shallow, target: torch.Tensor, scale: float = DEFAULT_LOGIT_SCALE) -> torch.Tensor:
    """``-sum t log softmax(scale * M_s)``, averaged over the batch."""
    values = _values(m_shallow)
    if tuple(values.shape) != tuple(target.shape):
        raise ValueError(f"target shape {tuple(target.shape)} != heatmap shape {tuple(values.shape)}")
    logp = log_softmax_flat(values * scale, dims=2)
    per = -(target.detach() * logp).sum(dim=(-2, -1))
    return per.mean()


def _soft_assign(x: torch.Tensor, bins: int, sigma: float) -> torch.Tensor:
    lo = x.min(dim=-1, keepdim=True).values
    hi = x.max(dim=-1, keepdim=True).values
    span = hi - lo
    flat = span <= 0
    xn = torch.where(flat, torch.full_like(x, 0.5), (x - lo) / torch.where(flat, torch.ones_like(span), span))
    centers = (torch.arange(bins, dtype=x.dtype, device=x.device) + 0.5) / bins
    w = torch.exp(-((xn.unsqueeze(-1) - centers) ** 2) / (2 * sigma * sigma))
    return w / w.sum(dim=-1, keepdim=True)


def mutual_information(x: torch.Tensor, y: torch.Tensor, bins: int = MI_BINS, sigma: float | None = None,
                       max_samples: int | None = MI_MAX_SAMPLES, eps: float = MI_EPS) -> torch.Tensor:
    """Differentiable MI between paired samples via Gaussian soft histograms.

    Each sequence is min-max normalized to [0,1] (constant -> 0.5) and
    softly assigned to ``bins`` centres. ``x`` and ``y`` are ``[n]`` or
    ``[B,n]``; the result is a scalar or ``[B]``.
    """
    x = torch.as_tensor(x)
    y = torch.as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"paired sequences differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    sigma = 1.0 / bins if sigma is None else sigma
    n = x.shape[-1]
    if max_samples is not None and n > max_samples:
        step = math.ceil(n / max_samples)
        x, y = x[..., ::step], y[..., ::step]
        n = x.shape[-1]
    wx = _soft_assign(x, bins, sigma)
    wy = _soft_assign(y, bins, sigma)
    joint = (wx.transpose(-1, -2) @ wy).double() / n
    px = joint.sum(dim=-1, keepdim=True)
    py = joint.sum(dim=-2, keepdim=True)
    mi = (joint * torch.log((joint + eps) / (px * py + eps))).sum(dim=(-2, -1))
    return mi.to(x.dtype)


def cmi_loss(enh, bins: int = MI_BINS, sigma: float | None = None,
             max_samples: int | None = MI_MAX_SAMPLES) -> tuple[torch.Tensor, torch.Tensor]:
    """``(MI_sar, MI_opt)`` between shared and specific maps, batch-averaged."""
    def mi(shared, specific):
        if shared.dim() == 3:
            shared, specific = shared.unsqueeze(0), specific.unsqueeze(0)
        return mutual_information(shared.flatten(1), specific.flatten(1), bins, sigma, max_samples).mean()
    return mi(enh.tap_sar, enh.specific_sar), mi(enh.tap_opt, enh.specific_opt)
