"""Multi-channel normalized cross-correlation heatmaps.

The correlation numerator is evaluated in the frequency domain (one real FFT
per channel, products summed over channels) and the window energies come from
integral images, so the cost is independent of template size.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .numerics import bilinear_resize, fast_size, fft2_real, ifft2_real, softmax_flat

SHALLOW = "shallow"
DEEP = "deep"
RAW = "raw"
PROBABILITY = "probability"

DEEP_STRIDE = 8
# a window (or template) whose centred energy is below this fraction of its
# raw second moment is treated as constant
_ZERO_VAR_REL = 1e-10
_ZERO_VAR_ABS = 1e-30

HMP_MAGIC = b"HMP1"


@dataclass
class Heatmap:
    """Similarity surface over template offsets; values are ``[..., H_out, W_out]``."""

    values: torch.Tensor
    level: str = SHALLOW
    kind: str = RAW
    degenerate: torch.Tensor | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape[-2:])

    def argmax(self) -> list[tuple[int, int]] | tuple[int, int]:
        """Peak position(s) as ``(row, col)``; a list when batched."""
        flat = self.values.detach().reshape(-1, self.shape[0] * self.shape[1])
        idx = flat.argmax(dim=-1).tolist()
        peaks = [divmod(i, self.shape[1]) for i in idx]
        return peaks if self.values.dim() > 2 else peaks[0]

    def probability(self, scale: float = 1.0) -> "Heatmap":
        probs = softmax_flat(self.values * scale, dims=2)
        return Heatmap(probs, self.level, PROBABILITY, self.degenerate)

    def detach(self) -> "Heatmap":
        return Heatmap(self.values.detach(), self.level, self.kind, self.degenerate)


def _check_pair(template, reference):
    if template.dim() != reference.dim() or template.dim() not in (3, 4):
        raise ValueError(
            f"template {tuple(template.shape)} and reference {tuple(reference.shape)} "
            "must both be [C,H,W] or [B,C,H,W]")
    if template.shape[:-2] != reference.shape[:-2]:
        raise ValueError(
            f"leading dims differ: template {tuple(template.shape[:-2])}, "
            f"reference {tuple(reference.shape[:-2])}")
    h, w = template.shape[-2:]
    H, W = reference.shape[-2:]
    if h > H or w > W:
        raise ValueError(f"template {h}x{w} larger than reference {H}x{W}")


def _box_sum(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Sum over every ``h x w`` window of the trailing axes (valid placements only)."""
    ii = torch.nn.functional.pad(x.cumsum(-2).cumsum(-1), (1, 0, 1, 0))
    return ii[..., h:, w:] - ii[..., :-h, w:] - ii[..., h:, :-w] + ii[..., :-h, :-w]


def _correlate(reference: torch.Tensor, template: torch.Tensor, sum_channels: bool) -> torch.Tensor:
    """Valid-mode cross-correlation ``out[u,v] = sum_xy T[x,y] R[u+x, v+y]`` via FFT."""
    h, w = template.shape[-2:]
    H, W = reference.shape[-2:]
    sh, sw = fast_size(H), fast_size(W)
    spectrum = fft2_real(reference, sh, sw, onesided=True) * torch.conj(fft2_real(template, sh, sw, onesided=True))
    if sum_channels:
        spectrum = spectrum.sum(dim=-3)
    corr = ifft2_real(spectrum, sh, sw, onesided=True)
    return corr[..., : H - h + 1, : W - w + 1]


def ncc_heatmap(template: torch.Tensor, reference: torch.Tensor, mode: str = "joint",
                level: str = SHALLOW) -> Heatmap:
    """FFT-accelerated NCC of ``template`` at every valid offset inside ``reference``.

    ``mode="joint"`` normalizes over all ``C*h*w`` samples at once;
    ``mode="per_channel"`` averages per-channel NCC scores. Offsets where the
    template or the reference window has zero variance score 0 and are
    flagged in ``Heatmap.degenerate``.
    """
    _check_pair(template, reference)
    if mode not in ("joint", "per_channel"):
        raise ValueError(f"unknown ncc mode {mode!r}")
    h, w = template.shape[-2:]
    joint = mode == "joint"
    axes = (-3, -2, -1) if joint else (-2, -1)
    n = h * w * (template.shape[-3] if joint else 1)

    t0 = template - template.mean(dim=axes, keepdim=True)
    t_energy = (t0 * t0).sum(dim=axes).double()
    t_raw = (template.double() ** 2).sum(dim=axes)
    # NCC is shift invariant in the reference; centring it limits cancellation
    r0 = reference - reference.mean(dim=(-3, -2, -1), keepdim=True)

    numer = _correlate(r0, t0, sum_channels=joint)
    r64 = r0.double()
    if joint:
        s1 = _box_sum(r64.sum(dim=-3), h, w)
        s2 = _box_sum((r64 * r64).sum(dim=-3), h, w)
    else:
        s1 = _box_sum(r64, h, w)
        s2 = _box_sum(r64 * r64, h, w)
    r_energy = (s2 - s1 * s1 / n).clamp_min(0.0)

    t_ok = t_energy > _ZERO_VAR_REL * t_raw + _ZERO_VAR_ABS
    r_ok = r_energy > _ZERO_VAR_REL * s2 + _ZERO_VAR_ABS
    valid = t_ok[..., None, None] & r_ok
    denom = torch.sqrt(torch.where(valid, r_energy * t_energy[..., None, None], torch.ones_like(r_energy)))
    ncc = torch.where(valid, numer / denom.to(numer.dtype), torch.zeros_like(numer))
    if joint:
        degenerate = ~valid
    else:
        ncc = ncc.mean(dim=-3)
        degenerate = ~valid.any(dim=-3)
    return Heatmap(ncc, level, RAW, degenerate)


def ncc_heatmap_naive(template, reference, mode: str = "joint", level: str = SHALLOW) -> Heatmap:
    """Direct-summation NCC in float64; slow reference for the FFT path."""
    t = np.asarray(template.detach() if isinstance(template, torch.Tensor) else template, dtype=np.float64)
    r = np.asarray(reference.detach() if isinstance(reference, torch.Tensor) else reference, dtype=np.float64)
    if t.ndim != 3 or r.ndim != 3:
        raise ValueError("naive NCC expects unbatched [C,H,W] arrays")
    _check_pair(torch.from_numpy(t), torch.from_numpy(r))
    C, h, w = t.shape
    H, W = r.shape[1:]
    out = np.zeros((H - h + 1, W - w + 1))
    degenerate = np.zeros(out.shape, dtype=bool)
    for u in range(out.shape[0]):
        for v in range(out.shape[1]):
            win = r[:, u:u + h, v:v + w]
            if mode == "joint":
                out[u, v], degenerate[u, v] = _ncc_direct(t.ravel(), win.ravel())
            else:
                scores = [_ncc_direct(t[c].ravel(), win[c].ravel()) for c in range(C)]
                out[u, v] = np.mean([s for s, _ in scores])
                degenerate[u, v] = all(d for _, d in scores)
    return Heatmap(torch.from_numpy(out), level, RAW, torch.from_numpy(degenerate))


def _ncc_direct(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    a0 = a - a.mean()
    b0 = b - b.mean()
    ea, eb = (a0 * a0).sum(), (b0 * b0).sum()
    if ea <= _ZERO_VAR_REL * (a * a).sum() + _ZERO_VAR_ABS or eb <= _ZERO_VAR_REL * (b * b).sum() + _ZERO_VAR_ABS:
        return 0.0, True
    return float((a0 * b0).sum() / np.sqrt(ea * eb)), False


def upscale_deep(values: torch.Tensor, shallow_shape: tuple[int, int], mode: str = "bilinear") -> torch.Tensor:
    """Map a deep heatmap onto the shallow grid; deep index ``d`` sits at shallow ``8*d``."""
    hd, wd = values.shape[-2:]
    hs, ws = shallow_shape
    if mode == "nearest":
        # nearest deep index, ties rounded up
        half = DEEP_STRIDE // 2
        rows = torch.clamp((torch.arange(hs) + half) // DEEP_STRIDE, max=hd - 1)
        cols = torch.clamp((torch.arange(ws) + half) // DEEP_STRIDE, max=wd - 1)
        return values[..., rows[:, None], cols[None, :]]
    if mode != "bilinear":
        raise ValueError(f"unknown upscale mode {mode!r}")
    if (hd - 1) * DEEP_STRIDE == hs - 1 and (wd - 1) * DEEP_STRIDE == ws - 1:
        return bilinear_resize(values, (hs, ws), align_corners=True)
    # general case: sample deep grid at s/8, clamped at the far edge
    ys = (torch.arange(hs, dtype=values.dtype) / DEEP_STRIDE).clamp(max=hd - 1)
    xs = (torch.arange(ws, dtype=values.dtype) / DEEP_STRIDE).clamp(max=wd - 1)
    y0 = ys.floor().long().clamp(max=max(hd - 2, 0))
    x0 = xs.floor().long().clamp(max=max(wd - 2, 0))
    y1 = (y0 + 1).clamp(max=hd - 1)
    x1 = (x0 + 1).clamp(max=wd - 1)
    fy = (ys - y0).unsqueeze(-1)
    fx = (xs - x0).unsqueeze(0)
    g = lambda r, c: values[..., r[:, None], c[None, :]]  # noqa: E731
    top = g(y0, x0) * (1 - fx) + g(y0, x1) * fx
    bot = g(y1, x0) * (1 - fx) + g(y1, x1) * fx
    return top * (1 - fy) + bot * fy


def fuse_heatmaps(deep: Heatmap, shallow: Heatmap, upscale_mode: str = "bilinear") -> Heatmap:
    """Element-wise product of the upscaled deep heatmap and the shallow heatmap."""
    if deep.kind != RAW or shallow.kind != RAW:
        raise ValueError("fusion needs raw heatmaps")
    if deep.level != DEEP or shallow.level != SHALLOW:
        raise ValueError(f"expected (deep, shallow) levels, got ({deep.level}, {shallow.level})")
    up = upscale_deep(deep.values, shallow.shape, upscale_mode)
    return Heatmap(up * shallow.values, SHALLOW, RAW, shallow.degenerate)


# ---------------------------------------------------------------------------
# export

def save_heatmap(path, heatmap: Heatmap | torch.Tensor | np.ndarray) -> None:
    """Write ``b"HMP1"``, u32 H, u32 W, then little-endian f32 values row-major."""
    arr = _as_2d(heatmap).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(HMP_MAGIC)
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_heatmap(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != HMP_MAGIC:
            raise ValueError(f"{path}: not an HMP1 file")
        H, W = struct.unpack("<II", fh.read(8))
        data = fh.read(4 * H * W)
    if len(data) != 4 * H * W:
        raise ValueError(f"{path}: truncated heatmap")
    return np.frombuffer(data, dtype="<f4").reshape(H, W).astype(np.float32)


def save_heatmap_pgm(path, heatmap) -> None:
    """8-bit binary PGM, min-max normalized."""
    arr = _as_2d(heatmap).astype(np.float64)
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _as_2d(heatmap) -> np.ndarray:
    if isinstance(heatmap, Heatmap):
        heatmap = heatmap.values
    if isinstance(heatmap, torch.Tensor):
        heatmap = heatmap.detach().cpu().numpy()
    arr = np.asarray(heatmap)
    if arr.ndim != 2:
        raise ValueError(f"heatmap export needs a 2-D array, got shape {arr.shape}")
    return arr
