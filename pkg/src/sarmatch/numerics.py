"""Tensor plumbing shared by every other module.

Tensors are plain ``torch.Tensor`` objects (float32 by default); torch's
tape-based autograd provides reverse-mode differentiation. The helpers here
add the shape contracts, the zero-padded real FFT pair, the flat softmax used
for heatmaps, and the ``TSR1`` binary tensor format.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch
import torch.nn.functional as F
from scipy.fft import next_fast_len

DTYPE = torch.float32

TSR_MAGIC = b"TSR1"


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible; names the offending axes."""


def tensor(data, requires_grad: bool = False, dtype=DTYPE) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=dtype).clone()
    t.requires_grad_(requires_grad)
    return t


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Cross-correlation convolution on ``[C,H,W]`` or ``[B,C,H,W]`` input."""
    unbatched = x.dim() == 3
    if x.dim() not in (3, 4):
        raise DimensionError(f"input must be rank 3 or 4, got shape {tuple(x.shape)}")
    if kernel.dim() != 4:
        raise DimensionError(f"kernel must be rank 4, got shape {tuple(kernel.shape)}")
    k_h, k_w = kernel.shape[-2:]
    if k_h != k_w or k_h % 2 == 0:
        raise DimensionError(f"kernel axes (2,3) must be equal and odd, got {k_h}x{k_w}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    c_in = x.shape[-3]
    if kernel.shape[1] != c_in:
        raise DimensionError(
            f"channel axis mismatch: input axis {x.dim() - 3} has {c_in}, kernel axis 1 has {kernel.shape[1]}")
    for axis in (-2, -1):
        span = x.shape[axis] + 2 * padding - k_h
        if span < 0 or span % stride:
            raise DimensionError(
                f"input axis {x.dim() + axis} (size {x.shape[axis]}) incompatible with "
                f"kernel {k_h}, stride {stride}, padding {padding}")
    xb = x.unsqueeze(0) if unbatched else x
    out = F.conv2d(xb, kernel, bias, stride=stride, padding=padding)
    return out.squeeze(0) if unbatched else out


def elu(x: torch.Tensor) -> torch.Tensor:
    return F.elu(x)


def bilinear_resize(x: torch.Tensor, size: tuple[int, int], align_corners: bool = True) -> torch.Tensor:
    """Differentiable bilinear resize of the two trailing axes."""
    shape = x.shape
    flat = x.reshape(-1, 1, shape[-2], shape[-1])
    out = F.interpolate(flat, size=size, mode="bilinear", align_corners=align_corners)
    return out.reshape(*shape[:-2], *size)


def fast_size(n: int) -> int:
    return next_fast_len(int(n), real=True)


def fft2_real(x: torch.Tensor, out_h: int, out_w: int, onesided: bool = False) -> torch.Tensor:
    """Forward DFT of ``x`` zero-padded to ``out_h x out_w`` over the trailing two axes."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"output dims must be positive, got {out_h}x{out_w}")
    if out_h < x.shape[-2] or out_w < x.shape[-1]:
        raise ValueError(
            f"output dims {out_h}x{out_w} smaller than input {tuple(x.shape[-2:])}")
    if onesided:
        return torch.fft.rfft2(x, s=(out_h, out_w))
    return torch.fft.fft2(x, s=(out_h, out_w))


def ifft2_real(spectrum: torch.Tensor, out_h: int, out_w: int, onesided: bool = False) -> torch.Tensor:
    """Inverse of :func:`fft2_real`; returns the real part."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"output dims must be positive, got {out_h}x{out_w}")
    if onesided:
        return torch.fft.irfft2(spectrum, s=(out_h, out_w))
    return torch.fft.ifft2(spectrum, s=(out_h, out_w)).real


def softmax_flat(logits: torch.Tensor, temperature: float = 1.0, dims: int | None = None) -> torch.Tensor:
    """Softmax over all elements (or over the trailing ``dims`` axes).

    Max-subtraction keeps it finite for any input.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    dims = logits.dim() if dims is None else dims
    lead = logits.shape[: logits.dim() - dims]
    flat = logits.reshape(*lead, -1) / temperature
    return torch.softmax(flat, dim=-1).reshape(logits.shape)


def log_softmax_flat(logits: torch.Tensor, dims: int = 2) -> torch.Tensor:
    lead = logits.shape[: logits.dim() - dims]
    flat = logits.reshape(*lead, -1)
    return torch.log_softmax(flat, dim=-1).reshape(logits.shape)


def backward(loss: torch.Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable leaf."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a single-element loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss has no recorded computation graph")
    loss.reshape(()).backward()


def mean_var(x: torch.Tensor, dims=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and population variance over ``dims`` (all axes by default)."""
    if dims is None:
        dims = tuple(range(x.dim()))
    mean = x.mean(dim=dims, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=dims, keepdim=True)
    return mean, var


# ---------------------------------------------------------------------------
# TSR1 tensor files: b"TSR1", u32 rank, u32 dims..., little-endian f32 row-major.

def write_tensor(fh: BinaryIO, t) -> None:
    arr = np.ascontiguousarray(_as_numpy(t), dtype="<f4")
    fh.write(TSR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> torch.Tensor:
    magic = fh.read(4)
    if magic != TSR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(fh, 4 * count)
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return torch.from_numpy(arr.astype(np.float32))


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> torch.Tensor:
    with open(Path(path), "rb") as fh:
        return read_tensor(fh)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated tensor data: wanted {n} bytes, got {len(buf)}")
    return buf


def _as_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().numpy()
    return np.asarray(t)
