"""Slow, direct reference computations used to check the fast paths.

Nothing here shares code with the implementations it checks: loops and
explicit sums in float64 only.
"""

from __future__ import annotations

import numpy as np
import torch


def conv2d_loops(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation by explicit nested loops. ``x`` is ``[C,H,W]``."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    C, H, W = x.shape
    C_out, C_in, k, _ = kernel.shape
    xp = np.zeros((C, H + 2 * padding, W + 2 * padding))
    xp[:, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((C_out, Ho, Wo))
    for o in range(C_out):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(C_in):
                    for a in range(k):
                        for b in range(k):
                            acc += kernel[o, c, a, b] * xp[c, i * stride + a, j * stride + b]
                out[o, i, j] = acc
    return out


def dft2(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Direct O(N^4) 2-D DFT of ``x`` zero-padded to ``out_h x out_w``."""
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape
    out = np.zeros((out_h, out_w), dtype=np.complex128)
    for u in range(out_h):
        for v in range(out_w):
            acc = 0j
            for m in range(H):
                for n in range(W):
                    acc += x[m, n] * np.exp(-2j * np.pi * (u * m / out_h + v * n / out_w))
            out[u, v] = acc
    return out


def idft2(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.complex128)
    H, W = X.shape
    out = np.zeros((H, W), dtype=np.complex128)
    for m in range(H):
        for n in range(W):
            acc = 0j
            for u in range(H):
                for v in range(W):
                    acc += X[u, v] * np.exp(2j * np.pi * (u * m / H + v * n / W))
            out[m, n] = acc / (H * W)
    return out


def attention_quadratic(q, k, v, heads: int = 1, normalize: bool = True, eps: float = 1e-6) -> np.ndarray:
    """Kernel attention via the explicit ``N x S`` similarity matrix per head."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    phi = lambda a: np.where(a > 0, a + 1.0, np.exp(a))  # noqa: E731  elu(a) + 1
    N, C = q.shape
    d = C // heads
    out = np.zeros((N, C))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        sim = phi(q[:, sl]) @ phi(k[:, sl]).T
        num = sim @ v[:, sl]
        if normalize:
            num = num / (sim.sum(axis=1, keepdims=True) + eps)
        out[:, sl] = num
    return out


def ncc_loops(template: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Joint-channel NCC by explicit loops over offsets and samples."""
    t = np.asarray(template, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    C, h, w = t.shape
    H, W = r.shape[1:]
    out = np.zeros((H - h + 1, W - w + 1))
    n = C * h * w
    t_mean = t.sum() / n
    for u in range(out.shape[0]):
        for v in range(out.shape[1]):
            win = r[:, u:u + h, v:v + w]
            r_mean = win.sum() / n
            num = et = er = 0.0
            for c in range(C):
                for a in range(h):
                    for b in range(w):
                        dt = t[c, a, b] - t_mean
                        dr = win[c, a, b] - r_mean
                        num += dt * dr
                        et += dt * dt
                        er += dr * dr
            out[u, v] = 0.0 if et == 0 or er == 0 else num / np.sqrt(et * er)
    return out


def finite_difference_check(fn, inputs: list[torch.Tensor], eps: float = 1e-3, seed: int = 0,
                            params: list[torch.Tensor] | None = None) -> float:
    """Worst norm-wise relative error between autograd and central differences.

    ``fn`` maps ``inputs`` to a tensor; it is projected to a scalar with fixed
    random weights. Inputs and params should be float64 leaves.
    """
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    extra = list(params or [])
    out = fn(*leaves)
    gen = torch.Generator().manual_seed(seed)
    weights = torch.rand(out.shape, generator=gen, dtype=torch.float64) * 2 - 1

    def scalar(*xs):
        return float((fn(*xs).double() * weights).sum())

    loss = (out.double() * weights).sum()
    grads = torch.autograd.grad(loss, leaves + extra, allow_unused=True)
    worst = 0.0
    targets = [(i, leaf) for i, leaf in enumerate(leaves)] + [(None, p) for p in extra]
    for g, (idx, tensor_) in zip(grads, targets):
        g = torch.zeros_like(tensor_) if g is None else g
        fd = torch.zeros_like(tensor_, dtype=torch.float64)
        with torch.no_grad():
            base = [leaf.detach() for leaf in leaves]
            flat = tensor_.data.view(-1) if idx is None else None
            for j in range(tensor_.numel()):
                if idx is None:
                    old = flat[j].item()
                    flat[j] = old + eps
                    up = scalar(*base)
                    flat[j] = old - eps
                    down = scalar(*base)
                    flat[j] = old
                else:
                    bumped = base[idx].clone().view(-1)
                    old = bumped[j].item()
                    bumped[j] = old + eps
                    up = scalar(*[bumped.view_as(base[idx]) if k == idx else b for k, b in enumerate(base)])
                    bumped[j] = old - eps
                    down = scalar(*[bumped.view_as(base[idx]) if k == idx else b for k, b in enumerate(base)])
                fd.view(-1)[j] = (up - down) / (2 * eps)
        denom = max(float(fd.norm()), 1e-12)
        worst = max(worst, float((g.double() - fd).norm()) / denom)
    return worst
