"""Built-in oracle and gradient checks, runnable without pytest."""

from __future__ import annotations

import time

import numpy as np
import torch

from .enhance import CrossAttentionBlock, MultiscaleConvBlock, SelfAttentionBlock, linear_attention
from .fftncc import DEEP, SHALLOW, Heatmap, fuse_heatmaps, ncc_heatmap
from .losses import heatmap_ce, mutual_information, pseudo_ce
from .metrics import compute_metrics
from .numerics import conv2d
from .oracles import attention_quadratic, finite_difference_check, ncc_loops

GRAD_TOL = 1e-3


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def check_ncc(gen, n=20) -> float:
    worst = 0.0
    for _ in range(n):
        c, h, w = (int(v) for v in torch.randint(1, 5, (1,), generator=gen).tolist() + [4, 5])
        tpl, ref = _rand(gen, c, h, w), _rand(gen, c, 12, 13)
        fast = ncc_heatmap(tpl.float(), ref.float()).values.double().numpy()
        worst = max(worst, float(np.abs(fast - ncc_loops(tpl.numpy(), ref.numpy())).max()))
    assert worst <= 1e-4, worst
    return worst


def check_attention(gen, n=10) -> float:
    worst = 0.0
    for i in range(n):
        q, k, v = _rand(gen, 32, 8), _rand(gen, 32, 8), _rand(gen, 32, 8)
        for normalize in (True, False):
            out = linear_attention(q, k, v, 2, normalize).numpy()
            ref = attention_quadratic(q.numpy(), k.numpy(), v.numpy(), 2, normalize)
            worst = max(worst, float(np.abs(out - ref).max() / np.abs(ref).max()))
    assert worst <= 1e-5, worst
    return worst


def check_gradients(gen) -> float:
    torch.manual_seed(0)
    cases = {
        "conv2d": (lambda x, k: conv2d(x, k, padding=1), [_rand(gen, 2, 5, 5), _rand(gen, 3, 2, 3, 3)], None),
        "heatmap_ce": (lambda m: heatmap_ce(m, (1, 2)), [_rand(gen, 4, 4) * 0.3], None),
        "pseudo_ce": (lambda m: pseudo_ce(m, torch.full((4, 4), 1 / 16, dtype=torch.float64)),
                      [_rand(gen, 4, 4) * 0.3], None),
        "mutual_information": (lambda a, b: mutual_information(a, b, bins=4),
                               [torch.rand(30, generator=gen, dtype=torch.float64),
                                torch.rand(30, generator=gen, dtype=torch.float64)], None),
        "ncc_heatmap": (lambda t, r: ncc_heatmap(t, r).values, [_rand(gen, 2, 3, 3), _rand(gen, 2, 6, 5)], None),
    }
    ms = MultiscaleConvBlock(2).double()
    sa = SelfAttentionBlock(2, 1).double()
    ca = CrossAttentionBlock(2, 2).double()
    cases["multiscale_conv"] = (ms, [_rand(gen, 2, 4, 4)], list(ms.parameters()))
    cases["self_attention"] = (lambda x: torch.cat(sa(x)), [_rand(gen, 2, 4, 4)], list(sa.parameters()))
    cases["cross_attention"] = (lambda a, b: torch.cat([o.flatten() for o in ca(a, b)]),
                                [_rand(gen, 2, 3, 3), _rand(gen, 2, 2, 3)], list(ca.parameters()))
    worst = 0.0
    for name, (fn, inputs, params) in cases.items():
        eps = 1e-5 if name == "mutual_information" else 1e-4
        err = finite_difference_check(fn, inputs, eps=eps, params=params)
        assert err <= GRAD_TOL, f"{name}: {err}"
        worst = max(worst, err)
    return worst


def check_mi(gen) -> float:
    x = torch.rand(4096, generator=gen)
    y = torch.rand(4096, generator=gen)
    shuffled = x[torch.randperm(4096, generator=gen)]
    indep = mutual_information(x, y).item()
    gap = mutual_information(x, x).item() - mutual_information(x, shuffled).item()
    assert indep <= 0.05, indep
    assert gap >= 0.5, gap
    assert abs(indep - mutual_information(y, x).item()) <= 1e-6
    return indep


def check_fusion(_gen) -> float:
    shallow = torch.full((17, 17), 0.1)
    shallow[0, 1], shallow[14, 13] = 0.9, 0.85
    deep = torch.full((3, 3), 0.2)
    deep[1:, 1:] = 0.9
    assert Heatmap(shallow, SHALLOW).argmax() == (0, 1)
    assert fuse_heatmaps(Heatmap(deep, DEEP), Heatmap(shallow, SHALLOW)).argmax() == (14, 13)
    return 0.0


def check_metrics(_gen) -> float:
    report = compute_metrics([((3, 4), (0, 0))])
    assert report.cmr_5 == 1.0 and report.rmse_5 == 5.0 and report.cmr_1 == 0.0
    return 0.0


CHECKS = [
    ("fft-ncc vs direct loops", check_ncc, False),
    ("linear vs quadratic attention", check_attention, False),
    ("fusion rescues spurious peak", check_fusion, False),
    ("metrics 3-4-5 boundary", check_metrics, False),
    ("mutual information sanity", check_mi, False),
    ("finite-difference gradients", check_gradients, True),
]


def run_selftest(quick: bool = False, out=print) -> int:
    gen = torch.Generator().manual_seed(0)
    failures = 0
    for name, fn, slow in CHECKS:
        if quick and slow:
            out(f"skip {name}")
            continue
        t0 = time.perf_counter()
        try:
            value = fn(gen)
        except AssertionError as exc:
            failures += 1
            out(f"FAIL {name}: {exc}")
            continue
        out(f"ok   {name} ({value:.2e}, {time.perf_counter() - t0:.1f}s)")
    out("selftest passed" if failures == 0 else f"selftest: {failures} check(s) failed")
    return 0 if failures == 0 else 1
