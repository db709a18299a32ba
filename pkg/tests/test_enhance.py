import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sarmatch.enhance import (AttentionConfig, CrossAttentionBlock, EnhanceBlock, EnhanceModule,
                              MultiscaleConvBlock, SelfAttentionBlock, linear_attention)
from sarmatch.losses import mutual_information
from sarmatch.oracles import attention_quadratic, finite_difference_check


def rand(*shape, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64).to(dtype)


def zero_all(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def seeded(cls, *args, seed=0, dtype=torch.float32, **kw):
    torch.manual_seed(seed)
    return cls(*args, **kw).to(dtype)


class TestLinearAttention:
    def test_single_token_returns_value(self):
        v = rand(1, 8, seed=1)
        out = linear_attention(rand(1, 8, seed=2), rand(1, 8, seed=3), v, heads=2)
        assert torch.allclose(out, v, atol=1e-5)

    def test_equal_keys_and_values(self):
        k = rand(1, 6, seed=4).expand(10, 6)
        v = rand(1, 6, seed=5).expand(10, 6)
        out = linear_attention(rand(7, 6, seed=6), k, v, heads=3)
        assert torch.allclose(out, v[:1].expand(7, 6), atol=1e-5)

    @pytest.mark.parametrize("normalize", [True, False])
    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_matches_quadratic(self, normalize, heads):
        q, k, v = rand(16, 8, seed=7), rand(16, 8, seed=8), rand(16, 8, seed=9)
        out = linear_attention(q.double(), k.double(), v.double(), heads, normalize).numpy()
        ref = attention_quadratic(q.numpy(), k.numpy(), v.numpy(), heads, normalize)
        assert np.abs(out - ref).max() / np.abs(ref).max() <= 1e-5

    def test_keys_may_be_shorter(self):
        out = linear_attention(rand(12, 4), rand(5, 4, seed=1), rand(5, 4, seed=2))
        assert out.shape == (12, 4)

    def test_batched(self):
        q, k, v = rand(3, 9, 4, seed=1), rand(3, 9, 4, seed=2), rand(3, 9, 4, seed=3)
        out = linear_attention(q, k, v, 2)
        assert torch.allclose(out[1], linear_attention(q[1], k[1], v[1], 2), atol=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            linear_attention(rand(4, 8), rand(4, 6), rand(4, 6))
        with pytest.raises(ValueError):
            linear_attention(rand(4, 8), rand(4, 8), rand(5, 8))
        with pytest.raises(ValueError):
            linear_attention(rand(4, 6), rand(4, 6), rand(4, 6), heads=4)

    def test_gradient(self):
        q, k, v = (rand(6, 4, seed=s, dtype=torch.float64) for s in (1, 2, 3))
        err = finite_difference_check(lambda a, b, c: linear_attention(a, b, c, heads=2), [q, k, v])
        assert err <= 1e-3


class TestMultiscaleConv:
    def test_zero_weights_identity(self):
        block = zero_all(MultiscaleConvBlock(3))
        x = rand(3, 7, 9)
        assert torch.equal(block(x), x)

    def test_shape(self):
        assert MultiscaleConvBlock(3)(rand(3, 7, 9)).shape == (3, 7, 9)

    def test_gradient(self):
        block = seeded(MultiscaleConvBlock, 2, dtype=torch.float64)
        with torch.no_grad():
            for p in block.parameters():
                p.mul_(10)
        err = finite_difference_check(block, [rand(2, 4, 5, seed=1, dtype=torch.float64)],
                                      params=list(block.parameters()))
        assert err <= 1e-3


class TestSelfAttention:
    def test_zero_projections(self):
        block = SelfAttentionBlock(4, 2)
        zero_all(block.attn)
        zero_all(block.msconv)
        x = rand(4, 5, 6)
        residual, extracted = block(x)
        assert torch.all(extracted == 0)
        assert torch.equal(residual, x)

    def test_shapes(self):
        residual, extracted = SelfAttentionBlock(4, 2)(rand(4, 5, 6))
        assert residual.shape == extracted.shape == (4, 5, 6)

    def test_pooled_tokens_keep_shape(self):
        residual, extracted = SelfAttentionBlock(4, 2, pool_tokens=True)(rand(2, 4, 6, 8))
        assert residual.shape == extracted.shape == (2, 4, 6, 8)

    def test_gradient(self):
        block = seeded(SelfAttentionBlock, 2, 1, seed=3, dtype=torch.float64)
        err = finite_difference_check(lambda x: torch.cat(block(x)), [rand(2, 4, 4, seed=2, dtype=torch.float64)],
                                      params=list(block.parameters()))
        assert err <= 1e-3


class TestCrossAttention:
    def test_zero_partner(self):
        block = CrossAttentionBlock(4, 2)
        zero_all(block.msconv)
        f1 = rand(4, 5, 5)
        out1, _ = block(f1, torch.zeros(4, 3, 3))
        assert torch.allclose(out1, f1)

    def test_symmetric_inputs(self):
        block = CrossAttentionBlock(4, 2)
        f = rand(4, 6, 6, seed=1)
        a, b = block(f, f.clone())
        assert torch.equal(a, b)

    def test_different_sizes(self):
        a, b = CrossAttentionBlock(4, 2)(rand(4, 8, 8), rand(4, 6, 5, seed=1))
        assert a.shape == (4, 8, 8) and b.shape == (4, 6, 5)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            CrossAttentionBlock(4, 2)(rand(4, 5, 5), rand(2, 5, 5))

    def test_gradient(self):
        block = seeded(CrossAttentionBlock, 2, 2, seed=4, dtype=torch.float64)
        f1, f2 = rand(2, 3, 3, seed=5, dtype=torch.float64), rand(2, 2, 3, seed=6, dtype=torch.float64)
        err = finite_difference_check(lambda a, b: torch.cat([o.flatten() for o in block(a, b)]), [f1, f2],
                                      params=list(block.parameters()))
        assert err <= 1e-3


class TestEnhanceModule:
    def cfg(self, **kw):
        return AttentionConfig(heads=2, head_dim=2, **kw)

    def test_zeroed_module_is_identity(self):
        module = zero_all(EnhanceModule(self.cfg()))
        f_opt, f_sar = rand(4, 6, 6), rand(4, 4, 4, seed=1)
        pair = module(f_opt, f_sar)
        assert torch.equal(pair.shared_opt, f_opt) and torch.equal(pair.shared_sar, f_sar)
        assert torch.all(pair.specific_opt == 0) and torch.all(pair.specific_sar == 0)

    def test_decomposition(self):
        module = EnhanceModule(self.cfg())
        f_opt, f_sar = rand(2, 4, 6, 6), rand(2, 4, 4, 4, seed=1)
        pair = module(f_opt, f_sar)
        assert torch.allclose(pair.shared_opt + pair.specific_opt, f_opt, atol=1e-6)
        assert torch.allclose(pair.shared_sar + pair.specific_sar, f_sar, atol=1e-6)
        for t in (pair.shared_opt, pair.specific_opt):
            assert t.shape == f_opt.shape

    def test_before_tap(self):
        torch.manual_seed(0)
        module = EnhanceModule(self.cfg(mi_tap="before"))
        f_opt, f_sar = rand(4, 6, 6), rand(4, 4, 4, seed=1)
        pair = module(f_opt, f_sar)
        _, _, pre_opt, _ = module.blocks[0](f_opt, f_sar)
        assert torch.allclose(pair.tap_opt, pre_opt)
        assert torch.allclose(pair.specific_opt, f_opt - pre_opt)
        assert not torch.allclose(pair.tap_opt, pair.shared_opt)

    def test_blocks_applied_in_sequence(self):
        torch.manual_seed(1)
        module = EnhanceModule(self.cfg(blocks_n=3))
        f_opt, f_sar = rand(4, 6, 6), rand(4, 4, 4, seed=1)
        x, y = f_opt, f_sar
        for block in module.blocks:
            x, y, _, _ = block(x, y)
        pair = module(f_opt, f_sar)
        assert torch.equal(pair.shared_opt, x) and torch.equal(pair.shared_sar, y)

    def test_zero_blocks_passthrough(self):
        pair = EnhanceModule(self.cfg(blocks_n=0))(rand(4, 5, 5), rand(4, 3, 3))
        assert torch.all(pair.specific_opt == 0)

    def test_channel_check(self):
        with pytest.raises(ValueError):
            EnhanceModule(self.cfg())(rand(3, 5, 5), rand(3, 5, 5))

    def test_mi_on_outputs_is_finite(self):
        module = EnhanceModule(self.cfg())
        pair = module(rand(4, 8, 8), rand(4, 6, 6, seed=1))
        mi = mutual_information(pair.shared_sar.flatten(), pair.specific_sar.flatten())
        assert torch.isfinite(mi) and mi.item() >= -1e-6

    def test_block_gradient(self):
        block = seeded(EnhanceBlock, 2, 1, seed=7, dtype=torch.float64)
        f1, f2 = rand(2, 3, 3, seed=8, dtype=torch.float64), rand(2, 2, 2, seed=9, dtype=torch.float64)
        err = finite_difference_check(lambda a, b: torch.cat([o.flatten() for o in block(a, b)]), [f1, f2],
                                      params=list(block.parameters()))
        assert err <= 1e-3

    @pytest.mark.parametrize("bad", [dict(heads=0), dict(blocks_n=-1), dict(mi_tap="middle")])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            AttentionConfig(**{"heads": 2, "head_dim": 2, **bad})


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 64), c=st.sampled_from([2, 4, 8, 16]), seed=st.integers(0, 10_000),
       normalize=st.booleans())
def test_linear_attention_oracle_property(n, c, seed, normalize):
    heads = 2 if c >= 4 else 1
    q, k, v = (rand(n, c, seed=seed + i, dtype=torch.float64) for i in range(3))
    out = linear_attention(q, k, v, heads, normalize).numpy()
    ref = attention_quadratic(q.numpy(), k.numpy(), v.numpy(), heads, normalize)
    assert np.abs(out - ref).max() <= 1e-5 * max(1.0, np.abs(ref).max())
