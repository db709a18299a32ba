import sys

import numpy as np
import pytest

from sarmatch.backbone import BackboneConfig
from sarmatch.data import AlignedPair, crop_template, synth_pair
from sarmatch.enhance import AttentionConfig
from sarmatch.model import ModelConfig


def tiny_model_config(blocks: int = 1, **kw) -> ModelConfig:
    cfg = ModelConfig(
        backbone=BackboneConfig(stem_channels=4, stage_channels=[4, 8, 8, 8], fpn_channels_shallow=4,
                                fpn_channels_deep=8),
        deep_attention=AttentionConfig(heads=2, head_dim=4),
        shallow_attention=AttentionConfig(heads=1, head_dim=4, pool_tokens=True),
        **kw)
    cfg.set_blocks(blocks)
    return cfg


@pytest.fixture
def tiny_config():
    return tiny_model_config


@pytest.fixture(scope="session")
def tiny_pairs():
    """Aligned 32x32 pairs (templates cut at 16x16 by the batcher)."""
    return [synth_pair(100 + i, 32, "mild") for i in range(8)]


@pytest.fixture(scope="session")
def tiny_test_pairs():
    rng = np.random.default_rng(5)
    return [crop_template(p.optical, p.sar, 16, rng) for p in (synth_pair(900 + i, 32, "mild") for i in range(6))]


def unlabeled(pairs):
    return [AlignedPair(p.optical, p.sar, labeled=False) for p in pairs]


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.RESULTS:
        terminalreporter.write_line(line)
