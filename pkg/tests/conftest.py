import dataclasses

import pytest
import torch

from stvenhance.backbone import BackboneConfig

torch.set_num_threads(1)

# small enough for float64 finite differences
TINY = BackboneConfig(in_channels=12, base_channels=8, channel_mult=(1, 2), attention_levels=(1,), num_heads=2,
                      groups=2, text_dim=8, text_buckets=32, max_tokens=4, max_frames=9)


@pytest.fixture
def tiny_cfg():
    return TINY


def randomize_zero_layers(module, seed=0, scale=0.05):
    """Give every all-zero tensor small random values so gradients reach every path."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if torch.count_nonzero(p) == 0:
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


def tiny_variant(**kw):
    return dataclasses.replace(TINY, **kw)


# acceptance criteria record one line each; printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
