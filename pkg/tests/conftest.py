import numpy as np
import pytest
import torch

from fusefill.config import build_config
from fusefill.datasets import SplitSpec, load_dataset, make_glyph_dataset


def tiny_config(**kw):
    """8x8 input, two blocks per side, widths about 1/8 of the full table."""
    base = dict(image_size=8, channels=1, gen_stem=4, gen_encoder=(8, 8), gen_decoder=(12, 8),
                skip_levels=(1,), disc_stem=4, disc_channels=(8, 16), disc_blocks_per_group=1,
                batch_episodes=2, k_train=3, seed=0)
    base.update(kw)
    return build_config(overrides=base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def glyph_root(tmp_path_factory):
    return make_glyph_dataset(tmp_path_factory.mktemp("glyphs"), n_categories=10, per_category=12,
                              size=16, seed=3)


@pytest.fixture(scope="session")
def glyph_dataset(glyph_root):
    return load_dataset(glyph_root, SplitSpec(seed=1, ratio=0.8), image_size=8, channels=1)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


# One line per acceptance criterion, echoed at the end of the pytest run.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
