"""
공용 pytest 픽스처
"""

import numpy as np
import pytest

from synth_corpus import SynthSpec, cmd_synth
from toy_vit import ViTConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    """16×16 이미지, 패치 4 → 16 패치 + CLS = 17 토큰"""
    return ViTConfig(layers=2, dim=16, heads=2, image_height=16, image_width=16, patch_size=4, seed=7)


@pytest.fixture
def small_corpus(tmp_path):
    """R ∈ {0, 8, 32} 순환, 6장"""
    spec = SynthSpec(height=16, width=16, patch_size=4, count=6, rects=[0, 8, 32], seed=3)
    out_dir = tmp_path / "corpus"
    cmd_synth(spec, out_dir)
    return out_dir
