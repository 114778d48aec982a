import dataclasses

import numpy as np
import pytest
import torch

from facevq.backbone import BackboneConfig, StageSpec
from facevq.config import CodebookSizes, RunConfig, Stage1Config, Stage2Config, toy_run_config
from facevq.dataio import ClipSpec, VideoTensor, make_synthetic_clip


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


def micro_backbone(latent_dim: int = 16) -> BackboneConfig:
    """Tiny two-stage backbone for fast unit tests: ratios 4x/2x."""
    return BackboneConfig(
        spatial_ratio=4,
        temporal_ratio=2,
        latent_dim=latent_dim,
        stages=(
            StageSpec(width=8, spatial_stride=2),
            StageSpec(width=16, spatial_stride=2, temporal_stride=2),
        ),
        res_blocks_per_stage=1,
        mid_attention=False,
    )


def micro_run_config(seed: int = 0, **overrides) -> RunConfig:
    base = dict(
        seed=seed,
        backbone=micro_backbone(),
        codebooks=CodebookSizes(spatial=16, temporal=16),
        stage1=Stage1Config(
            iterations=10,
            batch_size=2,
            clip_frames=4,
            resolution=16,
            adv_warmup=2,
            checkpoint_every=1000,
        ),
        stage2=Stage2Config(
            iterations=5,
            batch_size=2,
            clip_frames=4,
            resolution=16,
            transformer_layers=1,
            transformer_heads=2,
            checkpoint_every=1000,
            degradation="identity",
        ),
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def micro_config() -> RunConfig:
    return micro_run_config()


@pytest.fixture
def micro_clips() -> list[VideoTensor]:
    return [make_synthetic_clip(ClipSpec(seed=i, frames=4, size=16)) for i in range(6)]


@pytest.fixture
def clip16() -> VideoTensor:
    return make_synthetic_clip(ClipSpec(seed=11, frames=4, size=16))


__all__ = ["micro_backbone", "micro_run_config", "toy_run_config"]
