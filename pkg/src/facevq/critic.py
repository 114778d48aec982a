"""Adversarial critic: frozen feature extractor plus trainable heads.

The extractor is a pluggable client. When a pretrained, TorchScript-exported
feature network is configured it is loaded from disk and frozen; otherwise a
small frozen randomly-initialized convolutional pyramid (fixed seed) stands
in so the whole suite runs offline. The fallback does not reproduce
production-quality adversarial signal and is documented as such.

Scores follow the convention ``score(x) = -mean(sum_k head_k(features(x)))``
and are squashed through a logistic before entering the log-loss terms.
"""

from __future__ import annotations

from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, TrainingStepError

FALLBACK_SEED = 0x5EED
FALLBACK_CHANNELS = (32, 64, 128)


class FrozenPyramidExtractor(nn.Module):
    """Frozen random convolutional pyramid emitting one feature map per scale."""

    def __init__(self, channels: tuple[int, ...] = FALLBACK_CHANNELS, seed: int = FALLBACK_SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for cout in channels:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.feature_channels = tuple(channels)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, frames: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = frames
        for conv in self.layers:
            h = F.silu(conv(h))
            feats.append(h)
        return feats


class ScriptedExtractor(nn.Module):
    """Wrapper around a TorchScript module mapping frames to a feature list."""

    def __init__(self, path: str | Path):
        super().__init__()
        try:
            self.module = torch.jit.load(str(path), map_location="cpu")
        except Exception as exc:
            raise ConfigError(f"cannot load feature extractor from {path}: {exc}") from exc
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        probe = torch.zeros(1, 3, 64, 64)
        with torch.no_grad():
            feats = self.module(probe)
        if not isinstance(feats, (list, tuple)) or not feats:
            raise ConfigError(f"extractor at {path} must return a list of feature maps")
        self.feature_channels = tuple(int(f.shape[1]) for f in feats)

    def forward(self, frames: torch.Tensor) -> list[torch.Tensor]:
        return list(self.module(frames))


def build_extractor(
    weights_path: str | None,
    allow_fallback: bool = True,
    fallback_seed: int = FALLBACK_SEED,
) -> nn.Module:
    """Resolve the feature-extractor client from config."""
    if weights_path:
        return ScriptedExtractor(weights_path)
    if not allow_fallback:
        raise ConfigError("no pretrained feature extractor configured and fallback disabled")
    return FrozenPyramidExtractor(seed=fallback_seed)


class HeadEnsemble(nn.Module):
    """K lightweight trainable heads, one per feature scale.

    These are the only trainable parameters on the critic side.
    """

    def __init__(self, feature_channels: tuple[int, ...], hidden: int = 64):
        super().__init__()
        self.heads = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(c, hidden, 3, stride=2, padding=1),
                nn.SiLU(),
                nn.Conv2d(hidden, 1, 3, padding=1),
            )
            for c in feature_channels
        )

    def forward(self, features: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(features) != len(self.heads):
            raise ConfigError(
                f"got {len(features)} feature scales for {len(self.heads)} heads"
            )
        return [head(f) for head, f in zip(self.heads, features)]


def frames_of(video: torch.Tensor) -> torch.Tensor:
    """(B, 3, T, H, W) -> (B*T, 3, H, W); accepts already-flat frame batches."""
    if video.ndim == 5:
        b, c, t, h, w = video.shape
        return video.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)
    if video.ndim == 4:
        return video
    raise ConfigError(f"expected video (B,3,T,H,W) or frames (N,3,H,W), got {tuple(video.shape)}")


def discriminate(video: torch.Tensor, extractor: nn.Module, heads: HeadEnsemble) -> torch.Tensor:
    """Raw critic score: negated expectation of summed head responses.

    Head maps are averaged over positions and frames, summed across heads,
    and negated.
    """
    maps = heads(extractor(frames_of(video)))
    return -sum(m.mean() for m in maps)


def adversarial_losses(
    real: torch.Tensor,
    fake: torch.Tensor,
    extractor: nn.Module,
    heads: HeadEnsemble,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating GAN losses on logistic-squashed critic scores.

    Returns ``(generator_loss, discriminator_loss)``. The discriminator
    term is ``-(log d(real) + log(1 - d(fake)))`` with the fake branch
    detached; the generator term is ``-log d(fake)``.
    """
    score_fake = discriminate(fake, extractor, heads)
    score_real = discriminate(real, extractor, heads)
    if not (torch.isfinite(score_real) and torch.isfinite(score_fake)):
        raise TrainingStepError(
            f"critic produced non-finite scores: real={score_real}, fake={score_fake}"
        )
    # softplus forms of -log sigmoid(s) and -log(1 - sigmoid(s))
    generator_loss = F.softplus(-score_fake)
    score_fake_d = discriminate(fake.detach(), extractor, heads)
    discriminator_loss = F.softplus(-score_real) + F.softplus(score_fake_d)
    return generator_loss, discriminator_loss
