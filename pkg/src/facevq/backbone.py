"""Purely convolutional 3D encoder/decoder backbone.

The encoder compresses a clip spatially and temporally into a latent grid;
the decoder mirrors the encoder's block layout with upsampling in place of
downsampling. Videos enter as (T, H, W, 3) arrays in [0, 1], are shifted to
[-1, 1] before the first convolution, and leave the decoder back on the
[0, 1] scale (clamped only at the public boundary so losses can see the
raw values).

Temporal convolutions use replicate padding at clip edges to avoid
wrap-around artifacts on short clips. Temporal-only downsampling (temporal
stride without spatial stride) is rejected at construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .dataio import VideoTensor, batch_to_video, video_to_batch
from .errors import ConfigError, ShapeError


@dataclass
class LatentGrid:
    """Compressed clip representation: a (t, h, w, D) float tensor."""

    values: torch.Tensor

    def __post_init__(self) -> None:
        if self.values.ndim != 4:
            raise ShapeError(f"latent grid must be (t, h, w, D), got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ShapeError("latent grid contains non-finite values")

    @property
    def grid_size(self) -> tuple[int, int, int]:
        t, h, w, _ = self.values.shape
        return t, h, w

    @property
    def dim(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True)
class StageSpec:
    """One encoder stage: residual blocks, then a sampling step, then
    optional spatial self-attention at the post-sampling resolution."""

    width: int
    spatial_stride: int = 2
    temporal_stride: int = 1
    attention: bool = False


@dataclass(frozen=True)
class BackboneConfig:
    spatial_ratio: int = 8
    temporal_ratio: int = 2
    latent_dim: int = 256
    stages: tuple[StageSpec, ...] = (
        StageSpec(width=64, spatial_stride=2),
        StageSpec(width=128, spatial_stride=2, temporal_stride=2),
        StageSpec(width=256, spatial_stride=2, attention=True),
    )
    res_blocks_per_stage: int = 2
    mid_attention: bool = True

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.res_blocks_per_stage < 1:
            raise ConfigError("res_blocks_per_stage must be >= 1")
        s_prod, t_prod = 1, 1
        for i, stage in enumerate(self.stages):
            if stage.width < 1:
                raise ConfigError(f"stage {i}: width must be positive")
            if stage.spatial_stride not in (1, 2) or stage.temporal_stride not in (1, 2):
                raise ConfigError(f"stage {i}: strides must be 1 or 2")
            if stage.temporal_stride > 1 and stage.spatial_stride == 1:
                raise ConfigError(
                    f"stage {i}: temporal-only sampling (temporal stride "
                    f"{stage.temporal_stride} with spatial stride 1) is not supported"
                )
            s_prod *= stage.spatial_stride
            t_prod *= stage.temporal_stride
        if s_prod != self.spatial_ratio:
            raise ConfigError(
                f"spatial_ratio {self.spatial_ratio} != product of spatial strides {s_prod}"
            )
        if t_prod != self.temporal_ratio:
            raise ConfigError(
                f"temporal_ratio {self.temporal_ratio} != product of temporal strides {t_prod}"
            )

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(s.width for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "spatial_ratio": self.spatial_ratio,
            "temporal_ratio": self.temporal_ratio,
            "latent_dim": self.latent_dim,
            "stages": [
                {
                    "width": s.width,
                    "spatial_stride": s.spatial_stride,
                    "temporal_stride": s.temporal_stride,
                    "attention": s.attention,
                }
                for s in self.stages
            ],
            "res_blocks_per_stage": self.res_blocks_per_stage,
            "mid_attention": self.mid_attention,
        }

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        stages = tuple(StageSpec(**s) for s in d.get("stages", ()))
        kwargs = {k: v for k, v in d.items() if k != "stages"}
        return BackboneConfig(stages=stages, **kwargs)


def toy_backbone_config(latent_dim: int = 32) -> BackboneConfig:
    """Small configuration sized for CPU desk-scale runs (64x64, 8 frames)."""
    return BackboneConfig(
        spatial_ratio=8,
        temporal_ratio=2,
        latent_dim=latent_dim,
        stages=(
            StageSpec(width=8, spatial_stride=2),
            StageSpec(width=16, spatial_stride=2, temporal_stride=2),
            StageSpec(width=24, spatial_stride=2, attention=True),
        ),
        res_blocks_per_stage=1,
        mid_attention=True,
    )


def _groups(channels: int) -> int:
    return math.gcd(channels, 8)


def _tpad(x: torch.Tensor, amount: int = 1) -> torch.Tensor:
    """Replicate-pad the temporal axis of a (B, C, T, H, W) tensor."""
    return F.pad(x, (0, 0, 0, 0, amount, amount), mode="replicate")


class Conv3dTPad(nn.Module):
    """3x3x3 convolution with zero spatial padding and replicate temporal
    padding; supports the strided form used by downsampling blocks."""

    def __init__(self, cin: int, cout: int, stride: tuple[int, int, int] = (1, 1, 1)):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, 3, stride=stride, padding=(0, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(_tpad(x))


class ResBlock3d(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = Conv3dTPad(cin, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = Conv3dTPad(cout, cout)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialAttention(nn.Module):
    """Single-head self-attention over spatial positions within each
    frame-slice, with 1x1x1 convolutions for q/k/v and output projection."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.q = nn.Conv3d(channels, channels, 1)
        self.k = nn.Conv3d(channels, channels, 1)
        self.v = nn.Conv3d(channels, channels, 1)
        self.proj = nn.Conv3d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, t, h, w = x.shape
        n = self.norm(x)
        q, k, v = self.q(n), self.k(n), self.v(n)

        def tokens(u: torch.Tensor) -> torch.Tensor:
            return u.permute(0, 2, 3, 4, 1).reshape(b * t, h * w, c)

        attn = torch.softmax(tokens(q) @ tokens(k).transpose(1, 2) * c**-0.5, dim=-1)
        out = attn @ tokens(v)
        out = out.reshape(b, t, h, w, c).permute(0, 4, 1, 2, 3)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int, stride: tuple[int, int, int]):
        super().__init__()
        self.conv = Conv3dTPad(channels, channels, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int, stride: tuple[int, int, int]):
        super().__init__()
        self.scale = tuple(float(s) for s in stride)
        self.conv = Conv3dTPad(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=self.scale, mode="nearest")
        return self.conv(x)


class Encoder3D(nn.Module):
    """Maps (B, 3, T, H, W) videos in [0, 1] to (B, D, t, h, w) latents."""

    def __init__(self, config: BackboneConfig, role: str = "hq_encoder"):
        super().__init__()
        config.validate()
        self.config = config
        self.role = role
        widths = config.widths or (config.latent_dim,)
        self.conv_in = Conv3dTPad(3, widths[0])
        blocks: list[nn.Module] = []
        prev = widths[0]
        for stage in config.stages:
            for _ in range(config.res_blocks_per_stage):
                blocks.append(ResBlock3d(prev, stage.width))
                prev = stage.width
            stride = (stage.temporal_stride, stage.spatial_stride, stage.spatial_stride)
            if stride != (1, 1, 1):
                blocks.append(Downsample(prev, stride))
            if stage.attention:
                blocks.append(SpatialAttention(prev))
        self.blocks = nn.Sequential(*blocks)
        mid: list[nn.Module] = [ResBlock3d(prev, prev)]
        if config.mid_attention:
            mid.append(SpatialAttention(prev))
        mid.append(ResBlock3d(prev, prev))
        self.mid = nn.Sequential(*mid)
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = Conv3dTPad(prev, config.latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_divisible(x.shape[2:], self.config)
        h = self.conv_in(x * 2.0 - 1.0)
        h = self.blocks(h)
        h = self.mid(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder3D(nn.Module):
    """Mirror of :class:`Encoder3D`: (B, D, t, h, w) -> (B, 3, T, H, W).

    Output is on the [0, 1] scale but intentionally unclamped; clamping
    happens at the public :func:`decode` boundary.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.widths or (config.latent_dim,)
        prev = widths[-1]
        self.conv_in = Conv3dTPad(config.latent_dim, prev)
        mid: list[nn.Module] = [ResBlock3d(prev, prev)]
        if config.mid_attention:
            mid.append(SpatialAttention(prev))
        mid.append(ResBlock3d(prev, prev))
        self.mid = nn.Sequential(*mid)
        blocks: list[nn.Module] = []
        for i in reversed(range(len(config.stages))):
            stage = config.stages[i]
            target = widths[i - 1] if i > 0 else widths[0]
            if stage.attention:
                blocks.append(SpatialAttention(prev))
            stride = (stage.temporal_stride, stage.spatial_stride, stage.spatial_stride)
            if stride != (1, 1, 1):
                blocks.append(Upsample(prev, stride))
            for j in range(config.res_blocks_per_stage):
                cout = target if j == config.res_blocks_per_stage - 1 else prev
                blocks.append(ResBlock3d(prev, cout))
                prev = cout
        self.blocks = nn.Sequential(*blocks)
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = Conv3dTPad(prev, 3)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.config.latent_dim:
            raise ShapeError(
                f"latent dim mismatch: got {z.shape[1]}, decoder expects {self.config.latent_dim}"
            )
        h = self.conv_in(z)
        h = self.mid(h)
        h = self.blocks(h)
        y = self.conv_out(F.silu(self.norm_out(h)))
        return (y + 1.0) * 0.5


def build_backbone(config: BackboneConfig, role: str) -> nn.Module:
    """Instantiate an encoder or decoder for the given role."""
    if role in ("hq_encoder", "lq_encoder"):
        return Encoder3D(config, role=role)
    if role == "decoder":
        return Decoder3D(config)
    raise ConfigError(f"unknown backbone role: {role!r}")


def check_divisible(shape_thw: tuple[int, int, int], config: BackboneConfig) -> None:
    t, h, w = int(shape_thw[0]), int(shape_thw[1]), int(shape_thw[2])
    if t % config.temporal_ratio != 0:
        raise ShapeError(f"axis T: {t} not divisible by temporal ratio {config.temporal_ratio}")
    if h % config.spatial_ratio != 0:
        raise ShapeError(f"axis H: {h} not divisible by spatial ratio {config.spatial_ratio}")
    if w % config.spatial_ratio != 0:
        raise ShapeError(f"axis W: {w} not divisible by spatial ratio {config.spatial_ratio}")


def encode(model: Encoder3D, video: VideoTensor) -> LatentGrid:
    """Run the encoder on a clip and return its latent grid."""
    x = torch.from_numpy(video_to_batch(video.clamped()))
    with torch.inference_mode():
        z = model(x)
    # clone outside inference mode so the grid is usable in autograd contexts
    return LatentGrid(z[0].permute(1, 2, 3, 0).clone())


def decode(model: Decoder3D, grid: LatentGrid) -> VideoTensor:
    """Run the decoder on a latent grid; output clamped to [0, 1]."""
    z = grid.values.permute(3, 0, 1, 2)[None]
    with torch.inference_mode():
        y = model(z)
    return batch_to_video(y.clamp(0.0, 1.0).numpy())
